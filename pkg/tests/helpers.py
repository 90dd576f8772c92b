"""Shared test utilities: zeroing tricks and finite-difference oracles."""

import torch
from torch import nn

from dcesynth.generator import LeWinBlock, SynthesisGenerator


def zero_block_projections(block: LeWinBlock) -> None:
    """Zero the attention and feed-forward output projections of one block.

    With both residual-branch outputs silenced the block is the identity map.
    """
    nn.init.zeros_(block.attn.proj.weight)
    nn.init.zeros_(block.attn.proj.bias)
    nn.init.zeros_(block.leff.project.weight)
    nn.init.zeros_(block.leff.project.bias)


def all_lewin_blocks(model: SynthesisGenerator):
    for module in model.modules():
        if isinstance(module, LeWinBlock):
            yield module


def reduce_to_projections(model: SynthesisGenerator) -> None:
    """Silence every block and the resampling path.

    Zeroes all block output projections plus the downsample/upsample
    convolutions, after which the network computes
    sigmoid(output_proj(cat(zeros, input_proj(x)))).
    """
    for block in all_lewin_blocks(model):
        zero_block_projections(block)
    for conv in model.downsamples:
        nn.init.zeros_(conv.weight)
        nn.init.zeros_(conv.bias)
    for dec in model.decoder_levels:
        nn.init.zeros_(dec.upsample.weight)
        nn.init.zeros_(dec.upsample.bias)


def projection_only_reference(model: SynthesisGenerator, x: torch.Tensor) -> torch.Tensor:
    """The two-layer map a projection-reduced generator must equal."""
    feat = model.input_proj(x)
    padded = torch.cat([torch.zeros_like(feat), feat], dim=1)
    return torch.sigmoid(model.output_proj(padded))


def numeric_grad(f, x: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    """Central-difference gradient of a scalar function, elementwise."""
    grad = torch.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(f(x))
            flat[i] = orig - h
            fm = float(f(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad
