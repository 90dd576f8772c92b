"""U-shaped window-attention transformer generator.

Maps the 3-channel non-contrast slice to the 2-channel (early, late) DCE
prediction. Four encoder levels of LeWin blocks (window self-attention plus a
depthwise-conv feed-forward) with strided-conv downsampling, a bottleneck,
and four mirrored decoder levels with skip concatenation, per-level learned
window modulators and transposed-conv upsampling. A final sigmoid bounds the
output to [0, 1] to match the normalized targets.

Window sizes adapt at deep levels: a level whose spatial extent is smaller
than the configured window attends over the whole extent (the modulator is
cropped accordingly). Every extent must be divisible by its effective window,
which is checked up front against the input size.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

NUM_SCALES = 5  # four encoder/decoder levels plus the bottleneck


@dataclass
class GeneratorConfig:
    """Architecture hyperparameters; defaults are the CPU-friendly desk scale."""

    in_channels: int = 3
    out_channels: int = 2
    embed_dim: int = 16
    lewin_depths: tuple[int, int, int, int] = (1, 2, 8, 8)
    window_size: int = 8
    num_heads: tuple[int, int, int, int] = (1, 2, 4, 8)
    mlp_ratio: float = 4.0
    bottleneck_depth: int = 2
    modulators_enabled: bool = True

    def __post_init__(self) -> None:
        self.lewin_depths = tuple(self.lewin_depths)
        self.num_heads = tuple(self.num_heads)
        if len(self.lewin_depths) != 4 or len(self.num_heads) != 4:
            raise ValueError("lewin_depths and num_heads must have four entries")
        if any(d < 1 for d in self.lewin_depths) or self.bottleneck_depth < 1:
            raise ValueError("block depths must be positive")
        if self.window_size < 1:
            raise ValueError("window size must be positive")
        for level, heads in enumerate(self.num_heads):
            dim = self.embed_dim * (2**level)
            if dim % heads:
                raise ValueError(
                    f"head count {heads} does not divide embed dim {dim} at level {level}"
                )

    @classmethod
    def paper_preset(cls) -> "GeneratorConfig":
        """Full-scale variant (wider embedding); depths match the desk config."""
        return cls(embed_dim=32)

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Window bookkeeping
# ---------------------------------------------------------------------------


def _check_divisible(h: int, w: int, window: int) -> None:
    if h % window or w % window:
        raise ValueError(f"spatial extent {h}x{w} not divisible by window size {window}")


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """Split (B, C, H, W) into non-overlapping windows (B*nW, window*window, C)."""
    b, c, h, w = x.shape
    _check_divisible(h, w, window)
    x = x.permute(0, 2, 3, 1)
    x = x.view(b, h // window, window, w // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def window_reverse(windows: torch.Tensor, window: int, h: int, w: int) -> torch.Tensor:
    """Inverse of window_partition; returns (B, C, H, W)."""
    _check_divisible(h, w, window)
    c = windows.shape[-1]
    b = windows.shape[0] * window * window // (h * w)
    x = windows.view(b, h // window, w // window, window, window, c)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)
    return x.permute(0, 3, 1, 2)


def apply_modulator(windows: torch.Tensor, modulator: torch.Tensor) -> torch.Tensor:
    """Add a learned (tokens, channels) bias to every window's token embeddings."""
    if modulator.shape != windows.shape[-2:]:
        raise ValueError(
            f"modulator shape {tuple(modulator.shape)} does not match window tokens "
            f"{tuple(windows.shape[-2:])}"
        )
    return windows + modulator


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


class WindowAttention(nn.Module):
    """Multi-head self-attention within a window, with relative position bias."""

    def __init__(self, dim: int, window: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"head count {num_heads} does not divide embed dim {dim}")
        self.dim = dim
        self.window = window
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

        # one bias table per (relative row, relative col) offset, zero-initialized
        self.relative_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, num_heads))
        coords = torch.stack(
            torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")
        ).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :] + window - 1
        self.register_buffer("bias_index", rel[0] * (2 * window - 1) + rel[1], persistent=False)

    def _bias(self, tokens: int) -> torch.Tensor:
        if tokens == self.window * self.window:
            idx = self.bias_index
        else:
            # cropped window at a deep level: take the leading sub-square
            side = int(tokens**0.5)
            keep = (
                torch.arange(side, device=self.bias_index.device)[:, None] * self.window
                + torch.arange(side, device=self.bias_index.device)
            ).flatten()
            idx = self.bias_index[keep][:, keep]
        return self.relative_bias[idx].permute(2, 0, 1)

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        b, n, c = windows.shape
        qkv = self.qkv(windows).reshape(b, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn + self._bias(n).unsqueeze(0)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class LocallyEnhancedFeedForward(nn.Module):
    """Pointwise expand, depthwise 3x3 spatial mixing, pointwise project."""

    def __init__(self, dim: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.expand = nn.Linear(dim, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.project = nn.Linear(hidden, dim)

    def forward(self, tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
        b = tokens.shape[0]
        t = F.gelu(self.expand(tokens))
        t = t.transpose(1, 2).reshape(b, -1, h, w)
        t = F.gelu(self.dwconv(t))
        t = t.reshape(b, -1, h * w).transpose(1, 2)
        return self.project(t)


class LeWinBlock(nn.Module):
    """Pre-norm window attention and locally enhanced feed-forward, residual.

    Accepts either a spatial map (B, C, H, W) or token form (B, H*W, C) with
    explicit height/width; stacked blocks run in token form to avoid repeated
    layout conversions.
    """

    def __init__(self, dim: int, window: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.window = window
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.leff = LocallyEnhancedFeedForward(dim, mlp_ratio)

    def forward_tokens(
        self, tokens: torch.Tensor, h: int, w: int, modulator: torch.Tensor | None = None
    ) -> torch.Tensor:
        b, length, c = tokens.shape
        we = min(self.window, h, w)
        if h % we or w % we:
            raise ValueError(f"spatial extent {h}x{w} not divisible by window size {we}")
        normed = self.norm1(tokens).view(b, h // we, we, w // we, we, c)
        windows = normed.permute(0, 1, 3, 2, 4, 5).reshape(-1, we * we, c)
        if modulator is not None:
            windows = apply_modulator(windows, modulator)
        attended = (
            self.attn(windows)
            .view(b, h // we, w // we, we, we, c)
            .permute(0, 1, 3, 2, 4, 5)
            .reshape(b, length, c)
        )
        tokens = tokens + attended
        return tokens + self.leff(self.norm2(tokens), h, w)

    def forward(self, x: torch.Tensor, modulator: torch.Tensor | None = None) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = x.permute(0, 2, 3, 1).reshape(b, h * w, c)
        tokens = self.forward_tokens(tokens, h, w, modulator)
        return tokens.reshape(b, h, w, c).permute(0, 3, 1, 2)


class DecoderLevel(nn.Module):
    """Upsample, concatenate the skip, then run LeWin blocks with a modulator."""

    def __init__(
        self,
        in_dim: int,
        skip_dim: int,
        depth: int,
        window: int,
        num_heads: int,
        mlp_ratio: float,
        modulated: bool,
    ):
        super().__init__()
        dim = 2 * skip_dim
        self.upsample = nn.ConvTranspose2d(in_dim, skip_dim, kernel_size=2, stride=2)
        self.blocks = nn.ModuleList(
            LeWinBlock(dim, window, num_heads, mlp_ratio) for _ in range(depth)
        )
        self.window = window
        if modulated:
            self.modulator = nn.Parameter(torch.empty(window, window, dim))
            nn.init.trunc_normal_(self.modulator, std=0.02)
        else:
            self.modulator = None

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = self.upsample(x)
        x = torch.cat([x, skip], dim=1)
        b, c, h, w = x.shape
        we = min(self.window, h, w)
        mod = None
        if self.modulator is not None:
            mod = self.modulator[:we, :we].reshape(we * we, -1)
        tokens = x.permute(0, 2, 3, 1).reshape(b, h * w, c)
        for blk in self.blocks:
            tokens = blk.forward_tokens(tokens, h, w, modulator=mod)
        return tokens.reshape(b, h, w, c).permute(0, 3, 1, 2)


class SynthesisGenerator(nn.Module):
    """The full encoder-bottleneck-decoder generator."""

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        cfg = config or GeneratorConfig()
        self.config = cfg
        e = cfg.embed_dim
        dims = [e * (2**level) for level in range(4)]

        self.input_proj = nn.Sequential(
            nn.Conv2d(cfg.in_channels, e, 3, padding=1), nn.LeakyReLU(0.2)
        )
        self.encoder_levels = nn.ModuleList(
            nn.ModuleList(
                LeWinBlock(dims[l], cfg.window_size, cfg.num_heads[l], cfg.mlp_ratio)
                for _ in range(cfg.lewin_depths[l])
            )
            for l in range(4)
        )
        self.downsamples = nn.ModuleList(
            nn.Conv2d(dims[l], dims[l] * 2, 4, stride=2, padding=1) for l in range(4)
        )
        self.bottleneck = nn.ModuleList(
            LeWinBlock(e * 16, cfg.window_size, cfg.num_heads[3] * 2, cfg.mlp_ratio)
            for _ in range(cfg.bottleneck_depth)
        )
        in_dims = [e * 16, e * 16, e * 8, e * 4]  # inputs to the four upsamples, deep first
        self.decoder_levels = nn.ModuleList(
            DecoderLevel(
                in_dims[3 - l],
                dims[l],
                cfg.lewin_depths[l],
                cfg.window_size,
                cfg.num_heads[l] * 2,
                cfg.mlp_ratio,
                cfg.modulators_enabled,
            )
            for l in reversed(range(4))
        )
        self.output_proj = nn.Conv2d(2 * e, cfg.out_channels, 3, padding=1)

    # -- input size validation ------------------------------------------------

    @staticmethod
    def _extent_valid(extent: int, window: int, scales: int = NUM_SCALES) -> bool:
        for s in range(scales):
            if extent < 1:
                return False
            we = min(window, extent)
            if extent % we:
                return False
            if s < scales - 1:
                if extent % 2:
                    return False
                extent //= 2
        return True

    def minimal_valid_extent(self, extent: int) -> int:
        w = self.config.window_size
        candidate = extent
        while not self._extent_valid(candidate, w):
            candidate += 1
        return candidate

    def validate_spatial(self, h: int, w: int) -> None:
        win = self.config.window_size
        if self._extent_valid(h, win) and self._extent_valid(w, win):
            return
        raise ValueError(
            f"input size {h}x{w} incompatible with window {win} over {NUM_SCALES} scales; "
            f"every level extent must divide evenly by its (possibly cropped) window; "
            f"minimal valid sizes from here: {self.minimal_valid_extent(h)}x"
            f"{self.minimal_valid_extent(w)}"
        )

    # -- forward ---------------------------------------------------------------

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 3:
            return self.forward(x[None])[0]
        if x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected {self.config.in_channels} input channels, got {x.shape[1]}"
            )
        self.validate_spatial(x.shape[-2], x.shape[-1])

        feat = self.input_proj(x)
        skips = []
        for level, down in zip(self.encoder_levels, self.downsamples):
            b, c, h, w = feat.shape
            tokens = feat.permute(0, 2, 3, 1).reshape(b, h * w, c)
            for blk in level:
                tokens = blk.forward_tokens(tokens, h, w)
            feat = tokens.reshape(b, h, w, c).permute(0, 3, 1, 2)
            skips.append(feat)
            feat = down(feat)
        b, c, h, w = feat.shape
        tokens = feat.permute(0, 2, 3, 1).reshape(b, h * w, c)
        for blk in self.bottleneck:
            tokens = blk.forward_tokens(tokens, h, w)
        feat = tokens.reshape(b, h, w, c).permute(0, 3, 1, 2)
        for dec in self.decoder_levels:
            feat = dec(feat, skips.pop())
        return torch.sigmoid(self.output_proj(feat))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
