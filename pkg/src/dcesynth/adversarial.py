"""Conditional patch critic and WGAN-GP terms.

The critic scores (condition, image) pairs as a spatial map of patch scores
with no output nonlinearity. Wasserstein losses and the gradient penalty are
assembled here; the penalty keeps the critic's input-gradient norm near 1.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import torch
from torch import nn


@dataclass
class CriticConfig:
    """Patch critic hyperparameters.

    ``num_blocks`` counts stride-2 convolutions; each halves the spatial size
    (kernel 4, padding 1), then a stride-1 kernel-4 padding-1 convolution pair
    reduces by one pixel each, so the score map for input size ``n`` is
    ``n / 2**num_blocks - 2``. Inputs must keep that positive. Normalization
    is per-instance or none; batch statistics are disallowed (WGAN-GP).
    """

    condition_channels: int = 3
    image_channels: int = 2
    base_width: int = 64
    num_blocks: int = 3
    norm: str = "instance"
    use_bias: bool = True

    def __post_init__(self) -> None:
        if self.norm == "batch":
            raise ValueError(
                "batch-coupled normalization is not allowed in a WGAN-GP critic; "
                "use 'instance' or 'none'"
            )
        if self.norm not in ("instance", "none"):
            raise ValueError(f"norm must be 'instance' or 'none', got {self.norm!r}")
        if self.num_blocks < 0:
            raise ValueError("num_blocks must be >= 0")
        if self.base_width < 1:
            raise ValueError("base_width must be positive")

    @property
    def in_channels(self) -> int:
        return self.condition_channels + self.image_channels

    def score_map_size(self, h: int, w: int) -> tuple[int, int]:
        """Spatial size of the patch score map, from the layer arithmetic."""

        def run(n: int) -> int:
            for _ in range(self.num_blocks):
                n = (n + 2 - 4) // 2 + 1
            if self.num_blocks > 0:
                n = n + 2 - 4 + 1  # penultimate stride-1 conv
            n = n + 2 - 4 + 1  # final score conv
            return n

        return run(h), run(w)

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class AdversarialTerms:
    """Scalar (0-d tensor) outputs of one adversarial evaluation."""

    critic_loss: torch.Tensor
    generator_adv_loss: torch.Tensor
    gradient_penalty: torch.Tensor
    wasserstein_gap: torch.Tensor


class PatchCritic(nn.Module):
    """Conditional PatchGAN-style Wasserstein critic.

    With ``num_blocks=0``, ``norm='none'`` and ``use_bias=False`` the critic
    degenerates to a single linear convolution (useful for analytic tests).
    """

    def __init__(self, config: CriticConfig | None = None):
        super().__init__()
        cfg = config or CriticConfig()
        self.config = cfg

        def norm_layer(ch: int) -> list[nn.Module]:
            return [nn.InstanceNorm2d(ch)] if cfg.norm == "instance" else []

        layers: list[nn.Module] = []
        ch = cfg.in_channels
        if cfg.num_blocks > 0:
            width = cfg.base_width
            layers += [nn.Conv2d(ch, width, 4, 2, 1, bias=cfg.use_bias), nn.LeakyReLU(0.2)]
            ch = width
            for _ in range(cfg.num_blocks - 1):
                width = min(width * 2, 512)
                layers += [nn.Conv2d(ch, width, 4, 2, 1, bias=cfg.use_bias)]
                layers += norm_layer(width)
                layers += [nn.LeakyReLU(0.2)]
                ch = width
            width = min(width * 2, 512)
            layers += [nn.Conv2d(ch, width, 4, 1, 1, bias=cfg.use_bias)]
            layers += norm_layer(width)
            layers += [nn.LeakyReLU(0.2)]
            ch = width
        layers += [nn.Conv2d(ch, 1, 4, 1, 1, bias=cfg.use_bias)]
        self.net = nn.Sequential(*layers)

    def forward(self, condition: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        if condition.ndim == 3:
            condition = condition[None]
        if image.ndim == 3:
            image = image[None]
        if condition.shape[-2:] != image.shape[-2:] or condition.shape[0] != image.shape[0]:
            raise ValueError(
                f"condition {tuple(condition.shape)} and image {tuple(image.shape)} "
                "must share batch and spatial sizes"
            )
        return self.net(torch.cat([condition, image], dim=1))


def gradient_penalty(
    critic,
    condition: torch.Tensor,
    real: torch.Tensor,
    fake: torch.Tensor,
    rng: torch.Generator | int | None = None,
) -> torch.Tensor:
    """WGAN-GP penalty on per-sample interpolates of real and fake images.

    eps is drawn uniformly per instance; the penalized quantity is the
    gradient of the per-sample mean critic score at the interpolate:
    mean over the batch of (||grad mean(critic(condition, x_hat))||_2 - 1)^2.
    """
    if real.shape != fake.shape:
        raise ValueError(f"real/fake shapes differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    if isinstance(rng, int):
        rng = torch.Generator(device=real.device).manual_seed(rng)
    b = real.shape[0]
    eps_shape = (b,) + (1,) * (real.ndim - 1)
    eps = torch.rand(eps_shape, generator=rng, dtype=real.dtype, device=real.device)
    x_hat = (eps * real + (1.0 - eps) * fake.detach()).requires_grad_(True)
    scores = critic(condition, x_hat)
    if scores.ndim == 0 or scores.shape[0] != b:
        raise ValueError(
            f"critic must return per-sample scores with leading batch dim {b}, "
            f"got shape {tuple(scores.shape)}"
        )
    per_sample = scores.reshape(b, -1).mean(dim=1)
    (grads,) = torch.autograd.grad(
        per_sample.sum(), x_hat, create_graph=True, retain_graph=True
    )
    if not torch.isfinite(grads).all():
        raise RuntimeError("penalty diverged: non-finite critic gradient")
    norms = grads.reshape(b, -1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def adversarial_terms(
    critic,
    condition: torch.Tensor,
    real: torch.Tensor,
    fake: torch.Tensor,
    gp_weight: float = 10.0,
    rng: torch.Generator | int | None = None,
) -> AdversarialTerms:
    """Critic and generator Wasserstein losses plus the gradient penalty."""
    fake_scores = critic(condition, fake)
    real_scores = critic(condition, real)
    mean_fake = fake_scores.mean()
    mean_real = real_scores.mean()
    gp = gradient_penalty(critic, condition, real, fake, rng)
    return AdversarialTerms(
        critic_loss=mean_fake - mean_real + gp_weight * gp,
        generator_adv_loss=-mean_fake,
        gradient_penalty=gp,
        wasserstein_gap=mean_real - mean_fake,
    )
