"""Generator objective: L1, normalized mutual-information loss, and dual-domain frequency loss.

The mutual-information term is estimated from differentiable soft (Parzen-style)
histograms so that it can be maximised by gradient descent. The frequency term
splits each image into a Gaussian low-pass band and its high-pass residual and
penalises both in pixel space, plus an L1 penalty on the real part of the
orthonormal 2-D DFT.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

# Slack applied when validating that image values lie in the histogram range,
# and allowed overshoot of the normalized MI above 1 due to soft binning.
VALUE_TOLERANCE = 1e-3

# Floor inside entropy logs; keeps gradients finite where soft-histogram
# entries underflow to exactly zero (0*log 0 itself is defined as 0).
_LOG_FLOOR = 1e-12


def _entropy_nats(p: torch.Tensor) -> torch.Tensor:
    return -(p * p.clamp_min(_LOG_FLOOR).log()).sum()


@dataclass
class SoftHistogramConfig:
    """Soft-binning setup for the differentiable entropy/MI estimators.

    ``bandwidth`` is the Gaussian kernel sigma in intensity units. The default
    (an eighth of a bin width) keeps the estimator within 1e-2 of a hard
    histogram on bin-quantized images while remaining differentiable.
    """

    bins: int = 64
    value_range: tuple[float, float] = (0.0, 1.0)
    bandwidth: float | None = None

    def __post_init__(self) -> None:
        if self.bins < 2:
            raise ValueError(f"need at least 2 histogram bins, got {self.bins}")
        lo, hi = self.value_range
        if not hi > lo:
            raise ValueError(f"invalid value range {self.value_range}")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")

    @property
    def sigma(self) -> float:
        if self.bandwidth is not None:
            return self.bandwidth
        lo, hi = self.value_range
        return (hi - lo) / (8.0 * self.bins)

    def bin_centers(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        lo, hi = self.value_range
        width = (hi - lo) / self.bins
        idx = torch.arange(self.bins, dtype=dtype)
        return lo + (idx + 0.5) * width


@dataclass
class LossWeights:
    """Weights and knobs of the composite generator objective.

    ``l1``/``mi``/``rec_pix``/``rec_fft`` weight the reconstruction, mutual
    information, spatial frequency and spectral frequency terms. The MI term
    enters the total as ``mi * (1 - NMI)`` so that minimising the total
    maximises the normalized mutual information; set ``literal_mi_term`` to use
    the raw ``(1 - mi * NMI)`` form instead. ``mi_reference`` selects what the
    generated image is compared against: the ground-truth target ("target") or
    the non-contrast input channels ("inputs", experimental).
    """

    l1: float = 5.0
    mi: float = 10.0
    rec_pix: float = 10.0
    rec_fft: float = 10.0
    gauss_kernel_size: int = 13
    gauss_sigma: float = 2.0
    histogram: SoftHistogramConfig = field(default_factory=SoftHistogramConfig)
    mi_reference: str = "target"
    literal_mi_term: bool = False
    fft_mode: str = "real"

    def __post_init__(self) -> None:
        for name in ("l1", "mi", "rec_pix", "rec_fft"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if self.gauss_kernel_size % 2 == 0:
            raise ValueError(f"Gaussian kernel size must be odd, got {self.gauss_kernel_size}")
        if self.gauss_sigma <= 0:
            raise ValueError(f"Gaussian sigma must be positive, got {self.gauss_sigma}")
        if self.mi_reference not in ("target", "inputs"):
            raise ValueError(f"mi_reference must be 'target' or 'inputs', got {self.mi_reference!r}")
        if self.fft_mode not in ("real", "amplitude"):
            raise ValueError(f"fft_mode must be 'real' or 'amplitude', got {self.fft_mode!r}")

    def with_terms(self, l1: bool = True, freq: bool = True, mi: bool = True) -> "LossWeights":
        """Copy of the weights with deselected terms zeroed (ablation switch)."""
        return replace(
            self,
            l1=self.l1 if l1 else 0.0,
            rec_pix=self.rec_pix if freq else 0.0,
            rec_fft=self.rec_fft if freq else 0.0,
            mi=self.mi if mi else 0.0,
        )


# ---------------------------------------------------------------------------
# Soft histograms and entropy
# ---------------------------------------------------------------------------


def _check_range(x: torch.Tensor, cfg: SoftHistogramConfig, name: str) -> None:
    lo, hi = cfg.value_range
    x_min, x_max = float(x.detach().min()), float(x.detach().max())
    if x_min < lo - VALUE_TOLERANCE or x_max > hi + VALUE_TOLERANCE:
        raise ValueError(
            f"{name} values [{x_min:.4g}, {x_max:.4g}] outside histogram range "
            f"[{lo}, {hi}] beyond tolerance {VALUE_TOLERANCE}"
        )


def _bin_weights(x: torch.Tensor, cfg: SoftHistogramConfig) -> torch.Tensor:
    """Per-pixel soft assignment to bins, rows summing to one.

    Computed as a softmax of the Gaussian log-kernel so that arbitrarily small
    bandwidths stay numerically stable (the limit is hard one-hot binning).
    """
    centers = cfg.bin_centers(dtype=x.dtype).to(x.device)
    d = (x.reshape(-1, 1) - centers.reshape(1, -1)) / cfg.sigma
    return torch.softmax(-0.5 * d * d, dim=1)


def soft_marginal_histogram(a: torch.Tensor, cfg: SoftHistogramConfig | None = None) -> torch.Tensor:
    """Differentiable histogram of one image; entries >= 0 and sum to 1."""
    cfg = cfg or SoftHistogramConfig()
    _check_range(a, cfg, "image")
    return _bin_weights(a, cfg).mean(dim=0)


def soft_joint_histogram(
    a: torch.Tensor, b: torch.Tensor, cfg: SoftHistogramConfig | None = None
) -> torch.Tensor:
    """Differentiable joint histogram of two equally shaped images.

    The result is a ``bins x bins`` matrix with nonnegative entries summing to
    one whose marginals equal the soft marginal histograms of ``a`` and ``b``.
    """
    cfg = cfg or SoftHistogramConfig()
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    _check_range(a, cfg, "first image")
    _check_range(b, cfg, "second image")
    wa = _bin_weights(a, cfg)
    wb = _bin_weights(b, cfg)
    return wa.t() @ wb / wa.shape[0]


def entropy(p: torch.Tensor) -> torch.Tensor:
    """Shannon entropy in nats of a probability vector or matrix."""
    if float(p.detach().min()) < -1e-9:
        raise ValueError(f"negative probability {float(p.detach().min()):.3g}")
    total = float(p.detach().sum())
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {total:.8f}, not 1")
    return _entropy_nats(p)


def mi_loss(
    real: torch.Tensor, fake: torch.Tensor, cfg: SoftHistogramConfig | None = None
) -> torch.Tensor:
    """Normalized mutual information 2*MI/(H(real)+H(fake)), in [0, 1 + eps].

    Symmetric in its arguments and differentiable in both. Two constant images
    have zero entropies; that degenerate case is defined as 1 (the images are
    deterministically related) and logged.
    """
    cfg = cfg or SoftHistogramConfig()
    joint = soft_joint_histogram(real, fake, cfg)
    pa = joint.sum(dim=1)
    pb = joint.sum(dim=0)
    ha = _entropy_nats(pa)
    hb = _entropy_nats(pb)
    hab = _entropy_nats(joint)
    denom = ha + hb
    # softmax tails leave ~1e-11 nats of residual entropy even for constant
    # images at bin centers, hence the loose degeneracy threshold
    if float(denom.detach()) < 1e-6:
        logger.warning("mi_loss: both marginal entropies are zero; returning 1.0")
        return torch.ones((), dtype=real.dtype, device=real.device)
    return 2.0 * (ha + hb - hab) / denom


# ---------------------------------------------------------------------------
# Frequency-domain losses
# ---------------------------------------------------------------------------


def gaussian_kernel(kernel_size: int, sigma: float, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Isotropic 2-D Gaussian kernel normalized to sum to one."""
    if kernel_size % 2 == 0:
        raise ValueError(f"Gaussian kernel size must be odd, got {kernel_size}")
    if sigma <= 0:
        raise ValueError(f"Gaussian sigma must be positive, got {sigma}")
    half = kernel_size // 2
    coords = torch.arange(-half, half + 1, dtype=dtype)
    g1 = torch.exp(-0.5 * (coords / sigma) ** 2)
    k = torch.outer(g1, g1)
    return k / k.sum()


def _as_batched(x: torch.Tensor) -> tuple[torch.Tensor, int]:
    """View 2-D/3-D/4-D image tensors as (B, C, H, W); returns original ndim."""
    if x.ndim == 2:
        return x[None, None], 2
    if x.ndim == 3:
        return x[None], 3
    if x.ndim == 4:
        return x, 4
    raise ValueError(f"expected 2-D, 3-D or 4-D image tensor, got shape {tuple(x.shape)}")


def gaussian_lowpass(x: torch.Tensor, kernel_size: int = 13, sigma: float = 2.0) -> torch.Tensor:
    """Gaussian blur with reflect padding; shape preserving, DC gain exactly 1."""
    k = gaussian_kernel(kernel_size, sigma, dtype=x.dtype).to(x.device)
    xb, ndim = _as_batched(x)
    c = xb.shape[1]
    half = kernel_size // 2
    padded = F.pad(xb, (half, half, half, half), mode="reflect")
    weight = k.expand(c, 1, kernel_size, kernel_size)
    out = F.conv2d(padded, weight, groups=c)
    if ndim == 2:
        return out[0, 0]
    if ndim == 3:
        return out[0]
    return out


def frequency_split(
    x: torch.Tensor, kernel_size: int = 13, sigma: float = 2.0
) -> tuple[torch.Tensor, torch.Tensor]:
    """Split an image into (low, high) with low + high == x exactly."""
    low = gaussian_lowpass(x, kernel_size, sigma)
    return low, x - low


def freq_pixel_loss(
    x: torch.Tensor, g: torch.Tensor, kernel_size: int = 13, sigma: float = 2.0
) -> torch.Tensor:
    """Mean absolute error of the low bands plus that of the high bands."""
    if x.shape != g.shape:
        raise ValueError(f"image shapes differ: {tuple(x.shape)} vs {tuple(g.shape)}")
    x_low, x_high = frequency_split(x, kernel_size, sigma)
    g_low, g_high = frequency_split(g, kernel_size, sigma)
    return (x_low - g_low).abs().mean() + (x_high - g_high).abs().mean()


def freq_fft_loss(x: torch.Tensor, g: torch.Tensor, mode: str = "real") -> torch.Tensor:
    """Mean absolute difference of 2-D DFT coefficients (orthonormal scaling).

    ``mode="real"`` compares the real components of the spectra;
    ``mode="amplitude"`` compares their magnitudes.
    """
    if x.shape != g.shape:
        raise ValueError(f"image shapes differ: {tuple(x.shape)} vs {tuple(g.shape)}")
    fx = torch.fft.fft2(x, norm="ortho")
    fg = torch.fft.fft2(g, norm="ortho")
    if mode == "real":
        return (fx.real - fg.real).abs().mean()
    if mode == "amplitude":
        return (fx.abs() - fg.abs()).abs().mean()
    raise ValueError(f"unknown fft loss mode {mode!r}")


# ---------------------------------------------------------------------------
# Composite objective
# ---------------------------------------------------------------------------


def _per_channel_mean_nmi(
    reference: torch.Tensor, fake: torch.Tensor, cfg: SoftHistogramConfig
) -> torch.Tensor:
    """Mean NMI over all (reference channel, fake channel) pairs, channelwise.

    With equal channel counts the pairing is positional (early vs early, late
    vs late); otherwise every fake channel is compared with every reference
    channel and the results averaged.
    """
    ref_c, fake_c = reference.shape[0], fake.shape[0]
    if ref_c == fake_c:
        vals = [mi_loss(reference[c], fake[c], cfg) for c in range(fake_c)]
    else:
        vals = [
            mi_loss(reference[r], fake[f], cfg)
            for f in range(fake_c)
            for r in range(ref_c)
        ]
    return torch.stack(vals).mean()


def composite_generator_loss(
    real: torch.Tensor,
    fake: torch.Tensor,
    condition: torch.Tensor,
    adv_term: torch.Tensor | float,
    weights: LossWeights | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted generator objective over a 2-channel (early, late) image pair.

    Returns the total and an unweighted per-term breakdown with keys
    ``adv``, ``L1``, ``MI``, ``freq_pix`` and ``freq_fft``, where ``MI`` is the
    penalty ``1 - NMI`` (so minimising drives the NMI toward 1). The total is
    ``adv + l1*L1 + mi*MI + rec_pix*freq_pix + rec_fft*freq_fft``; each
    image-space term is averaged over the two output channels. Disabled terms
    (weight 0) are reported as 0 without being evaluated.

    Also accepts batched ``(B, 2, H, W)`` pairs, in which case every term is
    additionally averaged over the batch.
    """
    weights = weights or LossWeights()
    if real.shape != fake.shape:
        raise ValueError(f"real/fake shapes differ: {tuple(real.shape)} vs {tuple(fake.shape)}")

    real_b, _ = _as_batched(real)
    fake_b, _ = _as_batched(fake)
    cond_b, _ = _as_batched(condition)
    if cond_b.shape[0] != fake_b.shape[0]:
        raise ValueError("condition batch size does not match the image pair")

    if not torch.is_tensor(adv_term):
        adv_term = torch.as_tensor(adv_term, dtype=fake_b.dtype, device=fake_b.device)
    zero = torch.zeros((), dtype=fake_b.dtype, device=fake_b.device)

    l1_term = (real_b - fake_b).abs().mean() if weights.l1 > 0 else zero
    pix_term = (
        freq_pixel_loss(real_b, fake_b, weights.gauss_kernel_size, weights.gauss_sigma)
        if weights.rec_pix > 0
        else zero
    )
    fft_term = (
        freq_fft_loss(real_b, fake_b, mode=weights.fft_mode) if weights.rec_fft > 0 else zero
    )

    if weights.mi > 0:
        reference_b = real_b if weights.mi_reference == "target" else cond_b
        nmi = torch.stack(
            [
                _per_channel_mean_nmi(reference_b[i], fake_b[i], weights.histogram)
                for i in range(fake_b.shape[0])
            ]
        ).mean()
        mi_term = 1.0 - nmi
    else:
        nmi = zero
        mi_term = zero

    if weights.literal_mi_term and weights.mi > 0:
        mi_contribution = 1.0 - weights.mi * nmi
    else:
        mi_contribution = weights.mi * mi_term

    total = (
        adv_term
        + weights.l1 * l1_term
        + mi_contribution
        + weights.rec_pix * pix_term
        + weights.rec_fft * fft_term
    )
    breakdown = {
        "adv": adv_term,
        "L1": l1_term,
        "MI": mi_term,
        "freq_pix": pix_term,
        "freq_fft": fft_term,
    }
    return total, breakdown
