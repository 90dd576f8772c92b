"""Evaluation suite: PSNR, SSIM, MAE and FID with a pluggable feature extractor.

FID at desk scale uses a fixed-seed random convolutional projection as the
embedding; values are NOT comparable with published FID numbers computed with
a pretrained Inception backbone. The extractor is pluggable and its name is
recorded in every report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.signal import fftconvolve
from torch import nn

from .data import TrainingSample

#: Reported PSNR is capped here so identical images stay finite in aggregates.
PSNR_CAP_DB = 100.0

PHASES = ("early", "late")
METRIC_NAMES = ("psnr", "ssim", "mae")


def psnr(x: np.ndarray, g: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE), capped at 100 dB (exact matches included)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if x.shape != g.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {g.shape}")
    mse = float(np.mean((x - g) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = size // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-0.5 * (coords / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def ssim(
    x: np.ndarray,
    g: np.ndarray,
    window: int = 11,
    sigma: float = 1.5,
    data_range: float = 1.0,
) -> float:
    """Single-scale SSIM with a Gaussian window, averaged over valid positions.

    Uses the canonical stabilizers C1=(0.01*range)^2, C2=(0.03*range)^2 and
    weighted (biased) local statistics.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if x.shape != g.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {g.shape}")
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} smaller than SSIM window {window}")
    w = _gaussian_window(window, sigma)
    mu_x = fftconvolve(x, w, mode="valid")
    mu_g = fftconvolve(g, w, mode="valid")
    xx = fftconvolve(x * x, w, mode="valid") - mu_x * mu_x
    gg = fftconvolve(g * g, w, mode="valid") - mu_g * mu_g
    xg = fftconvolve(x * g, w, mode="valid") - mu_x * mu_g
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2 * mu_x * mu_g + c1) * (2 * xg + c2)
    den = (mu_x**2 + mu_g**2 + c1) * (xx + gg + c2)
    return float(np.mean(num / den))


def mae(x: np.ndarray, g: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if x.shape != g.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {g.shape}")
    return float(np.mean(np.abs(x - g)))


# ---------------------------------------------------------------------------
# FID
# ---------------------------------------------------------------------------


class RandomConvExtractor:
    """Fixed-seed random convolutional projection to a feature vector.

    Deterministic across runs for a given seed; adaptive pooling makes it
    size-agnostic. Not comparable with Inception-based FID features.
    """

    def __init__(self, seed: int = 0, feature_dim: int = 64):
        self.seed = seed
        self.feature_dim = feature_dim
        self.name = f"random-conv-s{seed}-d{feature_dim}"
        g = torch.Generator().manual_seed(seed)
        widths = [1, 8, 16, feature_dim // 4]
        self._convs = []
        for cin, cout in zip(widths, widths[1:]):
            w = torch.randn(cout, cin, 3, 3, generator=g) * (2.0 / (3 * 3 * cin)) ** 0.5
            self._convs.append(w)

    def __call__(self, images: np.ndarray | torch.Tensor) -> np.ndarray:
        """images: (N, H, W) or (N, 1, H, W) -> (N, feature_dim) float64."""
        t = torch.as_tensor(np.asarray(images), dtype=torch.float32)
        if t.ndim == 3:
            t = t[:, None]
        with torch.no_grad():
            for w in self._convs:
                t = torch.conv2d(t, w, stride=2, padding=1)
                t = torch.relu(t)
            t = nn.functional.adaptive_avg_pool2d(t, 2)
        return t.reshape(t.shape[0], -1).double().numpy()


def _sqrt_psd(mat: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Symmetric PSD matrix square root via eigendecomposition.

    Eigenvalues below -tol indicate a degenerate covariance and raise;
    small negatives within tolerance are clipped to zero.
    """
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() < -tol:
        raise ValueError(
            f"degenerate covariance: min eigenvalue {vals.min():.3e} < -{tol:.0e} "
            f"(max {vals.max():.3e}, dim {mat.shape[0]})"
        )
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid_from_features(real: np.ndarray, fake: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets (N, D)."""
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    fake = np.atleast_2d(np.asarray(fake, dtype=np.float64))
    if real.shape[0] < 2 or fake.shape[0] < 2:
        raise ValueError("need at least 2 samples per set for a covariance estimate")
    mu_r, mu_f = real.mean(axis=0), fake.mean(axis=0)
    cov_r = np.atleast_2d(np.cov(real, rowvar=False))
    cov_f = np.atleast_2d(np.cov(fake, rowvar=False))
    sqrt_f = _sqrt_psd(cov_f)
    cross = _sqrt_psd(sqrt_f @ cov_r @ sqrt_f)
    diff = mu_r - mu_f
    value = float(diff @ diff + np.trace(cov_r + cov_f - 2.0 * cross))
    return max(value, 0.0)


def fid(real_images, fake_images, extractor) -> float:
    """FID between two image sets under the given feature extractor."""
    return fid_from_features(extractor(real_images), extractor(fake_images))


# ---------------------------------------------------------------------------
# Dataset evaluation
# ---------------------------------------------------------------------------


@dataclass
class PhaseMetrics:
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    mae_mean: float
    mae_std: float
    fid: float


@dataclass
class MetricsReport:
    """Per-phase aggregates plus the per-sample breakdown."""

    early: PhaseMetrics
    late: PhaseMetrics
    sample_count: int
    extractor_name: str
    per_sample: dict[str, dict[str, list[float]]] = field(default_factory=dict)

    def phase(self, name: str) -> PhaseMetrics:
        return {"early": self.early, "late": self.late}[name]

    def pooled(self, metric: str) -> tuple[float, float]:
        """Mean and std of a metric over both phases' per-sample values."""
        values = self.per_sample["early"][metric] + self.per_sample["late"][metric]
        arr = np.asarray(values, dtype=np.float64)
        return float(arr.mean()), float(arr.std())

    def to_dict(self) -> dict:
        return {
            "sample_count": self.sample_count,
            "extractor": self.extractor_name,
            "phases": {p: vars(self.phase(p)) for p in PHASES},
            "per_sample": self.per_sample,
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            early=PhaseMetrics(**d["phases"]["early"]),
            late=PhaseMetrics(**d["phases"]["late"]),
            sample_count=d["sample_count"],
            extractor_name=d["extractor"],
            per_sample=d.get("per_sample", {}),
        )

    def to_table(self) -> str:
        """Fixed-width text table, stable for diffing."""
        lines = [
            f"samples: {self.sample_count}    extractor: {self.extractor_name}",
            f"{'phase':<8}{'PSNR (dB)':>18}{'SSIM':>18}{'MAE':>18}{'FID':>12}",
        ]
        for p in PHASES:
            m = self.phase(p)
            lines.append(
                f"{p:<8}"
                f"{m.psnr_mean:>10.2f} ± {m.psnr_std:<5.2f}"
                f"{m.ssim_mean:>10.4f} ± {m.ssim_std:<5.4f}"
                f"{m.mae_mean:>8.4f} ± {m.mae_std:<7.4f}"
                f"{m.fid:>10.4f}"
            )
        return "\n".join(lines)


def evaluate_dataset(
    model,
    samples: list[TrainingSample],
    extractor=None,
    batch_size: int = 8,
) -> MetricsReport:
    """Run the model over all samples and aggregate per-phase metrics.

    ``model`` maps a (N, 3, H, W) float tensor to (N, 2, H, W). Aggregation
    uses population std; FID is computed per phase over the whole set.
    """
    if not samples:
        raise ValueError("empty dataset")
    extractor = extractor or RandomConvExtractor()

    preds = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            inputs = torch.as_tensor(np.stack([s.input for s in chunk]))
            out = model(inputs)
            preds.append(out.detach().cpu().numpy().astype(np.float64))
    pred = np.concatenate(preds, axis=0)
    target = np.stack([s.target for s in samples]).astype(np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"model output {pred.shape} does not match targets {target.shape}")

    per_sample: dict[str, dict[str, list[float]]] = {
        p: {m: [] for m in METRIC_NAMES} for p in PHASES
    }
    phase_stats = {}
    for ci, p in enumerate(PHASES):
        for i in range(len(samples)):
            per_sample[p]["psnr"].append(psnr(target[i, ci], pred[i, ci]))
            per_sample[p]["ssim"].append(ssim(target[i, ci], pred[i, ci]))
            per_sample[p]["mae"].append(mae(target[i, ci], pred[i, ci]))
        fid_value = (
            fid(target[:, ci], pred[:, ci], extractor) if len(samples) >= 2 else float("nan")
        )
        stats = {}
        for m in METRIC_NAMES:
            arr = np.asarray(per_sample[p][m])
            stats[f"{m}_mean"], stats[f"{m}_std"] = float(arr.mean()), float(arr.std())
        phase_stats[p] = PhaseMetrics(fid=fid_value, **stats)

    return MetricsReport(
        early=phase_stats["early"],
        late=phase_stats["late"],
        sample_count=len(samples),
        extractor_name=extractor.name,
        per_sample=per_sample,
    )
