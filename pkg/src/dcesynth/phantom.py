"""Deterministic synthetic phantom studies standing in for clinical data.

Each phantom is an ellipsoidal organ in a noisy background with a handful of
spherical lesions. Lesions attenuate the ADC channel (diffusion restriction)
and enhance both DCE channels, with a different late factor so the late phase
shows washout or accumulation relative to the early phase. T2W carries a mild
structural hint of the lesion so the non-contrast input determines the target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import Modality, MriVolume, Study


@dataclass
class PhantomSpec:
    """Geometry and contrast behaviour of generated phantoms.

    Organ radii are fractions of the half-extent per axis; lesion radii are in
    voxels. Enhancement factors multiply the organ base intensity inside the
    lesion: DCE factors must exceed 1 (bright lesions), the ADC factor must be
    below 1 (dark lesions).
    """

    shape: tuple[int, int, int] = (64, 64, 16)
    organ_center: tuple[float, float, float] = (0.5, 0.5, 0.5)  # grid fractions
    organ_radii: tuple[float, float, float] = (0.72, 0.66, 0.80)
    organ_intensity: dict[Modality, float] = field(
        default_factory=lambda: {
            Modality.T2W: 0.55,
            Modality.ADC: 0.70,
            Modality.T1PRE: 0.45,
            Modality.DCE_EARLY: 0.35,
            Modality.DCE_LATE: 0.38,
        }
    )
    background_intensity: dict[Modality, float] = field(
        default_factory=lambda: {
            Modality.T2W: 0.20,
            Modality.ADC: 0.75,
            Modality.T1PRE: 0.25,
            Modality.DCE_EARLY: 0.15,
            Modality.DCE_LATE: 0.17,
        }
    )
    lesion_count: tuple[int, int] = (1, 3)
    lesion_radius: tuple[float, float] = (2.5, 4.5)  # voxels
    adc_attenuation: float = 0.4
    early_enhancement: float = 2.2
    late_enhancement: float = 1.6
    t2w_attenuation: float = 0.85
    noise_level: float = 0.015
    smoothing_sigma: float = 0.5  # voxels
    spacing: tuple[float, float, float] = (0.5, 0.5, 3.0)

    def __post_init__(self) -> None:
        if self.adc_attenuation >= 1.0:
            raise ValueError("ADC attenuation factor must be < 1 (lesions are dark in ADC)")
        if self.early_enhancement <= 1.0 or self.late_enhancement <= 1.0:
            raise ValueError("DCE enhancement factors must be > 1 (lesions are bright in DCE)")
        if self.lesion_count[0] < 0 or self.lesion_count[0] > self.lesion_count[1]:
            raise ValueError(f"invalid lesion count range {self.lesion_count}")
        if self.lesion_radius[0] <= 0 or self.lesion_radius[0] > self.lesion_radius[1]:
            raise ValueError(f"invalid lesion radius range {self.lesion_radius}")

    def organ_radii_voxels(self) -> tuple[float, float, float]:
        return tuple(r * s / 2.0 for r, s in zip(self.organ_radii, self.shape))


def _ellipsoid_mask(
    shape: tuple[int, int, int],
    center: tuple[float, float, float],
    radii: tuple[float, float, float],
) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def generate_phantom(spec: PhantomSpec, seed: int) -> Study:
    """Generate one study; bit-identical for equal (spec, seed)."""
    radii = spec.organ_radii_voxels()
    if spec.lesion_count[1] > 0 and spec.lesion_radius[1] >= min(radii):
        raise ValueError(
            f"lesion does not fit: max lesion radius {spec.lesion_radius[1]} vs "
            f"organ radii {tuple(round(r, 2) for r in radii)}"
        )

    rng = np.random.default_rng(seed)
    shape = spec.shape
    center = tuple(c * (s - 1) for c, s in zip(spec.organ_center, shape))
    organ = _ellipsoid_mask(shape, center, radii)

    lesion_mask = np.zeros(shape, dtype=bool)
    n_lesions = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    for _ in range(n_lesions):
        radius = float(rng.uniform(*spec.lesion_radius))
        # rejection-sample a unit-ball offset, then scale so the lesion
        # sphere stays inside the organ ellipsoid
        while True:
            u = rng.uniform(-1.0, 1.0, size=3)
            if float(np.sum(u * u)) <= 1.0:
                break
        c = tuple(cc + uu * max(rr - radius, 0.0) for cc, uu, rr in zip(center, u, radii))
        lesion_mask |= _ellipsoid_mask(shape, c, (radius, radius, radius))

    volumes: dict[Modality, MriVolume] = {}
    factors = {
        Modality.T2W: spec.t2w_attenuation,
        Modality.ADC: spec.adc_attenuation,
        Modality.T1PRE: 1.0,
        Modality.DCE_EARLY: spec.early_enhancement,
        Modality.DCE_LATE: spec.late_enhancement,
    }
    for m in Modality:
        vol = np.where(organ, spec.organ_intensity[m], spec.background_intensity[m])
        vol = np.where(lesion_mask, vol * factors[m], vol)
        vol = gaussian_filter(vol, spec.smoothing_sigma)
        vol = vol + rng.normal(0.0, spec.noise_level, size=shape)
        vol = np.clip(vol, 0.0, 1.0).astype(np.float32)
        volumes[m] = MriVolume(vol, m, spec.spacing)

    return Study(id=f"phantom-{seed:05d}", volumes=volumes, lesion_mask=lesion_mask)
