"""Volumes, studies, slice samples, preprocessing and the dataset container.

A study bundles the five registered modalities of one acquisition on a shared
voxel grid. Training consumes 2-D slice samples: a 3-channel non-contrast
input (T2W, ADC, T1 pre-contrast) paired with the 2-channel contrast target
(early, late DCE) at the same depth index.

Dataset container format (one file per split, little-endian throughout):

    magic           8 bytes   b"DCEMRDS1"
    version         uint32    currently 1
    study_count     uint32
    shape           3*uint32  (height, width, depth), shared by all studies
    per study:
        id_len      uint16    followed by id bytes (utf-8)
        spacing     3*float32 voxel size in mm
        mask_flag   uint8     1 if a lesion mask record follows the volumes
        5 volumes, in the order T2W, ADC, T1PRE, DCE_EARLY, DCE_LATE:
            tag_len uint16    followed by the modality tag bytes (utf-8)
            voxels  h*w*d*float32, C order
        mask        h*w*d*uint8, only if mask_flag == 1
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np


class Modality(str, Enum):
    T2W = "T2W"
    ADC = "ADC"
    T1PRE = "T1PRE"
    DCE_EARLY = "DCE_EARLY"
    DCE_LATE = "DCE_LATE"


#: Channel packing of slice samples. Inputs: T2W=0, ADC=1, T1PRE=2.
INPUT_MODALITIES = (Modality.T2W, Modality.ADC, Modality.T1PRE)
#: Targets: DCE_EARLY=0, DCE_LATE=1.
TARGET_MODALITIES = (Modality.DCE_EARLY, Modality.DCE_LATE)
ALL_MODALITIES = INPUT_MODALITIES + TARGET_MODALITIES

_MAGIC = b"DCEMRDS1"
_VERSION = 1


class DatasetFormatError(ValueError):
    """Raised when a dataset container cannot be parsed."""


@dataclass
class NormalizationParams:
    """Percentile clipping bounds applied before the min-max map to [0, 1]."""

    low_percentile: float = 0.5
    high_percentile: float = 99.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.low_percentile < self.high_percentile <= 100.0:
            raise ValueError(
                f"need 0 <= low < high <= 100, got ({self.low_percentile}, {self.high_percentile})"
            )


@dataclass
class MriVolume:
    """A registered, normalized 3-D scalar volume with its modality tag."""

    voxels: np.ndarray  # (height, width, depth) float32, values in [0, 1]
    modality: Modality
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {self.voxels.shape}")
        if not np.isfinite(self.voxels).all():
            raise ValueError(f"{self.modality.value} volume contains non-finite values")
        lo, hi = float(self.voxels.min()), float(self.voxels.max())
        if lo < -1e-6 or hi > 1.0 + 1e-6:
            raise ValueError(
                f"{self.modality.value} volume values [{lo:.4g}, {hi:.4g}] outside [0, 1]"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape  # type: ignore[return-value]


@dataclass
class Study:
    """One acquisition: a volume per modality, plus an optional lesion mask."""

    id: str
    volumes: dict[Modality, MriVolume]
    lesion_mask: np.ndarray | None = None  # bool, same grid as the volumes

    def __post_init__(self) -> None:
        shapes = {v.shape for v in self.volumes.values()}
        if len(shapes) > 1:
            raise ValueError(f"study {self.id}: modality grids disagree: {sorted(shapes)}")
        if self.lesion_mask is not None:
            self.lesion_mask = np.asarray(self.lesion_mask, dtype=bool)
            if self.volumes and self.lesion_mask.shape != self.shape:
                raise ValueError(
                    f"study {self.id}: lesion mask shape {self.lesion_mask.shape} "
                    f"does not match volume shape {self.shape}"
                )

    @property
    def shape(self) -> tuple[int, int, int]:
        return next(iter(self.volumes.values())).shape

    @property
    def spacing(self) -> tuple[float, float, float]:
        return next(iter(self.volumes.values())).spacing


@dataclass
class TrainingSample:
    """One slice: 3-channel non-contrast input and 2-channel DCE target."""

    input: np.ndarray  # (3, H, W) float32
    target: np.ndarray  # (2, H, W) float32
    study_id: str
    slice_index: int


def normalize_volume(
    raw: np.ndarray,
    params: NormalizationParams | None = None,
    modality: Modality = Modality.T2W,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> MriVolume:
    """Percentile-clip then affinely map a raw volume onto [0, 1].

    The output attains 0 and 1 exactly. Constant input (or input whose
    clipping percentiles coincide) admits no affine map and is rejected.
    """
    params = params or NormalizationParams()
    raw = np.asarray(raw, dtype=np.float64)
    if not np.isfinite(raw).all():
        raise ValueError("volume contains non-finite values")
    lo, hi = np.percentile(raw, [params.low_percentile, params.high_percentile])
    if hi <= lo:
        raise ValueError("degenerate volume: clipping percentiles coincide")
    out = (np.clip(raw, lo, hi) - lo) / (hi - lo)
    return MriVolume(out.astype(np.float32), modality, spacing)


def center_crop(study: Study, crop: tuple[int, int, int]) -> Study:
    """Crop every volume (and mask) identically about the grid center."""
    shape = study.shape
    if any(s < c for s, c in zip(shape, crop)):
        raise ValueError(f"volume smaller than crop: shape {shape}, crop {tuple(crop)}")
    offsets = tuple((s - c) // 2 for s, c in zip(shape, crop))
    sl = tuple(slice(o, o + c) for o, c in zip(offsets, crop))
    volumes = {
        m: replace(v, voxels=v.voxels[sl].copy()) for m, v in study.volumes.items()
    }
    mask = study.lesion_mask[sl].copy() if study.lesion_mask is not None else None
    return Study(id=study.id, volumes=volumes, lesion_mask=mask)


def extract_slices(study: Study) -> list[TrainingSample]:
    """One sample per depth index, channel-packed per the documented order."""
    for m in ALL_MODALITIES:
        if m not in study.volumes:
            raise ValueError(f"study {study.id}: missing modality {m.value}")
    depth = study.shape[2]
    samples = []
    for k in range(depth):
        inp = np.stack([study.volumes[m].voxels[:, :, k] for m in INPUT_MODALITIES])
        tgt = np.stack([study.volumes[m].voxels[:, :, k] for m in TARGET_MODALITIES])
        samples.append(TrainingSample(inp, tgt, study.id, k))
    return samples


def reassemble_volumes(samples: list[TrainingSample]) -> dict[Modality, np.ndarray]:
    """Inverse of extract_slices for one study's samples; bit-exact round trip."""
    ordered = sorted(samples, key=lambda s: s.slice_index)
    if [s.slice_index for s in ordered] != list(range(len(ordered))):
        raise ValueError("samples do not form a contiguous slice range")
    out: dict[Modality, np.ndarray] = {}
    for c, m in enumerate(INPUT_MODALITIES):
        out[m] = np.stack([s.input[c] for s in ordered], axis=-1)
    for c, m in enumerate(TARGET_MODALITIES):
        out[m] = np.stack([s.target[c] for s in ordered], axis=-1)
    return out


# ---------------------------------------------------------------------------
# Container I/O
# ---------------------------------------------------------------------------


def save_dataset(studies: list[Study], path: str | Path) -> None:
    """Write studies to the binary container documented in the module header."""
    if not studies:
        raise ValueError("refusing to write an empty dataset")
    shape = studies[0].shape
    for s in studies:
        if s.shape != shape:
            raise ValueError(
                f"container requires a shared grid: study {s.id} has {s.shape}, expected {shape}"
            )
        for m in ALL_MODALITIES:
            if m not in s.volumes:
                raise ValueError(f"study {s.id}: missing modality {m.value}")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(studies)))
        f.write(struct.pack("<III", *shape))
        for s in studies:
            sid = s.id.encode("utf-8")
            f.write(struct.pack("<H", len(sid)))
            f.write(sid)
            f.write(struct.pack("<fff", *s.spacing))
            f.write(struct.pack("<B", 1 if s.lesion_mask is not None else 0))
            for m in ALL_MODALITIES:
                tag = m.value.encode("utf-8")
                f.write(struct.pack("<H", len(tag)))
                f.write(tag)
                f.write(s.volumes[m].voxels.astype("<f4").tobytes(order="C"))
            if s.lesion_mask is not None:
                f.write(s.lesion_mask.astype(np.uint8).tobytes(order="C"))


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DatasetFormatError(f"truncated container while reading {what}")
    return buf


def load_dataset(path: str | Path) -> list[Study]:
    """Read a container written by save_dataset; lossless for float32 voxels."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset container not found: {path}")
    with open(path, "rb") as f:
        magic = _read_exact(f, len(_MAGIC), "magic")
        if magic != _MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}; not a dataset container")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != _VERSION:
            raise DatasetFormatError(f"unsupported container version {version}")
        shape = struct.unpack("<III", _read_exact(f, 12, "shape"))
        n_vox = int(np.prod(shape))
        studies = []
        for i in range(count):
            where = f"study record {i}"
            (id_len,) = struct.unpack("<H", _read_exact(f, 2, where))
            sid = _read_exact(f, id_len, where).decode("utf-8")
            where = f"study record {i} ({sid})"
            spacing = struct.unpack("<fff", _read_exact(f, 12, where))
            (mask_flag,) = struct.unpack("<B", _read_exact(f, 1, where))
            volumes: dict[Modality, MriVolume] = {}
            for expected in ALL_MODALITIES:
                (tag_len,) = struct.unpack("<H", _read_exact(f, 2, where))
                tag = _read_exact(f, tag_len, where).decode("utf-8")
                try:
                    modality = Modality(tag)
                except ValueError:
                    raise DatasetFormatError(
                        f"unknown modality tag '{tag}' in {where}"
                    ) from None
                if modality != expected:
                    raise DatasetFormatError(
                        f"modality tag '{tag}' out of order in {where}; expected {expected.value}"
                    )
                raw = _read_exact(f, 4 * n_vox, f"{where} {tag} voxels")
                voxels = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
                volumes[modality] = MriVolume(voxels, modality, spacing)
            mask = None
            if mask_flag:
                raw = _read_exact(f, n_vox, f"{where} lesion mask")
                mask = np.frombuffer(raw, dtype=np.uint8).reshape(shape).astype(bool)
            studies.append(Study(id=sid, volumes=volumes, lesion_mask=mask))
        trailing = f.read(1)
        if trailing:
            raise DatasetFormatError("trailing bytes after the final study record")
    return studies


def load_samples(path: str | Path) -> list[TrainingSample]:
    """Load a container and flatten it into slice samples."""
    samples: list[TrainingSample] = []
    for study in load_dataset(path):
        samples.extend(extract_slices(study))
    return samples
