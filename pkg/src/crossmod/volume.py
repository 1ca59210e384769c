"""Volumetric data types and BraTS label conventions."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

LABEL_CODES = (0, 1, 2, 4)
REGIONS = ("WT", "TC", "ET")
# label codes belonging to each evaluation region
REGION_CODES = {"WT": (1, 2, 4), "TC": (1, 4), "ET": (4,)}


class Modality(str, Enum):
    T1 = "T1"
    T1c = "T1c"
    T2 = "T2"
    FLAIR = "FLAIR"

    @classmethod
    def parse(cls, value: "str | Modality") -> "Modality":
        if isinstance(value, cls):
            return value
        for m in cls:
            if m.value.lower() == str(value).lower():
                return m
        raise ValueError(f"unknown modality {value!r}; expected one of {[m.value for m in cls]}")


MODALITIES = tuple(Modality)


def _check_spacing(spacing) -> tuple:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise ValueError(f"spacing must be three positive numbers, got {spacing}")
    return spacing


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Volume:
    """A (channels, depth, height, width) float grid with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 4-D with non-empty axes, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data contains NaN or Inf")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple:
        return tuple(self.data.shape[1:])


@dataclass(frozen=True)
class ModalityPairSpec:
    pair_a: tuple = (Modality.T1, Modality.T1c)
    pair_b: tuple = (Modality.T2, Modality.FLAIR)

    def __post_init__(self):
        a = tuple(Modality.parse(m) for m in self.pair_a)
        b = tuple(Modality.parse(m) for m in self.pair_b)
        if len(set(a)) != len(a) or len(set(b)) != len(b):
            raise ValueError("modalities within a pair must be distinct")
        if set(a) & set(b):
            raise ValueError(f"pairs overlap: {sorted(m.value for m in set(a) & set(b))}")
        if len(a) != len(b) or len(a) not in (1, 2):
            raise ValueError("pairs must both hold one modality or both hold two")
        object.__setattr__(self, "pair_a", a)
        object.__setattr__(self, "pair_b", b)

    @property
    def channels(self) -> int:
        return len(self.pair_a)

    def to_dict(self) -> dict:
        return {"pair_a": [m.value for m in self.pair_a], "pair_b": [m.value for m in self.pair_b]}


def check_label_codes(labels: np.ndarray) -> None:
    bad = np.setdiff1d(np.unique(labels), LABEL_CODES)
    if bad.size:
        raise ValueError(f"label grid contains values outside {{0,1,2,4}}: {bad.tolist()}")


@dataclass(frozen=True)
class LabelVolume:
    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise ValueError(f"label grid must be 3-D and non-empty, got shape {labels.shape}")
        if np.issubdtype(labels.dtype, np.floating):
            if not np.all(labels == np.round(labels)):
                raise ValueError("label grid contains non-integer values")
        check_label_codes(labels)
        object.__setattr__(self, "labels", _freeze(labels.astype(np.int16)))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple:
        return self.labels.shape


@dataclass(frozen=True)
class RegionMask:
    region: str
    mask: np.ndarray
    spacing: tuple = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        if self.region not in REGIONS:
            raise ValueError(f"unknown region {self.region!r}")
        mask = np.asarray(self.mask)
        if mask.ndim != 3:
            raise ValueError("region mask must be 3-D")
        if mask.dtype != bool:
            if not np.all((mask == 0) | (mask == 1)):
                raise ValueError("region mask values must be 0 or 1")
            mask = mask.astype(bool)
        object.__setattr__(self, "mask", _freeze(mask))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))


def derive_region_masks(label: LabelVolume) -> tuple[RegionMask, RegionMask, RegionMask]:
    """Whole tumor, tumor core and enhancing tumor masks, in that order."""
    if not isinstance(label, LabelVolume):
        label = LabelVolume(label)
    return tuple(
        RegionMask(r, np.isin(label.labels, REGION_CODES[r]), label.spacing) for r in REGIONS
    )


def one_hot(label: LabelVolume) -> Volume:
    """4-channel encoding with channels ordered by label code (0, 1, 2, 4)."""
    if not isinstance(label, LabelVolume):
        label = LabelVolume(label)
    data = np.stack([label.labels == c for c in LABEL_CODES]).astype(np.float32)
    return Volume(data, label.spacing)


def probs_to_labels(probs: Volume, atol: float = 1e-5) -> LabelVolume:
    """Decode per-voxel class probabilities to BraTS codes.

    np.argmax returns the first maximal index, so ties go to the lowest
    channel (background first).
    """
    data = probs.data if isinstance(probs, Volume) else np.asarray(probs)
    spacing = probs.spacing if isinstance(probs, Volume) else (1.0, 1.0, 1.0)
    if data.ndim != 4 or data.shape[0] != len(LABEL_CODES):
        raise ValueError(f"expected 4 probability channels, got shape {data.shape}")
    if not np.allclose(data.sum(axis=0), 1.0, atol=atol, rtol=0):
        raise ValueError("probabilities do not sum to 1 per voxel")
    idx = np.argmax(data, axis=0)
    return LabelVolume(np.asarray(LABEL_CODES, dtype=np.int16)[idx], spacing)


def stack_channels(vols: Sequence[Volume]) -> Volume:
    return Volume(np.concatenate([v.data for v in vols], axis=0), vols[0].spacing)
