"""Cross-modality feature learning for multi-modal MRI brain tumor segmentation."""

from .volume import (
    LabelVolume,
    Modality,
    ModalityPairSpec,
    RegionMask,
    Volume,
    derive_region_masks,
    one_hot,
    probs_to_labels,
)

__version__ = "0.1.0"

__all__ = [
    "LabelVolume",
    "Modality",
    "ModalityPairSpec",
    "RegionMask",
    "Volume",
    "derive_region_masks",
    "one_hot",
    "probs_to_labels",
]
