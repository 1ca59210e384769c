"""BraTS-layout ingestion, normalization, patch sampling and the synthetic phantom.

Directory layout read and written here::

    <root>/<split>/<subject_id>/<subject_id>_<token>.nii.gz

with tokens ``t1``, ``t1ce``, ``t2``, ``flair`` for the modalities and ``seg``
for the label grid.
"""
from __future__ import annotations

import gzip
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import nibabel as nib
import numpy as np
from scipy import ndimage

from .volume import (
    LabelVolume,
    Modality,
    ModalityPairSpec,
    Volume,
    check_label_codes,
)

log = logging.getLogger(__name__)

MODALITY_TOKENS = {
    Modality.T1: ("t1",),
    Modality.T1c: ("t1ce", "t1c"),
    Modality.T2: ("t2",),
    Modality.FLAIR: ("flair",),
}
LABEL_TOKEN = "seg"
EXTENSIONS = (".nii.gz", ".nii")
FOREGROUND_RULES = ("brain_overlap", "tumor_overlap")
MANIFEST_NAME = "manifest.json"


class PatchSamplingError(RuntimeError):
    pass


@dataclass
class SubjectRecord:
    subject_id: str
    modality_paths: dict
    label_path: Optional[str] = None
    grade: Optional[str] = None
    split: Optional[str] = None

    def __post_init__(self):
        self.modality_paths = {Modality.parse(k): str(v) for k, v in self.modality_paths.items()}
        missing = [m.value for m in Modality if m not in self.modality_paths]
        if missing:
            raise ValueError(f"subject {self.subject_id}: missing modality {', '.join(missing)}")
        if self.grade is not None and self.grade not in ("HGG", "LGG"):
            raise ValueError(f"grade must be HGG or LGG, got {self.grade!r}")


@dataclass(frozen=True)
class PatchSpec:
    size: tuple = (32, 32, 32)
    foreground_rule: str = "tumor_overlap"
    seed: int = 0

    def __post_init__(self):
        size = tuple(int(s) for s in self.size)
        if len(size) != 3 or any(s < 16 for s in size):
            raise ValueError(f"patch size components must be >= 16, got {size}")
        if self.foreground_rule not in FOREGROUND_RULES:
            raise ValueError(f"foreground_rule must be one of {FOREGROUND_RULES}")
        object.__setattr__(self, "size", size)


@dataclass(frozen=True)
class PhantomConfig:
    grid_size: tuple = (64, 64, 64)
    n_subjects: int = 20
    lesion_count_range: tuple = (1, 2)
    intensity_map: str = "cubic_inversion"
    noise_sigma: float = 0.02
    seed: int = 0
    n_holdout: int = 0
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "grid_size", tuple(int(g) for g in self.grid_size))
        object.__setattr__(self, "lesion_count_range", tuple(int(c) for c in self.lesion_count_range))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.grid_size) != 3 or any(g < 32 for g in self.grid_size):
            raise ValueError("phantom grid_size components must be >= 32")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        lo, hi = self.lesion_count_range
        if lo < 0 or hi < lo:
            raise ValueError("lesion_count_range must be a non-negative (lo, hi) with lo <= hi")
        if self.n_subjects < 0 or not 0 <= self.n_holdout <= self.n_subjects:
            raise ValueError("need 0 <= n_holdout <= n_subjects")
        if self.intensity_map not in INTENSITY_MAPS:
            raise ValueError(f"unknown intensity_map {self.intensity_map!r}")


# ---------------------------------------------------------------- file I/O


def write_nifti(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a gzip-compressed NIfTI file with a zeroed gzip timestamp so reruns are byte-identical."""
    img = nib.Nifti1Image(np.asarray(data), affine=np.diag([*spacing, 1.0]))
    img.header.set_xyzt_units("mm")
    img.header.set_zooms(tuple(spacing))
    raw = img.to_bytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.name.endswith(".gz"):
        raw = gzip.compress(raw, compresslevel=6, mtime=0)
    path.write_bytes(raw)


def read_nifti(path) -> tuple[np.ndarray, tuple]:
    img = nib.load(str(path))
    data = np.asanyarray(img.dataobj)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return np.asarray(data), spacing


def _find_file(subject_dir: Path, subject_id: str, tokens: Sequence[str]) -> Optional[Path]:
    for tok in tokens:
        for ext in EXTENSIONS:
            p = subject_dir / f"{subject_id}_{tok}{ext}"
            if p.exists():
                return p
    return None


def discover_subjects(root, split: Optional[str] = None) -> list[SubjectRecord]:
    """List subjects under ``root/split`` (or ``root`` when split is None).

    Paths for absent modality files are still filled in by convention so that
    ``load_subject`` reports exactly which file is missing.
    """
    base = Path(root) / split if split else Path(root)
    if not base.is_dir():
        raise FileNotFoundError(f"no such data directory: {base}")
    records = []
    for d in sorted(p for p in base.iterdir() if p.is_dir()):
        sid = d.name
        paths = {}
        for m, toks in MODALITY_TOKENS.items():
            found = _find_file(d, sid, toks)
            paths[m] = str(found or d / f"{sid}_{toks[0]}.nii.gz")
        label = _find_file(d, sid, (LABEL_TOKEN,))
        records.append(SubjectRecord(sid, paths, str(label) if label else None, split=split))
    return records


def load_subject(record: SubjectRecord) -> tuple[dict, Optional[LabelVolume]]:
    missing = [m.value for m, p in record.modality_paths.items() if not Path(p).exists()]
    if missing:
        raise FileNotFoundError(
            f"subject {record.subject_id}: missing modality file(s) for {', '.join(missing)}"
        )
    vols = {}
    shape = spacing = None
    for m in Modality:
        data, sp = read_nifti(record.modality_paths[m])
        if data.ndim != 3:
            raise ValueError(f"subject {record.subject_id}: {m.value} is not a 3-D volume")
        if shape is None:
            shape, spacing = data.shape, sp
        elif data.shape != shape or not np.allclose(sp, spacing):
            raise ValueError(
                f"subject {record.subject_id}: {m.value} grid {data.shape}/{sp} "
                f"does not match {shape}/{spacing}"
            )
        vols[m] = Volume(data[None].astype(np.float32, copy=False), sp)
    label = None
    if record.label_path is not None:
        if not Path(record.label_path).exists():
            raise FileNotFoundError(f"subject {record.subject_id}: missing label file {record.label_path}")
        data, sp = read_nifti(record.label_path)
        if data.shape != shape:
            raise ValueError(f"subject {record.subject_id}: label grid {data.shape} != {shape}")
        check_label_codes(data)
        label = LabelVolume(data, sp)
    return vols, label


# ------------------------------------------------------------ preprocessing


def z_normalize(v: Volume) -> Volume:
    """Zero-mean unit-variance over the nonzero voxels; zero voxels stay zero."""
    if v.channels != 1:
        raise ValueError("z_normalize expects a single-channel volume")
    x = v.data[0].astype(np.float64)
    fg = x != 0
    if not fg.any():
        raise ValueError("cannot normalize an all-zero volume")
    vals = x[fg]
    std = vals.std()
    if std == 0 or not np.isfinite(std):
        raise ValueError("zero variance over the nonzero voxels")
    out = np.zeros_like(x)
    out[fg] = (vals - vals.mean()) / std
    return Volume(out[None].astype(np.float32), v.spacing)


def build_pair_input(vols: Mapping, pair: Sequence) -> Volume:
    pair = [Modality.parse(m) for m in pair]
    missing = [m.value for m in pair if m not in vols]
    if missing:
        raise KeyError(f"missing modality {', '.join(missing)}")
    shapes = {vols[m].spatial_shape for m in pair}
    if len(shapes) != 1:
        raise ValueError(f"pair modalities have different shapes: {shapes}")
    return Volume(np.concatenate([vols[m].data for m in pair], axis=0), vols[pair[0]].spacing)


def foreground_mask(vols: Mapping, label: Optional[LabelVolume], rule: str) -> np.ndarray:
    if rule == "tumor_overlap":
        if label is None:
            raise ValueError("tumor_overlap sampling needs a label")
        return label.labels > 0
    return np.any(np.stack([v.data[0] != 0 for v in vols.values()]), axis=0)


def draw_window(fg: np.ndarray, size: Sequence[int], rng: np.random.Generator) -> tuple:
    """Window start so that the window holds at least one foreground voxel.

    An anchor voxel is drawn uniformly from the foreground and the window
    start uniformly among the positions that keep the anchor inside.
    """
    shape = fg.shape
    if any(s > n for s, n in zip(size, shape)):
        raise ValueError(f"patch {tuple(size)} larger than volume {shape}")
    idx = np.flatnonzero(fg)
    if idx.size == 0:
        raise PatchSamplingError("no voxel satisfies the foreground rule (0 candidate anchors)")
    anchor = np.unravel_index(idx[rng.integers(idx.size)], shape)
    start = []
    for a, s, n in zip(anchor, size, shape):
        lo, hi = max(0, a - s + 1), min(a, n - s)
        start.append(int(rng.integers(lo, hi + 1)))
    return tuple(start)


def sample_patch(vols: Mapping, label: Optional[LabelVolume], spec: PatchSpec, return_start: bool = False):
    first = next(iter(vols.values()))
    rng = np.random.default_rng(spec.seed)
    fg = foreground_mask(vols, label, spec.foreground_rule)
    if first.spatial_shape != fg.shape:
        raise ValueError("volume and mask shapes differ")
    start = draw_window(fg, spec.size, rng)
    sl = tuple(slice(s, s + n) for s, n in zip(start, spec.size))
    out = {m: Volume(v.data[(slice(None),) + sl], v.spacing) for m, v in vols.items()}
    out_label = LabelVolume(label.labels[sl], label.spacing) if label is not None else None
    if return_start:
        return out, out_label, start
    return out, out_label


# ------------------------------------------------------------------ phantom


def _cubic(a):
    return 0.3 + 0.5 * a + 0.25 * a**3


# per-label additive contrast in the translated modality; keys are label codes
_LESION_OFFSETS = {
    Modality.T2: {1: 1.0, 2: 0.6, 4: 0.3},
    Modality.FLAIR: {1: -0.2, 2: 0.9, 4: 0.4},
}
# multiplicative lesion contrast of the source modalities
_SOURCE_FACTORS = {
    Modality.T1: {1: 0.45, 2: 0.75, 4: 0.7},
    Modality.T1c: {1: 0.5, 2: 0.8, 4: 1.6},
}
# translated modality <- source modality
_TRANSLATION_SOURCE = {Modality.T2: Modality.T1, Modality.FLAIR: Modality.T1c}

INTENSITY_MAPS = ("cubic_inversion",)


def phantom_transform(source: np.ndarray, labels: np.ndarray, brain: np.ndarray, target: Modality) -> np.ndarray:
    """Noise-free intensity of ``target`` (T2 or FLAIR) given its source grid."""
    out = _cubic(source)
    for code, off in _LESION_OFFSETS[target].items():
        out = out + off * (labels == code)
    return np.where(brain, out, 0.0)


def _ellipsoid(coords, center, radii):
    return sum(((c - c0) / r) ** 2 for c, c0, r in zip(coords, center, radii)) <= 1.0


def generate_phantom_subject(cfg: PhantomConfig, index: int) -> dict:
    """Arrays for one phantom subject, fully determined by (cfg.seed, index).

    Returns a dict with ``clean`` and ``noisy`` modality grids, ``labels``
    and ``brain``.
    """
    rng = np.random.default_rng([cfg.seed, index])
    shape = cfg.grid_size
    coords = np.meshgrid(*[np.linspace(-1, 1, n) for n in shape], indexing="ij")

    center = rng.uniform(-0.05, 0.05, 3)
    radii = rng.uniform(0.78, 0.9, 3)
    brain = _ellipsoid(coords, center, radii)

    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=max(shape) / 12)
    field /= field.std() + 1e-12
    tissue = 1.0 + 0.3 * np.tanh(2.0 * field)
    ventricles = _ellipsoid(coords, center + rng.uniform(-0.05, 0.05, 3), radii * rng.uniform(0.15, 0.25, 3))
    tissue = np.where(ventricles, 0.55, tissue)

    labels = np.zeros(shape, dtype=np.int16)
    lo, hi = cfg.lesion_count_range
    for _ in range(int(rng.integers(lo, hi + 1))):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        lc = center + direction * radii * rng.uniform(0.0, 0.45)
        # whole tumor near 5-10% of the brain with a resolvable necrotic core
        r_wt = rng.uniform(0.25, 0.36, 3)
        r_tc = r_wt * rng.uniform(0.55, 0.7)
        r_nc = r_tc * rng.uniform(0.45, 0.6)
        wt = _ellipsoid(coords, lc, r_wt) & brain
        tc = _ellipsoid(coords, lc, r_tc) & brain
        nc = _ellipsoid(coords, lc, r_nc) & brain
        labels[wt] = 2
        labels[tc] = 4
        labels[nc] = 1

    clean = {}
    for m, factors in _SOURCE_FACTORS.items():
        x = tissue.copy()
        for code, f in factors.items():
            x = np.where(labels == code, x * f, x)
        clean[m] = np.where(brain, x, 0.0)
    for target, src in _TRANSLATION_SOURCE.items():
        clean[target] = phantom_transform(clean[src], labels, brain, target)

    noisy = {}
    for m in Modality:
        noise = rng.standard_normal(shape) * cfg.noise_sigma
        noisy[m] = np.where(brain, clean[m] + noise, 0.0).astype(np.float32)
    return {"clean": clean, "noisy": noisy, "labels": labels, "brain": brain}


def subject_path(root, split: str, sid: str, token: str) -> Path:
    return Path(root) / split / sid / f"{sid}_{token}.nii.gz"


def synth_phantom(cfg: PhantomConfig, out_dir) -> list[SubjectRecord]:
    """Write the phantom dataset and its manifest under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, entries = [], []
    n_train = cfg.n_subjects - cfg.n_holdout
    for i in range(cfg.n_subjects):
        sid = f"phantom_{i:03d}"
        split = "train" if i < n_train else "test"
        arrays = generate_phantom_subject(cfg, i)
        paths = {}
        for m in Modality:
            p = subject_path(out_dir, split, sid, MODALITY_TOKENS[m][0])
            write_nifti(p, arrays["noisy"][m], cfg.spacing)
            paths[m] = str(p)
        lp = subject_path(out_dir, split, sid, LABEL_TOKEN)
        write_nifti(lp, arrays["labels"], cfg.spacing)
        records.append(SubjectRecord(sid, paths, str(lp), split=split))
        entries.append({
            "subject_id": sid,
            "split": split,
            "seed": [cfg.seed, i],
            "modality_paths": {m.value: str(Path(paths[m]).relative_to(out_dir)) for m in Modality},
            "label_path": str(lp.relative_to(out_dir)),
        })
        log.debug("wrote phantom subject %s", sid)
    manifest = {
        "format_version": 1,
        "transform": cfg.intensity_map,
        "config": asdict(cfg),
        "subjects": entries,
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return records


def read_manifest(root) -> list[SubjectRecord]:
    root = Path(root)
    manifest = json.loads((root / MANIFEST_NAME).read_text())
    return [
        SubjectRecord(
            e["subject_id"],
            {m: str(root / p) for m, p in e["modality_paths"].items()},
            str(root / e["label_path"]) if e.get("label_path") else None,
            split=e.get("split"),
        )
        for e in manifest["subjects"]
    ]


# ------------------------------------------------------------ in-memory set


@dataclass
class Subject:
    subject_id: str
    volumes: dict
    label: Optional[LabelVolume] = None
    meta: dict = field(default_factory=dict)


def load_dataset(records: Sequence[SubjectRecord], normalize: bool = True) -> list[Subject]:
    subjects = []
    for rec in records:
        vols, label = load_subject(rec)
        if normalize:
            vols = {m: z_normalize(v) for m, v in vols.items()}
        subjects.append(Subject(rec.subject_id, vols, label))
    return subjects


def load_split(root, split: Optional[str] = None, normalize: bool = True) -> list[Subject]:
    return load_dataset(discover_subjects(root, split), normalize=normalize)


def pair_tensors(subject: Subject, pair_spec: ModalityPairSpec):
    """(pair A input, pair B input) volumes for one subject."""
    return (
        build_pair_input(subject.volumes, pair_spec.pair_a),
        build_pair_input(subject.volumes, pair_spec.pair_b),
    )
