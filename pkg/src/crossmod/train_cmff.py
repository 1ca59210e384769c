"""Phase 2: segmentation branches seeded from the phase-1 generators, plus the fusion branch.

Variants cover the ablations: ``full``, ``no_mask_guidance``,
``branch_a_only``, ``branch_b_only`` and ``average_fusion`` (no fusion
branch; the two branches' probability maps are averaged at prediction time).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .config import config_hash, from_dict, to_dict
from .data import PatchSpec, Subject, build_pair_input, sample_patch, write_nifti
from .losses import CmffLossReport, _check_finite, _scalar, soft_dice_loss
from .nets import (
    Checkpoint,
    NetworkSpec,
    build_fusion_branch,
    build_generator,
    build_seg_branch,
    flatten,
    forward,
    fusion_input,
    init_params,
    load_arrays,
    save_arrays,
    transfer_parameters,
    unflatten,
)
from .train_cmft import CmftConfig
from .training import (
    JsonlLog,
    adam_state_arrays,
    apply_grads,
    derive_seed,
    epoch_order,
    leaf_params,
    load_adam_state,
    make_adam,
    param_list,
    set_lr,
    to_batch,
)
from .volume import LabelVolume, ModalityPairSpec, Volume, one_hot, probs_to_labels

log = logging.getLogger(__name__)

INIT_MODES = ("cmft_transfer", "random", "self_recon_transfer")
VARIANTS = ("full", "no_mask_guidance", "branch_a_only", "branch_b_only", "average_fusion")
# networks whose parameters each variant optimizes
OPTIMIZED = {
    "full": ("seg_a", "seg_b", "fusion"),
    "no_mask_guidance": ("seg_a", "seg_b", "fusion"),
    "branch_a_only": ("seg_a",),
    "branch_b_only": ("seg_b",),
    "average_fusion": ("seg_a", "seg_b"),
}


@dataclass(frozen=True)
class CmffConfig:
    init_mode: str = "cmft_transfer"
    variant: str = "full"
    pair_spec: ModalityPairSpec = field(default_factory=ModalityPairSpec)
    patch: PatchSpec = field(default_factory=PatchSpec)
    base_filters: int = 16
    depth: int = 3
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    # directory holding g_ab.npz / g_ba.npz from phase 1 (or from self-reconstruction)
    cmft_checkpoint: Optional[str] = None
    overlap: float = 0.5
    # share of tumor_overlap patches; the rest are drawn with brain_overlap
    tumor_fraction: float = 1.0

    def __post_init__(self):
        if isinstance(self.pair_spec, dict):
            object.__setattr__(self, "pair_spec", ModalityPairSpec(**self.pair_spec))
        if isinstance(self.patch, dict):
            object.__setattr__(self, "patch", PatchSpec(**self.patch))
        problems = []
        if self.init_mode not in INIT_MODES:
            problems.append(f"init_mode must be one of {INIT_MODES}")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}")
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if self.steps < 0 or self.checkpoint_every < 0:
            problems.append("steps and checkpoint_every must be >= 0")
        if self.depth < 1 or self.base_filters < 1:
            problems.append("depth and base_filters must be >= 1")
        elif any(s % 2**self.depth for s in self.patch.size):
            problems.append(f"patch size {self.patch.size} must be divisible by 2**depth = {2**self.depth}")
        if not 0 <= self.tumor_fraction <= 1:
            problems.append("tumor_fraction must be in [0, 1]")
        if not 0 <= self.overlap < 1:
            problems.append("overlap must be in [0, 1)")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def needs_source(self) -> bool:
        return self.init_mode != "random"

    @classmethod
    def from_dict(cls, data, where: str = "cmff") -> "CmffConfig":
        return from_dict(cls, data, where)


@dataclass
class SegOutput:
    probs_a: Volume
    probs_b: Volume
    probs_f: Volume
    final_labels: LabelVolume


@dataclass
class CmffState:
    cfg: CmffConfig
    seg_spec: NetworkSpec
    fusion_spec: Optional[NetworkSpec]
    params: dict
    opt: torch.optim.Adam
    step: int = 0

    @property
    def optimized(self) -> tuple:
        return OPTIMIZED[self.cfg.variant]

    @property
    def opt_params(self) -> list:
        return param_list(*(self.params[n] for n in self.optimized))

    def set_lr(self, lr: float) -> None:
        set_lr(self.opt, lr)

    def spec_for(self, name: str) -> NetworkSpec:
        return self.fusion_spec if name == "fusion" else self.seg_spec

    def checkpoint(self, name: str) -> Checkpoint:
        meta = {
            "phase": "cmff",
            "network": name,
            "seed": self.cfg.seed,
            "step": self.step,
            "config_hash": config_hash(self.cfg),
            "config": to_dict(self.cfg),
        }
        return Checkpoint(self.params[name], meta)


def load_sources(path) -> dict:
    path = Path(path)
    return {name: Checkpoint.load(path / f"{name}.npz") for name in ("g_ab", "g_ba")}


def init_cmff(cfg: CmffConfig, sources: Optional[Mapping] = None) -> CmffState:
    """Build both segmentation branches (transferred or random) and a freshly seeded fusion branch."""
    c = cfg.pair_spec.channels
    seg = build_seg_branch(c, cfg.base_filters, cfg.depth)
    fusion = None
    if cfg.variant != "average_fusion":
        fusion = build_fusion_branch(cfg.base_filters, mask_guidance=cfg.variant != "no_mask_guidance")
    params = {}
    if cfg.needs_source:
        if sources is None:
            if cfg.cmft_checkpoint is None:
                raise ValueError(f"init_mode={cfg.init_mode} needs cmft_checkpoint")
            sources = load_sources(cfg.cmft_checkpoint)
        for branch, src in (("seg_a", "g_ab"), ("seg_b", "g_ba")):
            ck = transfer_parameters(sources[src], seg, seed=derive_seed(cfg.seed, 1 if branch == "seg_a" else 2))
            params[branch] = ck.params
    else:
        params["seg_a"] = init_params(seg, derive_seed(cfg.seed, 1))
        params["seg_b"] = init_params(seg, derive_seed(cfg.seed, 2))
    if fusion is not None:
        params["fusion"] = init_params(fusion, derive_seed(cfg.seed, 3))
    params = {k: leaf_params(v) for k, v in params.items()}
    state = CmffState(cfg, seg, fusion, params, None)
    state.opt = make_adam(state.opt_params, cfg.lr, cfg.betas)
    return state


def _heads(state: CmffState, a, b, need=("a", "b", "f")) -> dict:
    """Probability maps of the requested heads for batched inputs."""
    out = {}
    P = state.params
    if {"a", "f"} & set(need):
        out["a"], taps_a = forward(state.seg_spec, P["seg_a"], a)
    if {"b", "f"} & set(need):
        out["b"], taps_b = forward(state.seg_spec, P["seg_b"], b)
    if "f" in need:
        if state.fusion_spec is None:
            out["f"] = 0.5 * (out["a"] + out["b"])
        else:
            x = fusion_input(taps_a, taps_b)
            masks = (out["a"], out["b"]) if state.fusion_spec.needs_masks else None
            out["f"], _ = forward(state.fusion_spec, P["fusion"], x, masks=masks)
    return out


_TERM_HEAD = {"seg_a": "a", "seg_b": "b", "fusion": "f"}


def cmff_step(state: CmffState, batch):
    """One optimizer update on the variant's Dice terms.

    ``batch`` is (a, b, y) from one subject and window. Only optimized terms
    enter the report; the others are reported as 0 so that
    ``total == dice_a + dice_b + dice_f`` always holds.
    """
    a, b, y = batch
    if y is None:
        raise ValueError("phase 2 needs a label for every batch")
    a, b = to_batch(a), to_batch(b)
    target = to_batch(one_hot(y) if isinstance(y, LabelVolume) else y)
    need = tuple(_TERM_HEAD[n] for n in state.optimized)
    probs = _heads(state, a, b, need)
    terms = {f"dice_{h}": soft_dice_loss(probs[h], target) for h in need}
    _check_finite(**terms)
    loss = sum(terms.values())
    vals = {k: _scalar(terms.get(k, 0.0)) for k in ("dice_a", "dice_b", "dice_f")}
    report = CmffLossReport(**vals, total=vals["dice_a"] + vals["dice_b"] + vals["dice_f"])
    apply_grads(state.opt, loss, state.opt_params)
    state.step += 1
    return state, report


def cmff_batch(cfg: CmffConfig, dataset: Sequence[Subject], step: int):
    subj = dataset[epoch_order(cfg.seed, len(dataset), step)]
    if subj.label is None:
        raise ValueError(f"subject {subj.subject_id} has no label")
    rule = cfg.patch.foreground_rule
    if rule == "tumor_overlap" and cfg.tumor_fraction < 1:
        if np.random.default_rng([cfg.seed, step, 99]).random() >= cfg.tumor_fraction:
            rule = "brain_overlap"
    spec = PatchSpec(cfg.patch.size, rule, derive_seed(cfg.seed, step))
    vols, label = sample_patch(subj.volumes, subj.label, spec)
    return (
        build_pair_input(vols, cfg.pair_spec.pair_a),
        build_pair_input(vols, cfg.pair_spec.pair_b),
        label,
    )


def sliding_window(fn, x: torch.Tensor, window: Sequence[int], overlap: float = 0.5) -> dict:
    """Average ``fn`` over overlapping windows covering ``x`` (N, C, D, H, W).

    Axes shorter than the window are zero-padded and the result cropped.
    ``fn`` maps a window to a dict of (N, K, *window) tensors.
    """
    spatial = x.shape[2:]
    pad = []
    for n, w in zip(reversed(spatial), reversed(window)):
        pad += [0, max(0, w - n)]
    xp = torch.nn.functional.pad(x, pad) if any(pad) else x
    padded = xp.shape[2:]
    starts = []
    for n, w in zip(padded, window):
        stride = max(1, int(round(w * (1 - overlap))))
        s = list(range(0, n - w + 1, stride))
        if s[-1] != n - w:
            s.append(n - w)
        starts.append(s)
    acc, count = {}, torch.zeros((1, 1, *padded), dtype=x.dtype)
    for z in starts[0]:
        for yy in starts[1]:
            for xx in starts[2]:
                sl = (slice(None), slice(None), slice(z, z + window[0]), slice(yy, yy + window[1]), slice(xx, xx + window[2]))
                out = fn(xp[sl])
                for k, v in out.items():
                    if k not in acc:
                        acc[k] = torch.zeros((v.shape[0], v.shape[1], *padded), dtype=v.dtype)
                    acc[k][sl] += v
                count[sl] += 1
    crop = (slice(None), slice(None)) + tuple(slice(0, n) for n in spatial)
    return {k: (v / count)[crop] for k, v in acc.items()}


DESIGNATED_HEAD = {
    "full": "f",
    "no_mask_guidance": "f",
    "average_fusion": "f",
    "branch_a_only": "a",
    "branch_b_only": "b",
}


@torch.no_grad()
def predict(state: CmffState, volumes, window: Optional[Sequence[int]] = None,
            brain_mask: bool = True) -> SegOutput:
    """Whole-volume prediction by overlap-averaged sliding windows.

    ``volumes`` is a modality -> Volume map (or a Subject). The final labels
    come from the variant's designated head: the fusion output, the mean of
    the two branches (average_fusion) or a single branch. With ``brain_mask``
    every voxel that is zero in all modalities (outside the skull-stripped
    brain) is set to background in all heads.
    """
    if isinstance(volumes, Subject):
        volumes = volumes.volumes
    cfg = state.cfg
    a = build_pair_input(volumes, cfg.pair_spec.pair_a)
    b = build_pair_input(volumes, cfg.pair_spec.pair_b)
    window = tuple(window or cfg.patch.size)
    x = torch.cat([to_batch(a), to_batch(b)], dim=1)
    c = a.channels
    probs = sliding_window(lambda w: _heads(state, w[:, :c], w[:, c:]), x, window, cfg.overlap)
    if brain_mask:
        outside = (x[0] == 0).all(dim=0)
        for v in probs.values():
            v[0][:, outside] = 0
            v[0][0, outside] = 1
    vols = {k: Volume(v[0].numpy(), a.spacing) for k, v in probs.items()}
    labels = probs_to_labels(vols[DESIGNATED_HEAD[cfg.variant]])
    return SegOutput(vols["a"], vols["b"], vols["f"], labels)


def write_prediction(out: SegOutput, path) -> None:
    write_nifti(path, out.final_labels.labels, out.final_labels.spacing)


# ------------------------------------------------------------------ state I/O


def save_cmff_state(state: CmffState, path) -> None:
    arrays = {}
    for name, p in state.params.items():
        arrays.update(flatten(p, f"params/{name}/"))
    arrays.update(adam_state_arrays(state.opt, state.opt_params, "optim"))
    meta = {"phase": "cmff", "kind": "state", "step": state.step, "seed": state.cfg.seed,
            "config_hash": config_hash(state.cfg), "config": to_dict(state.cfg)}
    save_arrays(path, arrays, meta)


def _fill(state: CmffState, loaded: Mapping) -> None:
    with torch.no_grad():
        for name, p in state.params.items():
            for lid, layer in p.items():
                for k, t in layer.items():
                    t.copy_(loaded[name][lid][k])


def _random_cfg(cfg: CmffConfig) -> CmffConfig:
    # rebuilding from saved parameters: no phase-1 source needed
    return CmffConfig.from_dict({**to_dict(cfg), "init_mode": "random", "cmft_checkpoint": None})


def load_cmff_state(path, cfg: Optional[CmffConfig] = None) -> CmffState:
    arrays, meta = load_arrays(path)
    cfg = cfg or CmffConfig.from_dict(meta["config"])
    state = init_cmff(_random_cfg(cfg))
    state.cfg = cfg
    names = {k.split("/")[1] for k in arrays if k.startswith("params/")}
    _fill(state, {n: unflatten(arrays, f"params/{n}/") for n in names})
    load_adam_state(state.opt, state.opt_params, arrays, "optim")
    state.step = int(meta["step"])
    return state


def load_cmff_model(directory) -> CmffState:
    """Rebuild a trained model from the final checkpoints written by run_cmff."""
    directory = Path(directory)
    seg_a = Checkpoint.load(directory / "seg_a.npz")
    cfg = CmffConfig.from_dict(seg_a.meta["config"])
    state = init_cmff(_random_cfg(cfg))
    state.cfg = cfg
    loaded = {"seg_a": seg_a.params}
    for name in state.params:
        if name != "seg_a":
            loaded[name] = Checkpoint.load(directory / f"{name}.npz").params
    _fill(state, loaded)
    state.seg_spec.trace_shapes((cfg.pair_spec.channels, *cfg.patch.size))
    for name, p in loaded.items():
        Checkpoint(p).check(state.spec_for(name))
    state.step = int(seg_a.meta["step"])
    return state


def run_cmff(cfg: CmffConfig, dataset: Sequence[Subject], out_dir=None, resume_from=None, sources=None) -> dict:
    """Train the segmentation network; returns {network name: Checkpoint}."""
    if resume_from:
        state = load_cmff_state(resume_from, cfg)
    else:
        state = init_cmff(cfg, sources)
    out_dir = Path(out_dir) if out_dir else None
    logf = JsonlLog(out_dir / "cmff_log.jsonl" if out_dir else None, truncate_at=state.step)
    while state.step < cfg.steps:
        step = state.step
        _, report = cmff_step(state, cmff_batch(cfg, dataset, step))
        logf.write({"step": step, "phase": "cmff", **report.to_log()})
        if step % 50 == 0:
            log.info("cmff step %d: total=%.4f (a=%.4f b=%.4f f=%.4f)", step, report.total,
                     report.dice_a, report.dice_b, report.dice_f)
        if out_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_cmff_state(state, out_dir / f"cmff_state_{state.step:06d}.npz")
    ckpts = {name: state.checkpoint(name) for name in state.params}
    if out_dir:
        for name, ck in ckpts.items():
            ck.save(out_dir / f"{name}.npz")
    return ckpts


# -------------------------------------------------------- self reconstruction


@dataclass
class SelfReconState:
    cfg: CmftConfig
    spec: NetworkSpec
    params: dict
    opt: torch.optim.Adam
    step: int = 0


def init_self_recon(cfg: CmftConfig) -> SelfReconState:
    spec = build_generator(cfg.pair_spec.channels, cfg.base_filters, cfg.depth)
    params = {
        name: leaf_params(init_params(spec, derive_seed(cfg.seed, 100 + i)))
        for i, name in enumerate(("g_ab", "g_ba"))
    }
    state = SelfReconState(cfg, spec, params, None)
    state.opt = make_adam(param_list(params["g_ab"], params["g_ba"]), cfg.lr, cfg.betas)
    return state


def self_recon_step(state: SelfReconState, batch) -> tuple:
    """L1 reconstruction of each generator's own input; returns (state, pre-update loss)."""
    a, b = (to_batch(x) for x in batch)
    rec_a, _ = forward(state.spec, state.params["g_ab"], a)
    rec_b, _ = forward(state.spec, state.params["g_ba"], b)
    loss = (rec_a - a).abs().mean() + (rec_b - b).abs().mean()
    _check_finite(recon=loss)
    apply_grads(state.opt, loss, param_list(state.params["g_ab"], state.params["g_ba"]))
    state.step += 1
    return state, _scalar(loss)


def pretrain_self_recon(cfg: CmftConfig, dataset: Sequence[Subject], out_dir=None) -> dict:
    """Generators trained to reproduce their input; drop-in source for init_cmff."""
    from .train_cmft import cmft_batch

    state = init_self_recon(cfg)
    out_dir = Path(out_dir) if out_dir else None
    logf = JsonlLog(out_dir / "self_recon_log.jsonl" if out_dir else None)
    while state.step < cfg.steps:
        step = state.step
        _, loss = self_recon_step(state, cmft_batch(cfg, dataset, step))
        logf.write({"step": step, "phase": "self_recon", "recon": loss})
    ckpts = {}
    for name in ("g_ab", "g_ba"):
        meta = {"phase": "self_recon", "network": name, "seed": cfg.seed, "step": state.step,
                "config_hash": config_hash(cfg), "config": to_dict(cfg)}
        ckpts[name] = Checkpoint(state.params[name], meta)
        if out_dir:
            ckpts[name].save(out_dir / f"{name}.npz")
    return ckpts


__all__ = [
    "CmffConfig", "CmffState", "SegOutput", "init_cmff", "cmff_step", "predict", "run_cmff",
    "pretrain_self_recon", "self_recon_step", "sliding_window", "load_cmff_model",
]
