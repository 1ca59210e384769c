"""Phase 1: unpaired translation between the two modality pairs.

Two U-Net generators (A->B, B->A) and two patch discriminators are trained
with least-squares adversarial losses plus an L1 cycle-consistency term.
Each step updates both generators first, then both discriminators on the
same (detached) fake volumes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import config_hash, from_dict, to_dict
from .data import PatchSpec, Subject, build_pair_input, sample_patch
from .losses import (
    DEFAULT_LAMBDA,
    adv_loss_discriminator,
    adv_loss_generator,
    cmft_total,
    cycle_loss,
)
from .nets import (
    DISCRIMINATOR_MIN_SIZE,
    Checkpoint,
    NetworkSpec,
    build_discriminator,
    build_generator,
    flatten,
    forward,
    init_params,
    load_arrays,
    pad_to_min,
    save_arrays,
    unflatten,
)
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
from .volume import ModalityPairSpec

log = logging.getLogger(__name__)

GENERATORS = ("g_ab", "g_ba")
DISCRIMINATORS = ("d_a", "d_b")


@dataclass(frozen=True)
class CmftConfig:
    pair_spec: ModalityPairSpec = field(default_factory=ModalityPairSpec)
    patch: PatchSpec = field(default_factory=PatchSpec)
    base_filters: int = 16
    depth: int = 3
    lam: float = DEFAULT_LAMBDA
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    # off by default: size of the generated-sample history fed to the discriminators
    replay_buffer: int = 0
    # off by default: linear decay of the learning rate to zero over `steps`
    lr_decay: bool = False

    def __post_init__(self):
        if isinstance(self.pair_spec, dict):
            object.__setattr__(self, "pair_spec", ModalityPairSpec(**self.pair_spec))
        if isinstance(self.patch, dict):
            object.__setattr__(self, "patch", PatchSpec(**self.patch))
        problems = []
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if self.steps < 0:
            problems.append("steps must be >= 0")
        if self.lam < 0:
            problems.append("lam must be >= 0")
        if self.depth < 1 or self.base_filters < 1:
            problems.append("depth and base_filters must be >= 1")
        elif any(s % 2**self.depth for s in self.patch.size):
            problems.append(f"patch size {self.patch.size} must be divisible by 2**depth = {2**self.depth}")
        if self.checkpoint_every < 0 or self.replay_buffer < 0:
            problems.append("checkpoint_every and replay_buffer must be >= 0")
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def from_dict(cls, data, where: str = "cmft") -> "CmftConfig":
        return from_dict(cls, data, where)


@dataclass
class CmftState:
    cfg: CmftConfig
    gen_spec: NetworkSpec
    disc_spec: NetworkSpec
    params: dict
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    step: int = 0
    replay: dict = field(default_factory=lambda: {"a": [], "b": []})

    @property
    def g_params(self) -> list:
        return param_list(*(self.params[n] for n in GENERATORS))

    @property
    def d_params(self) -> list:
        return param_list(*(self.params[n] for n in DISCRIMINATORS))

    def set_lr(self, lr: float) -> None:
        set_lr(self.opt_g, lr)
        set_lr(self.opt_d, lr)

    def checkpoint(self, name: str) -> Checkpoint:
        meta = {
            "phase": "cmft",
            "network": name,
            "seed": self.cfg.seed,
            "step": self.step,
            "config_hash": config_hash(self.cfg),
            "config": to_dict(self.cfg),
        }
        return Checkpoint(self.params[name], meta)


def init_cmft_state(cfg: CmftConfig) -> CmftState:
    c = cfg.pair_spec.channels
    gen = build_generator(c, cfg.base_filters, cfg.depth)
    disc = build_discriminator(c)
    params = {}
    for i, name in enumerate(GENERATORS + DISCRIMINATORS):
        spec = gen if name in GENERATORS else disc
        params[name] = leaf_params(init_params(spec, derive_seed(cfg.seed, 100 + i)))
    state = CmftState(cfg, gen, disc, params, None, None)
    state.opt_g = make_adam(state.g_params, cfg.lr, cfg.betas)
    state.opt_d = make_adam(state.d_params, cfg.lr, cfg.betas)
    return state


def _score(state: CmftState, name: str, x: torch.Tensor) -> torch.Tensor:
    # patches smaller than the discriminator's 32^3 minimum are zero-padded (zero = background after z-scoring)
    out, _ = forward(state.disc_spec, state.params[name], pad_to_min(x, DISCRIMINATOR_MIN_SIZE))
    return out


def _replay(state: CmftState, key: str, fake: torch.Tensor) -> torch.Tensor:
    size = state.cfg.replay_buffer
    if size == 0:
        return fake
    buf = state.replay[key]
    rng = np.random.default_rng([state.cfg.seed, state.step, 7 if key == "a" else 8])
    if len(buf) < size:
        buf.append(fake.clone())
        return fake
    if rng.random() < 0.5:
        i = int(rng.integers(size))
        old, buf[i] = buf[i], fake.clone()
        return old
    return fake


def cmft_step(state: CmftState, batch):
    """One generator update followed by one discriminator update.

    ``batch`` is (a, b): pair-A and pair-B inputs, possibly from different
    subjects. Parameters are updated in place; the returned report holds the
    losses evaluated before the update.
    """
    a, b = (to_batch(x) for x in batch)
    gen, P = state.gen_spec, state.params
    if state.cfg.lr_decay and state.cfg.steps:
        state.set_lr(state.cfg.lr * max(0.0, 1.0 - state.step / state.cfg.steps))

    fake_b, _ = forward(gen, P["g_ab"], a)
    rec_a, _ = forward(gen, P["g_ba"], fake_b)
    fake_a, _ = forward(gen, P["g_ba"], b)
    rec_b, _ = forward(gen, P["g_ab"], fake_a)
    adv_g_ab = adv_loss_generator(_score(state, "d_b", fake_b))
    adv_g_ba = adv_loss_generator(_score(state, "d_a", fake_a))
    cyc = cycle_loss(a, rec_a, b, rec_b)
    total_g = adv_g_ab + adv_g_ba + state.cfg.lam * cyc

    pool_a = _replay(state, "a", fake_a.detach())
    pool_b = _replay(state, "b", fake_b.detach())
    adv_d_a = adv_loss_discriminator(_score(state, "d_a", a), _score(state, "d_a", pool_a))
    adv_d_b = adv_loss_discriminator(_score(state, "d_b", b), _score(state, "d_b", pool_b))

    report = cmft_total(adv_g_ab, adv_g_ba, adv_d_a, adv_d_b, cyc, state.cfg.lam)
    apply_grads(state.opt_g, total_g, state.g_params)
    apply_grads(state.opt_d, adv_d_a + adv_d_b, state.d_params)
    state.step += 1
    return state, report


def _patch_for(cfg_patch: PatchSpec, subject: Subject, seed: int) -> PatchSpec:
    rule = cfg_patch.foreground_rule
    if subject.label is None and rule == "tumor_overlap":
        rule = "brain_overlap"
    return PatchSpec(cfg_patch.size, rule, seed)


def cmft_batch(cfg: CmftConfig, dataset: Sequence[Subject], step: int):
    """Unpaired (a, b) volumes for ``step``; A and B come from independently shuffled subject streams."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    out = []
    for stream, pair in enumerate((cfg.pair_spec.pair_a, cfg.pair_spec.pair_b)):
        subj = dataset[epoch_order(cfg.seed, n, step, stream)]
        spec = _patch_for(cfg.patch, subj, derive_seed(cfg.seed, step, stream))
        vols, _ = sample_patch(subj.volumes, subj.label, spec)
        out.append(build_pair_input(vols, pair))
    return tuple(out)


def save_cmft_state(state: CmftState, path) -> None:
    arrays = {}
    for name in GENERATORS + DISCRIMINATORS:
        arrays.update(flatten(state.params[name], f"params/{name}/"))
    arrays.update(adam_state_arrays(state.opt_g, state.g_params, "optim/g"))
    arrays.update(adam_state_arrays(state.opt_d, state.d_params, "optim/d"))
    for key, buf in state.replay.items():
        for i, t in enumerate(buf):
            arrays[f"replay/{key}/{i:04d}"] = t.numpy().copy()
    meta = {"phase": "cmft", "kind": "state", "step": state.step, "seed": state.cfg.seed,
            "config_hash": config_hash(state.cfg), "config": to_dict(state.cfg)}
    save_arrays(path, arrays, meta)


def load_cmft_state(path, cfg: Optional[CmftConfig] = None) -> CmftState:
    arrays, meta = load_arrays(path)
    if cfg is None:
        cfg = CmftConfig.from_dict(meta["config"])
    elif meta["config_hash"] != config_hash(cfg):
        log.warning("resuming %s under a different config (hash %s != %s)", path, meta["config_hash"], config_hash(cfg))
    state = init_cmft_state(cfg)
    for name in GENERATORS + DISCRIMINATORS:
        loaded = unflatten(arrays, f"params/{name}/")
        with torch.no_grad():
            for lid, p in state.params[name].items():
                for k, t in p.items():
                    t.copy_(loaded[lid][k])
    load_adam_state(state.opt_g, state.g_params, arrays, "optim/g")
    load_adam_state(state.opt_d, state.d_params, arrays, "optim/d")
    for key in state.replay:
        names = sorted(k for k in arrays if k.startswith(f"replay/{key}/"))
        state.replay[key] = [torch.from_numpy(np.array(arrays[k])) for k in names]
    state.step = int(meta["step"])
    return state


def run_cmft(cfg: CmftConfig, dataset: Sequence[Subject], out_dir=None, resume_from=None) -> dict:
    """Train both generators/discriminators for ``cfg.steps`` steps.

    Returns ``{"g_ab": Checkpoint, "g_ba": Checkpoint}``. With ``out_dir`` a
    per-step JSON-lines log, periodic full-state files and the final
    generator checkpoints are written there.
    """
    state = load_cmft_state(resume_from, cfg) if resume_from else init_cmft_state(cfg)
    out_dir = Path(out_dir) if out_dir else None
    logf = JsonlLog(out_dir / "cmft_log.jsonl" if out_dir else None, truncate_at=state.step)
    while state.step < cfg.steps:
        step = state.step
        _, report = cmft_step(state, cmft_batch(cfg, dataset, step))
        logf.write({"step": step, "phase": "cmft", **report.to_log()})
        if step % 50 == 0:
            log.info("cmft step %d: total_g=%.4f total_d=%.4f cyc=%.4f", step, report.total_g, report.total_d, report.cyc)
        if out_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_cmft_state(state, out_dir / f"cmft_state_{state.step:06d}.npz")
    ckpts = {name: state.checkpoint(name) for name in GENERATORS}
    if out_dir:
        for name, ck in ckpts.items():
            ck.save(out_dir / f"{name}.npz")
    return ckpts
