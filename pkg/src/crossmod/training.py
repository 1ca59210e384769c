"""Pieces shared by both trainers: seeding, optimizer state I/O, logs, batching."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np
import torch

from .volume import Volume


def derive_seed(*parts: int) -> int:
    ss = np.random.SeedSequence([int(p) & 0xFFFF_FFFF_FFFF_FFFF for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def set_strict(strict: bool = True) -> None:
    """Force deterministic kernels (used by tests and the CLI's strict mode)."""
    torch.use_deterministic_algorithms(strict)


def epoch_order(seed: int, n: int, step: int, stream: int = 0) -> int:
    """Index of the item drawn at ``step`` from a reshuffled-per-epoch stream."""
    epoch, pos = divmod(step, n)
    perm = np.random.default_rng([seed, epoch, stream]).permutation(n)
    return int(perm[pos])


def to_batch(x) -> torch.Tensor:
    if isinstance(x, Volume):
        return torch.from_numpy(np.array(x.data, dtype=np.float32))[None]
    x = torch.as_tensor(x)
    return x if x.dim() == 5 else x[None]


def leaf_params(params: Mapping) -> dict:
    return {
        lid: {k: torch.as_tensor(v).detach().clone().float().requires_grad_(True) for k, v in p.items()}
        for lid, p in params.items()
    }


def param_list(*param_maps: Mapping) -> list:
    return [t for p in param_maps for lid in sorted(p) for _, t in sorted(p[lid].items())]


def apply_grads(opt: torch.optim.Optimizer, loss: torch.Tensor, params: list) -> None:
    """Step ``opt`` on the gradient of ``loss`` w.r.t. ``params`` only."""
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g
    opt.step()
    for p in params:
        p.grad = None


def make_adam(params: list, lr: float, betas) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=tuple(betas))


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def adam_state_arrays(opt: torch.optim.Adam, params: list, prefix: str) -> dict:
    out = {}
    for i, p in enumerate(params):
        st = opt.state.get(p)
        if not st:
            continue
        out[f"{prefix}/{i}/step"] = np.asarray(float(st["step"]), dtype=np.float64)
        out[f"{prefix}/{i}/exp_avg"] = st["exp_avg"].numpy().copy()
        out[f"{prefix}/{i}/exp_avg_sq"] = st["exp_avg_sq"].numpy().copy()
    return out


def load_adam_state(opt: torch.optim.Adam, params: list, arrays: Mapping, prefix: str) -> None:
    for i, p in enumerate(params):
        key = f"{prefix}/{i}/step"
        if key not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(np.asarray(arrays[key]).item(), dtype=torch.float32),
            "exp_avg": torch.from_numpy(np.array(arrays[f"{prefix}/{i}/exp_avg"])),
            "exp_avg_sq": torch.from_numpy(np.array(arrays[f"{prefix}/{i}/exp_avg_sq"])),
        }


class JsonlLog:
    """Line-delimited JSON training log; ``truncate_at`` drops records at or after a resume step."""

    def __init__(self, path: Optional[Path], truncate_at: Optional[int] = None):
        self.path = Path(path) if path else None
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        keep = []
        if truncate_at is not None and self.path.exists():
            keep = [
                line for line in self.path.read_text().splitlines()
                if line and json.loads(line)["step"] < truncate_at
            ]
        self.path.write_text("".join(line + "\n" for line in keep))

    def write(self, record: Mapping) -> None:
        if self.path is None:
            return
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_log(path) -> list:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]


def moving_average(values: Iterable[float], window: int) -> np.ndarray:
    v = np.asarray(list(values), dtype=float)
    if v.size < window:
        return np.array([v.mean()]) if v.size else v
    return np.convolve(v, np.ones(window) / window, mode="valid")
