"""Seeded end-to-end run on the synthetic phantom through the crossmod CLI.

synth -> train-cmft -> train-cmff -> predict -> evaluate, once per variant,
with a shared phase-1 checkpoint. Prints per-region means and writes
summary.json under the output root.

    python scripts/run_phantom_pipeline.py --out runs/phantom --variants full average_fusion
"""
from __future__ import annotations

import argparse
import copy
import json
import time
from pathlib import Path

from crossmod.cli import EXIT_OK, main as cli_main
from crossmod.metrics import read_csv_report

# desk budget: roughly 15 CPU-minutes for two variants
DESK = {
    "synth": {"grid_size": [64, 64, 64], "n_subjects": 20, "n_holdout": 5, "seed": 0},
    "cmft": {"patch": {"size": [16, 16, 16]}, "base_filters": 8, "depth": 2, "lr": 1e-3, "steps": 200, "seed": 0},
    "cmff": {"patch": {"size": [16, 16, 16]}, "base_filters": 8, "depth": 2, "lr": 1e-3, "steps": 2000, "seed": 0},
    "predict": {"window": [16, 16, 16]},
}


def _run(cmd: str, config_path: Path, out: Path) -> None:
    t = time.time()
    code = cli_main([cmd, "-c", str(config_path), "--output-dir", str(out)])
    if code != EXIT_OK:
        raise SystemExit(f"{cmd} exited with {code}")
    print(f"[{cmd}] {time.time() - t:.1f}s", flush=True)


def run_pipeline(out: Path, variants=("full", "average_fusion"), cmft_steps=None, cmff_steps=None, seed=0) -> dict:
    out = Path(out)
    data = out / "data"
    base = copy.deepcopy(DESK)
    base["synth"]["seed"] = seed
    base["cmft"]["seed"] = base["cmff"]["seed"] = seed
    if cmft_steps is not None:
        base["cmft"]["steps"] = cmft_steps
    if cmff_steps is not None:
        base["cmff"]["steps"] = cmff_steps
    base["data_root"] = str(data)
    base["cmff"]["cmft_checkpoint"] = str(out / "shared" / "cmft")
    out.mkdir(parents=True, exist_ok=True)

    cfg_path = out / "shared.json"
    cfg_path.write_text(json.dumps(base, indent=2))
    if not (data / "manifest.json").exists():
        _run("synth", cfg_path, out / "shared")
    if not (out / "shared" / "cmft" / "g_ab.npz").exists():
        _run("train-cmft", cfg_path, out / "shared")

    summary = {}
    for variant in variants:
        cfg = copy.deepcopy(base)
        cfg["cmff"]["variant"] = variant
        vdir = out / variant
        vpath = out / f"{variant}.json"
        vpath.write_text(json.dumps(cfg, indent=2))
        for cmd in ("train-cmff", "predict", "evaluate"):
            _run(cmd, vpath, vdir)
        rows = read_csv_report((vdir / "evaluation" / "metrics.csv").read_text())
        means = {r[1]: dict(zip(("dice", "sensitivity", "specificity", "hd95"), r[2:]))
                 for r in rows if r[0] == "__aggregate__"}
        summary[variant] = means
        print(variant, {k: round(v["dice"], 4) for k, v in means.items()}, flush=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/phantom"))
    ap.add_argument("--variants", nargs="+", default=["full", "average_fusion"])
    ap.add_argument("--cmft-steps", type=int)
    ap.add_argument("--cmff-steps", type=int)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    run_pipeline(args.out, args.variants, args.cmft_steps, args.cmff_steps, args.seed)


if __name__ == "__main__":
    main()
