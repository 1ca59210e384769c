"""Command-line entry point: ``crossmod {synth,train-cmft,train-cmff,predict,evaluate}``.

Every command reads a JSON config file (``--config``); ``--set section.key=value``
overrides single keys (values parsed as JSON when possible). The output root
comes from ``--output-dir``, else ``$CROSSMOD_OUTPUT_ROOT``, else the config's
``output_dir``. Exit codes: 0 success, 1 invalid config, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .config import ConfigError, from_dict, to_dict
from .data import PhantomConfig, discover_subjects, load_dataset, read_nifti, synth_phantom
from .metrics import aggregate, evaluate_subject
from .train_cmff import CmffConfig, load_cmff_model, predict, run_cmff, write_prediction
from .train_cmft import CmftConfig, run_cmft
from .training import set_strict
from .volume import LabelVolume

log = logging.getLogger("crossmod")

ENV_OUTPUT_ROOT = "CROSSMOD_OUTPUT_ROOT"
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
RESOLVED_NAME = "resolved_config.json"


@dataclass
class RunConfig:
    data_root: Optional[str] = None
    output_dir: str = "runs"
    strict_deterministic: bool = True
    synth: dict = field(default_factory=dict)
    cmft: dict = field(default_factory=dict)
    cmff: dict = field(default_factory=dict)
    predict: dict = field(default_factory=dict)
    evaluate: dict = field(default_factory=dict)


# keys each command section accepts beyond its dataclass fields
_RUN_KEYS = {
    "cmft": {"split": "train", "resume_from": None},
    "cmff": {"split": "train", "resume_from": None},
}
_PREDICT_DEFAULTS = {"checkpoint_dir": None, "split": "test", "window": None, "brain_mask": True}
_EVALUATE_DEFAULTS = {"predictions_dir": None, "split": "test"}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(path: Optional[str], overrides=(), output_dir: Optional[str] = None) -> RunConfig:
    raw = json.loads(Path(path).read_text()) if path else {}
    problems = []
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            problems.append(f"--set {item}: expected key=value")
            continue
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = _parse_value(value)
    if problems:
        raise ConfigError(problems)
    cfg = from_dict(RunConfig, raw)
    root = output_dir or os.environ.get(ENV_OUTPUT_ROOT)
    if root:
        cfg.output_dir = root
    return cfg


def _split_section(section: dict, extra: dict, where: str):
    """Separate command-only keys from dataclass keys."""
    section = dict(section)
    opts = {k: section.pop(k, v) for k, v in extra.items()}
    return section, opts


def _require_dir(problems: list, key: str, path) -> None:
    if path is None:
        problems.append(f"{key}: required")
    elif not Path(path).is_dir():
        problems.append(f"{key}: no such directory {path}")


def _require_data(problems: list, cfg: RunConfig, split: Optional[str]) -> None:
    if cfg.data_root is None:
        problems.append("data_root: required")
        return
    base = Path(cfg.data_root) / split if split else Path(cfg.data_root)
    if not base.is_dir():
        problems.append(f"data_root: no such directory {base}")


def _parse(problems: list, cls, section: dict, where: str):
    try:
        return cls.from_dict(section, where) if hasattr(cls, "from_dict") else from_dict(cls, section, where)
    except ConfigError as e:
        problems.extend(e.problems)
        return None


def _write_resolved(out: Path, cfg: RunConfig, command: str, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "run": to_dict(cfg), "resolved": resolved}
    (out / RESOLVED_NAME).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands


def cmd_synth(cfg: RunConfig) -> int:
    problems = []
    section = dict(cfg.synth)
    out = section.pop("out_dir", None) or cfg.data_root
    if out is None:
        problems.append("synth.out_dir: required (or set data_root)")
    pc = _parse(problems, PhantomConfig, section, "synth")
    if problems:
        raise ConfigError(problems)
    records = synth_phantom(pc, out)
    _write_resolved(Path(out), cfg, "synth", to_dict(pc))
    log.info("wrote %d phantom subjects to %s", len(records), out)
    return EXIT_OK


def _validate_training(cfg: RunConfig, phase: str):
    problems = []
    section, opts = _split_section(getattr(cfg, phase), _RUN_KEYS[phase], phase)
    tc = _parse(problems, CmftConfig if phase == "cmft" else CmffConfig, section, phase)
    _require_data(problems, cfg, opts["split"])
    if phase == "cmff" and tc is not None and tc.needs_source:
        _require_dir(problems, "cmff.cmft_checkpoint", tc.cmft_checkpoint)
        if tc.cmft_checkpoint and Path(tc.cmft_checkpoint).is_dir():
            for name in ("g_ab", "g_ba"):
                if not (Path(tc.cmft_checkpoint) / f"{name}.npz").exists():
                    problems.append(f"cmff.cmft_checkpoint: {name}.npz missing in {tc.cmft_checkpoint}")
    if opts["resume_from"] is not None and not Path(opts["resume_from"]).is_file():
        problems.append(f"{phase}.resume_from: no such file {opts['resume_from']}")
    if problems:
        raise ConfigError(problems)
    return tc, opts


def cmd_train_cmft(cfg: RunConfig) -> int:
    tc, opts = _validate_training(cfg, "cmft")
    data = load_dataset(discover_subjects(cfg.data_root, opts["split"]))
    out = Path(cfg.output_dir) / "cmft"
    _write_resolved(out, cfg, "train-cmft", {**to_dict(tc), **opts})
    run_cmft(tc, data, out, resume_from=opts["resume_from"])
    return EXIT_OK


def cmd_train_cmff(cfg: RunConfig) -> int:
    tc, opts = _validate_training(cfg, "cmff")
    data = load_dataset(discover_subjects(cfg.data_root, opts["split"]))
    unlabeled = [s.subject_id for s in data if s.label is None]
    if unlabeled:
        raise ConfigError([f"data_root: subjects without labels: {', '.join(unlabeled)}"])
    out = Path(cfg.output_dir) / "cmff"
    _write_resolved(out, cfg, "train-cmff", {**to_dict(tc), **opts})
    run_cmff(tc, data, out, resume_from=opts["resume_from"])
    return EXIT_OK


def cmd_predict(cfg: RunConfig) -> int:
    problems = []
    opts = {**_PREDICT_DEFAULTS, **cfg.predict}
    unknown = set(opts) - set(_PREDICT_DEFAULTS)
    problems += [f"predict.{k}: unknown key" for k in sorted(unknown)]
    ckdir = opts["checkpoint_dir"] or str(Path(cfg.output_dir) / "cmff")
    _require_dir(problems, "predict.checkpoint_dir", ckdir)
    if Path(ckdir).is_dir() and not (Path(ckdir) / "seg_a.npz").exists():
        problems.append(f"predict.checkpoint_dir: no seg_a.npz in {ckdir}")
    _require_data(problems, cfg, opts["split"])
    if problems:
        raise ConfigError(problems)
    state = load_cmff_model(ckdir)
    records = discover_subjects(cfg.data_root, opts["split"])
    out = Path(cfg.output_dir) / "predictions"
    _write_resolved(out, cfg, "predict", {**opts, "checkpoint_dir": ckdir})
    for subj in load_dataset(records):
        seg = predict(state, subj.volumes, opts["window"], bool(opts["brain_mask"]))
        write_prediction(seg, out / f"{subj.subject_id}_pred.nii.gz")
        log.info("predicted %s", subj.subject_id)
    return EXIT_OK


def find_prediction(pred_dir: Path, sid: str) -> Optional[Path]:
    for cand in (
        pred_dir / f"{sid}_pred.nii.gz",
        pred_dir / f"{sid}_seg.nii.gz",
        pred_dir / sid / f"{sid}_seg.nii.gz",
        pred_dir / sid / f"{sid}_pred.nii.gz",
    ):
        if cand.exists():
            return cand
    return None


def cmd_evaluate(cfg: RunConfig) -> int:
    problems = []
    opts = {**_EVALUATE_DEFAULTS, **cfg.evaluate}
    problems += [f"evaluate.{k}: unknown key" for k in sorted(set(opts) - set(_EVALUATE_DEFAULTS))]
    pred_dir = Path(opts["predictions_dir"] or Path(cfg.output_dir) / "predictions")
    _require_dir(problems, "evaluate.predictions_dir", pred_dir)
    _require_data(problems, cfg, opts["split"])
    if problems:
        raise ConfigError(problems)
    records = discover_subjects(cfg.data_root, opts["split"])
    no_label = [r.subject_id for r in records if r.label_path is None]
    pairs = {r.subject_id: (find_prediction(pred_dir, r.subject_id), r.label_path) for r in records}
    missing = sorted(sid for sid, (p, _) in pairs.items() if p is None)
    if missing or no_label:
        raise ConfigError(
            ([f"evaluate.predictions_dir: no prediction for {', '.join(missing)}"] if missing else [])
            + ([f"data_root: no ground truth for {', '.join(no_label)}"] if no_label else [])
        )
    reports = {}
    for sid, (p, g) in pairs.items():
        pd_, ps = read_nifti(p)
        gd, gs = read_nifti(g)
        reports[sid] = evaluate_subject(LabelVolume(pd_, ps), LabelVolume(gd, gs))
    report = aggregate(reports)
    out = Path(cfg.output_dir) / "evaluation"
    _write_resolved(out, cfg, "evaluate", {**opts, "predictions_dir": str(pred_dir)})
    (out / "metrics.csv").write_text(report.to_csv())
    for region, vals in report.region_means.items():
        log.info("%s: dice=%.4f hd95=%.3f", region, vals["dice"], vals["hd95"])
    print(json.dumps({"region_means": report.region_means, "average": report.average}, indent=2))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train-cmft": cmd_train_cmft,
    "train-cmff": cmd_train_cmff,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossmod", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. cmft.steps=200")
        p.add_argument("--output-dir", help=f"output root (overrides ${ENV_OUTPUT_ROOT} and the config)")
        p.add_argument("--data-root", help="dataset root (overrides the config)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        overrides = list(args.set)
        if args.data_root:
            overrides.append(f"data_root={json.dumps(args.data_root)}")
        cfg = load_run_config(args.config, overrides, args.output_dir)
        set_strict(cfg.strict_deterministic)
        return COMMANDS[args.command](copy.deepcopy(cfg))
    except ConfigError as e:
        for line in e.problems:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001 - any failure after validation is a runtime error
        log.exception("%s failed", args.command)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        set_strict(False)


if __name__ == "__main__":
    sys.exit(main())
