"""Command-line entry point: ``mtrcnet {gen-data,train,predict,eval}``.

Settings come from built-in defaults, then an optional INI file (``--config``),
then command-line flags. The INI file has up to four sections whose keys are
the field names of the matching dataclass; values are JSON literals where they
parse as such and plain strings otherwise::

    [spec]            ; WorkflowSpec
    noise_level = 0.1
    [arch]            ; ArchConfig
    encoder_channels = [8, 16]
    [plan]            ; TrainPlan
    epochs = [20, 10, 10]
    [data]
    num_videos = 20

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 alignment error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__, presets
from .data import WorkflowSpec, generate_dataset, load_dataset, load_split
from .errors import AlignmentError, ConfigurationError, MTRCError, ParseError, WeightFileError
from .evaluation import evaluate_files, write_report
from .inference import predict_dataset, read_predictions
from .model import ArchConfig
from .training import STRATEGIES, PlateauConfig, TrainPlan, config_hash, run_plan, set_deterministic
from .weights import load_model

log = logging.getLogger("mtrcnet.cli")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_ALIGN = 0, 2, 3, 4
SECTIONS = ("spec", "arch", "plan", "data")
DATA_KEYS = {"num_videos", "train_ratio", "annotation_fps"}


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config(path) -> dict:
    """Parse an INI file into ``{section: {key: value}}``."""
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    return {s: {k: _value(v) for k, v in parser.items(s)} for s in parser.sections()}


def _build(cls, base: dict, overrides: dict):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(overrides) - set(known)
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    merged = dict(base)
    for k, v in overrides.items():
        if isinstance(v, list) and isinstance(known[k].default, tuple):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        merged[k] = v
    try:
        return cls(**merged)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def effective_config(args) -> dict:
    """Defaults + INI file + flags, validated. Returns plain dicts and objects."""
    cfg = {s: {} for s in SECTIONS}
    if getattr(args, "config", None):
        for s, kv in read_config(args.config).items():
            cfg[s].update(kv)
    if getattr(args, "seed", None) is not None:
        cfg["plan"]["seed"] = args.seed
    if getattr(args, "strategy", None) is not None:
        cfg["plan"]["strategy"] = args.strategy
    if getattr(args, "clip_len", None) is not None:
        cfg["plan"]["clip_len"] = args.clip_len
    if getattr(args, "deterministic", False):
        cfg["plan"]["deterministic"] = True
    unknown = set(cfg["data"]) - DATA_KEYS
    if unknown:
        raise ConfigurationError(f"unknown data keys: {sorted(unknown)}")
    plan_kv = dict(cfg["plan"])
    if "plateau" in plan_kv and isinstance(plan_kv["plateau"], dict):
        plan_kv["plateau"] = PlateauConfig(**plan_kv["plateau"])
    return {
        "spec": _build(WorkflowSpec, presets.SPEC, cfg["spec"]),
        "arch": _build(ArchConfig, presets.ARCH, cfg["arch"]),
        "plan": _build(TrainPlan, presets.PLAN, plan_kv),
        "data": {**presets.DATA, **cfg["data"]},
    }


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, payload: dict):
    payload = dict(payload)
    payload["version"] = __version__
    payload["config_hash"] = config_hash({k: v for k, v in payload.items() if k != "outputs"})
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = effective_config(args)
    seed = args.seed if args.seed is not None else 0
    data = cfg["data"]
    generate_dataset(cfg["spec"], int(data["num_videos"]), args.out, seed=seed,
                     train_ratio=float(data["train_ratio"]), annotation_fps=int(data["annotation_fps"]))
    out = Path(args.out)
    files = sorted(p for p in out.iterdir() if p.name != "manifest.json")
    write_manifest(out / "manifest.json", {
        "command": "gen-data", "seed": seed, "spec": cfg["spec"].to_dict(), "data": data,
        "outputs": {p.name: sha256_file(p) for p in files},
    })
    print(f"wrote {int(data['num_videos'])} videos to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = effective_config(args)
    plan, arch = cfg["plan"], cfg["arch"]
    dataset = load_dataset(args.data)
    result = run_plan(plan, dataset, out_dir=args.out, arch=arch)
    out = Path(args.out)
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    manifest.update({"command": "train", "data": str(args.data),
                     "outputs": {p.name: sha256_file(p) for p in result.checkpoints}})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    last = result.log[-1][1] if result.log else None
    print(f"trained {plan.strategy} ({len(result.log)} steps); final loss "
          f"{last.total:.4f}" if last else f"trained {plan.strategy} (no steps)")
    return EXIT_OK


def _video_ids(data_dir, which: str):
    split, _ = load_split(data_dir)
    return {"test": split.test_videos, "train": split.train_videos,
            "all": split.train_videos + split.test_videos}[which]


def cmd_predict(args) -> int:
    if args.deterministic:
        set_deterministic(True)
    model, meta = load_model(args.checkpoint)
    _, videos = load_dataset(args.data)
    ids = _video_ids(args.data, args.videos)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    records = predict_dataset(model, [videos[v] for v in ids], out)
    write_manifest(out.with_suffix(".manifest.json"), {
        "command": "predict", "checkpoint": str(args.checkpoint), "checkpoint_sha256": sha256_file(args.checkpoint),
        "data": str(args.data), "videos": ids, "outputs": {out.name: sha256_file(out)},
    })
    print(f"wrote {len(records)} prediction rows to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .reports import render_report

    ids = _video_ids(args.data, args.videos)
    report = evaluate_files(args.predictions, args.data, ids)
    write_report(report, args.out)
    _, videos = load_dataset(args.data)
    render_report(report, read_predictions(args.predictions), {v: videos[v] for v in ids}, args.out)
    out = Path(args.out)
    write_manifest(out / "manifest.json", {
        "command": "eval", "predictions": str(args.predictions),
        "predictions_sha256": sha256_file(args.predictions), "data": str(args.data), "videos": ids,
    })
    s = report.summary()
    print(f"accuracy {s['mean_accuracy']:.3f} +- {s['std_accuracy']:.3f}  "
          f"PR {s['mean_precision']:.3f}  RE {s['mean_recall']:.3f}  F1 {s['f1']:.3f}  mAP {s['mAP']:.3f}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtrcnet", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file with [spec]/[arch]/[plan]/[data] sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train one strategy")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--strategy", choices=STRATEGIES)
    t.add_argument("--clip-len", type=int)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", parents=[common], help="stream videos through a checkpoint")
    pr.add_argument("--data", type=Path, required=True)
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--out", type=Path, required=True, help="predictions CSV path")
    pr.add_argument("--videos", choices=("test", "train", "all"), default="test")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", parents=[common], help="score predictions and render figures")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--predictions", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--videos", choices=("test", "train", "all"), default="test")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AlignmentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for vid, t in exc.missing:
            print(f"missing\t{vid}\t{t}", file=sys.stderr)
        return EXIT_ALIGN
    except (ParseError, WeightFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigurationError, MTRCError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
