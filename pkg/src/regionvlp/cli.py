"""``regionvlp`` command-line entry point.

Runs are configured by one JSON file whose keys may be overridden with
``--set key=value`` (values parsed as JSON, falling back to plain strings).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import torch

from .alignment import LOSS_TERMS, export_attention, pair_attention
from .cost import estimate_cost, format_report
from .dataset_io import Dataset, DatasetError, make_batch, read_dataset, split_words, tokenize
from .datamodel import ModelConfig
from .retrieval import evaluate_retrieval, write_metrics
from .synthetic import generate_planted_dataset, write_planted
from .training import (
    FINETUNE_SCHEDULE,
    PRETRAIN_SCHEDULE,
    CheckpointError,
    Schedule,
    checkpoint_id,
    fit,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger("regionvlp")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))

# Run keys and their defaults; None means "decided by the command's regime".
RUN_DEFAULTS = {
    "data_dir": None,
    "object_dir": None,
    "object_num": None,
    "num_frames": None,
    "frame_mode": None,
    "load_checkpoint": None,
    "output_dir": None,
    "eval_data_dir": None,
    "direction": "t2v",
    "seed": 0,
    "batch_size": 16,
    "epochs": None,
    "lr": None,
    "decay_epochs": None,
    "decay_factor": None,
    "selection": "sorted",
    "iou_threshold": 0.5,
}
KNOWN_KEYS = tuple(RUN_DEFAULTS) + tuple(k for k in MODEL_KEYS if k not in RUN_DEFAULTS)

# pre-training samples one random frame per video; downstream runs sample 8 uniformly
REGIMES = {
    "pretrain": {"num_frames": 1, "frame_mode": "random", "schedule": PRETRAIN_SCHEDULE},
    "finetune": {"num_frames": 8, "frame_mode": "uniform", "schedule": FINETUNE_SCHEDULE},
    "evaluate": {"num_frames": 8, "frame_mode": "uniform", "schedule": None},
}


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"--config: file not found: {p}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--config: invalid JSON in {p} ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError("--config: top level must be a JSON object")
    return data


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def resolve_config(command: str, raw: dict) -> dict:
    """Fill regime defaults, warn about unknown keys and check value types."""
    unknown = sorted(set(raw) - set(KNOWN_KEYS))
    if unknown:
        log.warning("ignoring unknown config keys %s; known keys: %s", unknown, ", ".join(KNOWN_KEYS))
    cfg = dict(RUN_DEFAULTS)
    cfg.update({k: v for k, v in raw.items() if k in KNOWN_KEYS})
    regime = REGIMES[command]
    for key in ("num_frames", "frame_mode"):
        if cfg[key] is None:
            cfg[key] = regime[key]
    if regime["schedule"] is not None:
        s = regime["schedule"]
        defaults = {"lr": s.base_lr, "decay_epochs": list(s.decay_epochs), "decay_factor": s.decay_factor, "epochs": s.total_epochs}
        for key, value in defaults.items():
            if cfg[key] is None:
                cfg[key] = value
    if cfg["output_dir"] is None:
        cfg["output_dir"] = str(Path("runs") / command)

    for key in ("num_frames", "object_num", "batch_size", "seed"):
        if key == "object_num" and cfg[key] is None:
            continue
        if not isinstance(cfg[key], int) or isinstance(cfg[key], bool) or cfg[key] < (0 if key == "seed" else 1):
            raise ConfigError(f"{key}: expected a positive integer, got {cfg[key]!r}")
    if cfg["frame_mode"] not in ("uniform", "random"):
        raise ConfigError(f"frame_mode: expected 'uniform' or 'random', got {cfg['frame_mode']!r}")
    if cfg["selection"] not in ("sorted", "tracked"):
        raise ConfigError(f"selection: expected 'sorted' or 'tracked', got {cfg['selection']!r}")
    if cfg["direction"] not in ("t2v", "v2t"):
        raise ConfigError(f"direction: expected 't2v' or 'v2t', got {cfg['direction']!r}")
    return cfg


def require_path(cfg: dict, key: str) -> Path:
    value = cfg.get(key)
    if value is None:
        raise ConfigError(f"missing required config key '{key}'")
    path = Path(value)
    if not path.exists():
        raise ConfigError(f"{key}: path not found: {path}")
    return path


def schedule_from(cfg: dict) -> Schedule:
    try:
        return Schedule(float(cfg["lr"]), tuple(cfg["decay_epochs"]), float(cfg["decay_factor"]), int(cfg["epochs"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"lr/decay_epochs/decay_factor/epochs: {exc}") from None


def _model_overrides(cfg: dict) -> dict:
    return {k: cfg[k] for k in MODEL_KEYS if cfg.get(k) is not None}


def model_config_from(cfg: dict, dataset: Dataset) -> ModelConfig:
    values = _model_overrides(cfg)
    values.setdefault("d", dataset.dim)
    values.setdefault("vocab_size", max(dataset.vocab.values()) + 1)
    try:
        return ModelConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model config: {exc}") from None


def load_model(path, cfg: dict):
    """Load a checkpoint, applying any model keys from the run config."""
    if not Path(path).exists():
        raise ConfigError(f"load_checkpoint: path not found: {path}")
    model, optim = load_checkpoint(path)
    overrides = _model_overrides(cfg)
    if overrides:
        try:
            config = replace(model.config, **overrides)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model config: {exc}") from None
        if config != model.config:
            model, optim = load_checkpoint(path, config)
    return model, optim


def _load_dataset(cfg: dict, key: str) -> Dataset:
    path = require_path(cfg, key)
    object_dir = cfg.get("object_dir")
    if object_dir is not None and not Path(object_dir).exists():
        raise ConfigError(f"object_dir: path not found: {object_dir}")
    return read_dataset(path, object_dir)


# ---------------------------------------------------------------------------
# commands


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_training(command: str, raw: dict) -> dict:
    cfg = resolve_config(command, raw)
    dataset = _load_dataset(cfg, "data_dir")
    schedule = schedule_from(cfg)
    if cfg["load_checkpoint"] is not None:
        model, _ = load_model(cfg["load_checkpoint"], cfg)
        if model.config.d != dataset.dim:
            raise ConfigError(f"load_checkpoint: model d={model.config.d} but dataset dim={dataset.dim}")
    else:
        model = None
    config = model.config if model is not None else model_config_from(cfg, dataset)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    snapshot = dict(cfg, command=command, model=config.to_dict())
    _write_json(out / "config.snapshot.json", snapshot)

    header = ["epoch", "lr", *LOSS_TERMS, "total"]
    with open(out / "losses.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)

        def on_epoch(row):
            writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in header[1:]])
            fh.flush()

        result = fit(
            dataset, config, schedule,
            seed=cfg["seed"], batch_size=cfg["batch_size"], num_frames=cfg["num_frames"],
            frame_mode=cfg["frame_mode"], selection=cfg["selection"], iou_threshold=cfg["iou_threshold"],
            model=model, on_epoch=on_epoch,
        )
    result.model.check_finite()
    ckpt = save_checkpoint(result.model, out / "checkpoints" / "final", result.optim)
    metrics = {"command": command, "checkpoint": ckpt.relative_to(out).as_posix(), "checkpoint_id": checkpoint_id(ckpt)}
    metrics["final_losses"] = {k: result.log[-1][k] for k in (*LOSS_TERMS, "total")}
    if cfg["eval_data_dir"] is not None:
        test = _load_dataset(cfg, "eval_data_dir")
        metrics["retrieval"] = evaluate_retrieval(
            result.model, test, cfg["direction"], 8, metrics["checkpoint_id"], cfg["selection"], cfg["iou_threshold"]
        )
    _write_json(out / "metrics.json", metrics)
    return metrics


def run_evaluate(raw: dict) -> dict:
    cfg = resolve_config("evaluate", raw)
    if cfg["load_checkpoint"] is None:
        raise ConfigError("missing required config key 'load_checkpoint' (or --checkpoint)")
    dataset = _load_dataset(cfg, "data_dir")
    model, _ = load_model(cfg["load_checkpoint"], cfg)
    if cfg["frame_mode"] != "uniform":
        log.warning("evaluation always samples frames uniformly; ignoring frame_mode=%s", cfg["frame_mode"])
    report = evaluate_retrieval(
        model, dataset, cfg["direction"], cfg["num_frames"], checkpoint_id(cfg["load_checkpoint"]),
        cfg["selection"], cfg["iou_threshold"],
    )
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.snapshot.json", dict(cfg, command="evaluate", model=model.config.to_dict()))
    write_metrics(out / "metrics.json", report)
    return report


@torch.no_grad()
def run_export_attention(checkpoint, data_dir, video_id, caption, out_path, num_frames=8, object_dir=None) -> dict:
    cfg = {"load_checkpoint": checkpoint, "data_dir": data_dir, "object_dir": object_dir}
    dataset = _load_dataset(cfg, "data_dir")
    model, _ = load_model(require_path(cfg, "load_checkpoint"), {})
    try:
        entry = dataset.entry(video_id)
    except KeyError:
        raise DatasetError(f"unknown video id {video_id!r}") from None
    text = caption if caption is not None else entry.caption
    video = dataset.video(video_id, num_frames, "uniform", 0, model.config.object_num)
    try:
        cap = tokenize(text, dataset.vocab, model.config.max_words)
    except ValueError as exc:
        raise ConfigError(f"--caption: {exc}") from None
    batch = make_batch([(video, cap), (video, cap)], model.config.max_frames)
    r, t = model(batch)
    n, l = video.num_regions, cap.num_words
    attention = pair_attention(r[0, 1 : 1 + n].double(), t[0, 1 : 1 + l].double(), model.config.use_refinement)
    tokens = split_words(text)[:l]
    boxes = [reg.box for reg in video.regions]
    return export_attention(out_path, video_id, text, tokens, boxes, attention, video.source_indices)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regionvlp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("pretrain", "contrastive pre-training"), ("finetune", "fine-tuning from a checkpoint")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--output-dir")

    p = sub.add_parser("evaluate", help="text-video retrieval metrics")
    p.add_argument("--config")
    p.add_argument("--checkpoint", help="checkpoint directory (overrides load_checkpoint)")
    p.add_argument("--direction", choices=("t2v", "v2t"))
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--output-dir")

    p = sub.add_parser("make-synthetic", help="write a planted-correspondence dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--b-train", type=int, default=64)
    p.add_argument("--b-test", type=int, default=32)
    p.add_argument("--n", type=int, default=8, help="regions per video")
    p.add_argument("--l", type=int, default=10, help="words per caption")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--n-concepts", type=int, default=None)
    p.add_argument("--n-fillers", type=int, default=None)
    p.add_argument("--num-frames", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("export-attention", help="dump one pair's region-word attention as JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video-id", required=True)
    p.add_argument("--caption", help="caption text (default: the video's own caption)")
    p.add_argument("--data-dir", help="dataset directory (or data_dir from --config)")
    p.add_argument("--config")
    p.add_argument("--out", help="output JSON path (default attention_<video-id>.json)")
    p.add_argument("--num-frames", type=int, default=8)

    p = sub.add_parser("estimate-cost", help="token count and attention FLOPs, regions vs patches")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--regions-per-frame", type=int, default=30)
    p.add_argument("--patches-per-frame", type=int, default=196)
    p.add_argument("--d", type=int, default=768)
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    return parser


def _raw_config(args) -> dict:
    raw = load_config_file(args.config)
    raw.update(parse_overrides(getattr(args, "set", None)))
    if getattr(args, "output_dir", None):
        raw["output_dir"] = args.output_dir
    if getattr(args, "checkpoint", None):
        raw["load_checkpoint"] = args.checkpoint
    if getattr(args, "direction", None):
        raw["direction"] = args.direction
    return raw


def _dispatch(args) -> int:
    if args.command in ("pretrain", "finetune"):
        metrics = run_training(args.command, _raw_config(args))
        print(json.dumps(metrics, indent=2, sort_keys=True))
    elif args.command == "evaluate":
        print(json.dumps(run_evaluate(_raw_config(args)), indent=2, sort_keys=True))
    elif args.command == "make-synthetic":
        extra = {k: v for k, v in (("n_concepts", args.n_concepts), ("n_fillers", args.n_fillers)) if v is not None}
        try:
            planted = generate_planted_dataset(
                args.b_train, args.b_test, args.n, args.l, args.d, args.noise_sigma,
                seed=args.seed, num_frames=args.num_frames, **extra,
            )
        except ValueError as exc:
            raise ConfigError(f"make-synthetic: {exc}") from None
        root = write_planted(args.out, planted)
        print(root)
    elif args.command == "export-attention":
        data_dir = args.data_dir
        object_dir = None
        if data_dir is None:
            raw = load_config_file(args.config)
            data_dir, object_dir = raw.get("data_dir"), raw.get("object_dir")
        out = args.out or f"attention_{args.video_id}.json"
        run_export_attention(args.checkpoint, data_dir, args.video_id, args.caption, out, args.num_frames, object_dir)
        print(out)
    elif args.command == "estimate-cost":
        try:
            report = estimate_cost(args.frames, args.regions_per_frame, args.patches_per_frame, args.d, args.layers)
        except ValueError as exc:
            raise ConfigError(f"estimate-cost: {exc}") from None
        print(json.dumps(report, indent=2) if args.json else format_report(report))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
