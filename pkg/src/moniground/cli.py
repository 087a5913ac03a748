"""Command-line entry point: gen / train / eval / baseline / report.

One flat key=value config schema drives every command; a config file can
set any key and CLI flags win over the file. All randomness flows from the
single --seed through named sub-streams, so every command is reproducible.
Exit codes: 0 success, 2 usage or config error, 3 data or checkpoint
incompatibility, 4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

from . import evalbench, grounder, synthdata
from .grounder import (
    CheckpointCompatError,
    GroundingModel,
    LossWeights,
    ModelConfig,
    TrainConfig,
    load_model,
    save_model,
    train_model,
)
from .langenc import LangConfig
from .pointenc import EncoderConfig
from .synthdata import DatasetIOError, GenConfig

ENV_DATA_DIR = "MONIGROUND_DATA"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INCOMPATIBLE = 3
EXIT_INVARIANT = 4


class UsageError(RuntimeError):
    pass


class InvariantViolation(RuntimeError):
    pass


def _parse_bool(text: str) -> bool:
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    text = str(text).strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


# key -> (parser, default); the single source of truth for RunConfig keys
SCHEMA: dict = {
    "seed": (int, 0),
    "dataset_dir": (str, ""),
    # generation
    "scene_count": (int, 200),
    "objects_min": (int, 3),
    "objects_max": (int, 6),
    "extent": (float, 48.0),
    "expressions_per_object": (int, 1),
    "ground_points": (int, 320),
    "density_scale": (float, 12000.0),
    "min_points": (int, 16),
    "max_points": (int, 160),
    "color_noise": (float, 0.05),
    "split_train": (float, 0.7),
    "split_val": (float, 0.15),
    "split_test": (float, 0.15),
    # model
    "modality": (str, "xyz+rgb+intensity"),
    "m_candidates": (int, 64),
    "feature_dim": (int, 128),
    "shared_dim": (int, 128),
    "fused_dim": (int, 128),
    "embed_dim": (int, 64),
    "hidden_dim": (int, 64),
    "max_tokens": (int, 48),
    "lambda_fps": (float, 1.0),
    # training
    "epochs": (int, 60),
    "batch_size": (int, 10),
    "learning_rate": (float, 1e-4),
    "weight_decay": (float, 1e-4),
    "decay_epochs": (_parse_int_tuple, (35, 45)),
    "decay_factor": (float, 0.1),
    "lambda_cls": (float, 10.0),
    "lambda_reg": (float, 10.0),
    "lambda_shift": (float, 10.0),
    "lambda_lang": (float, 1.0),
    "lambda_ref": (float, 1.0),
    "run_dir": (str, "runs/default"),
    # evaluation / baselines
    "split": (str, "val"),
    "which": (str, "catrandgt"),
    "noise_center": (float, 0.3),
    "noise_size": (float, 0.05),
    "noise_yaw": (float, 0.05),
    "distractors": (int, 2),
    "report_out": (str, ""),
}


class RunConfig:
    """Flat, schema-validated settings with file and flag overrides."""

    def __init__(self, values: dict):
        self.values = values

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key)

    def echo(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(self.values.items())}


def load_config_file(path: str) -> dict:
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key] = value
    return out


def build_config(file_values: dict, flag_values: dict) -> RunConfig:
    values = {key: default for key, (_, default) in SCHEMA.items()}
    for source in (file_values, flag_values):
        for key, raw in source.items():
            if key not in SCHEMA:
                raise UsageError(f"unknown config key {key!r}")
            parser, _ = SCHEMA[key]
            try:
                values[key] = parser(raw) if not isinstance(raw, tuple) else raw
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad value for {key!r}: {raw!r} ({exc})")
    if not values["dataset_dir"]:
        values["dataset_dir"] = os.environ.get(ENV_DATA_DIR, "data")
    return RunConfig(values)


def gen_config(cfg: RunConfig) -> GenConfig:
    try:
        config = GenConfig(
            scene_count=cfg.scene_count,
            objects_min=cfg.objects_min,
            objects_max=cfg.objects_max,
            extent=cfg.extent,
            expressions_per_object=cfg.expressions_per_object,
            ground_points=cfg.ground_points,
            density_scale=cfg.density_scale,
            min_points=cfg.min_points,
            max_points=cfg.max_points,
            color_noise=cfg.color_noise,
            split_ratios=(cfg.split_train, cfg.split_val, cfg.split_test),
        )
        config.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    return config


def model_config(cfg: RunConfig) -> ModelConfig:
    encoder = EncoderConfig(
        m_candidates=cfg.m_candidates,
        feature_dim=cfg.feature_dim,
        lambda_fps=cfg.lambda_fps,
    )
    lang = LangConfig(embed_dim=cfg.embed_dim, hidden_dim=cfg.hidden_dim, max_len=cfg.max_tokens)
    return ModelConfig(encoder, lang, cfg.shared_dim, cfg.fused_dim, cfg.modality)


def train_config(cfg: RunConfig) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            learning_rate=cfg.learning_rate,
            weight_decay=cfg.weight_decay,
            decay_epochs=cfg.decay_epochs,
            decay_factor=cfg.decay_factor,
            loss_weights=LossWeights(cfg.lambda_cls, cfg.lambda_reg, cfg.lambda_shift,
                                     cfg.lambda_lang, cfg.lambda_ref),
            seed=cfg.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc))


def noise_config(cfg: RunConfig) -> evalbench.NoiseConfig:
    try:
        return evalbench.NoiseConfig(cfg.noise_center, cfg.noise_size, cfg.noise_yaw, cfg.distractors)
    except ValueError as exc:
        raise UsageError(str(exc))


def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _load_dataset(cfg: RunConfig) -> synthdata.Dataset:
    return synthdata.read_dataset(cfg.dataset_dir)


def _split_samples(dataset: synthdata.Dataset, split_name: str):
    if split_name not in synthdata.SPLIT_NAMES:
        raise UsageError(f"unknown split {split_name!r}, expected one of {synthdata.SPLIT_NAMES}")
    samples = dataset.split_samples(split_name)
    if not samples:
        raise DatasetIOError(f"split {split_name!r} has no samples")
    return samples


def _write_report(report: evalbench.EvalReport, path: str) -> None:
    doc = evalbench.report_to_json(report)
    tmp = path + ".tmp"
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(cfg: RunConfig, out) -> int:
    config = gen_config(cfg)
    dataset = synthdata.gen_dataset(cfg.seed, config)
    synthdata.write_dataset(cfg.dataset_dir, dataset)
    splits = dataset.manifest["splits"]
    counts = {name: sum(1 for v in splits.values() if v == name) for name in synthdata.SPLIT_NAMES}
    print(
        f"wrote {len(dataset.scenes)} scenes / {len(dataset.samples)} samples to {cfg.dataset_dir} "
        f"(scene splits: {counts['train']} train, {counts['val']} val, {counts['test']} test)",
        file=out,
    )
    return EXIT_OK


def cmd_train(cfg: RunConfig, out) -> int:
    dataset = _load_dataset(cfg)
    samples = _split_samples(dataset, "train")
    result = train_model(
        dataset.scenes, samples, model_config(cfg), train_config(cfg),
        log=lambda row: print(
            f"epoch {row.epoch:3d} lr {row.lr:.1e} total {row.total:.4f}", file=out
        ),
    )
    run_dir = cfg.run_dir
    ckpt = save_model(run_dir, result.model, result.vocab, {"run_config": cfg.echo()})
    curve_path = os.path.join(run_dir, "loss_curve.csv")
    tmp = curve_path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "lr", "total", "cls", "reg", "shift", "lang", "ref"])
        for row in result.curve:
            writer.writerow([row.epoch, row.lr, row.total, row.cls, row.reg, row.shift, row.lang, row.ref])
    os.replace(tmp, curve_path)
    final = result.curve[-1]
    print(
        f"trained {len(samples)} samples for {final.epoch} epochs in {result.wall_seconds:.1f}s; "
        f"final losses: total {final.total:.4f} cls {final.cls:.4f} reg {final.reg:.4f} "
        f"shift {final.shift:.4f} lang {final.lang:.4f} ref {final.ref:.4f}",
        file=out,
    )
    print(f"checkpoint: {ckpt} (sha256 {_sha256_file(ckpt)[:16]})", file=out)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out) -> int:
    dataset = _load_dataset(cfg)
    samples = _split_samples(dataset, cfg.split)
    model, vocab = load_model(cfg.run_dir)
    ckpt_hash = _sha256_file(os.path.join(cfg.run_dir, "checkpoint.bin"))
    meta = {
        "split": cfg.split,
        "seed": cfg.seed,
        "predictor-id": f"model:{model.config.modality}",
        "checkpoint-hash": ckpt_hash,
        "config": cfg.echo(),
    }
    report = evalbench.evaluate(
        evalbench.model_predictor(model, vocab), dataset.scenes, samples, cfg.seed, meta
    )
    _check_invariants(report)
    path = cfg.report_out or os.path.join(cfg.run_dir, f"report_{cfg.split}.json")
    _write_report(report, path)
    print(evalbench.render_report(report), file=out)
    print(f"report: {path}", file=out)
    return EXIT_OK


def cmd_baseline(cfg: RunConfig, out) -> int:
    dataset = _load_dataset(cfg)
    samples = _split_samples(dataset, cfg.split)
    if cfg.which not in ("catrandgt", "detrand", "detbest"):
        raise UsageError(f"unknown baseline {cfg.which!r} (catrandgt, detrand, detbest)")
    predictor = evalbench.baseline_predictor(cfg.which, noise_config(cfg), cfg.seed)
    meta = {
        "split": cfg.split,
        "seed": cfg.seed,
        "predictor-id": f"baseline:{cfg.which}",
        "checkpoint-hash": "none",
        "config": cfg.echo(),
    }
    report = evalbench.evaluate(predictor, dataset.scenes, samples, cfg.seed, meta)
    _check_invariants(report)
    path = cfg.report_out or os.path.join(cfg.dataset_dir, f"baseline_{cfg.which}_{cfg.split}.json")
    _write_report(report, path)
    print(evalbench.render_report(report), file=out)
    print(f"report: {path}", file=out)
    return EXIT_OK


def cmd_report(cfg: RunConfig, report_path: str, out) -> int:
    if not os.path.isfile(report_path):
        raise DatasetIOError(f"report file not found: {report_path}")
    with open(report_path, encoding="utf-8") as f:
        doc = json.load(f)
    subsets = {
        name: evalbench.SubsetStats(v["count"], v["acc25"], v["acc50"])
        for name, v in doc["subsets"].items()
    }
    report = evalbench.EvalReport(
        subsets,
        doc.get("warnings", []),
        {"split": doc.get("split"), "predictor-id": doc.get("predictor-id")},
    )
    print(evalbench.render_report(report), file=out)
    return EXIT_OK


def _check_invariants(report: evalbench.EvalReport) -> None:
    try:
        evalbench.check_report_invariants(report)
    except AssertionError as exc:
        raise InvariantViolation(str(exc))


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file; flags override it")
    parser.add_argument("--seed", type=int, dest="seed")
    parser.add_argument("--data", dest="dataset_dir", help=f"dataset dir (default ${ENV_DATA_DIR} or ./data)")


_FLAG_KEYS = {
    "gen": ["scene_count", "objects_min", "objects_max", "extent", "expressions_per_object"],
    "train": ["run_dir", "epochs", "batch_size", "learning_rate", "weight_decay", "modality"],
    "eval": ["run_dir", "split", "report_out"],
    "baseline": ["which", "split", "noise_center", "noise_size", "noise_yaw", "distractors", "report_out"],
    "report": [],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moniground",
                                     description="synthetic roadside 3D grounding benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a dataset directory")
    _add_common(p_gen)
    p_gen.add_argument("--out", dest="dataset_dir", help="output dataset dir")
    p_gen.add_argument("--scenes", type=int, dest="scene_count")
    p_gen.add_argument("--objects-min", type=int, dest="objects_min")
    p_gen.add_argument("--objects-max", type=int, dest="objects_max")
    p_gen.add_argument("--expressions", type=int, dest="expressions_per_object")

    p_train = sub.add_parser("train", help="train the grounding model")
    _add_common(p_train)
    p_train.add_argument("--out", dest="run_dir", help="run directory for the checkpoint bundle")
    p_train.add_argument("--epochs", type=int, dest="epochs")
    p_train.add_argument("--batch-size", type=int, dest="batch_size")
    p_train.add_argument("--lr", type=float, dest="learning_rate")
    p_train.add_argument("--weight-decay", type=float, dest="weight_decay")
    p_train.add_argument("--modality", dest="modality",
                         choices=["xyz", "xyz+rgb", "xyz+intensity", "xyz+rgb+intensity"])

    p_eval = sub.add_parser("eval", help="evaluate a trained checkpoint")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", dest="run_dir", help="run directory with checkpoint.bin")
    p_eval.add_argument("--split", dest="split", choices=list(synthdata.SPLIT_NAMES))
    p_eval.add_argument("--report-out", dest="report_out")

    p_base = sub.add_parser("baseline", help="evaluate a constructive baseline")
    _add_common(p_base)
    p_base.add_argument("--which", dest="which", choices=["catrandgt", "detrand", "detbest"])
    p_base.add_argument("--split", dest="split", choices=list(synthdata.SPLIT_NAMES))
    p_base.add_argument("--noise-center", type=float, dest="noise_center")
    p_base.add_argument("--noise-size", type=float, dest="noise_size")
    p_base.add_argument("--noise-yaw", type=float, dest="noise_yaw")
    p_base.add_argument("--distractors", type=int, dest="distractors")
    p_base.add_argument("--report-out", dest="report_out")

    p_rep = sub.add_parser("report", help="render a stored report JSON as a table")
    _add_common(p_rep)
    p_rep.add_argument("--report", required=True, help="path to a report JSON")

    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
        flag_values = {
            key: value
            for key, value in vars(args).items()
            if key in SCHEMA and value is not None
        }
        cfg = build_config(file_values, flag_values)
        if args.command == "gen":
            return cmd_gen(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out)
        if args.command == "baseline":
            return cmd_baseline(cfg, out)
        if args.command == "report":
            return cmd_report(cfg, args.report, out)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetIOError, CheckpointCompatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (InvariantViolation, synthdata.GenerationError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
