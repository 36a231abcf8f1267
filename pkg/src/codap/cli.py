"""Command-line entry point: ``codap <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    SchemaSpec,
    SynthSpec,
    apply_standardization,
    export_csv,
    ingest_csv,
    preprocess,
    split,
    standardize,
    synth_generate,
    write_matrix_csv,
)
from .errors import CodapError, ConfigError
from .evaluation import (
    DEFAULT_LR_GRID,
    DEFAULT_WIDTH_GRID,
    CvConfig,
    correlation_matrix,
    cross_validate,
    evaluate,
    sweep,
)
from .explain import LimeConfig, aggregate, discretize
from .nn import MlpModel, TrainConfig, train
from .scoring import SDS, STAI, ScoringSpec, score_matrix

SECTIONS = {"split", "train", "cv", "sweep", "lime", "scoring", "correlate"}
SCORE_COLUMNS = ("stai_score", "sds_score")


def stage_seed(seed: int, stage: str) -> int:
    """63-bit seed for one pipeline stage, derived from the run seed."""
    digest = hashlib.sha256(f"{seed}/{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path}: invalid JSON ({exc})") from None


def _section(cfg, name, allowed):
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: expected an object")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise ConfigError(f"{name}.{sorted(unknown)[0]}: unknown field")
    return sec


@dataclass
class RunConfig:
    ratios: tuple
    train: TrainConfig
    cv: CvConfig
    sweep_axis: str
    sweep_grid: tuple
    lime: LimeConfig
    stai: ScoringSpec
    sds: ScoringSpec
    correlate_columns: list | None

    def to_dict(self, d_features=None) -> dict:
        lime = self.lime.to_dict()
        if d_features is not None:
            lime["kernel_width"] = self.lime.width(d_features)
        return {
            "split": {"ratios": list(self.ratios)},
            "train": self.train.to_dict(),
            "cv": {"k": self.cv.k, "seed": self.cv.seed},
            "sweep": {"axis": self.sweep_axis, "grid": list(self.sweep_grid)},
            "lime": lime,
            "scoring": {"stai": self.stai.to_dict(), "sds": self.sds.to_dict()},
            "correlate": {"columns": self.correlate_columns},
        }


def load_run_config(path, seed: int) -> RunConfig:
    cfg = _read_json(path, "config") if path else {}
    if not isinstance(cfg, dict):
        raise ConfigError("config: expected a JSON object")
    unknown = set(cfg) - SECTIONS
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown config section")

    sp = _section(cfg, "split", {"ratios"})
    ratios = tuple(sp.get("ratios", (0.7, 0.2, 0.1)))

    train_fields = set(TrainConfig.__dataclass_fields__) - {"seed"}
    tr = _section(cfg, "train", train_fields)
    try:
        train_cfg = TrainConfig(**tr, seed=stage_seed(seed, "train"))
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from None

    cv = _section(cfg, "cv", {"k"})
    cv_cfg = CvConfig(k=cv.get("k", 5), seed=stage_seed(seed, "cv"), train=train_cfg)

    sw = _section(cfg, "sweep", {"axis", "grid"})
    axis = sw.get("axis", "learning_rate")
    if axis not in ("learning_rate", "hidden_width"):
        raise ConfigError(f"sweep.axis: unknown axis {axis!r}")
    default_grid = DEFAULT_LR_GRID if axis == "learning_rate" else DEFAULT_WIDTH_GRID
    grid = tuple(sw.get("grid", default_grid))
    if not grid:
        raise ConfigError("sweep.grid: must not be empty")

    lime_fields = set(LimeConfig.__dataclass_fields__) - {"seed"}
    lm = _section(cfg, "lime", lime_fields)
    try:
        lime_cfg = LimeConfig(**lm, seed=stage_seed(seed, "lime"))
    except TypeError as exc:
        raise ConfigError(f"lime: {exc}") from None

    sc = _section(cfg, "scoring", {"stai", "sds"})
    stai = ScoringSpec.from_dict({"instrument": STAI, **sc.get("stai", {})})
    sds = ScoringSpec.from_dict({"instrument": SDS, **sc.get("sds", {})})

    co = _section(cfg, "correlate", {"columns"})
    columns = co.get("columns")
    return RunConfig(ratios, train_cfg, cv_cfg, axis, grid, lime_cfg, stai, sds, columns)


# ---------------------------------------------------------------------------
# Shared pipeline
# ---------------------------------------------------------------------------


@dataclass
class Prepared:
    features: object  # raw encoded FeatureMatrix
    targets: object
    kept: list
    split: object
    X: np.ndarray  # model-space features (standardized with training stats if enabled)
    mean: np.ndarray | None
    std: np.ndarray | None


def _schema_path(args):
    if args.schema:
        return Path(args.schema)
    data = Path(args.data)
    return data.with_name(data.stem + ".schema.json")


def prepare(args, run: RunConfig, seed: int, stats=None) -> Prepared:
    if not args.data:
        raise ConfigError("--data is required for this command")
    if not Path(args.data).exists():
        raise ConfigError(f"data file not found: {args.data}")
    schema = SchemaSpec.from_dict(_read_json(_schema_path(args), "schema"))
    features, targets, kept = preprocess(ingest_csv(args.data), schema)
    parts = split(features.n_samples, run.ratios, stage_seed(seed, "split"))
    if stats is not None:
        mean, std = stats
    elif run.train.standardize:
        fitted = standardize(features.subset(parts.train_idx))
        mean, std = fitted.mean, fitted.std
    else:
        mean = std = None
    X = features.values if mean is None else apply_standardization(features, mean, std).values
    return Prepared(features, targets, kept, parts, X, mean, std)


def _write_manifest(out: Path, command, args, resolved, seed, outputs, started):
    manifest = {
        "command": command,
        "config": resolved,
        "seed": seed,
        "stage_seeds": {s: stage_seed(seed, s) for s in ("synth", "split", "train", "cv", "lime")},
        "jobs": args.jobs,
        "inputs": {k: getattr(args, k, None) for k in ("config", "data", "schema", "model")},
        "outputs": sorted(outputs),
        "out_dir": str(out),
        "version": __version__,
        "duration_seconds": time.perf_counter() - started,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args, out):
    spec = SynthSpec.from_dict(_read_json(args.config, "synthetic spec")) if args.config \
        else SynthSpec()
    ds = synth_generate(spec, stage_seed(args.seed, "synth"))
    export_csv(ds.table, out / "dataset.csv")
    ds.schema.save(out / "dataset.schema.json")
    return {"synth": spec.to_dict()}, ["dataset.csv", "dataset.schema.json"]


def cmd_preprocess(args, out):
    run = load_run_config(args.config, args.seed)
    p = prepare(args, run, args.seed)
    write_matrix_csv(out / "features.csv", p.features.feature_names, p.features.values)
    write_matrix_csv(out / "targets.csv", p.targets.columns, p.targets.values)
    with open(out / "kept_rows.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "partition"])
        part = {}
        for name, idx in (("train", p.split.train_idx), ("test", p.split.test_idx),
                          ("val", p.split.val_idx)):
            part.update({int(i): name for i in idx})
        for i, row_id in enumerate(p.kept):
            w.writerow([row_id, part[i]])
    return run.to_dict(p.features.n_features), ["features.csv", "targets.csv", "kept_rows.csv"]


def cmd_train(args, out):
    run = load_run_config(args.config, args.seed)
    p = prepare(args, run, args.seed)
    Y = p.targets.values
    tr, te, va = p.split.train_idx, p.split.test_idx, p.split.val_idx
    model, history = train(p.X[tr], Y[tr], run.train, validation=(p.X[va], Y[va]))
    model.input_mean, model.input_std = p.mean, p.std
    model.save(out / "model.json")
    with open(out / "loss_history.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "validation_mse"])
        for e, (a, b) in enumerate(zip(history.train, history.validation), start=1):
            w.writerow([e, repr(a), repr(b)])
    test = evaluate(model, p.X[te], Y[te], run.stai, run.sds)
    _write_json(out / "evaluation.json", {"test": test.to_dict(),
                                          "n_train": len(tr), "n_test": len(te), "n_val": len(va)})
    return run.to_dict(p.features.n_features), ["model.json", "loss_history.csv",
                                                "evaluation.json"]


def cmd_cv(args, out):
    run = load_run_config(args.config, args.seed)
    p = prepare(args, run, args.seed)
    tr = p.split.train_idx
    report = cross_validate(p.X[tr], p.targets.values[tr], run.cv, jobs=args.jobs)
    report.write_csv(out / "cv_report.csv")
    report.write_json(out / "cv_report.json")
    return run.to_dict(p.features.n_features), ["cv_report.csv", "cv_report.json"]


def cmd_sweep(args, out):
    run = load_run_config(args.config, args.seed)
    p = prepare(args, run, args.seed)
    tr = p.split.train_idx
    report = sweep(p.X[tr], p.targets.values[tr], run.sweep_axis, run.sweep_grid, run.cv,
                   jobs=args.jobs)
    report.write_csv(out / "sweep_report.csv")
    report.write_json(out / "sweep_report.json")
    return run.to_dict(p.features.n_features), ["sweep_report.csv", "sweep_report.json"]


def cmd_explain(args, out):
    run = load_run_config(args.config, args.seed)
    if not args.model:
        raise ConfigError("--model is required for explain")
    if not Path(args.model).exists():
        raise ConfigError(f"model file not found: {args.model}")
    model = MlpModel.load(args.model)
    stats = (model.input_mean, model.input_std) if model.input_mean is not None else None
    # A model trained on raw features carries no stats; never re-standardize for it.
    if stats is None:
        run.train = replace(run.train, standardize=False)
    p = prepare(args, run, args.seed, stats=stats)
    binning = discretize(p.X[p.split.train_idx], run.lime.n_bins, p.features.feature_names)
    reports = aggregate(model, (run.stai, run.sds), p.X[p.split.test_idx], binning, run.lime,
                        jobs=args.jobs)
    names = []
    for report in reports:
        name = f"lime_{report.target}.csv"
        report.write_csv(out / name)
        dump = f"lime_{report.target}_iterations.csv"
        report.write_dump(out / dump, binning.feature_names)
        names += [name, dump]
    return run.to_dict(p.features.n_features), names


def cmd_correlate(args, out):
    run = load_run_config(args.config, args.seed)
    p = prepare(args, run, args.seed)
    stai, sds = score_matrix(p.targets.values, run.stai, run.sds)
    names = list(p.features.feature_names) + list(SCORE_COLUMNS)
    values = np.column_stack([p.features.values, stai, sds])
    columns = run.correlate_columns or names
    missing = [c for c in columns if c not in names]
    if missing:
        raise ConfigError(f"correlate.columns: unknown column {missing[0]!r}")
    corr = correlation_matrix(values, [names.index(c) for c in columns])
    with open(out / "correlation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["column"] + list(columns))
        for name, row in zip(columns, corr):
            w.writerow([name] + [repr(float(v)) for v in row])
    resolved = run.to_dict(p.features.n_features)
    resolved["correlate"]["columns"] = list(columns)
    return resolved, ["correlation.csv"]


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "cv": cmd_cv,
    "sweep": cmd_sweep,
    "explain": cmd_explain,
    "correlate": cmd_correlate,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _add_globals(parser, suppress):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=default(0), help="run seed (default 0)")
    parser.add_argument("--jobs", type=int, default=default(1), help="worker processes")
    parser.add_argument("--config", default=default(None), help="JSON config file")
    parser.add_argument("--out", default=default("."), help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="codap", description=__doc__.splitlines()[0])
    _add_globals(parser, suppress=False)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _add_globals(p, suppress=True)
        if name != "synth":
            p.add_argument("--data", help="survey CSV")
            p.add_argument("--schema", help="schema JSON (default: <data>.schema.json)")
        if name == "explain":
            p.add_argument("--model", help="model JSON written by `train`")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for attr in ("data", "schema", "model"):
        if not hasattr(args, attr):
            setattr(args, attr, None)
    if args.seed < 0:
        print("codap: error: --seed must be non-negative", file=sys.stderr)
        return 2
    if args.jobs < 1:
        print("codap: error: --jobs must be >= 1", file=sys.stderr)
        return 2
    out = Path(args.out)
    started = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        resolved, outputs = COMMANDS[args.command](args, out)
    except ConfigError as exc:
        print(f"codap: config error: {exc}", file=sys.stderr)
        return 2
    except (CodapError, ArithmeticError, OSError) as exc:
        print(f"codap: error: {exc}", file=sys.stderr)
        return 1
    _write_manifest(out, args.command, args, resolved, args.seed, outputs, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
