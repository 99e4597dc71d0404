"""Command-line interface: reproducible pipeline commands with JSON configs.

Commands: synth | featurize | train | eval-loso | eval-crosstime |
eval-nshot | ablate | report.  Each command reads an optional JSON config,
applies flag overrides (flag > file > default), writes ``manifest.json``
before any result file, then emits results as CSV/JSON (and SVG for
``report``).  No environment variables are consulted; reruns with the same
config and seed produce byte-identical CSV/JSON artifacts.

Exit codes: 0 when the run completes and all invariant checks pass; 2 for
config, input, or validation failures (with field-level diagnostics on
stderr).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from eegmatch import __version__
from eegmatch import autodiff as ad
from eegmatch.errors import ConfigError, FormatError, ValidationError
from eegmatch.featurize import FeaturizeConfig, assemble_samples, save_features
from eegmatch.recordings import SynthConfig, generate_synthetic, load_recording, save_recording
from eegmatch.reports import (file_sha256, read_rows_csv, svg_bar_chart,
                              svg_line_chart, write_manifest, write_rows_csv,
                              write_summary_json)
from eegmatch.training import (NSHOT_DEFAULT_GRID, RunConfig, run_ablation,
                               run_crosstime, run_loso, run_nshot, run_train)

_CLI_ERRORS = (ConfigError, ValidationError, FormatError)

_FOLD_COLUMNS = ("fold", "descriptor", "accuracy", "n_train", "n_adapt",
                 "n_test", "best_epoch", "epochs_run", "best_val_acc",
                 "bank_hash", "arm")
_NSHOT_COLUMNS = ("fold", "n_shot") + _FOLD_COLUMNS[1:]
_CROSSTIME_COLUMNS = ("fold", "experiment") + _FOLD_COLUMNS[1:]
_ABLATION_COLUMNS = ("fold", "descriptor", "n_train", "n_test",
                     "acc_classifier", "acc_matching", "delta", "bank_hash")
_TABLE_COLUMNS = ("method", "acc", "std")


# -- config plumbing ----------------------------------------------------------------

def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{p}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top-level JSON value must be an object")
    return doc


def _expect_keys(doc: dict, allowed: Sequence[str], command: str) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(
            f"{command} config: unknown fields {unknown}; allowed fields are "
            f"{sorted(allowed)}")


def _input_path(doc: dict, command: str) -> Path:
    raw = doc.get("input")
    if raw is None:
        raise ConfigError(f"{command} config: missing required field 'input' "
                          f"(path to a recording container)")
    path = Path(raw)
    if not path.is_file():
        raise ConfigError(f"{command} config: input file not found: {path}")
    return path


def _section(doc: dict, key: str) -> dict:
    sub = doc.get(key, {})
    if not isinstance(sub, dict):
        raise ConfigError(f"config field {key!r} must be an object")
    return dict(sub)


def _run_config(doc: dict, args) -> RunConfig:
    """Build the RunConfig with flag > file > default precedence."""
    run = _section(doc, "run")
    if args.seed is not None:
        run["seed"] = args.seed
    if getattr(args, "grid", None) is not None:
        feat = dict(run.get("featurize", {}))
        feat["out_h"] = args.grid
        feat["out_w"] = args.grid
        run["featurize"] = feat
        model = dict(run.get("model", {}))
        model["in_h"] = args.grid
        model["in_w"] = args.grid
        run["model"] = model
    return RunConfig.from_dict(run)


def _bank_spec(doc: dict, args) -> str:
    spec = getattr(args, "bank", None) or doc.get("bank", "stub")
    if spec != "stub" and not Path(spec).is_file():
        raise ConfigError(f"bank file not found: {spec}")
    return str(spec)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolved(command: str, **sections) -> dict:
    return {"command": command, "version": __version__, **sections}


# -- commands -----------------------------------------------------------------------

def _cmd_synth(args) -> int:
    doc = _load_config(args.config)
    _expect_keys(doc, ("synth",), "synth")
    synth = _section(doc, "synth")
    if args.seed is not None:
        synth["seed"] = args.seed
    cfg = SynthConfig.from_dict(synth) if synth else SynthConfig()
    out = _out_dir(args)
    write_manifest(out, "synth", _resolved("synth", synth=cfg.to_dict()))
    rec = generate_synthetic(cfg)
    rec_path = out / "recording.eegc"
    save_recording(rec, rec_path)
    write_summary_json(out / "summary.json", {
        "command": "synth",
        "n_trials": len(rec.trials),
        "labels": list(rec.label_set),
        "recording": rec_path.name,
        "recording_sha256": file_sha256(rec_path),
    })
    print(f"synth: wrote {len(rec.trials)} trials to {rec_path}")
    return 0


def _cmd_featurize(args) -> int:
    doc = _load_config(args.config)
    _expect_keys(doc, ("input", "featurize"), "featurize")
    input_path = _input_path(doc, "featurize")
    feat = _section(doc, "featurize")
    if args.grid is not None:
        feat["out_h"] = args.grid
        feat["out_w"] = args.grid
    cfg = FeaturizeConfig.from_dict(feat)
    out = _out_dir(args)
    write_manifest(out, "featurize",
                   _resolved("featurize", featurize=cfg.to_dict(),
                             input=str(input_path)),
                   inputs={"recording": input_path})
    rec = load_recording(input_path, band_ceiling_hz=cfg.band_set.ceiling_hz)
    samples = assemble_samples(rec, cfg)
    feat_path = out / "features.eegf"
    save_features(samples, cfg, rec.label_set, feat_path)
    write_summary_json(out / "summary.json", {
        "command": "featurize",
        "n_samples": len(samples),
        "sample_shape": list(samples[0].de.shape) if samples else [],
        "features": feat_path.name,
        "features_sha256": file_sha256(feat_path),
    })
    print(f"featurize: wrote {len(samples)} samples to {feat_path}")
    return 0


def _cmd_train(args) -> int:
    doc = _load_config(args.config)
    _expect_keys(doc, ("input", "run", "bank"), "train")
    input_path = _input_path(doc, "train")
    cfg = _run_config(doc, args)
    bank_spec = _bank_spec(doc, args)
    out = _out_dir(args)
    write_manifest(out, "train",
                   _resolved("train", run=cfg.to_dict(), bank=bank_spec,
                             input=str(input_path)),
                   inputs={"recording": input_path})
    rec = load_recording(input_path,
                         band_ceiling_hz=cfg.featurize.band_set.ceiling_hz)
    result = run_train(rec, cfg, bank_spec)
    model, history = result["model"], result["history"]
    ckpt_path = out / "checkpoint.eegp"
    ad.save_checkpoint(ckpt_path, model.named_parameters(),
                       seed=cfg.seed, step=history["best_epoch"],
                       extra={
                           "model": cfg.model.to_dict(),
                           "labels": list(rec.label_set),
                           "bank_hash": result["bank_hash"],
                           "stats": result["stats"].to_dict(),
                       })
    write_rows_csv(out / "history.csv", history["epochs"],
                   ("epoch", "lr", "train_loss", "val_acc"))
    write_summary_json(out / "summary.json", {
        "command": "train",
        "n_train": result["n_train"],
        "best_epoch": history["best_epoch"],
        "best_val_acc": history["best_val_acc"],
        "stopped_epoch": history["stopped_epoch"],
        "bank_hash": result["bank_hash"],
        "param_count": model.param_count(),
        "checkpoint": ckpt_path.name,
    })
    print(f"train: best val acc {history['best_val_acc']:.4f} at epoch "
          f"{history['best_epoch']}; checkpoint at {ckpt_path}")
    return 0


def _eval_command(args, command: str,
                  allowed: Sequence[str]) -> Tuple[dict, Path, Path, RunConfig, str]:
    doc = _load_config(args.config)
    _expect_keys(doc, allowed, command)
    input_path = _input_path(doc, command)
    cfg = _run_config(doc, args)
    bank_spec = _bank_spec(doc, args)
    out = _out_dir(args)
    return doc, input_path, out, cfg, bank_spec


def _load_input(input_path: Path, cfg: RunConfig):
    return load_recording(input_path,
                          band_ceiling_hz=cfg.featurize.band_set.ceiling_hz)


def _cmd_eval_loso(args) -> int:
    doc, input_path, out, cfg, bank_spec = _eval_command(
        args, "eval-loso", ("input", "run", "bank"))
    write_manifest(out, "eval-loso",
                   _resolved("eval-loso", run=cfg.to_dict(), bank=bank_spec,
                             input=str(input_path), jobs=args.jobs),
                   inputs={"recording": input_path})
    result = run_loso(_load_input(input_path, cfg), cfg, bank_spec,
                      jobs=args.jobs)
    write_rows_csv(out / "folds.csv", result["rows"], _FOLD_COLUMNS)
    write_summary_json(out / "summary.json", {
        "command": "eval-loso",
        "protocol": result["protocol"],
        "metrics": result["metrics"],
        "n_shot": result["n_shot"],
        "n_folds": len(result["rows"]),
    })
    m = result["metrics"]
    print(f"eval-loso: mean acc {m['mean']:.4f} +/- {m['std']:.4f} over "
          f"{len(result['rows'])} folds")
    return 0


def _cmd_eval_crosstime(args) -> int:
    doc, input_path, out, cfg, bank_spec = _eval_command(
        args, "eval-crosstime", ("input", "run", "bank"))
    write_manifest(out, "eval-crosstime",
                   _resolved("eval-crosstime", run=cfg.to_dict(),
                             bank=bank_spec, input=str(input_path),
                             jobs=args.jobs),
                   inputs={"recording": input_path})
    result = run_crosstime(_load_input(input_path, cfg), cfg, bank_spec,
                           jobs=args.jobs)
    write_rows_csv(out / "folds.csv", result["rows"], _CROSSTIME_COLUMNS)
    write_summary_json(out / "summary.json", {
        "command": "eval-crosstime",
        "protocol": result["protocol"],
        "metrics": result["metrics"],
        "per_experiment": result["per_experiment"],
        "n_folds": len(result["rows"]),
    })
    m = result["metrics"]
    print(f"eval-crosstime: mean acc {m['mean']:.4f} +/- {m['std']:.4f} over "
          f"{len(result['rows'])} folds")
    return 0


def _parse_shots(doc: dict, command: str) -> Tuple[int, ...]:
    raw = doc.get("shots", list(NSHOT_DEFAULT_GRID))
    if (not isinstance(raw, list) or not raw
            or not all(isinstance(n, int) and not isinstance(n, bool) and n >= 0
                       for n in raw)):
        raise ConfigError(f"{command} config: 'shots' must be a non-empty "
                          f"list of non-negative integers")
    if len(set(raw)) != len(raw):
        raise ConfigError(f"{command} config: 'shots' contains duplicates")
    return tuple(raw)


def _cmd_eval_nshot(args) -> int:
    doc, input_path, out, cfg, bank_spec = _eval_command(
        args, "eval-nshot", ("input", "run", "bank", "shots"))
    shots = _parse_shots(doc, "eval-nshot")
    write_manifest(out, "eval-nshot",
                   _resolved("eval-nshot", run=cfg.to_dict(), bank=bank_spec,
                             input=str(input_path), shots=list(shots),
                             jobs=args.jobs),
                   inputs={"recording": input_path})
    result = run_nshot(_load_input(input_path, cfg), cfg, bank_spec,
                       shots=shots, jobs=args.jobs)
    rows = sorted(result["rows"], key=lambda r: (r["fold"], r["n_shot"]))
    write_rows_csv(out / "folds.csv", rows, _NSHOT_COLUMNS)
    write_summary_json(out / "summary.json", {
        "command": "eval-nshot",
        "protocol": result["protocol"],
        "shots": result["shots"],
        "curve": result["curve"],
        "n_folds": len(rows),
    })
    curve = ", ".join(f"N={n}: {result['curve'][str(n)]['mean']:.4f}"
                      for n in shots)
    print(f"eval-nshot: {curve}")
    return 0


def _cmd_ablate(args) -> int:
    doc, input_path, out, cfg, bank_spec = _eval_command(
        args, "ablate", ("input", "run", "bank"))
    write_manifest(out, "ablate",
                   _resolved("ablate", run=cfg.to_dict(), bank=bank_spec,
                             input=str(input_path), jobs=args.jobs),
                   inputs={"recording": input_path})
    result = run_ablation(_load_input(input_path, cfg), cfg, bank_spec,
                          jobs=args.jobs)
    write_rows_csv(out / "folds.csv", result["rows"], _ABLATION_COLUMNS)
    table_rows = [
        {"method": "classifier-head",
         "acc": result["arms"]["classifier"]["mean"],
         "std": result["arms"]["classifier"]["std"]},
        {"method": "similarity-matching",
         "acc": result["arms"]["matching"]["mean"],
         "std": result["arms"]["matching"]["std"]},
    ]
    write_rows_csv(out / "table.csv", table_rows, _TABLE_COLUMNS)
    write_summary_json(out / "summary.json", {
        "command": "ablate",
        "protocol": result["protocol"],
        "arms": result["arms"],
        "delta_mean": result["delta_mean"],
        "table": {"columns": list(_TABLE_COLUMNS),
                  "rows": [[r["method"], r["acc"], r["std"]]
                           for r in table_rows]},
        "n_folds": len(result["rows"]),
    })
    print(f"ablate: classifier {table_rows[0]['acc']:.4f} vs matching "
          f"{table_rows[1]['acc']:.4f} (delta {result['delta_mean']:+.4f})")
    return 0


# -- report -------------------------------------------------------------------------

def _chart_value(row: Dict[str, str], column: str, csv_path: str) -> float:
    if column not in row:
        raise ConfigError(f"report: column {column!r} not present in {csv_path}")
    try:
        return float(row[column])
    except ValueError:
        raise ConfigError(
            f"report: column {column!r} in {csv_path} holds non-numeric "
            f"value {row[column]!r}") from None


def _short_label(label: str) -> str:
    parts = label.split("/")
    return "/".join(parts[1:]) if len(parts) >= 3 else label


def _render_bars(chart: dict, out: Path, index: int) -> Path:
    csv_path = chart.get("csv")
    _, rows = read_rows_csv(csv_path)
    label_col = chart.get("label_column", "descriptor")
    value_col = chart.get("value_column", "accuracy")
    labels, values = [], []
    for row in rows:
        if label_col not in row:
            raise ConfigError(f"report: column {label_col!r} not present in {csv_path}")
        labels.append(_short_label(row[label_col]))
        values.append(_chart_value(row, value_col, csv_path))
    output = out / chart.get("output", f"chart{index}_bars.svg")
    return svg_bar_chart(output, labels, values,
                         title=chart.get("title", "Per-subject accuracy"),
                         y_label=value_col, y_max=float(chart.get("y_max", 1.0)))


def _render_curve(chart: dict, out: Path, index: int) -> Path:
    csv_path = chart.get("csv")
    _, rows = read_rows_csv(csv_path)
    x_col = chart.get("x_column", "n_shot")
    y_col = chart.get("y_column", "accuracy")
    group_col = chart.get("group_column")
    series: Dict[str, Dict[float, List[float]]] = {}
    for row in rows:
        name = "mean" if group_col is None else _short_label(str(row.get(group_col, "")))
        x = _chart_value(row, x_col, csv_path)
        y = _chart_value(row, y_col, csv_path)
        series.setdefault(name, {}).setdefault(x, []).append(y)
    folded = {
        name: [(x, sum(ys) / len(ys)) for x, ys in sorted(xs.items())]
        for name, xs in series.items()
    }
    output = out / chart.get("output", f"chart{index}_curve.svg")
    return svg_line_chart(output, folded,
                          title=chart.get("title", "Accuracy vs N"),
                          x_label=x_col, y_label=y_col,
                          y_max=float(chart.get("y_max", 1.0)))


_CHART_KEYS = ("kind", "csv", "label_column", "value_column", "x_column",
               "y_column", "group_column", "title", "output", "y_max")


def _cmd_report(args) -> int:
    doc = _load_config(args.config)
    _expect_keys(doc, ("charts",), "report")
    charts = doc.get("charts")
    if not isinstance(charts, list) or not charts:
        raise ConfigError("report config: 'charts' must be a non-empty list "
                          "of chart objects")
    out = _out_dir(args)
    inputs = {}
    for i, chart in enumerate(charts):
        if not isinstance(chart, dict):
            raise ConfigError(f"report config: charts[{i}] must be an object")
        _expect_keys(chart, _CHART_KEYS, f"report charts[{i}]")
        csv_path = chart.get("csv")
        if csv_path is None:
            raise ConfigError(f"report config: charts[{i}] missing required "
                              f"field 'csv'")
        if not Path(csv_path).is_file():
            raise ConfigError(f"report config: charts[{i}] input CSV not "
                              f"found: {csv_path}")
        inputs[f"chart{i}"] = Path(csv_path)
    write_manifest(out, "report", _resolved("report", charts=charts),
                   inputs=inputs)
    written = []
    for i, chart in enumerate(charts):
        kind = chart.get("kind")
        if kind == "bars":
            written.append(_render_bars(chart, out, i))
        elif kind == "curve":
            written.append(_render_curve(chart, out, i))
        else:
            raise ConfigError(f"report config: charts[{i}].kind must be "
                              f"'bars' or 'curve' (got {kind!r})")
    write_summary_json(out / "summary.json", {
        "command": "report",
        "charts": [p.name for p in written],
    })
    print(f"report: wrote {', '.join(p.name for p in written)}")
    return 0


# -- parser -------------------------------------------------------------------------

def _non_negative_u64(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer: {text!r}")
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"jobs must be an integer: {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError("jobs must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eegmatch",
        description="EEG-text matching pipeline: synthesis, featurization, "
                    "training, evaluation protocols, and reports.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_text: str, *, seed=False, jobs=False,
            bank=False, grid=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH",
                       help="JSON config file for this command")
        p.add_argument("--out", metavar="DIR", default=f"runs/{name}",
                       help="output directory (default: %(default)s)")
        if seed:
            p.add_argument("--seed", metavar="U64", type=_non_negative_u64,
                           help="override the config seed")
        if jobs:
            p.add_argument("--jobs", metavar="N", type=_positive_int, default=1,
                           help="fold-level worker processes (default 1)")
        if bank:
            p.add_argument("--bank", metavar="SPEC",
                           help="text bank: 'stub' or a bank file path")
        if grid:
            p.add_argument("--grid", type=int, choices=(32, 64),
                           help="spatial grid side, overrides config")
        p.set_defaults(func=func)
        return p

    add("synth", _cmd_synth, "generate a synthetic recording container",
        seed=True)
    add("featurize", _cmd_featurize, "extract 4D DE/PSD features to a cache",
        grid=True)
    add("train", _cmd_train, "train a matching model on a full recording set",
        seed=True, bank=True, grid=True)
    add("eval-loso", _cmd_eval_loso, "leave-one-subject-out evaluation",
        seed=True, jobs=True, bank=True, grid=True)
    add("eval-crosstime", _cmd_eval_crosstime,
        "cross-session (train earlier, test later) evaluation",
        seed=True, jobs=True, bank=True, grid=True)
    add("eval-nshot", _cmd_eval_nshot, "N-shot adaptation curve",
        seed=True, jobs=True, bank=True, grid=True)
    add("ablate", _cmd_ablate, "paired ablation: classifier head vs matching",
        seed=True, jobs=True, bank=True, grid=True)
    add("report", _cmd_report, "render SVG charts from result CSVs")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CLI_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
