"""``soilwave`` command line: one subcommand per pipeline stage.

Every command writes a run manifest next to its primary output
(``<out>.manifest.json``, or ``manifest.json`` inside an output directory);
when the result goes to stdout the manifest is written to stderr as one JSON
line. Exit status: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .energy import builtin_mcus, builtin_profiles, default_battery, lifetime_report, load_profile
from .errors import SoilwaveError, ValidationError
from .harness import (
    DEFAULT_GRID,
    evaluate,
    predictions_csv,
    predictions_for,
    prepare_experiment,
    sweep_csv,
    sweep_lstm,
)
from .lstm import LstmModel, LstmSpec, TrainConfig, history_csv, train_lstm
from .preprocess import (
    Dataset,
    NormParams,
    aggregate_classes,
    align_gateways,
    class_rows_csv,
    correlation_matrix,
    decompose_fading,
    matrix_csv,
    pearson,
)
from .simulator import SimConfig, load_sim_config, simulate, sim_config_to_dict
from .svr import SvrHyper, SvrModel, grid_search_svr, grid_table_csv, svr_train
from .telemetry import (
    decode_uplink_stream,
    load_records,
    parse_uplink_csv,
    save_records,
)

log = logging.getLogger("soilwave")

DATASET_FORMAT = "soilwave.dataset/1"
DEFAULT_SEED = 42
DEFAULT_SVR_GRID = {"gamma": [0.1, 1.0, 10.0], "C": [0.01, 0.1, 1.0], "epsilon": [0.01, 0.1]}


class UsageError(Exception):
    """Bad combination of flags detected after parsing."""


# -- output helpers --------------------------------------------------------


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def _config_hash(resolved: dict) -> str:
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _file_digest(path) -> Optional[str]:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError:
        return None


def write_manifest(command: str, resolved: dict, seed, inputs: list, outputs: list,
                   manifest_path: Optional[Path]) -> dict:
    manifest = {
        "command": command,
        "config_hash": _config_hash(resolved),
        "config": resolved,
        "seed": seed,
        "inputs": [{"path": str(p), "sha256": _file_digest(p)} for p in inputs if p and p != "-"],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
    }
    if manifest_path is None:
        sys.stderr.write(json.dumps(manifest, separators=(",", ":")) + "\n")
    else:
        _write_text(manifest_path, _dumps(manifest))
    return manifest


def _manifest_for(out) -> Path:
    return Path(str(out) + ".manifest.json")


def _resolved(args, drop=("func", "command")) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in drop}


def _load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise SoilwaveError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc.msg}") from exc


# -- dataset documents -----------------------------------------------------


def dataset_to_doc(ds: Dataset, steps: int, train_fraction: float, val_fraction: float) -> dict:
    return {
        "format": DATASET_FORMAT,
        "feature_names": list(ds.feature_names),
        "ts": [int(t) for t in ds.ts] if ds.ts is not None else None,
        "features": ds.features.tolist(),
        "targets": ds.targets.tolist(),
        "steps": steps,
        "train_fraction": train_fraction,
        "val_fraction": val_fraction,
    }


def dataset_from_doc(doc: dict):
    if doc.get("format") != DATASET_FORMAT:
        raise ValidationError(f"not a dataset document: format={doc.get('format')!r}")
    names = tuple(doc["feature_names"])
    feats = np.asarray(doc["features"], dtype=float).reshape(-1, len(names))
    ts = np.asarray(doc["ts"], dtype=np.int64) if doc.get("ts") is not None else None
    ds = Dataset(names, feats, np.asarray(doc["targets"], dtype=float), None, ts)
    return ds, int(doc["steps"]), float(doc["train_fraction"]), float(doc["val_fraction"])


def _experiment(path):
    ds, steps, frac, val = dataset_from_doc(_load_json(path))
    return prepare_experiment(ds, frac, steps, val), steps


def _model_doc(model_dict: dict, exp, steps: int) -> dict:
    return {**model_dict, "data": {"feature_names": list(exp.train.feature_names),
                                   "norm_params": exp.train.norm_params.to_dict(), "steps": steps}}


def _load_model(doc: dict):
    fmt = doc.get("format", "")
    if fmt.startswith("soilwave.svr/"):
        return SvrModel.from_dict(doc)
    if fmt.startswith("soilwave.lstm/"):
        return LstmModel.from_dict(doc)
    raise ValidationError(f"unknown model format {fmt!r}")


# -- commands --------------------------------------------------------------


def cmd_simulate(args) -> None:
    cfg = load_sim_config(args.config) if args.config else SimConfig()
    if args.samples is not None:
        cfg = SimConfig(**{**{f: getattr(cfg, f) for f in cfg.__dataclass_fields__}, "n_samples": args.samples})
    rs = simulate(cfg, seed=args.seed)
    fmt = {"csv": "csv", "json": "jsonl", "store": "store", None: None}[args.format]
    save_records(rs, args.out, fmt)
    resolved = {"sim": sim_config_to_dict(cfg), "format": args.format}
    write_manifest("simulate", resolved, args.seed, [args.config], [args.out], _manifest_for(args.out))


def cmd_ingest(args) -> None:
    if args.input == "-":
        text = sys.stdin.read()
    else:
        text = Path(args.input).read_text(encoding="utf-8")
    fmt = args.input_format
    if fmt == "auto":
        fmt = "csv" if text.lstrip().startswith("ts,") else "jsonl"
    rs = parse_uplink_csv(text) if fmt == "csv" else decode_uplink_stream(text.splitlines())
    save_records(rs, args.out, {"csv": "csv", "json": "jsonl", None: "store", "store": "store"}[args.format])
    write_manifest("ingest", _resolved(args), None, [args.input], [args.out], _manifest_for(args.out))


def _gateway_series(rs, gateway):
    gw = gateway or (rs.gateways[0] if rs.gateways else None)
    recs = rs.for_gateway(gw)
    if not recs:
        raise ValidationError(f"no records for gateway {gw!r}")
    return gw, recs


def cmd_decompose(args) -> None:
    rs = load_records(args.input)
    gw, recs = _gateway_series(rs, args.gateway)
    raw = np.array([getattr(r, args.signal) for r in recs])
    dec = decompose_fading(raw, args.window)
    lines = ["ts,raw,long_term,short_term"]
    for r, a, b, c in zip(recs, dec.raw, dec.long_term, dec.short_term):
        lines.append(f"{r.ts},{float(a)!r},{float(b)!r},{float(c)!r}")
    _write_text(args.out, "\n".join(lines) + "\n")
    write_manifest("decompose", _resolved(args), None, [args.input], [args.out], _manifest_for(args.out))


def _component(series, component, window):
    if component == "raw":
        return series
    dec = decompose_fading(series, window)
    return dec.long_term if component == "long" else dec.short_term


def _class_rows(recs, args):
    hum = np.array([np.nan if r.soil_humidity is None else r.soil_humidity for r in recs])
    ok = ~np.isnan(hum)
    rssi = _component(np.array([r.rssi for r in recs]), args.component, args.window)[ok]
    snr = _component(np.array([r.snr for r in recs]), args.component, args.window)[ok]
    return aggregate_classes(hum[ok], rssi, args.low, args.high, args.width, snr=snr)


def cmd_aggregate(args) -> None:
    rs = load_records(args.input)
    _, recs = _gateway_series(rs, args.gateway)
    _write_text(args.out, class_rows_csv(_class_rows(recs, args)))
    write_manifest("aggregate", _resolved(args), None, [args.input], [args.out], _manifest_for(args.out))


def cmd_correlate(args) -> None:
    rs = load_records(args.input)
    if args.classes:
        names, vals = [], []
        for gw in rs.gateways:
            rows = _class_rows(rs.for_gateway(gw), args)
            mid = np.array([0.5 * (r.class_low + r.class_high) for r in rows])
            names += [f"rssi_{gw}", f"snr_{gw}"]
            vals += [pearson(mid, [r.mean_rssi for r in rows]), pearson(mid, [r.mean_snr for r in rows])]
        text = "," + ",".join(names) + "\nsoil_humidity," + ",".join(repr(v) for v in vals) + "\n"
    else:
        ds = align_gateways(rs, components=args.component, window_len=args.window)
        cols = {"soil_humidity": ds.targets}
        for k, name in enumerate(ds.feature_names):
            cols[name] = ds.features[:, k]
        names, m = correlation_matrix(cols)
        text = matrix_csv(names, m)
    _write_text(args.out, text)
    write_manifest("correlate", _resolved(args), None, [args.input], [args.out], _manifest_for(args.out))


def cmd_dataset(args) -> None:
    rs = load_records(args.input)
    ds = align_gateways(rs, primary=args.primary, components=args.component, window_len=args.window)
    doc = dataset_to_doc(ds, args.steps, args.train_fraction, args.val_fraction)
    exp = prepare_experiment(ds, args.train_fraction, args.steps, args.val_fraction)
    doc["summary"] = {
        "rows": len(ds), "train_rows": len(exp.train), "test_rows": len(exp.test),
        "svr_train_rows": len(exp.svr_train), "svr_test_rows": len(exp.svr_test),
        "lstm_train_windows": len(exp.lstm_train),
        "lstm_val_windows": 0 if exp.lstm_val is None else len(exp.lstm_val),
        "lstm_test_windows": len(exp.lstm_test),
    }
    _write_text(args.out, _dumps(doc))
    write_manifest("dataset", _resolved(args), None, [args.input], [args.out], _manifest_for(args.out))


def cmd_train_svr(args) -> None:
    exp, steps = _experiment(args.data)
    X, y = exp.svr_train.features, exp.svr_train.targets
    outputs = [args.out]
    if args.grid_search:
        grid = _load_json(args.config) if args.config else DEFAULT_SVR_GRID
        hyper, table = grid_search_svr(X, y, grid["gamma"], grid["C"], grid["epsilon"], folds=args.folds,
                                       tol=args.tol, seed=args.seed)
        if args.grid_out:
            _write_text(args.grid_out, grid_table_csv(table))
            outputs.append(args.grid_out)
        log.info("selected C=%g epsilon=%g gamma=%g", hyper.C, hyper.epsilon, hyper.gamma)
    else:
        hyper = SvrHyper(C=args.C, epsilon=args.epsilon, gamma=args.gamma)
    model = svr_train(X, y, hyper, tol=args.tol, max_passes=args.max_passes, seed=args.seed)
    doc = _model_doc(model.to_dict(), exp, steps)
    doc["training"] = model.info
    _write_text(args.out, _dumps(doc))
    write_manifest("train-svr", _resolved(args), args.seed, [args.data, args.config], outputs,
                   _manifest_for(args.out))


def cmd_train_lstm(args) -> None:
    exp, steps = _experiment(args.data)
    overrides = _load_json(args.config) if args.config else {}
    cfg = TrainConfig(**{"lr": args.lr, "epochs": args.epochs, "batch_size": args.batch_size,
                         "seed": args.seed, **overrides})
    spec = LstmSpec(args.units1, args.units2, args.dropout)
    model, history = train_lstm(exp.lstm_train, exp.lstm_val, spec, cfg)
    _write_text(args.out, _dumps(_model_doc(model.to_dict(cfg), exp, steps)))
    outputs = [args.out]
    if args.history:
        _write_text(args.history, history_csv(history))
        outputs.append(args.history)
    write_manifest("train-lstm", {**_resolved(args), "train_config": cfg.to_dict()}, args.seed,
                   [args.data, args.config], outputs, _manifest_for(args.out))


def cmd_evaluate(args) -> None:
    exp, _ = _experiment(args.data)
    doc = _load_json(args.model)
    model = _load_model(doc)
    norm = NormParams.from_dict(doc["data"]["norm_params"]) if "data" in doc else exp.train.norm_params
    test = exp.svr_test if isinstance(model, SvrModel) else exp.lstm_test
    metrics = evaluate(model, test, norm)
    report = {"model": doc.get("format"), **metrics.to_dict()}
    outputs = []
    if args.predictions:
        _write_text(args.predictions, predictions_csv(predictions_for(model, test), test.targets))
        outputs.append(args.predictions)
    _emit(args, _dumps(report), outputs, "evaluate", [args.model, args.data], None)


def cmd_sweep(args) -> None:
    exp, _ = _experiment(args.data)
    grid = _load_json(args.config) if args.config else DEFAULT_GRID
    rows, best = sweep_lstm(exp, grid, seed=args.seed, batch_size=args.batch_size, dropout_p=args.dropout,
                            epoch_scale=args.epoch_scale, jobs=args.jobs, record_time=args.timing,
                            budget_seconds=args.budget)
    _write_text(args.out, sweep_csv(rows))
    b = rows[best]
    log.info("best row %d: layer1=%d layer2=%d lr=%g epochs=%d mse=%.6g", best, b.layer1_units,
             b.layer2_units, b.lr, b.epochs, b.mse)
    resolved = {**_resolved(args), "grid": grid, "best_row": best}
    write_manifest("sweep", resolved, args.seed, [args.data, args.config], [args.out], _manifest_for(args.out))


def cmd_lifetime(args) -> None:
    if args.config:
        profile, battery = load_profile(args.config)
    else:
        profiles = builtin_profiles()
        if args.profile not in profiles:
            raise UsageError(f"unknown profile {args.profile!r}; choose from {sorted(profiles)}")
        profile, battery = profiles[args.profile], default_battery()
    report = lifetime_report(profile, battery)
    if args.mcus:
        report["mcu_active_ma"] = builtin_mcus()
    _emit(args, _dumps(report), [], "lifetime", [args.config], None)


def cmd_plot_data(args) -> None:
    rs = load_records(args.input)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    ds = align_gateways(rs)
    header = "ts,soil_humidity," + ",".join(ds.feature_names)
    lines = [header] + [f"{t}," + ",".join(repr(float(v)) for v in (h, *row))
                        for t, h, row in zip(ds.ts, ds.targets, ds.features)]
    p = out / "timeseries.csv"
    _write_text(p, "\n".join(lines) + "\n")
    written.append(p)
    for gw in rs.gateways:
        p = out / f"classes_{gw}.csv"
        _write_text(p, class_rows_csv(_class_rows(rs.for_gateway(gw), args)))
        written.append(p)
    write_manifest("plot-data", _resolved(args), None, [args.input], written, out / "manifest.json")


def _emit(args, text: str, extra_outputs: list, command: str, inputs: list, seed) -> None:
    if args.out:
        _write_text(args.out, text)
        write_manifest(command, _resolved(args), seed, inputs, [args.out, *extra_outputs],
                       _manifest_for(args.out))
    else:
        sys.stdout.write(text)
        write_manifest(command, _resolved(args), seed, inputs, ["-", *extra_outputs], None)


# -- parser ----------------------------------------------------------------


def _add_class_flags(p):
    p.add_argument("--low", type=float, default=29.0, help="lowest humidity class edge (%%)")
    p.add_argument("--high", type=float, default=39.0, help="upper humidity bound, exclusive (%%)")
    p.add_argument("--width", type=float, default=0.5, help="class width (%%)")
    p.add_argument("--component", choices=("raw", "long", "short"), default="long",
                   help="signal component to aggregate (default: long-term smoothed)")
    p.add_argument("--window", type=int, default=24, help="fading window in samples")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="soilwave", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"soilwave {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("simulate", help="generate synthetic uplinks")
    p.add_argument("--config", help="SimConfig JSON")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--samples", type=int, help="override sample count")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json", "store"), help="default: by extension")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest", help="parse a CSV or newline-JSON uplink stream into a record file")
    p.add_argument("--input", required=True, help="path or '-' for stdin")
    p.add_argument("--input-format", choices=("auto", "csv", "jsonl"), default="auto")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json", "store"), default="store")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("decompose", help="long/short-term fading decomposition of one gateway")
    p.add_argument("--input", required=True)
    p.add_argument("--gateway")
    p.add_argument("--signal", choices=("rssi", "snr"), default="rssi")
    p.add_argument("--window", type=int, default=24)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("aggregate", help="mean RSSI/SNR per humidity class")
    p.add_argument("--input", required=True)
    p.add_argument("--gateway")
    _add_class_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("correlate", help="Pearson correlation matrix")
    p.add_argument("--input", required=True)
    p.add_argument("--classes", action="store_true", help="correlate class means instead of raw samples")
    _add_class_flags(p)
    p.set_defaults(component="raw")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("dataset", help="align gateways and fix the split/window settings")
    p.add_argument("--input", required=True)
    p.add_argument("--primary", help="gateway whose timestamps define the rows")
    p.add_argument("--component", choices=("raw", "long", "short"), default="raw")
    p.add_argument("--window", type=int, default=24)
    p.add_argument("--steps", type=int, default=18)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train-svr", help="fit the epsilon-SVR")
    p.add_argument("--data", required=True)
    p.add_argument("--C", type=float, default=0.1)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--max-passes", type=int, default=10000)
    p.add_argument("--grid-search", action="store_true")
    p.add_argument("--config", help="grid JSON {gamma: [..], C: [..], epsilon: [..]}")
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--grid-out", help="CSV for the grid score table")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_svr)

    p = sub.add_parser("train-lstm", help="fit the stacked LSTM")
    p.add_argument("--data", required=True)
    p.add_argument("--units1", type=int, default=32)
    p.add_argument("--units2", type=int, default=32)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--config", help="TrainConfig overrides as JSON")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--history", help="CSV of per-epoch losses")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_lstm)

    p = sub.add_parser("evaluate", help="test-set metrics of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--predictions", help="CSV dump idx,prediction,target")
    p.add_argument("--out")
    p.add_argument("--format", choices=("json",), default="json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="LSTM hyperparameter sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="grid JSON {layer1, layer2, lr, epochs}")
    p.add_argument("--epoch-scale", type=float, default=1.0, help="multiply every epoch count")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--timing", action="store_true", help="record wall_seconds (output no longer reproducible)")
    p.add_argument("--budget", type=float, help="wall-clock budget in seconds; exceeding it aborts the sweep")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("lifetime", help="battery lifetime of a duty-cycle profile")
    p.add_argument("--profile", default="sensor", help="built-in profile: sensor or beacon")
    p.add_argument("--config", help="profile JSON (overrides --profile)")
    p.add_argument("--mcus", action="store_true", help="include the MCU active-current table")
    p.add_argument("--out")
    p.add_argument("--format", choices=("json",), default="json")
    p.set_defaults(func=cmd_lifetime)

    p = sub.add_parser("plot-data", help="emit time-series and class tables for plotting")
    p.add_argument("--input", required=True)
    _add_class_flags(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_plot_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"soilwave: error: {exc}\n")
        return 2
    except (SoilwaveError, OSError, ValueError, KeyError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
