"""Command line entry point: ``gctflow <subcommand> ...``.

Exit status is 0 on success, 1 on a domain error and 2 on a usage error.
Every run writes ``run-manifest.json`` into ``--out-dir`` with the full
argument set and git-style blob hashes of every input file.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, GctError

log = logging.getLogger("gctflow")

MANIFEST_NAME = "run-manifest.json"
INPUT_FLAGS = ("records", "segments", "flows", "graph", "config", "checkpoint")


def git_blob_sha1(path) -> str:
    """Content hash as ``git hash-object`` computes it."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _hash_inputs(args) -> dict:
    out = {}
    for flag in INPUT_FLAGS:
        value = getattr(args, flag, None)
        if value is None:
            continue
        p = Path(value)
        if p.is_dir():
            for f in sorted(p.iterdir()):
                if f.is_file():
                    out[str(f)] = git_blob_sha1(f)
        elif p.is_file():
            out[str(p)] = git_blob_sha1(p)
            side = p.with_name(p.stem + ".meta.json")
            if flag == "flows" and side.is_file():
                out[str(side)] = git_blob_sha1(side)
    return out


def write_manifest(out_dir: Path, argv: list[str], args, outputs: list) -> Path:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {"argv": list(argv), "config": config, "inputs": _hash_inputs(args),
           "outputs": [str(p) for p in outputs]}
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _csv_list(text: str, cast=str) -> list:
    return [cast(t) for t in text.split(",") if t.strip()]


# -- subcommands ----------------------------------------------------------------

def cmd_ingest(args, out: Path) -> list:
    from .dataio import bin_flows, dedup, parse_records, parse_timestamp, read_segments, write_flows

    records, rejects = parse_records(args.records)
    if args.dedup:
        records = dedup(records)
    segments = read_segments(args.segments, check_size=not args.skip_size_check)
    ds = bin_flows(records, segments, args.interval, parse_timestamp(args.start), parse_timestamp(args.end))
    outputs = [out / "flows.csv", out / "flows.meta.json"]
    write_flows(outputs[0], ds)
    if rejects:
        rej = out / "rejects.csv"
        with open(rej, "w") as fh:
            fh.write("line,reason\n")
            for r in rejects:
                fh.write(f"{r.line},{json.dumps(r.reason)}\n")
        outputs.append(rej)
    log.info("binned %d records into %d intervals x %d segments (%d rejected)",
             len(records), ds.n_intervals, ds.n_segments, len(rejects))
    return outputs


def cmd_graph(args, out: Path) -> list:
    from .dataio import read_segments
    from .graphs import build_adjacency

    g = build_adjacency(read_segments(args.segments, check_size=False), sigma=args.sigma, kappa=args.kappa)
    path = out / "graph.json"
    g.to_json(path)
    return [path]


def cmd_synth(args, out: Path) -> list:
    from .synth import PRESETS, SynthConfig, generate

    kw = dict(PRESETS[args.preset])
    if args.days is not None:
        kw["days"] = args.days
    if args.segments_count is not None:
        kw["n_segments"] = args.segments_count
    if args.deterministic:
        kw["deterministic"] = True
    res = generate(SynthConfig(seed=args.seed, **kw))
    paths = res.write(out)
    flow_graph = out / "flow_graph.json"
    res.flow_graph().to_json(flow_graph)
    meta = out / "synth.json"
    cfg = dataclasses.asdict(res.config)
    meta.write_text(json.dumps({"config": cfg, "start": _stamp(res.start), "end": _stamp(res.end),
                                "upstream": res.upstream}, indent=2) + "\n")
    return [*paths.values(), flow_graph, meta]


def _stamp(t: float) -> str:
    from .dataio import format_timestamp

    return format_timestamp(t)


def cmd_analyze(args, out: Path) -> list:
    from . import analysis
    from .dataio import read_flows

    ds = read_flows(args.flows)
    if args.kind == "stats":
        path = out / "stats.csv"
        rows = analysis.describe(ds.flows, ds.segment_ids)
        analysis.write_stats_csv(path, rows)
        for r in rows:
            print(f"{r['type']}: avg {r['avg']:.2f} std {r['std']:.2f} max-avg {r['max_avg']:.2f} "
                  f"(id {r['max_id']}) min-avg {r['min_avg']:.2f} (id {r['min_id']})")
        return [path]
    per_day = 86400 // ds.interval_seconds
    n_days = max(ds.n_intervals // per_day, 1)
    if not 0 <= args.day < n_days:
        raise ConfigError(f"--day {args.day} outside 0..{n_days - 1}")
    start = args.day * per_day
    if args.kind == "pearson":
        spec = analysis.CorrWindowSpec(args.window, args.stride)
        day = ds.flows[:, :, start:start + per_day]
        res = analysis.evolving_corr(day, spec)
        times = [_stamp(ds.start_timestamp + (start + int(t)) * ds.interval_seconds) for t in res.slots]
        path = out / "pearson.csv"
        analysis.write_corr_csv(path, res, ds.segment_ids, times)
        outputs = [path]
        if args.svg:
            for hour in (8, 13, 18, 23):
                k = int(np.searchsorted(res.slots, hour * 3600 // ds.interval_seconds - 1))
                if k < len(res.slots):
                    svg = out / f"pearson_{hour:02d}h.svg"
                    analysis.write_corr_svg(svg, res.r[k], res.defined[k], ds.segment_ids, title=times[k])
                    outputs.append(svg)
        return outputs
    rows = analysis.subtracted_corr_report(ds.flows, start, per_day)
    path = out / "subtracted.csv"
    analysis.write_stats_csv(path, [{"segment_id": sid, **r} for sid, r in zip(ds.segment_ids, rows)])
    return [path]


def _load_config(path) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


MODEL_KEYS = ("channels", "reduced_channels", "n_layers", "skip_channels")
TRAIN_KEYS = ("learning_rate", "weight_decay", "batch_size", "max_epochs", "patience")


def _estimator_params(doc: dict) -> dict:
    unknown = set(doc) - set(MODEL_KEYS) - set(TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return dict(doc)


def _load_graph(path, n_segments: int):
    from .graphs import SegmentGraph

    g = SegmentGraph.from_json(path)
    if g.n_nodes != n_segments:
        raise ConfigError(f"graph has {g.n_nodes} nodes, flows have {n_segments} segments")
    return g


def cmd_train(args, out: Path) -> list:
    from .dataio import make_samples, read_flows
    from .estimators import MFGMRegressor
    from .trainer import evaluate, write_report_csv

    ds = read_flows(args.flows)
    graph = _load_graph(args.graph, ds.n_segments)
    params = _estimator_params(_load_config(args.config))
    if args.epochs is not None:
        params["max_epochs"] = args.epochs
        params["patience"] = min(params.get("patience", 15), args.epochs - 1)
    train, val, test = make_samples(ds)
    est = MFGMRegressor(graph=graph, ablation=tuple(args.ablate or ()), inputs=args.inputs,
                        random_state=args.seed, **params)
    ckpt = out / "checkpoint"
    ckpt.mkdir(parents=True, exist_ok=True)
    est.fit(train.inputs, train.targets, eval_set=(val.inputs, val.targets),
            history_path=ckpt / "history.jsonl")
    outputs = save_model(ckpt, est)
    report = evaluate(est.predict(test.inputs), test.targets)
    rep = out / "test_report.csv"
    write_report_csv(rep, report.rows(_variant_name(args.ablate), args.seed))
    print(f"best epoch {est.best_epoch_}, val MAE {est.best_val_mae_:.4f}, test MAE {report.overall.mae:.4f}")
    return [*outputs, ckpt / "history.jsonl", rep]


def _variant_name(ablate) -> str:
    return "full" if not ablate else "w/o " + "".join(sorted(ablate))


def save_model(ckpt: Path, est) -> list:
    """Write parameters, model config, graph and scaler statistics into ``ckpt``."""
    from .gradcore import save_checkpoint

    save_checkpoint(ckpt, est.model_.state_dict())
    cfg = est.model_.config
    cfg.save(ckpt / "model.json")
    est.model_.graph.to_json(ckpt / "graph.json")
    (ckpt / "scaler.json").write_text(json.dumps({"mean": est.scaler_.mean_.tolist(),
                                                  "std": est.scaler_.std_.tolist()}))
    return [ckpt / n for n in ("manifest.json", "params.bin", "model.json", "graph.json", "scaler.json")]


def load_model(ckpt):
    from .dataio import FlowScaler
    from .estimators import MFGMRegressor
    from .gradcore import load_checkpoint
    from .graphs import SegmentGraph
    from .mfgm import ModelConfig

    ckpt = Path(ckpt)
    if not (ckpt / "model.json").is_file():
        raise ConfigError(f"{ckpt} is not a model checkpoint directory")
    stats = json.loads((ckpt / "scaler.json").read_text())
    scaler = FlowScaler()
    scaler.mean_ = np.asarray(stats["mean"], dtype=float)
    scaler.std_ = np.asarray(stats["std"], dtype=float)
    return MFGMRegressor.from_parts(ModelConfig.load(ckpt / "model.json"),
                                    SegmentGraph.from_json(ckpt / "graph.json"), scaler,
                                    load_checkpoint(ckpt))


def cmd_eval(args, out: Path) -> list:
    from .dataio import make_samples, read_flows
    from .estimators import baseline_predict
    from .trainer import evaluate, write_report_csv

    ds = read_flows(args.flows)
    horizons = _csv_list(args.horizons, int)
    if (args.checkpoint is None) == (args.baseline is None):
        raise ConfigError("give exactly one of --checkpoint or --baseline")
    train, val, test = make_samples(ds)
    if len(test) == 0:
        raise ConfigError("the test split has no complete windows")
    if args.checkpoint is not None:
        est = load_model(args.checkpoint)
        y_hat = est.predict(test.inputs)
        name = _variant_name(sorted(est.model_.config.ablation))
    else:
        y_hat = baseline_predict(args.baseline, train, test, val)
        name = args.baseline
    report = evaluate(y_hat, test.targets, horizons)
    path = out / "eval_report.csv"
    write_report_csv(path, report.rows(name, args.seed))
    for h, m in report.per_horizon.items():
        print(f"horizon {h}: MAE {m.mae:.4f} RMSE {m.rmse:.4f} MAPE {m.mape:.2f}%")
    print(f"overall: MAE {report.overall.mae:.4f} RMSE {report.overall.rmse:.4f}")
    return [path]


def cmd_experiment(args, out: Path) -> list:
    from .dataio import FlowDataset, read_flows
    from .experiments import ExperimentData, baseline_reports, run_experiments

    if args.flows is not None:
        if args.graph is None:
            raise ConfigError("--flows needs --graph")
        ds = read_flows(args.flows)
        graph = _load_graph(args.graph, ds.n_segments)
    else:
        from .synth import PRESETS, SynthConfig, generate

        res = generate(SynthConfig(seed=args.seed, **PRESETS["planted"]))
        ds = FlowDataset(res.counts.astype(float), res.config.interval_seconds, res.start,
                         [s.id for s in res.segments])
        graph = res.flow_graph()
    data = ExperimentData.from_flows(ds, graph)
    params = _estimator_params(_load_config(args.config))
    if args.epochs is not None:
        params["max_epochs"] = args.epochs
        params["patience"] = min(params.get("patience", 15), args.epochs - 1)
    seeds = list(range(args.seed, args.seed + args.seeds))
    report = run_experiments(args.suite, data, seeds, params, n_jobs=args.jobs)
    paths = report.write(out)
    for k, r in baseline_reports(data).items():
        print(f"{k}: MAE {r.overall.mae:.4f}")
    for row in report.summary():
        print(f"{row['variant']}: MAE {row['mae_mean']:.4f} +- {row['mae_std']:.4f} "
              f"({row['n_seeds']} seeds, {row['failed']} failed)")
    return list(paths.values())


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help="output directory (default .)")
    common.add_argument("--log-level", default=argparse.SUPPRESS,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = argparse.ArgumentParser(prog="gctflow", description="Multi-type GCT flow prediction toolkit.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="bin GCT records into flows")
    s.add_argument("--records", required=True)
    s.add_argument("--segments", required=True)
    s.add_argument("--interval", type=int, default=300)
    s.add_argument("--start", required=True, help="ISO-8601 with zone, inclusive")
    s.add_argument("--end", required=True, help="ISO-8601 with zone, exclusive")
    s.add_argument("--dedup", action="store_true", help="drop repeated (imei_hash, timestamp) records")
    s.add_argument("--skip-size-check", action="store_true")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("graph", parents=[common], help="build the segment adjacency graph")
    s.add_argument("--segments", required=True)
    s.add_argument("--sigma", type=float, default=None, help="kernel width in metres")
    s.add_argument("--kappa", type=float, default=0.1)
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic GCT records")
    s.add_argument("--preset", choices=["desk", "paper-scale", "planted"], default="desk")
    s.add_argument("--days", type=int, default=None)
    s.add_argument("--segments-count", type=int, default=None)
    s.add_argument("--deterministic", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("analyze", parents=[common], help="exploratory statistics")
    s.add_argument("kind", choices=["stats", "pearson", "subtracted"])
    s.add_argument("--flows", required=True)
    s.add_argument("--window", type=int, default=12)
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--day", type=int, default=0, help="0-based day index for pearson/subtracted")
    s.add_argument("--svg", action="store_true", help="also draw heatmaps (pearson)")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("train", parents=[common], help="train MFGM and save a checkpoint")
    s.add_argument("--flows", required=True)
    s.add_argument("--graph", required=True)
    s.add_argument("--config", default=None, help="JSON of model/training overrides")
    s.add_argument("--ablate", action="append", choices=["M", "S", "T"])
    s.add_argument("--inputs", choices=["v", "vp", "vs", "all"], default="all")
    s.add_argument("--epochs", type=int, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint or baseline on the test split")
    s.add_argument("--flows", required=True)
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--baseline", choices=["naive", "historical_average"], default=None)
    s.add_argument("--horizons", default="3,6,9,12")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("experiment", parents=[common], help="ablation or input-sensitivity study")
    s.add_argument("suite", choices=["ablation", "sensitivity"])
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--flows", default=None, help="defaults to the planted synthetic preset")
    s.add_argument("--graph", default=None)
    s.add_argument("--config", default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--jobs", type=int, default=None, help="parallel cells, capped by GCT_THREADS")
    s.set_defaults(func=cmd_experiment)
    return p


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out_dir)
    try:
        if getattr(args, "epochs", None) is not None and args.epochs < 2:
            raise ConfigError("--epochs must be at least 2")
        out.mkdir(parents=True, exist_ok=True)
        outputs = args.func(args, out)
        write_manifest(out, argv, args, outputs)
    except (GctError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
