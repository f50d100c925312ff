"""Command-line runner: ``netadjust {adjust,probe,train,flops,oracle}``.

Each command reads a run file (see :mod:`netadjust.runconfig`), writes its
outputs under the output directory and finishes by atomically writing
``manifest.json``, which lists every output with its schema and, on failure,
a machine-readable error record.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import yaml

from . import __version__, _streams
from .adjuster import AdjusterConfig, run
from .exceptions import (ConfigError, InfeasibleBudgetError, ProbeError, SearchSpaceTooLarge,
                         TopologyError, TrainingDivergedError)
from .fur_probe import build_probe_plan, estimate_fur
from .io import dump_channel_config, load_channel_config, load_topology
from .mini_engine import CNNEvaluator, SurrogateLogEvaluator, SyntheticDatasetSpec
from .oracle import DEFAULT_MAX_CONFIGS, exhaustive_search
from .report import flops_rows, flops_table, trace_rows, write_csv
from .runconfig import load_run_config
from .topology import ChannelConfig, flops

logger = logging.getLogger("netadjust")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_ORACLE_EMPTY = 4
EXIT_ORACLE_REFUSED = 5
EXIT_TRAINING = 6

MANIFEST_SCHEMA = "manifest/1"


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """Collects outputs of one command and writes ``manifest.json`` last."""

    def __init__(self, command, argv, config_path=None):
        self.data = {
            "schema": MANIFEST_SCHEMA,
            "command": command,
            "argv": list(argv),
            "config_path": None,
            "config_sha256": None,
            "seed": None,
            "version": __version__,
            "started": _now(),
            "finished": None,
            "status": "running",
            "outputs": [],
            "summary": {},
            "error": None,
        }
        if config_path is not None:
            self.data["config_path"] = str(config_path)
            try:
                self.data["config_sha256"] = hashlib.sha256(Path(config_path).read_bytes()).hexdigest()
            except OSError:
                pass
        self.out_dir = None

    def add(self, path, schema):
        rel = os.path.relpath(path, self.out_dir)
        self.data["outputs"] = [o for o in self.data["outputs"] if o["path"] != rel]
        self.data["outputs"].append({"path": rel, "schema": schema})

    def fail(self, exc, code):
        self.data["status"] = "error"
        record = {"type": type(exc).__name__, "message": str(exc), "exit_code": code}
        for attr in ("field", "where", "layer_id", "iteration", "cardinality", "cap", "closest_flops"):
            value = getattr(exc, attr, None)
            if value is not None:
                record[attr] = value
        if getattr(exc, "closest_config", None) is not None:
            record["closest_config"] = str(exc.closest_config)
        self.data["error"] = record

    def write(self):
        if self.out_dir is None:
            return None
        self.data["finished"] = _now()
        if self.data["status"] == "running":
            self.data["status"] = "ok"
        self.out_dir.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.out_dir, prefix=".manifest-", suffix=".json")
        with os.fdopen(fd, "w") as fh:
            json.dump(self.data, fh, indent=2, default=_json_default)
            fh.write("\n")
        # mkstemp creates 0600; give the manifest the usual umask-based mode
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        target = self.out_dir / "manifest.json"
        os.replace(tmp, target)
        return target


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    return str(obj)


def build_evaluator(cfg):
    ev = dict(cfg.evaluator)
    kind = ev.pop("kind")
    topo = cfg.topology
    if kind == "surrogate":
        return SurrogateLogEvaluator(topo, **ev)
    c, h, w = topo.input_shape
    ds = dict(ev.pop("dataset", {}))
    ds.setdefault("image_size", h)
    ds.setdefault("channels", c)
    ds.setdefault("seed", cfg.seed)
    if h != w or ds["image_size"] != h or ds["channels"] != c:
        raise ConfigError(f"dataset images must be {c}x{h}x{w} to match the topology input",
                          field="evaluator.dataset")
    n_out = topo.widths(topo.default_config())[topo.output_id]
    if ds.get("num_classes", SyntheticDatasetSpec.num_classes) > n_out:
        raise ConfigError(f"topology has only {n_out} outputs", field="evaluator.dataset.num_classes")
    return CNNEvaluator(dataset=SyntheticDatasetSpec(**ds), **ev)


def _adjuster_config(cfg, threads):
    params = dict(cfg.adjuster)
    params.update({k: v for k, v in cfg.probe.items() if k != "checkpoint"})
    params["seed"] = cfg.seed
    params["threads"] = threads
    acfg = AdjusterConfig(**params)
    try:
        acfg.validate(len(cfg.initial_config.free_indices))
    except ValueError as exc:
        raise ConfigError(str(exc), field="adjuster", where=cfg.path) from None
    return acfg


def _train_seed(seed, *keys):
    return int(_streams.seed_sequence(seed, *keys).generate_state(1)[0])


def _describe(record, previous, budget, ids):
    moves = "".join(f" +{ids[i]}" for i in record.top) + "".join(f" -{ids[i]}" for i in record.bottom)
    text = (f"iter {record.iteration:3d}  acc {record.accuracy:.4f}  flops {record.flops:,} "
            f"({(record.flops - budget) / budget:+.2%})  [{record.config}]")
    if previous is not None:
        text += f"  moved:{moves}"
    return text


def cmd_adjust(cfg, out_dir, manifest, threads):
    topo = cfg.topology
    acfg = _adjuster_config(cfg, threads)
    evaluator = build_evaluator(cfg)
    fur_dir = out_dir / "fur"
    records = []

    def on_record(record):
        prev = records[-1] if records else None
        records.append(record)
        logger.info(_describe(record, prev, acfg.budget or records[0].flops, topo.adjustable_ids))
        if record.fur is not None:
            manifest.add(write_csv(fur_dir / f"{record.iteration}.csv", "fur/1", record.fur.rows()),
                         "fur/1")
        manifest.add(write_csv(out_dir / "trace.csv", "trace/1", trace_rows(records)), "trace/1")

    try:
        trace = run(topo, cfg.initial_config, evaluator, acfg, callback=on_record)
    except Exception as exc:
        partial = getattr(exc, "partial_trace", None)
        if partial is not None and partial.records:
            manifest.data["summary"]["completed_iterations"] = len(partial.records)
        raise
    dump_channel_config(topo, trace.best_config, out_dir / "best_config.yaml")
    manifest.add(out_dir / "best_config.yaml", "channel-config/1")
    manifest.data["summary"] = {
        "budget": trace.budget,
        "best_iteration": trace.best_iteration,
        "best_accuracy": trace.records[trace.best_iteration].accuracy,
        "best_config": str(trace.best_config),
        "initial_accuracy": trace.records[0].accuracy,
        "max_flops_deviation": max(abs(f - trace.budget) / trace.budget for f in trace.flops),
        "stopped_early": trace.stopped_early,
    }
    print(f"best iteration {trace.best_iteration}: accuracy "
          f"{trace.records[trace.best_iteration].accuracy:.6f} (initial {trace.records[0].accuracy:.6f})")
    print(flops_table(topo, trace.records[0].config, trace.best_config), end="")
    return EXIT_OK


def cmd_probe(cfg, out_dir, manifest, threads):
    topo = cfg.topology
    evaluator = build_evaluator(cfg)
    probe = dict(cfg.probe)
    checkpoint = probe.pop("checkpoint", None)
    probe.pop("probe_final", None)
    if checkpoint is not None:
        if not isinstance(evaluator, CNNEvaluator):
            raise ConfigError("checkpoints apply to the cnn evaluator only", field="probe.checkpoint")
        handle = evaluator.load_handle(cfg.resolve(checkpoint))
        config = handle.network_.config
    else:
        config = cfg.initial_config
        budget = cfg.adjuster.get("train_budget")
        handle = evaluator.train(topo, config, budget, seed=_train_seed(cfg.seed, "train", 0))
    min_channels = cfg.adjuster.get("min_channels", 1)
    plan = build_probe_plan(topo, config, min_channels=min_channels, **probe)
    report = estimate_fur(evaluator, handle, plan, seed=cfg.seed, iteration=0, threads=threads)
    manifest.add(write_csv(out_dir / "fur.csv", "fur/1", report.rows()), "fur/1")
    manifest.data["summary"] = {"base_accuracy": report.base_accuracy,
                                "delta_flops": plan.delta_flops, "config": str(config)}
    for e in report.entries:
        fur = "infeasible" if e.fur is None else f"{e.fur:.6g}"
        print(f"{e.layer_id:>12}  p {'' if e.p is None else format(e.p, '.4f'):>6}  fur {fur}")
    return EXIT_OK


def cmd_train(cfg, out_dir, manifest, threads, channels=None):
    topo = cfg.topology
    evaluator = build_evaluator(cfg)
    source = channels or cfg.train.get("channels")
    config = cfg.initial_config if source is None else load_channel_config(
        cfg.resolve(source) if channels is None else source, topo)
    epochs = cfg.train.get("epochs", 20)
    handle = evaluator.train(topo, config, epochs, seed=_train_seed(cfg.seed, "final"))
    metrics = {"config": str(config), "flops": flops(topo, config).total, "epochs": epochs,
               "val_accuracy": evaluator.evaluate(handle, "val")}
    if isinstance(evaluator, CNNEvaluator):
        metrics["test_accuracy"] = evaluator.evaluate(handle, "test")
        metrics["loss_curve"] = [float(v) for v in handle.loss_curve_]
        if cfg.train.get("checkpoint", True):
            handle.network_.save(out_dir / "model.npz")
            manifest.add(out_dir / "model.npz", "checkpoint/1")
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    manifest.add(out_dir / "metrics.json", "metrics/1")
    manifest.data["summary"] = {k: v for k, v in metrics.items() if k != "loss_curve"}
    print(json.dumps(manifest.data["summary"]))
    return EXIT_OK


def cmd_oracle(cfg, out_dir, manifest, threads):
    topo = cfg.topology
    if cfg.evaluator["kind"] != "surrogate":
        raise ConfigError("the oracle needs a closed-form (surrogate) evaluator", field="evaluator.kind")
    evaluator = build_evaluator(cfg)
    o = cfg.oracle
    budget = o.get("budget", cfg.adjuster.get("budget") or flops(topo, cfg.initial_config).total)
    result = exhaustive_search(topo, evaluator, budget, band=o.get("band", 0.01),
                               max_channels=o.get("max_channels", 64),
                               min_channels=o.get("min_channels", 1), config=cfg.initial_config,
                               max_configs=o.get("max_configs", DEFAULT_MAX_CONFIGS))
    top = o.get("top", len(result.configs))
    rows = ({"rank": i + 1, "accuracy": float(a), "flops": int(f),
             "config": ";".join(str(int(v)) for v in c)}
            for i, (c, a, f) in enumerate(zip(result.configs[:top], result.accuracies[:top],
                                              result.flops[:top])))
    manifest.add(write_csv(out_dir / "oracle.csv", "oracle/1", rows), "oracle/1")
    manifest.data["summary"] = {"budget": budget, "band": result.band,
                                "cardinality": result.cardinality,
                                "feasible": len(result.configs)}
    if result.empty:
        manifest.data["status"] = "empty"
        print(f"no configuration within {result.band:.2%} of {budget:,.0f} FLOPs")
        return EXIT_ORACLE_EMPTY
    best = ChannelConfig(result.best_config, cfg.initial_config.frozen)
    dump_channel_config(topo, best, out_dir / "best_config.yaml")
    manifest.add(out_dir / "best_config.yaml", "channel-config/1")
    manifest.data["summary"].update(best_accuracy=result.best_accuracy, best_config=str(best))
    print(f"optimum {best} accuracy {result.best_accuracy:.6f} "
          f"({len(result.configs)} feasible configurations)")
    return EXIT_OK


def cmd_flops(args, manifest):
    if args.topology is not None:
        topo = load_topology(args.topology)
        config = topo.default_config()
    elif args.config is not None:
        cfg = load_run_config(args.config)
        topo, config = cfg.topology, cfg.initial_config
    else:
        raise ConfigError("flops needs --topology or --config")
    if args.channels is not None:
        config = load_channel_config(args.channels, topo)
    other = None if args.diff is None else load_channel_config(args.diff, topo)
    print(flops_table(topo, config, other), end="")
    if manifest.out_dir is not None:
        manifest.add(write_csv(manifest.out_dir / "flops.csv", "flops/1", flops_rows(topo, config)),
                     "flops/1")
        manifest.data["summary"] = {"total": flops(topo, config).total, "config": str(config)}
    return EXIT_OK


COMMANDS = {"adjust": cmd_adjust, "probe": cmd_probe, "train": cmd_train, "oracle": cmd_oracle}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (YAML)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out-dir", help="override the output directory")
    common.add_argument("--threads", type=int, help="parallel FUR probes")
    common.add_argument("-q", "--quiet", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="netadjust", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("adjust", parents=[common], help="run the channel adjustment loop")
    sub.add_parser("probe", parents=[common], help="estimate per-layer FUR once")
    train = sub.add_parser("train", parents=[common], help="train one configuration")
    train.add_argument("--channels", help="channel configuration file to train")
    sub.add_parser("oracle", parents=[common], help="exhaustive search on a surrogate")
    fl = sub.add_parser("flops", parents=[common], help="per-layer FLOPs of a configuration")
    fl.add_argument("--topology", help="topology file or builtin name")
    fl.add_argument("--channels", help="channel configuration file")
    fl.add_argument("--diff", help="second channel configuration to compare against")
    return parser


def _exit_code(exc):
    if isinstance(exc, (ConfigError, TopologyError)):
        return EXIT_CONFIG
    if isinstance(exc, InfeasibleBudgetError):
        return EXIT_INFEASIBLE
    if isinstance(exc, SearchSpaceTooLarge):
        return EXIT_ORACLE_REFUSED
    if isinstance(exc, (TrainingDivergedError, ProbeError)):
        return EXIT_TRAINING
    return EXIT_FAILURE


def _peek_out_dir(config_path):
    """Best-effort ``out_dir`` from a run file that failed validation, so the
    error manifest still lands where the outputs would have."""
    try:
        data = yaml.safe_load(Path(config_path).read_text())
        return Path(data["out_dir"]) if isinstance(data.get("out_dir"), str) else None
    except Exception:
        return None


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.quiet else logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(message)s", stream=sys.stderr, force=True)

    manifest = Manifest(args.command, argv, args.config)
    if args.out_dir is not None:
        manifest.out_dir = Path(args.out_dir)
    code = EXIT_OK
    try:
        if args.command == "flops":
            code = cmd_flops(args, manifest)
        else:
            if args.config is None:
                raise ConfigError(f"{args.command} needs --config")
            cfg = load_run_config(args.config)
            if args.seed is not None:
                cfg.seed = args.seed
            manifest.data["seed"] = cfg.seed
            if manifest.out_dir is None:
                manifest.out_dir = Path(cfg.out_dir or "netadjust-out")
            manifest.out_dir.mkdir(parents=True, exist_ok=True)
            threads = args.threads or cfg.threads
            kwargs = {"channels": args.channels} if args.command == "train" else {}
            code = COMMANDS[args.command](cfg, manifest.out_dir, manifest, threads, **kwargs)
    except Exception as exc:
        code = _exit_code(exc)
        if manifest.out_dir is None and args.config is not None:
            manifest.out_dir = _peek_out_dir(args.config)
        manifest.fail(exc, code)
        if code == EXIT_FAILURE:
            logger.exception("%s failed", args.command)
        else:
            logger.error("error: %s", exc)
    path = manifest.write()
    if path is not None:
        logger.debug("manifest written to %s", path)
    return code


if __name__ == "__main__":
    sys.exit(main())
