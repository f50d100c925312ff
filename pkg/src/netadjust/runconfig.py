"""Run configuration files for the command-line runner.

A run file is YAML::

    topology: toy4                 # builtin name, or a path relative to this file
    initial_config: start.yaml     # optional channel config; defaults to the topology widths
    seed: 0
    out_dir: runs/toy4
    evaluator:
      kind: surrogate              # or "cnn"
      weights: [1, 2, 3, 4]
      bias: 2.83
      temperature: 0.25
    adjuster: {adjusted_layers: 2, adjusting_rate: 0.1, max_iterations: 15}
    probe: {delta_flops_fraction: 0.02, mc_samples: 1}
    oracle: {band: 0.01, max_channels: 64}
    train: {epochs: 20}

A ``cnn`` evaluator takes a ``dataset`` mapping (SyntheticDatasetSpec
fields) plus training settings; see ``SCHEMA`` for the full list. Unknown
keys are rejected and errors carry the file, line and field path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .exceptions import ConfigError
from .io import (BUILTIN_TOPOLOGIES, _fmt_path, _read, load_channel_config, load_topology,
                 load_yaml_with_lines)

_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}
_FRACTION = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}
_BOOL = {"type": "boolean"}


def _section(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_DATASET = _section({
    "num_classes": {"type": "integer", "minimum": 2, "maximum": 10},
    "samples_per_class": {"type": "integer", "minimum": 3},
    "image_size": _POS_INT,
    "channels": _POS_INT,
    "noise_level": {"type": "number", "minimum": 0},
    "seed": _INT,
    "val_fraction": _FRACTION,
    "test_fraction": _FRACTION,
})

_SURROGATE = _section({
    "kind": {"const": "surrogate"},
    "weights": {"type": "array", "items": _POS_NUM, "minItems": 1},
    "bias": {"type": "number"},
    "temperature": _POS_NUM,
}, required=["kind"])

_CNN = _section({
    "kind": {"const": "cnn"},
    "dataset": _DATASET,
    "epochs": _NONNEG_INT,
    "batch_size": _POS_INT,
    "lr_max": {"type": "number", "minimum": 0},
    "lr_min": {"type": "number", "minimum": 0},
    "momentum": {"type": "number", "minimum": 0, "maximum": 1},
    "weight_decay": {"type": "number", "minimum": 0},
    "train_dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "dropout_kind": {"enum": ["bernoulli", "gaussian"]},
    "rescale": _BOOL,
    "dtype": {"enum": ["float64", "float32"]},
    "max_train_samples": _POS_INT,
    "max_val_samples": _POS_INT,
}, required=["kind"])

SCHEMA = _section({
    "topology": {"type": "string", "minLength": 1},
    "initial_config": {"type": "string"},
    "seed": _INT,
    "out_dir": {"type": "string"},
    "threads": _POS_INT,
    "evaluator": {"type": "object", "required": ["kind"],
                  "properties": {"kind": {"enum": ["surrogate", "cnn"]}}},
    "adjuster": _section({
        "adjusted_layers": _POS_INT,
        "adjusting_rate": _POS_NUM,
        "max_iterations": _NONNEG_INT,
        "k_schedule": {"enum": ["linear", "constant"]},
        "budget": _POS_NUM,
        "scale_tolerance": _POS_NUM,
        "train_budget": _NONNEG_INT,
        "min_channels": _POS_INT,
        "freeze_stem": _BOOL,
        "early_stop_patience": {"type": ["integer", "null"], "minimum": 1},
    }),
    "probe": _section({
        "delta_flops_fraction": _POS_NUM,
        "mc_samples": _POS_INT,
        "p_max": _FRACTION,
        "rescale": _BOOL,
        "fixed_p": {"type": ["number", "null"], "minimum": 0, "exclusiveMaximum": 1},
        "probe_final": _BOOL,
        "checkpoint": {"type": "string"},
    }),
    "oracle": _section({
        "band": _POS_NUM,
        "max_channels": _POS_INT,
        "min_channels": _POS_INT,
        "max_configs": _POS_INT,
        "budget": _POS_NUM,
        "top": _POS_INT,
    }),
    "train": _section({
        "epochs": _NONNEG_INT,
        "channels": {"type": "string"},
        "checkpoint": _BOOL,
    }),
}, required=["topology"])

_EVALUATOR_SCHEMAS = {"surrogate": _SURROGATE, "cnn": _CNN}


@dataclass
class RunConfig:
    path: str | None
    topology: object
    initial_config: object
    seed: int = 0
    out_dir: str | None = None
    threads: int = 1
    evaluator: dict = field(default_factory=dict)
    adjuster: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def resolve(self, relative):
        p = Path(relative)
        return p if p.is_absolute() else self.base_dir / p


def _where(source, lines, path):
    for n in range(len(path), -1, -1):
        if tuple(path[:n]) in lines:
            return f"{source}:{lines[tuple(path[:n])]}"
    return source


def _validate(schema, data, source, lines, prefix=()):
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(data),
                    key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if not errors:
        return
    err = errors[0]
    path = prefix + tuple(err.absolute_path)
    message = err.message
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        path = path + (extra[0],)
        message = f"unknown field {extra[0]!r}"
    elif err.validator == "required":
        message = err.message.replace(" is a required property", " is required")
    raise ConfigError(message, field=_fmt_path(path) or None, where=_where(source, lines, path))


def load_run_config(path=None, data=None):
    """Parse and validate a run file (or an already-loaded mapping).

    Loads the topology and initial channel config it names; loader errors
    pass through with their own file and line.
    """
    if data is None:
        source = str(path)
        data, lines = load_yaml_with_lines(_read(path), source)
        base_dir = Path(path).resolve().parent
    else:
        source, lines, base_dir = "<dict>", {}, Path(".")
    if data is None:
        data = {}
    _validate(SCHEMA, data, source, lines)
    evaluator = dict(data.get("evaluator") or {"kind": "surrogate"})
    _validate(_EVALUATOR_SCHEMAS[evaluator["kind"]], evaluator, source, lines, ("evaluator",))

    cfg = RunConfig(path=None if path is None else str(path), topology=None, initial_config=None,
                    base_dir=base_dir)
    topo_ref = data["topology"]
    if topo_ref in BUILTIN_TOPOLOGIES:
        cfg.topology = load_topology(topo_ref)
    else:
        topo_path = cfg.resolve(topo_ref)
        if not topo_path.is_file():
            raise ConfigError(f"topology file {str(topo_path)!r} does not exist", field="topology",
                              where=_where(source, lines, ("topology",)))
        cfg.topology = load_topology(topo_path)
    if "initial_config" in data:
        cfg.initial_config = load_channel_config(cfg.resolve(data["initial_config"]), cfg.topology)
    else:
        cfg.initial_config = cfg.topology.default_config()

    cfg.seed = data.get("seed", 0)
    cfg.out_dir = data.get("out_dir")
    cfg.threads = data.get("threads", 1)
    cfg.evaluator = evaluator
    for name in ("adjuster", "probe", "oracle", "train"):
        setattr(cfg, name, dict(data.get(name) or {}))
    if evaluator["kind"] == "surrogate" and "weights" in evaluator:
        n = cfg.topology.n_adjustable
        if len(evaluator["weights"]) != n:
            raise ConfigError(f"expected {n} weights, got {len(evaluator['weights'])}",
                              field="evaluator.weights",
                              where=_where(source, lines, ("evaluator", "weights")))
    return cfg
