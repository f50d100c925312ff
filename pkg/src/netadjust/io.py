"""Topology and channel-configuration files (YAML).

Topology file::

    name: toy4
    input_shape: [3, 16, 16]
    layers:
      - {id: conv1, kind: conv, inputs: [input], kernel_size: 3, stride: 1, channels: 16}
      - {id: pool, kind: pool, inputs: [conv1], global_pool: true}
      - {id: fc, kind: fc, inputs: [pool], channels: 4}
    adjustable: [conv1]
    frozen: []

Channel configuration file::

    topology: toy4
    channels: {conv1: 24}
    frozen: []

Errors name the file, the line and the field path.
"""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

import yaml

from .exceptions import ConfigError, TopologyError
from .topology import LayerSpec, NetworkTopology

BUILTIN_TOPOLOGIES = ("chain", "toy4", "resnet20")

_LAYER_FIELDS = {
    "id": str,
    "kind": str,
    "inputs": list,
    "kernel_size": int,
    "stride": int,
    "channels": int,
    "bn": bool,
    "relu": bool,
    "global_pool": bool,
}


def load_yaml_with_lines(text, source="<string>"):
    """Parse YAML, returning ``(data, lines)`` where ``lines`` maps a field
    path tuple such as ``("layers", 3, "kernel_size")`` to a 1-based line."""
    try:
        data = yaml.safe_load(text)
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", where=where) from None
    lines = {}

    def walk(node, path):
        if node is None:
            return
        lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                lines[path + (k.value,)] = k.start_mark.line + 1
                walk(v, path + (k.value,))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, path + (i,))

    walk(root, ())
    return data, lines


def _fmt_path(path):
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out


class _Located:
    def __init__(self, source, lines):
        self.source = source
        self.lines = lines

    def where(self, path):
        for n in range(len(path), -1, -1):
            if path[:n] in self.lines:
                return f"{self.source}:{self.lines[path[:n]]}"
        return self.source

    def topo_error(self, message, path):
        return TopologyError(f"{_fmt_path(path)}: {message}" if path else message, self.where(path))

    def config_error(self, message, path):
        return ConfigError(message, field=_fmt_path(path), where=self.where(path))


def _read(path):
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read file: {exc.strerror}", where=str(path)) from None


def topology_from_dict(data, source="<dict>", lines=None):
    loc = _Located(source, lines or {})
    if not isinstance(data, dict):
        raise loc.topo_error("top level must be a mapping", ())
    for key in ("input_shape", "layers", "adjustable"):
        if key not in data:
            raise loc.topo_error(f"missing required field {key!r}", ())
    unknown = set(data) - {"name", "input_shape", "layers", "adjustable", "frozen"}
    if unknown:
        raise loc.topo_error(f"unknown field {sorted(unknown)[0]!r}", (sorted(unknown)[0],))
    shape = data["input_shape"]
    if not (isinstance(shape, list) and len(shape) == 3
            and all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in shape)):
        raise loc.topo_error("must be a list of three positive integers", ("input_shape",))
    if not isinstance(data["layers"], list) or not data["layers"]:
        raise loc.topo_error("must be a non-empty list", ("layers",))

    specs = []
    for i, raw in enumerate(data["layers"]):
        path = ("layers", i)
        if not isinstance(raw, dict):
            raise loc.topo_error("layer must be a mapping", path)
        fields = dict(raw)
        if "kernel" in fields:
            fields["kernel_size"] = fields.pop("kernel")
        for key, value in fields.items():
            if key not in _LAYER_FIELDS:
                raise loc.topo_error(f"unknown layer field {key!r}", path + (key,))
            want = _LAYER_FIELDS[key]
            ok = isinstance(value, want) and not (want is int and isinstance(value, bool))
            if not ok:
                raise loc.topo_error(f"expected {want.__name__}, got {value!r}", path + (key,))
        for key in ("id", "kind", "inputs"):
            if key not in fields:
                raise loc.topo_error(f"missing required field {key!r}", path)
        fields["inputs"] = tuple(str(r) for r in fields["inputs"])
        specs.append(LayerSpec(**fields))

    for key in ("adjustable", "frozen"):
        value = data.get(key, [])
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise loc.topo_error("must be a list of layer ids", (key,))

    try:
        return NetworkTopology(shape, specs, data["adjustable"], data.get("frozen", []),
                               name=str(data.get("name", "network")))
    except TopologyError as exc:
        m = re.match(r"layers\[(\d+)\]", exc.where or "")
        if m:
            raise loc.topo_error(str(exc).split(": ", 1)[-1], ("layers", int(m.group(1)))) from None
        ids = [s.id for s in specs]
        if exc.where in ids:
            raise loc.topo_error(str(exc).split(": ", 1)[-1], ("layers", ids.index(exc.where))) from None
        raise TopologyError(str(exc), source) from None


def load_topology(path):
    """Load a topology file, or a builtin by name (``toy4``, ``chain``, ``resnet20``)."""
    path = str(path)
    if path in BUILTIN_TOPOLOGIES:
        text = resources.files("netadjust.topologies").joinpath(f"{path}.yaml").read_text()
        source = f"<builtin {path}>"
    else:
        text, source = _read(path), path
    data, lines = load_yaml_with_lines(text, source)
    return topology_from_dict(data, source, lines)


def dump_topology(topology, path=None):
    text = yaml.safe_dump(topology.to_dict(), sort_keys=False, default_flow_style=None)
    if path is not None:
        Path(path).write_text(text)
    return text


def channel_config_from_dict(data, topology, source="<dict>", lines=None):
    loc = _Located(source, lines or {})
    if not isinstance(data, dict) or "channels" not in data:
        raise loc.config_error("expected a mapping with a 'channels' field", ())
    channels = data["channels"]
    if isinstance(channels, list):
        if len(channels) != topology.n_adjustable:
            raise loc.config_error(
                f"expected {topology.n_adjustable} entries, got {len(channels)}", ("channels",))
        channels = dict(zip(topology.adjustable_ids, channels))
    if not isinstance(channels, dict):
        raise loc.config_error("must be a mapping of layer id to channels", ("channels",))
    for lid, c in channels.items():
        if lid not in topology.adjustable_ids:
            raise loc.config_error(f"{lid!r} is not an adjustable layer", ("channels", lid))
        if not isinstance(c, int) or isinstance(c, bool) or c < 1:
            raise loc.config_error(f"expected a positive integer, got {c!r}", ("channels", lid))
    frozen = data.get("frozen")
    if frozen is not None:
        if not isinstance(frozen, list) or any(f not in topology.adjustable_ids for f in frozen):
            raise loc.config_error("must be a list of adjustable layer ids", ("frozen",))
    return topology.config_from_mapping(channels, frozen)


def load_channel_config(path, topology):
    text = _read(path)
    data, lines = load_yaml_with_lines(text, str(path))
    return channel_config_from_dict(data, topology, str(path), lines)


def dump_channel_config(topology, config, path=None):
    data = {
        "topology": topology.name,
        "channels": topology.config_to_mapping(config),
        "frozen": [lid for lid, f in zip(topology.adjustable_ids, config.frozen) if f],
    }
    text = yaml.safe_dump(data, sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text
