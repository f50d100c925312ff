"""Layer graphs, channel configurations and FLOPs accounting.

FLOPs are counted as multiply-accumulates (one MAC is one FLOP). Convolution
and fully connected layers make up the channel-dependent part; elementwise
junction and pooling work is reported separately as ``constant_part``.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .exceptions import InfeasibleBudgetError, TopologyError

INPUT = "input"
KINDS = ("conv", "fc", "add_junction", "concat_junction", "pool")
WEIGHTED = ("conv", "fc")
UNSUPPORTED_KINDS = ("depthwise_conv", "group_conv", "grouped_conv", "dwconv")


def round_half_away(x):
    """Round to the nearest integer, halves away from zero (2.5 -> 3, -2.5 -> -3)."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass(frozen=True)
class ChannelConfig:
    """Output channel counts of the adjustable layers, in topology order."""

    channels: tuple
    frozen: tuple = ()

    def __post_init__(self):
        channels = tuple(int(c) for c in self.channels)
        frozen = tuple(bool(f) for f in self.frozen) or (False,) * len(channels)
        if len(frozen) != len(channels):
            raise ValueError(
                f"frozen mask has length {len(frozen)}, channels has length {len(channels)}"
            )
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "frozen", frozen)

    def __len__(self):
        return len(self.channels)

    def __iter__(self):
        return iter(self.channels)

    def __getitem__(self, i):
        return self.channels[i]

    def with_channels(self, channels):
        return replace(self, channels=tuple(channels))

    def with_frozen(self, frozen):
        return replace(self, frozen=tuple(frozen))

    def as_array(self):
        return np.asarray(self.channels, dtype=np.int64)

    @property
    def free_indices(self):
        return [i for i, f in enumerate(self.frozen) if not f]

    def __str__(self):
        return ";".join(str(c) for c in self.channels)


@dataclass(frozen=True)
class LayerSpec:
    """One node of the layer graph.

    ``channels`` is the output width of conv/fc layers (the default when the
    layer is adjustable). ``relu`` defaults to on for conv layers and add
    junctions and off otherwise. A pool with ``global_pool`` averages over the
    whole feature map; other pools average over ``kernel_size`` windows.
    """

    id: str
    kind: str
    inputs: tuple
    kernel_size: int = 1
    stride: int = 1
    channels: int | None = None
    bn: bool = True
    relu: bool | None = None
    global_pool: bool = False
    spatial_hw: tuple | None = None

    @property
    def applies_relu(self):
        if self.relu is None:
            return self.kind in ("conv", "add_junction")
        return self.relu


@dataclass(frozen=True)
class FlopsBreakdown:
    per_layer: dict
    total: int
    constant_part: int

    @property
    def variable_part(self):
        return sum(self.per_layer.values())


class NetworkTopology:
    """A DAG of :class:`LayerSpec` nodes fed by a single input tensor.

    Layers are stored in a stable topological order (ties keep the order in
    which they were given). Spatial sizes are derived once here and never
    depend on channel counts.
    """

    def __init__(self, input_shape, layers, adjustable_ids, frozen_ids=(), name="network"):
        self.name = name
        input_shape = tuple(int(v) for v in input_shape)
        if len(input_shape) != 3 or min(input_shape) < 1:
            raise TopologyError(f"input_shape must be three positive integers, got {input_shape}")
        self.input_shape = input_shape

        layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in layers]
        self._check_nodes(layers)
        ordered = self._toposort(layers)
        self._layers = tuple(self._derive_spatial(ordered))
        self._by_id = {l.id: l for l in self._layers}

        adjustable_ids = tuple(adjustable_ids)
        if len(set(adjustable_ids)) != len(adjustable_ids):
            raise TopologyError("adjustable ids contain duplicates")
        for lid in adjustable_ids:
            if lid not in self._by_id:
                raise TopologyError(f"adjustable id {lid!r} is not a layer")
            if self._by_id[lid].kind not in WEIGHTED:
                raise TopologyError(f"adjustable id {lid!r} is a {self._by_id[lid].kind}, not conv or fc")
        self.adjustable_ids = adjustable_ids
        self._adj_index = {lid: i for i, lid in enumerate(adjustable_ids)}
        frozen_ids = tuple(frozen_ids)
        for lid in frozen_ids:
            if lid not in self._adj_index:
                raise TopologyError(f"frozen id {lid!r} is not adjustable")
        self.frozen_ids = frozen_ids

        sinks = [l.id for l in self._layers if not any(l.id in m.inputs for m in self._layers)]
        if sinks != [self._layers[-1].id]:
            raise TopologyError(f"topology must have exactly one output layer, found {sinks}")

    @staticmethod
    def _check_nodes(layers):
        seen = set()
        for i, layer in enumerate(layers):
            where = f"layers[{i}]"
            if layer.kind in UNSUPPORTED_KINDS:
                raise TopologyError(f"layer kind {layer.kind!r} is not supported", where)
            if layer.kind not in KINDS:
                raise TopologyError(f"unknown layer kind {layer.kind!r}", where)
            if not layer.id or layer.id == INPUT:
                raise TopologyError(f"invalid layer id {layer.id!r}", where)
            if layer.id in seen:
                raise TopologyError(f"duplicate layer id {layer.id!r}", where)
            seen.add(layer.id)
            n = len(layer.inputs)
            if layer.kind == "add_junction" and n != 2:
                raise TopologyError(f"add_junction needs exactly 2 inputs, got {n}", where)
            if layer.kind == "concat_junction" and n < 2:
                raise TopologyError(f"concat_junction needs at least 2 inputs, got {n}", where)
            if layer.kind in ("conv", "fc", "pool") and n != 1:
                raise TopologyError(f"{layer.kind} needs exactly 1 input, got {n}", where)
            if layer.kind in WEIGHTED and (layer.channels is None or layer.channels < 1):
                raise TopologyError("conv/fc layers need a positive 'channels'", where)
            if layer.kernel_size < 1 or layer.stride < 1:
                raise TopologyError("kernel_size and stride must be positive", where)
            if layer.kind == "conv" and layer.kernel_size % 2 == 0:
                raise TopologyError("conv kernel_size must be odd", where)
        known = seen | {INPUT}
        for i, layer in enumerate(layers):
            for ref in layer.inputs:
                if ref not in known:
                    raise TopologyError(f"dangling input ref {ref!r}", f"layers[{i}]")

    @staticmethod
    def _toposort(layers):
        position = {l.id: i for i, l in enumerate(layers)}
        indeg = {l.id: sum(1 for r in l.inputs if r != INPUT) for l in layers}
        users = {l.id: [] for l in layers}
        for l in layers:
            for r in l.inputs:
                if r != INPUT:
                    users[r].append(l.id)
        heap = [position[lid] for lid, d in indeg.items() if d == 0]
        heapq.heapify(heap)
        out = []
        while heap:
            layer = layers[heapq.heappop(heap)]
            out.append(layer)
            for u in users[layer.id]:
                indeg[u] -= 1
                if indeg[u] == 0:
                    heapq.heappush(heap, position[u])
        if len(out) != len(layers):
            stuck = sorted(set(position) - {l.id for l in out})
            raise TopologyError(f"layer graph has a cycle through {stuck}")
        return out

    def _derive_spatial(self, layers):
        hw = {INPUT: self.input_shape[1:]}
        out = []
        for layer in layers:
            src = [hw[r] for r in layer.inputs]
            h, w = src[0]
            if layer.kind == "conv":
                s = layer.stride
                size = ((h - 1) // s + 1, (w - 1) // s + 1)
            elif layer.kind == "pool":
                if layer.global_pool:
                    size = (1, 1)
                else:
                    k, s = layer.kernel_size, layer.stride
                    if k > h or k > w:
                        raise TopologyError(f"pool window {k} larger than input {h}x{w}", layer.id)
                    size = ((h - k) // s + 1, (w - k) // s + 1)
            elif layer.kind == "fc":
                if (h, w) != (1, 1):
                    raise TopologyError(f"fc input must be 1x1 spatially, got {h}x{w}", layer.id)
                size = (1, 1)
            else:
                if any(s != src[0] for s in src):
                    raise TopologyError(f"junction inputs disagree on spatial size: {src}", layer.id)
                size = (h, w)
            hw[layer.id] = size
            out.append(replace(layer, spatial_hw=size))
        return out

    @property
    def layers(self):
        return self._layers

    def layer(self, layer_id):
        try:
            return self._by_id[layer_id]
        except KeyError:
            raise TopologyError(f"no layer named {layer_id!r}") from None

    @property
    def output_id(self):
        return self._layers[-1].id

    @property
    def n_adjustable(self):
        return len(self.adjustable_ids)

    def adjustable_index(self, layer_id):
        try:
            return self._adj_index[layer_id]
        except KeyError:
            raise ValueError(f"layer {layer_id!r} is not adjustable") from None

    def spatial_hw(self, layer_id):
        if layer_id == INPUT:
            return self.input_shape[1:]
        return self.layer(layer_id).spatial_hw

    def default_config(self):
        return ChannelConfig(
            tuple(self._by_id[lid].channels for lid in self.adjustable_ids),
            tuple(lid in self.frozen_ids for lid in self.adjustable_ids),
        )

    def check_config(self, config, min_channels=1):
        if len(config) != self.n_adjustable:
            raise ValueError(
                f"config has {len(config)} entries, topology {self.name!r} has "
                f"{self.n_adjustable} adjustable layers"
            )
        for lid, c in zip(self.adjustable_ids, config.channels):
            if c < min_channels:
                raise ValueError(f"layer {lid!r} has {c} channels, below the minimum of {min_channels}")

    def config_from_mapping(self, mapping: Mapping[str, int], frozen: Sequence[str] | None = None):
        unknown = set(mapping) - set(self.adjustable_ids)
        if unknown:
            raise ValueError(f"not adjustable layers: {sorted(unknown)}")
        base = self.default_config()
        channels = [int(mapping.get(lid, c)) for lid, c in zip(self.adjustable_ids, base.channels)]
        frozen_ids = self.frozen_ids if frozen is None else tuple(frozen)
        return ChannelConfig(channels, [lid in frozen_ids for lid in self.adjustable_ids])

    def config_to_mapping(self, config):
        return dict(zip(self.adjustable_ids, config.channels))

    def widths(self, config):
        """Output width of every conv/fc layer under ``config``."""
        out = {l.id: l.channels for l in self._layers if l.kind in WEIGHTED}
        out.update(zip(self.adjustable_ids, config.channels))
        return out

    def to_dict(self):
        layers = []
        for l in self._layers:
            d = {"id": l.id, "kind": l.kind, "inputs": list(l.inputs)}
            if l.kind in WEIGHTED:
                d["channels"] = l.channels
            if l.kind in ("conv", "pool") and not l.global_pool:
                d["kernel_size"] = l.kernel_size
                d["stride"] = l.stride
            if l.kind == "conv" and not l.bn:
                d["bn"] = False
            if l.relu is not None:
                d["relu"] = l.relu
            if l.global_pool:
                d["global_pool"] = True
            layers.append(d)
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": layers,
            "adjustable": list(self.adjustable_ids),
            "frozen": list(self.frozen_ids),
        }

    def __repr__(self):
        return f"NetworkTopology({self.name!r}, layers={len(self._layers)}, adjustable={self.n_adjustable})"


def _walk(topology, widths):
    """Propagate effective channels and count MACs.

    ``widths`` maps conv/fc ids to output widths; values may be ints or
    integer arrays (one entry per configuration), so the same walk serves
    single configs and batched enumeration.
    """
    eff = {INPUT: topology.input_shape[0]}
    per_layer = {}
    constant = 0
    for layer in topology.layers:
        src = [eff[r] for r in layer.inputs]
        h, w = layer.spatial_hw
        if layer.kind == "conv":
            c = widths[layer.id]
            per_layer[layer.id] = h * w * src[0] * c * layer.kernel_size**2
        elif layer.kind == "fc":
            c = widths[layer.id]
            per_layer[layer.id] = src[0] * c
        elif layer.kind == "add_junction":
            c = np.maximum(src[0], src[1]) if _is_array(src) else max(src)
            constant = constant + h * w * c
        elif layer.kind == "concat_junction":
            c = sum(src)
        else:
            c = src[0]
            if layer.global_pool:
                ih, iw = topology.spatial_hw(layer.inputs[0])
                constant = constant + ih * iw * c
            else:
                constant = constant + h * w * c * layer.kernel_size**2
        eff[layer.id] = c
    return eff, per_layer, constant


def _is_array(values):
    return any(isinstance(v, np.ndarray) for v in values)


def effective_channels(topology, config):
    """Channels actually flowing out of every node (including ``"input"``).

    Add junctions zero-pad the narrower input, so they carry the max of their
    inputs; concat junctions carry the sum.
    """
    topology.check_config(config, min_channels=0)
    eff, _, _ = _walk(topology, topology.widths(config))
    return eff


def flops(topology, config):
    topology.check_config(config, min_channels=0)
    _, per_layer, constant = _walk(topology, topology.widths(config))
    per_layer = {k: int(v) for k, v in per_layer.items()}
    constant = int(constant)
    return FlopsBreakdown(per_layer, sum(per_layer.values()) + constant, constant)


def flops_totals(topology, channel_matrix, variable_only=False):
    """Total FLOPs for each row of an ``(n_configs, n_adjustable)`` integer array."""
    mat = np.asarray(channel_matrix, dtype=np.int64)
    if mat.ndim != 2 or mat.shape[1] != topology.n_adjustable:
        raise ValueError(f"expected shape (n, {topology.n_adjustable}), got {mat.shape}")
    widths = {l.id: l.channels for l in topology.layers if l.kind in WEIGHTED}
    for j, lid in enumerate(topology.adjustable_ids):
        widths[lid] = mat[:, j]
    _, per_layer, constant = _walk(topology, widths)
    variable = sum(per_layer.values())
    total = variable if variable_only else variable + constant
    return np.broadcast_to(np.asarray(total, dtype=np.int64), (mat.shape[0],)).copy()


def _variable_flops(topology, channels):
    widths = {l.id: l.channels for l in topology.layers if l.kind in WEIGHTED}
    widths.update(zip(topology.adjustable_ids, channels))
    _, per_layer, _ = _walk(topology, widths)
    return sum(per_layer.values())


def dflops_dc(topology, config, layer, min_channels=1):
    """FLOPs cost of one more channel on ``layer``, by integer differences.

    Central difference ``(F(c + e) - F(c - e)) / 2`` over the conv/fc part of
    the FLOPs; forward difference at the lower channel bound. Junction max()
    kinks are therefore captured exactly.
    """
    i = topology.adjustable_index(layer) if isinstance(layer, str) else int(layer)
    if not 0 <= i < topology.n_adjustable:
        raise ValueError(f"adjustable layer index {i} out of range")
    up = list(config.channels)
    up[i] += 1
    f_up = _variable_flops(topology, up)
    if config.channels[i] - 1 < min_channels:
        return float(f_up - _variable_flops(topology, config.channels))
    down = list(config.channels)
    down[i] -= 1
    return (f_up - _variable_flops(topology, down)) / 2


def _total(topology, channels):
    widths = {l.id: l.channels for l in topology.layers if l.kind in WEIGHTED}
    widths.update(zip(topology.adjustable_ids, channels))
    _, per_layer, constant = _walk(topology, widths)
    return sum(per_layer.values()) + constant


def scale_to_budget(
    topology,
    config,
    budget,
    tolerance=0.01,
    min_channels=1,
    max_bisections=40,
    alpha_range=(0.25, 4.0),
    max_repair_steps=10000,
    full_output=False,
):
    """Rescale all unfrozen channel counts so total FLOPs land near ``budget``.

    A single multiplicative factor is found by bisection; if rounding keeps the
    relative gap above ``tolerance``, single-channel moves are applied greedily
    (largest FLOPs-per-channel layers first on ties) until it closes.

    Returns the new config, or ``(config, alpha)`` with ``full_output``.
    Raises InfeasibleBudgetError when the gap cannot be closed.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    topology.check_config(config, min_channels)
    base = list(config.channels)
    free = config.free_indices

    def gap(channels):
        return abs(_total(topology, channels) - budget) / budget

    def done(channels, alpha):
        new = config.with_channels(channels)
        return (new, alpha) if full_output else new

    if gap(base) <= tolerance or not free:
        if gap(base) > tolerance:
            raise InfeasibleBudgetError(
                "every layer is frozen; cannot move FLOPs toward the budget",
                config, _total(topology, base),
            )
        return done(base, 1.0)

    def at(alpha):
        ch = list(base)
        for i in free:
            ch[i] = max(min_channels, round_half_away(alpha * base[i]))
        return ch

    lo, hi = alpha_range
    best, best_alpha, best_gap = base, 1.0, gap(base)
    for alpha in (lo, hi):
        ch = at(alpha)
        g = gap(ch)
        if g < best_gap:
            best, best_alpha, best_gap = ch, alpha, g
    for _ in range(max_bisections):
        mid = 0.5 * (lo + hi)
        ch = at(mid)
        total = _total(topology, ch)
        g = abs(total - budget) / budget
        if g < best_gap or (g == best_gap and abs(mid - 1) < abs(best_alpha - 1)):
            best, best_alpha, best_gap = ch, mid, g
        if best_gap <= tolerance:
            break
        if total < budget:
            lo = mid
        else:
            hi = mid
    if best_gap <= tolerance:
        return done(best, best_alpha)

    current = list(best)
    total = _total(topology, current)
    steps = 0
    while abs(total - budget) / budget > tolerance and steps < max_repair_steps:
        direction = 1 if total < budget else -1
        cfg = config.with_channels(current)
        order = sorted(free, key=lambda i: -abs(dflops_dc(topology, cfg, i, min_channels)))
        best_move, best_total = None, total
        for i in order:
            if current[i] + direction < min_channels:
                continue
            trial = list(current)
            trial[i] += direction
            t = _total(topology, trial)
            if abs(t - budget) < abs(best_total - budget):
                best_move, best_total = i, t
        if best_move is None:
            break
        current[best_move] += direction
        total = best_total
        steps += 1
    if abs(total - budget) / budget <= tolerance:
        return done(current, best_alpha)
    raise InfeasibleBudgetError(
        f"cannot bring FLOPs within {tolerance:.3g} of {budget:.9g}; closest is {total}",
        config.with_channels(current), total,
    )
