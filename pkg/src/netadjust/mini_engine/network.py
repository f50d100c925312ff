"""A trainable network instantiated from a topology and channel config."""

from __future__ import annotations

import json

import numpy as np

from ..exceptions import TopologyError
from ..fur_probe import gaussian_dropout_mask, spatial_dropout_mask
from ..topology import INPUT, ChannelConfig, NetworkTopology, effective_channels
from . import ops


class ConvNet:
    """Parameters plus forward/backward passes over a topology graph.

    Conv layers run conv -> BN -> dropout -> ReLU (BN and ReLU per the layer
    spec); add junctions zero-pad the narrower input and apply ReLU after the
    sum. Activations are channels-last internally; ``forward`` takes and the
    topology describes (N, C, H, W) inputs.

    ``forward`` never mutates the network except for BN running statistics
    when ``train`` and ``update_stats`` are both set, so a trained network can
    serve concurrent inference.
    """

    def __init__(self, topology: NetworkTopology, config: ChannelConfig, rng=None,
                 dtype=np.float64):
        topology.check_config(config)
        self.topology = topology
        self.config = config
        self.dtype = np.dtype(dtype)
        self.widths = topology.widths(config)
        self.eff = effective_channels(topology, config)
        self.params = {}
        self.buffers = {}
        rng = np.random.default_rng(0) if rng is None else rng
        for layer in topology.layers:
            cin = self.eff[layer.inputs[0]]
            cout = self.widths.get(layer.id)
            if layer.kind == "conv":
                k = layer.kernel_size
                std = np.sqrt(2.0 / (cin * k * k))
                p = {"w": (rng.standard_normal((cout, cin, k, k)) * std).astype(self.dtype)}
                if layer.bn:
                    p["gamma"] = np.ones(cout, self.dtype)
                    p["beta"] = np.zeros(cout, self.dtype)
                    self.buffers[layer.id] = {"mean": np.zeros(cout, self.dtype),
                                              "var": np.ones(cout, self.dtype)}
                self.params[layer.id] = p
            elif layer.kind == "fc":
                bound = 1.0 / np.sqrt(cin)
                self.params[layer.id] = {
                    "w": rng.uniform(-bound, bound, (cout, cin)).astype(self.dtype),
                    "b": np.zeros(cout, self.dtype),
                }

    @property
    def n_outputs(self):
        return self.eff[self.topology.output_id]

    def forward(self, x, train=False, drop=None, rng=None, train_dropout=0.0,
                dropout_kind="bernoulli", rescale=True, update_stats=True, keep_tape=False):
        """Class scores for a (N, C, H, W) batch.

        ``drop`` maps layer ids to probe-time SpatialDropout probabilities;
        ``train_dropout`` applies to every conv layer when ``train`` is set.
        Returns ``logits`` or ``(logits, tape)`` with ``keep_tape``.
        """
        c, h, w = self.topology.input_shape
        if x.ndim != 4 or x.shape[1:] != (c, h, w):
            raise TopologyError(
                f"input batch has shape {x.shape}, expected (N, {c}, {h}, {w})", INPUT)
        acts = {INPUT: np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype)}
        tape = []
        drop = drop or {}
        for layer in self.topology.layers:
            ins = [acts[r] for r in layer.inputs]
            lid = layer.id
            cache = {}
            if layer.kind == "conv":
                p = self.params[lid]
                if ins[0].shape[-1] != p["w"].shape[1]:
                    raise TopologyError(
                        f"expects {p['w'].shape[1]} input channels, got {ins[0].shape[-1]}", lid)
                out, cache["conv"] = ops.conv_forward(ins[0], p["w"], layer.stride)
                if layer.bn:
                    buf = self.buffers[lid]
                    stats = (buf["mean"], buf["var"])
                    if train and not update_stats:
                        stats = (buf["mean"].copy(), buf["var"].copy())
                    out, cache["bn"] = ops.bn_forward(out, p["gamma"], p["beta"], *stats, train=train)
            elif layer.kind == "fc":
                p = self.params[lid]
                out, cache["fc"] = ops.fc_forward(ins[0], p["w"], p["b"])
                cache["xshape"] = ins[0].shape
            elif layer.kind == "add_junction":
                out, cache["add"] = ops.add_forward(ins[0], ins[1])
            elif layer.kind == "concat_junction":
                out, cache["concat"] = ops.concat_forward(ins)
            elif layer.global_pool:
                out, cache["gpool"] = ops.global_pool_forward(ins[0])
            else:
                out, cache["pool"] = ops.avg_pool_forward(ins[0], layer.kernel_size, layer.stride)

            p_drop = drop.get(lid, 0.0)
            if train and layer.kind == "conv" and lid not in drop:
                p_drop = train_dropout
            if p_drop > 0.0:
                n, cout = out.shape[0], out.shape[-1]
                if dropout_kind == "gaussian":
                    mask = gaussian_dropout_mask(cout, p_drop, rng, size=(n,))
                else:
                    mask = spatial_dropout_mask(cout, p_drop, rng, rescale=rescale, size=(n,))
                mask = mask.reshape(n, 1, 1, cout).astype(self.dtype)
                out = out * mask
                cache["mask"] = mask
            if layer.applies_relu:
                out, cache["relu"] = ops.relu_forward(out)
            acts[lid] = out
            if keep_tape:
                tape.append((layer, cache))
        logits = acts[self.topology.output_id].reshape(x.shape[0], -1)
        if keep_tape:
            tape = {"steps": tape, "input_shape": acts[INPUT].shape,
                    "act_max": {k: float(np.abs(v).max()) for k, v in acts.items() if v.size}}
            return logits, tape
        return logits

    def backward(self, tape, dlogits):
        """Gradients of all parameters (and the input) given d loss / d logits."""
        out_id = self.topology.output_id
        grads_out = {out_id: dlogits.reshape(dlogits.shape[0], 1, 1, -1)}
        pgrads = {}

        def accumulate(ref, g):
            if ref in grads_out:
                grads_out[ref] = grads_out[ref] + g
            else:
                grads_out[ref] = g

        for layer, cache in reversed(tape["steps"]):
            g = grads_out.pop(layer.id, None)
            if g is None:
                continue
            lid = layer.id
            if "relu" in cache:
                g = ops.relu_backward(g, cache["relu"])
            if "mask" in cache:
                g = g * cache["mask"]
            if layer.kind == "conv":
                p = self.params[lid]
                pg = {}
                if "bn" in cache:
                    g, pg["gamma"], pg["beta"] = ops.bn_backward(g, p["gamma"], cache["bn"])
                dx, pg["w"] = ops.conv_backward(g, p["w"], cache["conv"])
                pgrads[lid] = pg
                accumulate(layer.inputs[0], dx)
            elif layer.kind == "fc":
                p = self.params[lid]
                dx, dw, db = ops.fc_backward(g, p["w"], cache["fc"], cache["xshape"])
                pgrads[lid] = {"w": dw, "b": db}
                accumulate(layer.inputs[0], dx)
            elif layer.kind == "add_junction":
                ga, gb = ops.add_backward(g, cache["add"])
                accumulate(layer.inputs[0], ga)
                accumulate(layer.inputs[1], gb)
            elif layer.kind == "concat_junction":
                for ref, gi in zip(layer.inputs, ops.concat_backward(g, cache["concat"])):
                    accumulate(ref, gi)
            elif "gpool" in cache:
                accumulate(layer.inputs[0], ops.global_pool_backward(g, cache["gpool"]))
            else:
                accumulate(layer.inputs[0], ops.avg_pool_backward(g, cache["pool"]))
        dx = grads_out.get(INPUT)
        if dx is not None:
            dx = dx.transpose(0, 3, 1, 2)
        return pgrads, dx

    def state_dict(self):
        out = {}
        for lid, p in self.params.items():
            for name, v in p.items():
                out[f"{lid}/{name}"] = v
        for lid, b in self.buffers.items():
            for name, v in b.items():
                out[f"{lid}/running_{name}"] = v
        return out

    def load_state_dict(self, state):
        for key, value in state.items():
            lid, name = key.rsplit("/", 1)
            if name.startswith("running_"):
                target = self.buffers[lid][name[len("running_"):]]
            else:
                target = self.params[lid][name]
            if target.shape != value.shape:
                raise ValueError(f"{key}: shape {value.shape} does not match {target.shape}")
            target[...] = value

    def save(self, path):
        """Write a checkpoint: an ``.npz`` archive with one array per
        ``<layer id>/<parameter>`` plus a JSON ``__meta__`` entry."""
        meta = {"topology": self.topology.to_dict(),
                "channels": list(self.config.channels),
                "frozen": list(self.config.frozen),
                "dtype": self.dtype.name}
        arrays = dict(self.state_dict())
        arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        from ..io import topology_from_dict

        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            state = {k: data[k] for k in data.files if k != "__meta__"}
        topology = topology_from_dict(meta["topology"], source=str(path))
        net = cls(topology, ChannelConfig(meta["channels"], meta["frozen"]), dtype=meta["dtype"])
        net.load_state_dict(state)
        return net
