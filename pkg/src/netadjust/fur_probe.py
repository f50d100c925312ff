"""FLOPs utilization ratio (FUR) estimation by equal-FLOPs channel dropout.

Each adjustable layer is probed on its own: its output channels are dropped
with a probability chosen so that the expected FLOPs removed is the same
``delta_flops`` for every layer. FUR is then the accuracy lost per FLOP
removed, and because the denominator is shared, ranking layers by FUR is the
same as ranking them by accuracy drop.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _streams
from .exceptions import ProbeError
from .topology import dflops_dc, flops

logger = logging.getLogger(__name__)

FUR_COLUMNS = ("iteration", "layer_id", "p", "mean_drop", "std", "fur", "clamped_flag")


def spatial_dropout_mask(channels, p, rng, rescale=True, size=None):
    """Per-channel multipliers for SpatialDropout.

    Each channel is zeroed with probability ``p``; survivors are scaled by
    ``1 / (1 - p)`` when ``rescale`` is on. ``size`` prepends batch
    dimensions, e.g. ``size=(n,)`` gives one independent mask per sample.
    The same multiplier applies at every spatial position of a channel.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability must be in [0, 1), got {p}")
    shape = (channels,) if size is None else tuple(np.atleast_1d(size)) + (channels,)
    if p == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    scale = 1.0 / (1.0 - p) if rescale else 1.0
    return keep * scale


def gaussian_dropout_mask(channels, p, rng, size=None):
    """Multiplicative N(1, p / (1 - p)) noise per channel, matching the
    variance of rescaled Bernoulli dropout."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability must be in [0, 1), got {p}")
    shape = (channels,) if size is None else tuple(np.atleast_1d(size)) + (channels,)
    if p == 0.0:
        return np.ones(shape)
    return 1.0 + np.sqrt(p / (1.0 - p)) * rng.standard_normal(shape)


@dataclass(frozen=True)
class ProbePlan:
    """Drop probabilities for one round of probes.

    ``per_layer_drop_prob[i]`` is None for probe-infeasible layers (zero
    FLOPs derivative). ``achieved_delta[i]`` is the expected FLOPs actually
    removed; it equals ``delta_flops`` unless the layer was clamped at
    ``p_max`` or the plan uses a fixed probability.
    """

    layer_ids: tuple
    indices: tuple
    delta_flops: float
    per_layer_drop_prob: tuple
    achieved_delta: tuple
    clamped: tuple
    mc_samples: int = 8
    rescale: bool = True
    p_max: float = 0.5
    fixed_p: float | None = None

    @property
    def feasible(self):
        return tuple(p is not None for p in self.per_layer_drop_prob)

    def to_dict(self):
        return {
            "delta_flops": float(self.delta_flops),
            "mc_samples": self.mc_samples,
            "rescale": self.rescale,
            "p_max": self.p_max,
            "fixed_p": self.fixed_p,
            "layers": [
                {"layer_id": lid, "p": p, "achieved_delta": d, "clamped": c}
                for lid, p, d, c in zip(self.layer_ids, self.per_layer_drop_prob,
                                        self.achieved_delta, self.clamped)
            ],
        }


def build_probe_plan(topology, config, delta_flops_fraction=0.02, mc_samples=8, p_max=0.5,
                     rescale=True, min_channels=1, fixed_p=None):
    """Solve ``p_l * c_l * dFLOPs/dc_l = delta_flops`` for every unfrozen layer.

    ``delta_flops`` is ``delta_flops_fraction * FLOPs(config) / L`` with L the
    number of probed layers. With ``fixed_p`` set, every layer is dropped at
    that probability instead (layers are then ranked by raw accuracy drop).
    """
    if fixed_p is None and delta_flops_fraction <= 0:
        raise ValueError("delta_flops_fraction must be positive")
    if fixed_p is not None and not 0.0 <= fixed_p <= p_max:
        raise ValueError(f"fixed_p must be in [0, {p_max}]")
    if mc_samples < 1:
        raise ValueError("mc_samples must be at least 1")
    if not 0.0 < p_max < 1.0:
        raise ValueError("p_max must be in (0, 1)")
    topology.check_config(config, min_channels)
    free = config.free_indices
    if not free:
        raise ValueError("every layer is frozen; nothing to probe")
    delta = delta_flops_fraction * flops(topology, config).total / len(free)

    probs, achieved, clamped = [], [], []
    for i in free:
        lid = topology.adjustable_ids[i]
        cost = config.channels[i] * dflops_dc(topology, config, i, min_channels)
        if cost <= 0:
            logger.info("layer %s has zero FLOPs derivative; probe infeasible", lid)
            probs.append(None)
            achieved.append(None)
            clamped.append(False)
            continue
        if fixed_p is not None:
            p, was_clamped = float(fixed_p), False
        else:
            p = delta / cost
            was_clamped = p > p_max
            p = min(p, p_max)
        probs.append(p)
        achieved.append(p * cost)
        clamped.append(was_clamped)
    return ProbePlan(
        layer_ids=tuple(topology.adjustable_ids[i] for i in free),
        indices=tuple(free),
        delta_flops=delta,
        per_layer_drop_prob=tuple(probs),
        achieved_delta=tuple(achieved),
        clamped=tuple(clamped),
        mc_samples=mc_samples,
        rescale=rescale,
        p_max=p_max,
        fixed_p=fixed_p,
    )


@dataclass(frozen=True)
class FurEntry:
    layer_id: str
    index: int
    p: float | None
    mean_accuracy: float | None
    std: float | None
    fur: float | None
    clamped: bool = False

    @property
    def feasible(self):
        return self.fur is not None


@dataclass
class FurReport:
    base_accuracy: float
    entries: list
    plan: ProbePlan
    iteration: int = 0

    def furs(self):
        """FUR per probed layer id; None marks probe-infeasible layers."""
        return {e.layer_id: e.fur for e in self.entries}

    def drops(self):
        return {e.layer_id: (None if e.mean_accuracy is None else self.base_accuracy - e.mean_accuracy)
                for e in self.entries}

    def spread(self):
        values = [e.fur for e in self.entries if e.fur is not None]
        return max(values) - min(values) if values else 0.0

    def rows(self):
        for e in self.entries:
            drop = None if e.mean_accuracy is None else self.base_accuracy - e.mean_accuracy
            yield {
                "iteration": self.iteration,
                "layer_id": e.layer_id,
                "p": e.p,
                "mean_drop": drop,
                "std": e.std,
                "fur": e.fur,
                "clamped_flag": int(e.clamped),
            }

    def to_dict(self):
        return {
            "iteration": self.iteration,
            "base_accuracy": self.base_accuracy,
            "plan": self.plan.to_dict(),
            "layers": [
                {"layer_id": e.layer_id, "p": e.p, "mean_accuracy": e.mean_accuracy,
                 "std": e.std, "fur": e.fur, "clamped": e.clamped}
                for e in self.entries
            ],
        }


def _probe_layer(evaluator, handle, plan, k, base, seed, iteration):
    lid, p = plan.layer_ids[k], plan.per_layer_drop_prob[k]
    if p is None:
        return FurEntry(lid, plan.indices[k], None, None, None, None)
    ss = _streams.seed_sequence(seed, "probe", iteration, lid)
    try:
        samples = np.asarray(evaluator.drop_samples(handle, lid, p, plan.mc_samples, ss), dtype=float)
    except Exception as exc:
        raise ProbeError(f"evaluation with dropout failed: {exc}", lid) from exc
    mean = float(samples.mean())
    drop = base - mean
    if plan.fixed_p is not None:
        fur = drop
    else:
        fur = drop / plan.achieved_delta[k]
    return FurEntry(lid, plan.indices[k], p, mean, float(samples.std()), fur, plan.clamped[k])


def estimate_fur(evaluator, handle, plan, seed=0, iteration=0, threads=1):
    """Probe every layer of ``plan`` against a trained ``handle``.

    Each layer draws from its own random stream ``(seed, iteration, layer)``,
    so results do not depend on probe order or on ``threads``.
    """
    base = float(evaluator.evaluate(handle, "val"))
    idx = range(len(plan.layer_ids))
    if threads > 1 and getattr(evaluator, "concurrent_safe", False):
        with ThreadPoolExecutor(max_workers=threads) as pool:
            entries = list(pool.map(
                lambda k: _probe_layer(evaluator, handle, plan, k, base, seed, iteration), idx))
    else:
        entries = [_probe_layer(evaluator, handle, plan, k, base, seed, iteration) for k in idx]
    return FurReport(base, entries, plan, iteration)
