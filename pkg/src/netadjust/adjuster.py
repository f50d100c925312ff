"""Iterative channel adjustment under a fixed FLOPs budget.

Each iteration trains the current configuration from scratch, measures its
validation accuracy and per-layer FUR, widens the ``k`` layers with the
highest FUR and narrows the ``k`` with the lowest by ``r_A`` times their
initial width, and rescales everything back onto the budget. The best
configuration over all iterations is returned.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import _streams
from .fur_probe import FurReport, build_probe_plan, estimate_fur
from .topology import ChannelConfig, flops, round_half_away, scale_to_budget

logger = logging.getLogger(__name__)


def k_schedule_default(t, T, k0):
    """Linear decay from ``k0`` at ``t = 1`` towards 1 at ``t = T``."""
    if not 1 <= t <= max(T, 1):
        raise ValueError(f"iteration {t} outside 1..{T}")
    return max(1, round_half_away(k0 * (1 - (t - 1) / T)))


def k_schedule_constant(t, T, k0):
    return k0


K_SCHEDULES = {"linear": k_schedule_default, "constant": k_schedule_constant}


@dataclass
class AdjusterConfig:
    adjusted_layers: int = 1
    adjusting_rate: float = 0.1
    max_iterations: int = 10
    k_schedule: str | Callable = "linear"
    budget: float | None = None
    scale_tolerance: float = 0.01
    train_budget: int | None = None
    seed: int = 0
    min_channels: int = 1
    freeze_stem: bool = False
    early_stop_patience: int | None = None
    delta_flops_fraction: float = 0.02
    mc_samples: int = 8
    p_max: float = 0.5
    rescale: bool = True
    fixed_p: float | None = None
    probe_final: bool = True
    threads: int = 1

    def schedule(self):
        if callable(self.k_schedule):
            return self.k_schedule
        try:
            return K_SCHEDULES[self.k_schedule]
        except KeyError:
            raise ValueError(f"unknown k_schedule {self.k_schedule!r}") from None

    def k_at(self, t):
        return self.schedule()(t, self.max_iterations, self.adjusted_layers)

    def validate(self, n_free):
        if self.adjusting_rate <= 0:
            raise ValueError("adjusting_rate must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")
        if self.adjusted_layers < 1:
            raise ValueError("adjusted_layers must be at least 1")
        if self.scale_tolerance <= 0:
            raise ValueError("scale_tolerance must be positive")
        if self.min_channels < 1:
            raise ValueError("min_channels must be at least 1")
        for t in range(1, self.max_iterations + 1):
            k = self.k_at(t)
            if k < 1 or 2 * k > n_free:
                raise ValueError(
                    f"k = {k} at iteration {t} needs 2k <= {n_free} adjustable unfrozen layers")


@dataclass
class IterationRecord:
    iteration: int
    config: ChannelConfig
    accuracy: float
    flops: int
    fur: FurReport | None = None
    k: int | None = None
    top: tuple = ()
    bottom: tuple = ()
    floored: tuple = ()
    scale_factor: float = 1.0


@dataclass
class AdjustmentTrace:
    budget: float
    records: list = field(default_factory=list)
    best_iteration: int | None = None
    best_config: ChannelConfig | None = None
    stopped_early: bool = False

    def select_best(self):
        """Highest validation accuracy; ties go to the later iteration."""
        best = None
        for r in self.records:
            if best is None or r.accuracy >= best.accuracy:
                best = r
        self.best_iteration = best.iteration
        self.best_config = best.config
        return best

    @property
    def accuracies(self):
        return [r.accuracy for r in self.records]

    @property
    def flops(self):
        return [r.flops for r in self.records]


def select_extremes(report, k):
    """Indices (into the adjustable-layer vector) of the ``k`` highest and
    ``k`` lowest FUR layers. Probe-infeasible layers are skipped; ties go to
    the lower layer index. With fewer than ``2k`` comparable layers, ``k``
    drops to ``floor(available / 2)``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    usable = [(e.fur, e.index) for e in report.entries if e.fur is not None]
    if len(usable) < 2 * k:
        new_k = len(usable) // 2
        logger.warning("only %d comparable layers; reducing k from %d to %d", len(usable), k, new_k)
        k = new_k
    if k == 0:
        return (), ()
    top = [i for _, i in sorted(usable, key=lambda fi: (-fi[0], fi[1]))[:k]]
    rest = [fi for fi in usable if fi[1] not in top]
    bottom = [i for _, i in sorted(rest, key=lambda fi: (fi[0], fi[1]))[:k]]
    return tuple(top), tuple(bottom)


def apply_adjustment(config, initial, top, bottom, rate, min_channels=1):
    """Widen ``top`` and narrow ``bottom`` by ``rate * initial`` channels,
    rounding halves away from zero and flooring at ``min_channels``."""
    if set(top) & set(bottom):
        raise ValueError("top and bottom sets overlap")
    channels = list(config.channels)
    for i in top:
        channels[i] = round_half_away(config.channels[i] + rate * initial.channels[i])
    for i in bottom:
        channels[i] = max(min_channels, round_half_away(config.channels[i] - rate * initial.channels[i]))
    return config.with_channels(channels)


def _floored(config, initial, bottom, rate, min_channels):
    return tuple(i for i in bottom
                 if round_half_away(config.channels[i] - rate * initial.channels[i]) < min_channels)


def run(topology, initial_config, evaluator, cfg=None, callback=None):
    """Run the adjustment loop and return an :class:`AdjustmentTrace`.

    Iteration 0 trains and evaluates ``initial_config``; iterations 1..T each
    adjust, rescale, retrain and evaluate. ``callback(record)`` is invoked
    after every iteration. If the evaluator fails, the exception propagates
    with the partial trace attached as ``exc.partial_trace``.
    """
    cfg = cfg or AdjusterConfig()
    if initial_config is None:
        initial_config = topology.default_config()
    if cfg.freeze_stem:
        frozen = list(initial_config.frozen)
        frozen[0] = True
        initial_config = initial_config.with_frozen(frozen)
    topology.check_config(initial_config, cfg.min_channels)
    cfg.validate(len(initial_config.free_indices))

    budget = cfg.budget if cfg.budget is not None else flops(topology, initial_config).total
    if abs(flops(topology, initial_config).total - budget) / budget > cfg.scale_tolerance:
        initial_config = scale_to_budget(topology, initial_config, budget, cfg.scale_tolerance,
                                         cfg.min_channels)
    trace = AdjustmentTrace(budget=budget)
    config = initial_config
    since_best = 0
    try:
        for t in range(cfg.max_iterations + 1):
            record = IterationRecord(t, config, 0.0, 0)
            if t > 0:
                report = trace.records[-1].fur
                k = cfg.k_at(t)
                top, bottom = select_extremes(report, k)
                moved = apply_adjustment(config, initial_config, top, bottom,
                                         cfg.adjusting_rate, cfg.min_channels)
                floored = _floored(config, initial_config, bottom, cfg.adjusting_rate, cfg.min_channels)
                config, alpha = scale_to_budget(topology, moved, budget, cfg.scale_tolerance,
                                                cfg.min_channels, full_output=True)
                record = IterationRecord(t, config, 0.0, 0, k=k, top=top, bottom=bottom,
                                         floored=floored, scale_factor=alpha)
            handle = evaluator.train(topology, config, cfg.train_budget,
                                     seed=int(_streams.seed_sequence(cfg.seed, "train", t)
                                              .generate_state(1)[0]))
            record.accuracy = float(evaluator.evaluate(handle, "val"))
            record.flops = flops(topology, config).total
            if t < cfg.max_iterations or cfg.probe_final:
                plan = build_probe_plan(topology, config, cfg.delta_flops_fraction, cfg.mc_samples,
                                        cfg.p_max, cfg.rescale, cfg.min_channels, cfg.fixed_p)
                record.fur = estimate_fur(evaluator, handle, plan, seed=cfg.seed, iteration=t,
                                          threads=cfg.threads)
            trace.records.append(record)
            logger.debug("iteration %d: acc %.4f flops %d config %s", t, record.accuracy,
                        record.flops, config)
            if callback is not None:
                callback(record)

            if t > 0 and record.accuracy <= max(r.accuracy for r in trace.records[:-1]):
                since_best += 1
            else:
                since_best = 0
            if cfg.early_stop_patience and since_best >= cfg.early_stop_patience:
                trace.stopped_early = True
                logger.info("validation accuracy plateaued; stopping after iteration %d", t)
                break
    except Exception as exc:
        if trace.records:
            trace.select_best()
        exc.partial_trace = trace
        raise
    trace.select_best()
    return trace


class NetworkAdjuster(BaseEstimator):
    """Estimator front-end for :func:`run`.

    ``fit(topology, initial_config=None)`` searches channel counts and sets
    ``trace_``, ``best_config_``, ``best_iteration_`` and ``budget_``.
    ``transform(topology)`` returns the best config.
    """

    def __init__(self, evaluator=None, adjusted_layers=1, adjusting_rate=0.1, max_iterations=10,
                 k_schedule="linear", budget=None, scale_tolerance=0.01, train_budget=None,
                 min_channels=1, freeze_stem=False, early_stop_patience=None,
                 delta_flops_fraction=0.02, mc_samples=8, p_max=0.5, rescale=True, fixed_p=None,
                 probe_final=True, threads=1, random_state=0):
        self.evaluator = evaluator
        self.adjusted_layers = adjusted_layers
        self.adjusting_rate = adjusting_rate
        self.max_iterations = max_iterations
        self.k_schedule = k_schedule
        self.budget = budget
        self.scale_tolerance = scale_tolerance
        self.train_budget = train_budget
        self.min_channels = min_channels
        self.freeze_stem = freeze_stem
        self.early_stop_patience = early_stop_patience
        self.delta_flops_fraction = delta_flops_fraction
        self.mc_samples = mc_samples
        self.p_max = p_max
        self.rescale = rescale
        self.fixed_p = fixed_p
        self.probe_final = probe_final
        self.threads = threads
        self.random_state = random_state

    def _adjuster_config(self):
        params = self.get_params()
        params.pop("evaluator")
        params["seed"] = params.pop("random_state")
        return AdjusterConfig(**params)

    def fit(self, topology, initial_config=None, callback=None):
        if self.evaluator is None:
            raise ValueError("an evaluator is required")
        self.trace_ = run(topology, initial_config, self.evaluator, self._adjuster_config(), callback)
        self.best_config_ = self.trace_.best_config
        self.best_iteration_ = self.trace_.best_iteration
        self.budget_ = self.trace_.budget
        self.topology_ = topology
        return self

    def transform(self, topology=None):
        check_is_fitted(self, "best_config_")
        return self.best_config_

    def fit_transform(self, topology, initial_config=None):
        return self.fit(topology, initial_config).best_config_
