"""Exhaustive search over channel configurations for closed-form evaluators."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import SearchSpaceTooLarge
from .topology import flops_totals

DEFAULT_MAX_CONFIGS = 10_000_000


@dataclass
class OracleResult:
    budget: float
    band: float
    cardinality: int
    configs: np.ndarray      # (n_feasible, L), sorted by accuracy, best first
    accuracies: np.ndarray
    flops: np.ndarray

    @property
    def empty(self):
        return len(self.configs) == 0

    @property
    def best_config(self):
        return None if self.empty else tuple(int(c) for c in self.configs[0])

    @property
    def best_accuracy(self):
        return None if self.empty else float(self.accuracies[0])


def search_cardinality(config, max_channels, min_channels=1):
    """Configurations enumerated explicitly: every free layer but the last.

    FLOPs are monotone in each channel count, so for a fixed prefix the
    in-band values of the last free layer form an interval found by bisection
    rather than enumeration.
    """
    free = config.free_indices
    return math.prod([max_channels - min_channels + 1] * max(len(free) - 1, 0))


def exhaustive_search(topology, evaluator, budget, band=0.01, max_channels=64, min_channels=1,
                      config=None, max_configs=DEFAULT_MAX_CONFIGS, chunk=200_000):
    """All configurations with ``|FLOPs - budget| / budget <= band``, ranked by
    ``evaluator.accuracy``. Frozen layers keep their value from ``config``."""
    config = topology.default_config() if config is None else config
    free = config.free_indices
    if not free:
        raise ValueError("every layer is frozen")
    card = search_cardinality(config, max_channels, min_channels)
    if card > max_configs:
        raise SearchSpaceTooLarge(card, max_configs)
    lo_f, hi_f = budget * (1 - band), budget * (1 + band)
    prefix, last = free[:-1], free[-1]
    grid = np.arange(min_channels, max_channels + 1, dtype=np.int64)
    base = np.asarray(config.channels, dtype=np.int64)

    found_cfg, found_acc, found_flops = [], [], []
    for start in range(0, card, chunk):
        idx = np.arange(start, min(card, start + chunk), dtype=np.int64)
        rows = np.tile(base, (len(idx), 1))
        rem = idx.copy()
        for j in reversed(prefix):
            rows[:, j] = grid[rem % len(grid)]
            rem //= len(grid)

        def total_at(values):
            trial = rows.copy()
            trial[:, last] = values
            return flops_totals(topology, trial)

        # smallest last-layer width reaching lo_f, and smallest exceeding hi_f
        lower = _first_true(lambda v: total_at(v) >= lo_f, min_channels, max_channels + 1, len(rows))
        upper = _first_true(lambda v: total_at(v) > hi_f, min_channels, max_channels + 1, len(rows))
        counts = np.maximum(upper - lower, 0)
        if not counts.any():
            continue
        rep = np.repeat(np.arange(len(rows)), counts)
        offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        cand = rows[rep]
        cand[:, last] = lower[rep] + offsets
        found_cfg.append(cand)
        found_acc.append(np.asarray(evaluator.accuracy(cand), dtype=float))
        found_flops.append(flops_totals(topology, cand))

    n_cols = topology.n_adjustable
    if found_cfg:
        configs = np.concatenate(found_cfg)
        accs = np.concatenate(found_acc)
        fl = np.concatenate(found_flops)
        # deterministic ranking: accuracy desc, then lexicographic config
        order = np.lexsort(tuple(configs[:, j] for j in reversed(range(n_cols))) + (-accs,))
        configs, accs, fl = configs[order], accs[order], fl[order]
    else:
        configs = np.zeros((0, n_cols), dtype=np.int64)
        accs = np.zeros(0)
        fl = np.zeros(0, dtype=np.int64)
    return OracleResult(budget, band, card, configs, accs, fl)


def _first_true(pred, lo, hi, n):
    """Per row, the smallest v in [lo, hi) with pred(v) true (hi if none);
    ``pred`` must be monotone in v."""
    lo_arr = np.full(n, lo, dtype=np.int64)
    hi_arr = np.full(n, hi, dtype=np.int64)
    while True:
        active = lo_arr < hi_arr
        if not active.any():
            return lo_arr
        mid = (lo_arr + hi_arr) // 2
        ok = pred(np.minimum(mid, hi - 1)) & active
        hi_arr = np.where(ok, mid, hi_arr)
        lo_arr = np.where(active & ~ok, mid + 1, lo_arr)
