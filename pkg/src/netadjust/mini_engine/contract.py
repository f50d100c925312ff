from abc import ABC, abstractmethod

import numpy as np


class Evaluator(ABC):
    """Source of accuracies for a channel configuration.

    ``train`` returns an opaque handle for a trained model; the other methods
    only read it. Implementations that cannot serve concurrent reads set
    ``concurrent_safe = False`` and probes then run sequentially.
    """

    concurrent_safe = True

    @abstractmethod
    def train(self, topology, config, budget=None, seed=0):
        """Train ``config`` from scratch and return a model handle."""

    @abstractmethod
    def evaluate(self, handle, split="val"):
        """Top-1 accuracy in [0, 1] on ``split``; deterministic per handle."""

    @abstractmethod
    def _drop_samples(self, handle, layer_id, p, mc_samples, seed_seq):
        pass

    def drop_samples(self, handle, layer_id, p, mc_samples, seed_seq):
        """Validation accuracies for ``mc_samples`` independent dropout draws
        on ``layer_id``. ``p == 0`` returns the plain evaluation exactly."""
        if not 0.0 <= p < 1.0:
            raise ValueError(f"drop probability must be in [0, 1), got {p}")
        if p == 0.0:
            return np.full(mc_samples, self.evaluate(handle, "val"))
        return np.asarray(self._drop_samples(handle, layer_id, p, mc_samples, seed_seq), dtype=float)

    def evaluate_with_drop(self, handle, layer_id, p, mc_samples, seed_seq):
        if p == 0.0:
            return self.evaluate(handle, "val")
        return float(np.mean(self.drop_samples(handle, layer_id, p, mc_samples, seed_seq)))
