"""Closed-form accuracy surrogate for oracle testing."""

from dataclasses import dataclass

import numpy as np

from ..topology import ChannelConfig, dflops_dc
from .contract import Evaluator


@dataclass(frozen=True)
class SurrogateHandle:
    config: ChannelConfig


class SurrogateLogEvaluator(Evaluator):
    """Accuracy ``sigmoid((sum_l w_l log(1 + c_l) - bias) / temperature)``.

    Weights are normalized to sum to one. Training is a no-op and dropping
    layer ``l`` with probability ``p`` is modelled as ``c_l -> c_l (1 - p)``,
    so probes are deterministic and comparable to analytic derivatives.
    """

    def __init__(self, topology, weights=None, bias=0.0, temperature=1.0):
        n = topology.n_adjustable
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
        if w.shape != (n,):
            raise ValueError(f"expected {n} weights, got {w.shape}")
        if np.any(w <= 0):
            raise ValueError("surrogate weights must be positive")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.topology = topology
        self.weights = w / w.sum()
        self.bias = float(bias)
        self.temperature = float(temperature)

    def logit(self, channels):
        c = np.asarray(channels, dtype=float)
        return (np.log1p(c) @ self.weights - self.bias) / self.temperature

    def accuracy(self, channels):
        """Surrogate accuracy of one channel vector, or of each row of a matrix."""
        return 1.0 / (1.0 + np.exp(-self.logit(channels)))

    def train(self, topology, config, budget=None, seed=0):
        if topology.adjustable_ids != self.topology.adjustable_ids:
            raise ValueError("surrogate was built for a different topology")
        topology.check_config(config)
        return SurrogateHandle(config)

    def evaluate(self, handle, split="val"):
        return float(self.accuracy(handle.config.channels))

    def _drop_samples(self, handle, layer_id, p, mc_samples, seed_seq):
        c = np.asarray(handle.config.channels, dtype=float)
        c[self.topology.adjustable_index(layer_id)] *= 1.0 - p
        return np.full(mc_samples, float(self.accuracy(c)))

    def gradient(self, channels):
        """d accuracy / d c_l in closed form."""
        a = self.accuracy(channels)
        c = np.asarray(channels, dtype=float)
        return a * (1 - a) * self.weights / (1.0 + c) / self.temperature

    def finite_difference_fur(self, config, min_channels=1):
        """FUR from accuracy differences at ``c_l +/- 1`` over the FLOPs derivative."""
        out = []
        for i in range(len(config)):
            up = np.asarray(config.channels, dtype=float)
            up[i] += 1
            if config.channels[i] - 1 < min_channels:
                dacc = self.accuracy(up) - self.accuracy(config.channels)
            else:
                down = np.asarray(config.channels, dtype=float)
                down[i] -= 1
                dacc = (self.accuracy(up) - self.accuracy(down)) / 2
            out.append(float(dacc) / dflops_dc(self.topology, config, i, min_channels))
        return np.asarray(out)
