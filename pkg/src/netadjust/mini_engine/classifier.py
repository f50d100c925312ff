"""scikit-learn compatible classifier around :class:`ConvNet`."""

from __future__ import annotations

import logging
import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .. import _streams
from ..exceptions import TrainingDivergedError
from .network import ConvNet
from .ops import softmax_cross_entropy

logger = logging.getLogger(__name__)


def cosine_lr(step, total_steps, lr_max, lr_min):
    if total_steps <= 1:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / (total_steps - 1)))


def check_images(X, topology, dtype=np.float64):
    """Validate a (N, C, H, W) batch against the topology input shape."""
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_min_samples=1)
    if X.ndim != 4 or X.shape[1:] != topology.input_shape:
        raise ValueError(f"X has shape {X.shape}; expected (n_samples, *{topology.input_shape})")
    return X


class ConvNetClassifier(ClassifierMixin, BaseEstimator):
    """Train a topology at a given channel configuration with SGD.

    Parameters
    ----------
    topology : NetworkTopology
    channels : ChannelConfig, optional
        Defaults to the widths written in the topology.
    epochs : int
        Passes over the training data; 0 leaves the initial weights.
    lr_max, lr_min : float
        Cosine-annealed learning rate endpoints.
    dropout : float
        SpatialDropout probability on every conv layer during training.
    dropout_kind : {"bernoulli", "gaussian"}
    dtype : {"float64", "float32"}
    random_state : int
        Seeds weight init, batch order and dropout masks.
    """

    def __init__(self, topology=None, channels=None, epochs=20, batch_size=32, lr_max=0.15,
                 lr_min=1e-3, momentum=0.9, weight_decay=5e-4, dropout=0.05,
                 dropout_kind="bernoulli", rescale=True, dtype="float64", random_state=0):
        self.topology = topology
        self.channels = channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.dropout_kind = dropout_kind
        self.rescale = rescale
        self.dtype = dtype
        self.random_state = random_state

    def _init_network(self):
        config = self.channels if self.channels is not None else self.topology.default_config()
        rng = _streams.rng(self.random_state, "init")
        return ConvNet(self.topology, config, rng=rng, dtype=self.dtype)

    def fit(self, X, y):
        if self.topology is None:
            raise ValueError("topology is required")
        if self.dropout_kind not in ("bernoulli", "gaussian"):
            raise ValueError(f"unknown dropout_kind {self.dropout_kind!r}")
        X = check_images(X, self.topology, self.dtype)
        y = np.asarray(y)
        check_classification_targets(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        net = self._init_network()
        if len(self.classes_) > net.n_outputs:
            raise ValueError(f"{len(self.classes_)} classes but the network has {net.n_outputs} outputs")

        order_rng = _streams.rng(self.random_state, "train", "order")
        drop_rng = _streams.rng(self.random_state, "train", "dropout")
        velocity = {lid: {k: np.zeros_like(v) for k, v in p.items()} for lid, p in net.params.items()}
        n = len(X)
        steps_per_epoch = math.ceil(n / self.batch_size)
        total = self.epochs * steps_per_epoch
        self.loss_curve_ = []
        step = 0
        for epoch in range(self.epochs):
            perm = order_rng.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, self.batch_size):
                idx = perm[start:start + self.batch_size]
                logits, tape = net.forward(X[idx], train=True, rng=drop_rng,
                                           train_dropout=self.dropout, dropout_kind=self.dropout_kind,
                                           rescale=self.rescale, keep_tape=True)
                loss, dlogits = softmax_cross_entropy(logits, y_idx[idx])
                if not np.isfinite(loss):
                    worst = dict(sorted(tape["act_max"].items(), key=lambda kv: -kv[1])[:5])
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step} (epoch {epoch}); largest activations: {worst}",
                        iteration=step, activation_max=tape["act_max"])
                grads, _ = net.backward(tape, dlogits)
                lr = cosine_lr(step, total, self.lr_max, self.lr_min)
                sgd_step(net.params, grads, velocity, lr, self.momentum, self.weight_decay)
                epoch_loss += loss * len(idx)
                step += 1
            self.loss_curve_.append(epoch_loss / n)
            logger.debug("epoch %d loss %.4f", epoch, self.loss_curve_[-1])
        self.network_ = net
        self.n_iter_ = step
        return self

    def decision_function(self, X, drop=None, rng=None, batch_size=256):
        """Logits; ``drop`` maps layer ids to probe-time dropout probabilities."""
        check_is_fitted(self, "network_")
        X = check_images(X, self.topology, self.dtype)
        out = [self.network_.forward(X[i:i + batch_size], drop=drop, rng=rng,
                                     dropout_kind=self.dropout_kind, rescale=self.rescale)
               for i in range(0, len(X), batch_size)]
        return np.concatenate(out)[:, :len(self.classes_)]

    def predict_proba(self, X, drop=None, rng=None):
        z = self.decision_function(X, drop=drop, rng=rng)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X, drop=None, rng=None):
        return self.classes_[np.argmax(self.decision_function(X, drop=drop, rng=rng), axis=1)]

    def score_with_drop(self, X, y, layer_id, p, rng):
        return float(np.mean(self.predict(X, drop={layer_id: p}, rng=rng) == np.asarray(y)))


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """In-place SGD with momentum; weight decay applies to weight tensors only."""
    for lid, pg in grads.items():
        for name, g in pg.items():
            p = params[lid][name]
            if weight_decay and name == "w":
                g = g + weight_decay * p
            v = velocity[lid][name]
            v *= momentum
            v += g
            p -= lr * v
