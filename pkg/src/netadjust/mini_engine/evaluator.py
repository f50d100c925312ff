"""Evaluator backed by the numpy CNN trained on synthetic data."""

import numpy as np

from .. import _streams
from .classifier import ConvNetClassifier
from .contract import Evaluator
from .data import Dataset, SyntheticDatasetSpec, make_dataset
from .network import ConvNet


class CNNEvaluator(Evaluator):
    """Trains :class:`ConvNetClassifier` from scratch for every config.

    ``epochs`` is the reduced per-iteration budget used during search;
    ``train(..., budget=n)`` overrides it (e.g. for full-budget retraining).
    """

    concurrent_safe = True

    def __init__(self, dataset=None, epochs=2, batch_size=32, lr_max=0.15, lr_min=1e-3,
                 momentum=0.9, weight_decay=5e-4, train_dropout=0.05, dropout_kind="bernoulli",
                 rescale=True, dtype="float64", max_train_samples=None, max_val_samples=None):
        if dataset is None:
            dataset = SyntheticDatasetSpec()
        if isinstance(dataset, SyntheticDatasetSpec):
            dataset = make_dataset(dataset)
        if not isinstance(dataset, Dataset):
            raise TypeError("dataset must be a Dataset or SyntheticDatasetSpec")
        self.dataset = dataset
        self.epochs = epochs
        self.classifier_params = dict(
            batch_size=batch_size, lr_max=lr_max, lr_min=lr_min, momentum=momentum,
            weight_decay=weight_decay, dropout=train_dropout, dropout_kind=dropout_kind,
            rescale=rescale, dtype=dtype)
        self.max_train_samples = max_train_samples
        self.max_val_samples = max_val_samples

    def _split(self, name):
        X, y = self.dataset.split(name)
        cap = {"train": self.max_train_samples, "val": self.max_val_samples}.get(name)
        if cap is not None and cap < len(X):
            idx = np.sort(_streams.rng(0, "subset", name).permutation(len(X))[:cap])
            X, y = X[idx], y[idx]
        return X, y

    def train(self, topology, config, budget=None, seed=0):
        epochs = self.epochs if budget is None else int(budget)
        clf = ConvNetClassifier(topology=topology, channels=config, epochs=epochs,
                                random_state=seed, **self.classifier_params)
        return clf.fit(*self._split("train"))

    def load_handle(self, path):
        """Handle for a saved :class:`ConvNet` checkpoint, ready for evaluation."""
        net = ConvNet.load(path)
        params = dict(self.classifier_params, dtype=net.dtype.name)
        clf = ConvNetClassifier(topology=net.topology, channels=net.config, epochs=0, **params)
        clf.network_ = net
        clf.classes_ = np.unique(self.dataset.y_train)
        return clf

    def evaluate(self, handle, split="val"):
        X, y = self._split(split)
        return float(handle.score(X, y))

    def _drop_samples(self, handle, layer_id, p, mc_samples, seed_seq):
        X, y = self._split("val")
        out = np.empty(mc_samples)
        for m in range(mc_samples):
            rng = np.random.default_rng(_streams.child(seed_seq, m))
            out[m] = handle.score_with_drop(X, y, layer_id, p, rng)
        return out
