"""scikit-learn style wrapper around the segmentation network."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import ModelConfig
from .decoder import build_decoder_graph, model_forward
from .metrics import MetricReport, metrics_compute
from .serialization import load_checkpoint, save_checkpoint
from .tensor import Tensor
from .training import train
from .validation import check_images, check_labels


class ClassAwareSegmenter(BaseEstimator):
    """Class-aware segmentation network trained with momentum SGD.

    ``fit`` takes images ``N x 3 x H x W`` and integer labels ``N x H x W``;
    ``predict`` returns per-pixel class indices.  Hyper-parameters mirror
    :class:`~logcan.config.ModelConfig` plus the number of training ``steps``.

    Attributes set by ``fit``: ``params_`` (name -> Tensor), ``history_``
    (per-step losses) and ``classes_``.
    """

    def __init__(
        self,
        classes=6,
        width_factor=0.125,
        d=40,
        grids=((4, 4), (4, 4), (4, 4), (4, 4)),
        aux_weight=0.4,
        steps=300,
        base_lr=0.01,
        momentum=0.9,
        power=0.9,
        weight_decay=1e-4,
        seed=42,
    ):
        self.classes = classes
        self.width_factor = width_factor
        self.d = d
        self.grids = grids
        self.aux_weight = aux_weight
        self.steps = steps
        self.base_lr = base_lr
        self.momentum = momentum
        self.power = power
        self.weight_decay = weight_decay
        self.seed = seed

    @classmethod
    def from_config(cls, config: ModelConfig, steps: int = 300) -> "ClassAwareSegmenter":
        return cls(
            classes=config.classes, width_factor=config.width_factor, d=config.d,
            grids=tuple(tuple(g) for g in config.grids), aux_weight=config.aux_weight, steps=steps,
            base_lr=config.base_lr, momentum=config.momentum, power=config.power,
            weight_decay=config.weight_decay, seed=config.seed,
        )

    def to_config(self) -> ModelConfig:
        return ModelConfig(
            classes=self.classes, width_factor=self.width_factor, d=self.d,
            grids=tuple(tuple(g) for g in self.grids), aux_weight=self.aux_weight, seed=self.seed,
            base_lr=self.base_lr, momentum=self.momentum, power=self.power, weight_decay=self.weight_decay,
        )

    def fit(self, X, y, callback=None):
        X = check_images(X)
        y = check_labels(y, X, self.classes)
        self.params_, self.history_ = train(X, y, self.to_config(), self.steps, callback=callback)
        self.classes_ = np.arange(self.classes)
        return self

    def decision_function(self, X) -> np.ndarray:
        """Per-pixel class logits, ``N x K x H x W``."""
        check_is_fitted(self, "params_")
        logits, _ = model_forward(Tensor(check_images(X)), self.to_config(), self.params_)
        return logits.numpy()

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=1).astype(np.uint8)

    def evaluate(self, X, y) -> MetricReport:
        X = check_images(X)
        return metrics_compute(self.predict(X), check_labels(y, X, self.classes), self.classes)

    def score(self, X, y) -> float:
        """Overall pixel accuracy."""
        return self.evaluate(X, y).oa

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_)

    def load(self, path) -> "ClassAwareSegmenter":
        """Load parameters from an LGC1 checkpoint, checking them against this configuration."""
        loaded = load_checkpoint(path)
        # parameter shapes do not depend on the input extents
        expected = build_decoder_graph(self.to_config(), 1, 64, 64).param_shapes()
        got = {k: v.shape for k, v in loaded.items()}
        if expected != got:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            wrong = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
            raise ValueError(
                f"checkpoint does not match configuration: missing {missing[:3]}, "
                f"unexpected {extra[:3]}, mis-shaped {wrong[:3]}"
            )
        self.params_ = {k: Tensor(v.data, requires_grad=True) for k, v in loaded.items()}
        self.classes_ = np.arange(self.classes)
        return self
