"""Scikit-learn style estimators wrapping the graph trainer and the search.

``GraphEnsembleClassifier`` trains one fixed graph on (X, y) image arrays and
predicts with the ensemble sink. ``GraphRandomSearch`` explores graphs on a
class-balanced half split of the training data, then optionally refits the
best graph on everything. Both follow the usual conventions (constructor only
stores parameters, ``fit`` validates and learns, ``get_params`` works with
``clone``).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .data import ImageDataset, balanced_half_split
from .graph import (
    DEFAULT_ARCH,
    GraphSpec,
    InvalidGraphError,
    hyperparameter_space,
    validate_graph,
)
from .models import num_parameters
from .presets import make_preset
from .search import run_search
from .training import (
    TrainConfig,
    build_node_models,
    ensemble_logits,
    evaluate,
    predict_classes,
    train_graph,
)

import torch


def check_image_array(X) -> np.ndarray:
    """Coerce input images to float32 [N, 3, H, W] in [0, 1].

    Accepts channels-first or channels-last 4-D arrays; uint8 input is scaled
    by 1/255.
    """
    X = np.asarray(X)
    if X.ndim != 4:
        raise ValueError(
            f"expected a 4-D image array [N, 3, H, W] or [N, H, W, 3], got shape {X.shape}"
        )
    if X.shape[1] != 3 and X.shape[3] == 3:
        X = X.transpose(0, 3, 1, 2)
    if X.shape[1] != 3:
        raise ValueError(f"expected 3 channels, got shape {X.shape}")
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / 255.0
    return np.ascontiguousarray(X, dtype=np.float32)


def check_labels(y, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (encoded labels in 0..C-1, sorted original classes)."""
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(
            f"labels must be a 1-D array of length {n_samples}, got shape {y.shape}"
        )
    classes, encoded = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("need at least 2 classes")
    return encoded.astype(np.int64), classes


class GraphEnsembleClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier backed by a jointly trained graph of small backbones.

    Parameters
    ----------
    graph : GraphSpec or preset name, default "dml-2"
        The transfer graph to train. Preset names look like ``dml-2`` or
        ``independent-3``; see :func:`ktgraph.presets.list_presets`.
    arch : architecture identifier used when ``graph`` is a preset name.
    epochs, batch_size, learning_rate, momentum, weight_decay : schedule.
    width : backbone channel width.
    ensemble_mode : "logits" averages logits, "probs" averages softmax.
    seed : controls parameter init, batch order, and augmentation.
    """

    def __init__(
        self,
        graph="dml-2",
        arch: str = DEFAULT_ARCH,
        epochs: int = 20,
        batch_size: int = 32,
        learning_rate: float = 0.1,
        momentum: float = 0.9,
        weight_decay: float = 1e-4,
        width: int = 16,
        ensemble_mode: str = "logits",
        seed: int = 0,
    ):
        self.graph = graph
        self.arch = arch
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.width = width
        self.ensemble_mode = ensemble_mode
        self.seed = seed

    def _resolve_graph(self) -> GraphSpec:
        g = self.graph
        if isinstance(g, str):
            g = make_preset(g, node_arch=self.arch, seed=self.seed)
        violations = validate_graph(g)
        if violations:
            raise InvalidGraphError(violations)
        return g

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_initial=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            eval_checkpoints=(self.epochs,),
            seed=self.seed,
            ensemble_mode=self.ensemble_mode,
            model_width=self.width,
        )

    def fit(self, X, y):
        X = check_image_array(X)
        encoded, self.classes_ = check_labels(y, len(X))
        self.graph_ = self._resolve_graph()
        dataset = ImageDataset("fit", X, encoded, len(self.classes_))
        cfg = self._train_config()
        self.models_ = build_node_models(
            self.graph_, dataset.num_classes, cfg, dataset.image_size
        )
        record = train_graph(
            self.graph_, (dataset, dataset), cfg, models=self.models_
        )
        self.record_ = record
        self.n_parameters_ = sum(num_parameters(m) for m in self.models_)
        return self

    def _ensemble_scores(self, X) -> np.ndarray:
        if not hasattr(self, "models_"):
            raise RuntimeError("fit the estimator before predicting")
        X = check_image_array(X)
        scores = []
        with torch.no_grad():
            for m in self.models_:
                m.eval()
            for start in range(0, len(X), 256):
                batch = torch.from_numpy(X[start : start + 256])
                outs = [m(batch) for m in self.models_]
                if self.ensemble_mode == "probs":
                    pooled = torch.stack([o.probs for o in outs]).mean(dim=0)
                else:
                    pooled = ensemble_logits([o.logits for o in outs])
                scores.append(pooled.numpy())
        return np.concatenate(scores)

    def predict(self, X):
        scores = self._ensemble_scores(X)
        idx = predict_classes(torch.from_numpy(scores)).numpy()
        return self.classes_[idx]

    def predict_proba(self, X):
        scores = torch.from_numpy(self._ensemble_scores(X))
        if self.ensemble_mode == "probs":
            return scores.numpy()
        return torch.softmax(scores, dim=-1).numpy()

    def evaluate_nodes(self, X, y):
        """Per-node and ensemble accuracy on (X, y); diagnostic companion to
        ``score``, which only reports the ensemble."""
        X = check_image_array(X)
        y = np.asarray(y)
        encoded = np.searchsorted(self.classes_, y)
        dataset = ImageDataset("eval", X, encoded.astype(np.int64), len(self.classes_))
        return evaluate(self.models_, dataset, ensemble_mode=self.ensemble_mode)


class GraphRandomSearch(ClassifierMixin, BaseEstimator):
    """Random graph search with successive-halving pruning, as an estimator.

    ``fit`` splits (X, y) into a class-balanced half split, explores
    ``budget`` sampled graphs on it, stores the trial records, and (with
    ``refit=True``) retrains the best graph on all of (X, y).
    """

    def __init__(
        self,
        num_nodes: int = 2,
        budget: int = 8,
        arch: str = DEFAULT_ARCH,
        epochs: int = 8,
        batch_size: int = 32,
        learning_rate: float = 0.1,
        width: int = 16,
        guard: int = 5,
        parallelism: int = 1,
        pruning: bool = True,
        refit: bool = True,
        log_path=None,
        seed: int = 0,
    ):
        self.num_nodes = num_nodes
        self.budget = budget
        self.arch = arch
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.width = width
        self.guard = guard
        self.parallelism = parallelism
        self.pruning = pruning
        self.refit = refit
        self.log_path = log_path
        self.seed = seed

    def fit(self, X, y):
        X = check_image_array(X)
        encoded, self.classes_ = check_labels(y, len(X))
        dataset = ImageDataset("search", X, encoded, len(self.classes_))
        explore_train, explore_val = balanced_half_split(dataset, seed=self.seed)
        cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_initial=self.learning_rate,
            seed=self.seed,
            model_width=self.width,
        )
        result = run_search(
            hyperparameter_space(self.num_nodes),
            self.budget,
            cfg,
            (explore_train, explore_val),
            parallelism=self.parallelism,
            arch=self.arch,
            guard=self.guard,
            log_path=self.log_path,
            seed=self.seed,
            pruning=self.pruning,
        )
        self.best_graph_ = result.best_graph
        self.best_trial_id_ = result.best_trial_id
        self.best_score_ = result.best_accuracy
        self.trials_ = result.records
        if self.refit:
            self.best_estimator_ = GraphEnsembleClassifier(
                graph=self.best_graph_,
                arch=self.arch,
                epochs=self.epochs,
                batch_size=self.batch_size,
                learning_rate=self.learning_rate,
                width=self.width,
                seed=self.seed,
            ).fit(X, y)
        return self

    def predict(self, X):
        if not getattr(self, "refit", True) or not hasattr(self, "best_estimator_"):
            raise RuntimeError("predict requires refit=True and a fitted search")
        return self.best_estimator_.predict(X)

    def predict_proba(self, X):
        if not hasattr(self, "best_estimator_"):
            raise RuntimeError("predict_proba requires refit=True and a fitted search")
        return self.best_estimator_.predict_proba(X)
