"""Coarse-to-fine age estimation on GRBM hidden features.

A one-vs-rest linear classifier picks youths / adults / elders, then that
class's epsilon-insensitive linear regressor gives the age.  Both are fit by
mini-batch subgradient descent with iterate averaging.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from agetrbm import grbm
from agetrbm.errors import InputError, StateError

AGE_MIN, AGE_MAX = 10, 64
N_CLASSES = 3
CLASS_NAMES = ("youths", "adults", "elders")


@dataclass(frozen=True, eq=False)
class AgeEstimator:
    """Feature standardization, classifier and per-class regressors.

    ``class_bounds = (lo, hi)``: youths below ``lo``, elders from ``hi``.
    Regressors act on standardized features and output years.
    """

    class_bounds: tuple
    feature_mean: np.ndarray
    feature_std: np.ndarray
    clf_W: np.ndarray
    clf_b: np.ndarray
    reg_W: np.ndarray
    reg_b: np.ndarray
    trained: bool = field(default=True)

    def __post_init__(self):
        lo, hi = (float(x) for x in self.class_bounds)
        if not lo < hi:
            raise InputError("class bounds must be strictly increasing")
        object.__setattr__(self, "class_bounds", (lo, hi))
        d = np.asarray(self.feature_mean).shape[0]
        for name, shape in (("feature_mean", (d,)), ("feature_std", (d,)),
                            ("clf_W", (N_CLASSES, d)), ("clf_b", (N_CLASSES,)),
                            ("reg_W", (N_CLASSES, d)), ("reg_b", (N_CLASSES,))):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise InputError(f"{name} must have shape {shape}, got {arr.shape}")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if np.any(self.feature_std <= 0):
            raise InputError("feature_std must be positive")

    @property
    def feature_dim(self) -> int:
        return self.feature_mean.shape[0]

    @classmethod
    def untrained(cls, feature_dim: int, class_bounds=(20, 50)) -> "AgeEstimator":
        d = feature_dim
        return cls(class_bounds, np.zeros(d), np.ones(d), np.zeros((N_CLASSES, d)),
                   np.zeros(N_CLASSES), np.zeros((N_CLASSES, d)), np.zeros(N_CLASSES),
                   trained=False)


@dataclass(frozen=True)
class EstimatorHyper:
    learning_rate: float = 0.05
    epochs: int = 200
    batch_size: int = 32
    epsilon: float = 0.5
    l2: float = 1e-4
    seed: int = 0
    class_bounds: tuple = (20, 50)

    def __post_init__(self):
        if self.learning_rate < 0 or self.epsilon < 0 or self.l2 < 0:
            raise InputError("learning_rate, epsilon and l2 must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise InputError("epochs and batch_size must be positive")


def age_class(ages, class_bounds=(20, 50)) -> np.ndarray:
    lo, hi = class_bounds
    ages = np.asarray(ages, dtype=np.float64)
    return np.where(ages < lo, 0, np.where(ages < hi, 1, 2))


def class_centres(class_bounds) -> np.ndarray:
    lo, hi = class_bounds
    return np.array([(AGE_MIN + lo) / 2.0, (lo + hi) / 2.0, (hi + AGE_MAX) / 2.0])


def initial_estimator(features, hyper: EstimatorHyper) -> AgeEstimator:
    """Starting point: zero weights, regressor biases at the class centres."""
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    std = grbm.Standardizer.fit(X, floor=1e-8)
    d = X.shape[1]
    return AgeEstimator(hyper.class_bounds, std.mean, std.std, np.zeros((N_CLASSES, d)),
                        np.zeros(N_CLASSES), np.zeros((N_CLASSES, d)),
                        class_centres(hyper.class_bounds))


def _subgradient_fit(X, y, w, b, loss_grad, hyper, rng):
    """Averaged mini-batch subgradient descent; ``loss_grad(margin_input, y)``
    returns the derivative of the loss w.r.t. the model output."""
    n = X.shape[0]
    avg_w, avg_b, count = np.zeros_like(w), 0.0, 0
    burn_in = hyper.epochs // 2
    for epoch in range(hyper.epochs):
        lr = hyper.learning_rate / np.sqrt(1.0 + epoch)
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            g = loss_grad(X[idx] @ w + b, y[idx])
            w = w - lr * (X[idx].T @ g / len(idx) + hyper.l2 * w)
            b = b - lr * g.mean()
        if epoch >= burn_in:
            avg_w += w
            avg_b += b
            count += 1
    return avg_w / count, avg_b / count


def train_estimator(features, ages, hyper: EstimatorHyper = EstimatorHyper(),
                    init: AgeEstimator | None = None) -> AgeEstimator:
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    ages = np.asarray(ages, dtype=np.float64)
    if X.shape[0] != ages.shape[0] or X.shape[0] == 0:
        raise InputError("need one age label per feature row")
    if np.any(ages < AGE_MIN) or np.any(ages > AGE_MAX):
        raise InputError(f"age labels must lie in [{AGE_MIN}, {AGE_MAX}]")
    labels = age_class(ages, hyper.class_bounds)
    missing = [CLASS_NAMES[c] for c in range(N_CLASSES) if not np.any(labels == c)]
    if missing:
        raise InputError(f"classes absent from corpus: {', '.join(missing)}")
    est = init if init is not None else initial_estimator(X, hyper)
    if est.feature_dim != X.shape[1]:
        raise InputError("initial estimator has the wrong feature dimension")
    if hyper.learning_rate == 0:
        return est
    rng = np.random.default_rng(hyper.seed)
    Z = (X - est.feature_mean) / est.feature_std

    def hinge(out, y):
        return np.where(y * out < 1.0, -y, 0.0)

    def eps_insensitive(out, y):
        r = out - y
        return np.where(np.abs(r) > hyper.epsilon, np.sign(r), 0.0)

    clf_W, clf_b = est.clf_W.copy(), est.clf_b.copy()
    reg_W, reg_b = est.reg_W.copy(), est.reg_b.copy()
    for c in range(N_CLASSES):
        y = np.where(labels == c, 1.0, -1.0)
        clf_W[c], clf_b[c] = _subgradient_fit(Z, y, clf_W[c], clf_b[c], hinge, hyper, rng)
        sel = labels == c
        reg_W[c], reg_b[c] = _subgradient_fit(Z[sel], ages[sel], reg_W[c], reg_b[c],
                                              eps_insensitive, hyper, rng)
    return AgeEstimator(est.class_bounds, est.feature_mean, est.feature_std, clf_W, clf_b,
                        reg_W, reg_b)


def classify(features, est: AgeEstimator) -> np.ndarray:
    Z = (np.atleast_2d(features) - est.feature_mean) / est.feature_std
    return np.argmax(Z @ est.clf_W.T + est.clf_b, axis=1)


def predict_ages(features, est: AgeEstimator) -> np.ndarray:
    """Classify, regress with the chosen class's model, clamp to [10, 64]."""
    if not est.trained:
        raise StateError("age estimator has not been trained")
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if X.shape[1] != est.feature_dim:
        raise InputError(f"features have dimension {X.shape[1]}, estimator expects "
                         f"{est.feature_dim}")
    Z = (X - est.feature_mean) / est.feature_std
    cls = np.argmax(Z @ est.clf_W.T + est.clf_b, axis=1)
    raw = np.einsum("nd,nd->n", Z, est.reg_W[cls]) + est.reg_b[cls]
    return np.clip(raw, AGE_MIN, AGE_MAX)


def extract_features(face, group_rbms) -> np.ndarray:
    """Concatenated hidden probabilities of ``face`` under every group RBM."""
    rbms = getattr(group_rbms, "group_rbms", group_rbms)
    return np.concatenate([grbm.hidden_given_visible(face, p) for p in rbms], axis=-1)


def estimate_age(face, est: AgeEstimator, group_rbms) -> float:
    return float(predict_ages(extract_features(face, group_rbms), est)[0])


def mean_absolute_error(predictions, labels) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if predictions.size == 0 or predictions.shape != labels.shape:
        raise InputError("need a non-empty, aligned prediction/label set")
    return float(np.mean(np.abs(predictions - labels)))


def evaluate_mae(est: AgeEstimator, faces, ages, group_rbms) -> float:
    faces = np.atleast_2d(np.asarray(faces, dtype=np.float64))
    if len(faces) == 0:
        raise InputError("empty test set")
    return mean_absolute_error(predict_ages(extract_features(faces, group_rbms), est), ages)
