"""Gaussian-Bernoulli restricted Boltzmann machine.

Energy of a joint configuration (real visible ``v``, binary hidden ``h``)::

    E(v, h) = sum_i (v_i - b_i)^2 / (2 sigma_i^2) - sum_j a_j h_j
              - sum_ij (v_i / sigma_i) W_ij h_j

Every function accepts either a single visible vector of shape ``(n_v,)`` or
a batch of shape ``(N, n_v)`` and returns results with the matching leading
dimension.  Parameters are immutable; training returns new instances.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.special import expit, logsumexp

from agetrbm.errors import CapabilityError, InputError

MAX_ENUM_HIDDEN = 20
_ENUM_CHUNK = 1 << 14


def _frozen(x, name, ndim):
    arr = np.array(x, dtype=np.float64)
    if arr.ndim != ndim:
        raise InputError(f"{name} must have {ndim} dimension(s), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class GrbmParams:
    """Weights ``W`` (n_v x n_h), visible bias ``b``, hidden bias ``a`` and
    visible variances ``sigma2``."""

    W: np.ndarray
    b: np.ndarray
    a: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        W = _frozen(self.W, "W", 2)
        b = _frozen(self.b, "b", 1)
        a = _frozen(self.a, "a", 1)
        s2 = _frozen(self.sigma2, "sigma2", 1)
        n_v, n_h = W.shape
        if n_v < 1 or n_h < 1:
            raise InputError("W must be non-empty")
        if b.shape != (n_v,) or s2.shape != (n_v,):
            raise InputError(f"b and sigma2 must have length n_v={n_v}")
        if a.shape != (n_h,):
            raise InputError(f"a must have length n_h={n_h}")
        if np.any(s2 <= 0):
            raise InputError("sigma2 entries must be positive")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "sigma2", s2)

    @property
    def n_v(self) -> int:
        return self.W.shape[0]

    @property
    def n_h(self) -> int:
        return self.W.shape[1]

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.sigma2)

    def replace(self, **changes) -> "GrbmParams":
        return dataclasses.replace(self, **changes)

    def permute_hidden(self, perm) -> "GrbmParams":
        perm = np.asarray(perm)
        return self.replace(W=self.W[:, perm], a=self.a[perm])

    @classmethod
    def initialize(cls, n_v: int, n_h: int, rng: np.random.Generator,
                   weight_init_std: float = 0.01) -> "GrbmParams":
        """Zero biases, unit variances, small Gaussian weights."""
        return cls(W=rng.normal(0.0, weight_init_std, size=(n_v, n_h)),
                   b=np.zeros(n_v), a=np.zeros(n_h), sigma2=np.ones(n_v))

    def __eq__(self, other):
        if not isinstance(other, GrbmParams):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("W", "b", "a", "sigma2"))

    __hash__ = None


@dataclass(frozen=True)
class GrbmHyper:
    """Training configuration for contrastive divergence."""

    k: int = 1
    learning_rate: float = 0.01
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    weight_init_std: float = 0.01
    momentum: float = 0.0
    sample_visible: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise InputError("k must be >= 1")
        if not self.learning_rate >= 0:
            raise InputError("learning_rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise InputError("epochs and batch_size must be positive")
        if self.weight_init_std <= 0:
            raise InputError("weight_init_std must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InputError("momentum must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class Standardizer:
    """Per-pixel affine normalization stored alongside a model."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean, "mean", 1))
        object.__setattr__(self, "std", _frozen(self.std, "std", 1))
        if self.mean.shape != self.std.shape:
            raise InputError("mean/std length mismatch")
        if np.any(self.std <= 0):
            raise InputError("std entries must be positive")

    @classmethod
    def fit(cls, data, floor: float = 1e-3) -> "Standardizer":
        data = np.asarray(data, dtype=np.float64)
        std = data.std(axis=0)
        # constant pixels (e.g. outside the face hull) would divide by zero
        std = np.where(std < floor, 1.0, std)
        return cls(mean=data.mean(axis=0), std=std)

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


# ---------------------------------------------------------------------------
# input checking


def _visible(v, p: GrbmParams, name="v"):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim not in (1, 2) or v.shape[-1] != p.n_v:
        raise InputError(f"{name} must have trailing dimension n_v={p.n_v}, got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InputError(f"{name} contains non-finite values")
    return v


def _hidden(h, p: GrbmParams, binary=True):
    h = np.asarray(h, dtype=np.float64)
    if h.ndim not in (1, 2) or h.shape[-1] != p.n_h:
        raise InputError(f"h must have trailing dimension n_h={p.n_h}, got {h.shape}")
    if binary:
        if not np.all((h == 0) | (h == 1)):
            raise InputError("h must be binary")
    elif not np.all((h >= 0) & (h <= 1)):
        raise InputError("hidden activations must lie in [0, 1]")
    return h


# ---------------------------------------------------------------------------
# energies and conditionals


def grbm_energy(v, h, p: GrbmParams):
    v = _visible(v, p)
    h = _hidden(h, p)
    sigma = p.sigma
    quad = np.sum((v - p.b) ** 2 / (2.0 * p.sigma2), axis=-1)
    bias = h @ p.a
    inter = np.sum(((v / sigma) @ p.W) * h, axis=-1)
    return quad - bias - inter


def hidden_given_visible(v, p: GrbmParams):
    """Bernoulli means ``p(h_j = 1 | v)``."""
    v = _visible(v, p)
    return expit((v / p.sigma) @ p.W + p.a)


def visible_given_hidden(h, p: GrbmParams, binary=True):
    """Mean and variance of the Gaussian ``p(v | h)``.

    With ``binary=False`` the hidden vector may hold probabilities, which is
    what mean-field updates feed in.
    """
    h = _hidden(h, p, binary=binary)
    mean = p.sigma * (h @ p.W.T) + p.b
    var = np.broadcast_to(p.sigma2, mean.shape).copy()
    return mean, var


def sample_hidden(v, p: GrbmParams, rng: np.random.Generator):
    ph = hidden_given_visible(v, p)
    return (rng.random(ph.shape) < ph).astype(np.float64), ph


def sample_visible(h, p: GrbmParams, rng: np.random.Generator):
    mean, _ = visible_given_hidden(h, p)
    return mean + p.sigma * rng.standard_normal(mean.shape), mean


def reconstruct(v, p: GrbmParams):
    """One-step mean-field reconstruction: probabilities up, means down."""
    return visible_given_hidden(hidden_given_visible(v, p), p, binary=False)[0]


def gibbs_states(v0, p: GrbmParams, rng: np.random.Generator) -> Iterator[tuple]:
    """Endless block-Gibbs chain started at ``v0``.

    Yields ``(h, v_mean, v)`` after each full sweep h ~ p(h|v), v ~ p(v|h).
    """
    v = _visible(v0, p, "v0")
    while True:
        h, _ = sample_hidden(v, p, rng)
        v, mean = sample_visible(h, p, rng)
        yield h, mean, v


def gibbs_chain(v0, p: GrbmParams, steps: int, rng: np.random.Generator,
                return_mean: bool = False):
    """Run ``steps`` sweeps and return the last visible sample (or its mean)."""
    if steps < 1:
        raise InputError("steps must be >= 1")
    chain = gibbs_states(v0, p, rng)
    for _ in range(steps):
        _, mean, v = next(chain)
    return mean if return_mean else v


def free_energy(v, p: GrbmParams):
    """``F(v) = -log sum_h exp(-E(v, h))``."""
    v = _visible(v, p)
    quad = np.sum((v - p.b) ** 2 / (2.0 * p.sigma2), axis=-1)
    pre = (v / p.sigma) @ p.W + p.a
    return quad - np.sum(np.logaddexp(0.0, pre), axis=-1)


# ---------------------------------------------------------------------------
# exact computations by hidden-state enumeration


def _check_enumerable(p: GrbmParams):
    if p.n_h > MAX_ENUM_HIDDEN:
        raise CapabilityError(
            f"exact enumeration supports n_h <= {MAX_ENUM_HIDDEN}, got {p.n_h}")


def hidden_states(n_h: int, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Rows are the binary expansions of ``start .. stop-1`` (bit j -> unit j)."""
    stop = (1 << n_h) if stop is None else stop
    idx = np.arange(start, stop, dtype=np.int64)
    return ((idx[:, None] >> np.arange(n_h)) & 1).astype(np.float64)


def _state_chunks(n_h):
    total = 1 << n_h
    for start in range(0, total, _ENUM_CHUNK):
        yield hidden_states(n_h, start, min(total, start + _ENUM_CHUNK))


def hidden_log_weights(H, p: GrbmParams):
    """Unnormalized ``log p(h)`` after integrating out v, per row of ``H``.

    Completing the square per visible unit gives
    ``a.h + sum_i [ (Wh)_i^2 / 2 + b_i (Wh)_i / sigma_i ]`` up to the
    h-independent Gaussian normalizer.
    """
    Wh = H @ p.W.T
    return H @ p.a + 0.5 * np.sum(Wh ** 2, axis=1) + Wh @ (p.b / p.sigma)


def log_partition(p: GrbmParams) -> float:
    _check_enumerable(p)
    parts = [logsumexp(hidden_log_weights(H, p)) for H in _state_chunks(p.n_h)]
    gauss = 0.5 * np.sum(np.log(2.0 * np.pi * p.sigma2))
    return float(logsumexp(parts) + gauss)


def exact_log_likelihood(v, p: GrbmParams):
    """``log p(v)`` with the partition function summed over all 2^n_h states."""
    _check_enumerable(p)
    return -free_energy(v, p) - log_partition(p)


def model_expectations(p: GrbmParams) -> dict:
    """Exact model-phase statistics ``E[h]``, ``E[(v/sigma) h^T]`` and
    ``E[(v - b) / sigma^2]`` under the joint distribution."""
    _check_enumerable(p)
    logZh = log_partition(p) - 0.5 * np.sum(np.log(2.0 * np.pi * p.sigma2))
    Eh = np.zeros(p.n_h)
    EvhT = np.zeros((p.n_v, p.n_h))
    Ewh = np.zeros(p.n_v)
    vbar = p.b / p.sigma
    for H in _state_chunks(p.n_h):
        w = np.exp(hidden_log_weights(H, p) - logZh)
        Wh = H @ p.W.T
        Eh += w @ H
        # E[v_i | h] / sigma_i = b_i / sigma_i + (Wh)_i
        EvhT += ((vbar + Wh) * w[:, None]).T @ H
        Ewh += w @ Wh
    return {"h": Eh, "vh": EvhT, "db": Ewh / p.sigma}


def exact_gradient(batch, p: GrbmParams) -> dict:
    """Mean over ``batch`` of the exact gradient of ``log p(v)``.

    Keys ``W``, ``a``, ``b``; variances are not trained.
    """
    V = np.atleast_2d(_visible(batch, p, "batch"))
    ph = hidden_given_visible(V, p)
    model = model_expectations(p)
    n = V.shape[0]
    return {
        "W": (V / p.sigma).T @ ph / n - model["vh"],
        "a": ph.mean(axis=0) - model["h"],
        "b": ((V - p.b) / p.sigma2).mean(axis=0) - model["db"],
    }


# ---------------------------------------------------------------------------
# contrastive divergence


def cd_statistics(batch, p: GrbmParams, k: int, rng: np.random.Generator,
                  sample_visible_units: bool = False) -> dict:
    """Data-phase minus k-step reconstruction-phase statistics.

    The chain samples hidden states; visible units take their conditional
    means unless ``sample_visible_units`` is set.
    """
    V0 = np.atleast_2d(_visible(batch, p, "batch"))
    if V0.shape[0] == 0:
        raise InputError("batch must be non-empty")
    ph0 = hidden_given_visible(V0, p)
    Vk, phk = V0, ph0
    for _ in range(k):
        h = (rng.random(phk.shape) < phk).astype(np.float64)
        mean, _ = visible_given_hidden(h, p)
        Vk = mean + p.sigma * rng.standard_normal(mean.shape) if sample_visible_units else mean
        phk = hidden_given_visible(Vk, p)
    n = V0.shape[0]
    sigma = p.sigma
    return {
        "W": ((V0 / sigma).T @ ph0 - (Vk / sigma).T @ phk) / n,
        "a": (ph0 - phk).mean(axis=0),
        "b": ((V0 - Vk) / p.sigma2).mean(axis=0),
    }


def cd_k_update(batch, p: GrbmParams, hyper: GrbmHyper, rng: np.random.Generator,
                velocity: dict | None = None) -> GrbmParams:
    """One CD-k ascent step on ``W``, ``a``, ``b`` (``sigma2`` held fixed).

    If a ``velocity`` dict is supplied it is updated in place and used for
    momentum.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise InputError("batch must be non-empty")
    grad = cd_statistics(batch, p, hyper.k, rng, hyper.sample_visible)
    step = {}
    for name, g in grad.items():
        d = hyper.learning_rate * g
        if velocity is not None:
            d = velocity.get(name, 0.0) * hyper.momentum + d
            velocity[name] = d
        step[name] = d
    return p.replace(W=p.W + step["W"], a=p.a + step["a"], b=p.b + step["b"])


def reconstruction_error(data, p: GrbmParams) -> float:
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    return float(np.mean(np.sum((data - reconstruct(data, p)) ** 2, axis=1)))


def train(data, n_h: int, hyper: GrbmHyper, p0: GrbmParams | None = None,
          rng: np.random.Generator | None = None, callback=None) -> GrbmParams:
    """Mini-batch CD-k over ``epochs`` passes of ``data`` (rows are samples).

    Batches are reshuffled every epoch; all randomness comes from ``rng``
    (default: a generator seeded with ``hyper.seed``).  ``callback`` is
    invoked as ``callback(epoch, params)`` after each epoch.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] == 0:
        raise InputError("training data must be non-empty")
    if rng is None:
        rng = np.random.default_rng(hyper.seed)
    p = p0 if p0 is not None else GrbmParams.initialize(
        data.shape[1], n_h, rng, hyper.weight_init_std)
    _visible(data, p, "data")
    velocity = {}
    for epoch in range(hyper.epochs):
        order = rng.permutation(data.shape[0])
        for start in range(0, len(order), hyper.batch_size):
            p = cd_k_update(data[order[start:start + hyper.batch_size]], p, hyper, rng,
                            velocity)
        if callback is not None:
            callback(epoch, p)
    return p


# ---------------------------------------------------------------------------
# cross-model feature transfer


def transfer_features(v, source: GrbmParams, target: GrbmParams, refine_steps: int = 0,
                      rng: np.random.Generator | None = None,
                      sample_hidden_units: bool = False):
    """Encode ``v`` with ``source`` and decode it with ``target``.

    The hidden representation (probabilities by default) of ``source`` is
    pushed through ``target``'s visible conditional.  ``refine_steps`` extra
    Gibbs sweeps under ``target`` are optional and need ``rng``.
    """
    if source.n_h != target.n_h:
        raise InputError(f"hidden sizes differ: {source.n_h} vs {target.n_h}")
    if source.n_v != target.n_v:
        raise InputError(f"visible sizes differ: {source.n_v} vs {target.n_v}")
    if refine_steps < 0:
        raise InputError("refine_steps must be non-negative")
    ph = hidden_given_visible(v, source)
    if sample_hidden_units:
        if rng is None:
            raise InputError("sampling hidden states requires rng")
        h = (rng.random(ph.shape) < ph).astype(np.float64)
        out = visible_given_hidden(h, target)[0]
    else:
        out = visible_given_hidden(ph, target, binary=False)[0]
    if refine_steps:
        if rng is None:
            raise InputError("refine_steps > 0 requires rng")
        out = gibbs_chain(out, target, refine_steps, rng, return_mean=True)
    return out
