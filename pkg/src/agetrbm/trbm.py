"""Reference-conditioned temporal RBM.

A node models ``p(v^t | v^{t-1}, s^{<=t})`` with the GRBM energy whose biases
are affine in the conditioning inputs::

    b^t = b + B v^{t-1} + P_0 s^t + P_1 s^{t-1}
    a^t = a + A v^{t-1} + Q_0^T s^t + Q_1^T s^{t-1}

Reference index 0 is the current-stage reference, index 1 the previous one.
Shapes: ``W`` (n_v, n_h), ``A`` (n_h, n_v), ``B`` (n_v, n_v),
``P`` (2, n_v, n_v), ``Q`` (2, n_v, n_h).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from agetrbm import grbm
from agetrbm.errors import InputError
from agetrbm.grbm import GrbmHyper, GrbmParams, _frozen

N_REFS = 2


@dataclass(frozen=True, eq=False)
class TrbmParams:
    W: np.ndarray
    A: np.ndarray
    B: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    b: np.ndarray
    a: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        W = _frozen(self.W, "W", 2)
        n_v, n_h = W.shape
        shapes = {"A": (n_h, n_v), "B": (n_v, n_v), "P": (N_REFS, n_v, n_v),
                  "Q": (N_REFS, n_v, n_h), "b": (n_v,), "a": (n_h,), "sigma2": (n_v,)}
        object.__setattr__(self, "W", W)
        for name, shape in shapes.items():
            arr = _frozen(getattr(self, name), name, len(shape))
            if arr.shape != shape:
                raise InputError(f"{name} must have shape {shape}, got {arr.shape}")
            object.__setattr__(self, name, arr)
        if np.any(self.sigma2 <= 0):
            raise InputError("sigma2 entries must be positive")

    @property
    def n_v(self) -> int:
        return self.W.shape[0]

    @property
    def n_h(self) -> int:
        return self.W.shape[1]

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.sigma2)

    def replace(self, **changes) -> "TrbmParams":
        return dataclasses.replace(self, **changes)

    def static(self) -> GrbmParams:
        """The GRBM obtained by dropping every conditioning pathway."""
        return GrbmParams(W=self.W, b=self.b, a=self.a, sigma2=self.sigma2)

    def permute_hidden(self, perm) -> "TrbmParams":
        perm = np.asarray(perm)
        return self.replace(W=self.W[:, perm], A=self.A[perm], Q=self.Q[:, :, perm],
                            a=self.a[perm])

    @classmethod
    def from_grbm(cls, g: GrbmParams) -> "TrbmParams":
        n_v, n_h = g.n_v, g.n_h
        return cls(W=g.W, A=np.zeros((n_h, n_v)), B=np.zeros((n_v, n_v)),
                   P=np.zeros((N_REFS, n_v, n_v)), Q=np.zeros((N_REFS, n_v, n_h)),
                   b=g.b, a=g.a, sigma2=g.sigma2)

    @classmethod
    def initialize(cls, n_v: int, n_h: int, rng: np.random.Generator,
                   weight_init_std: float = 0.01, identity_autoregression: bool = False):
        """Small random ``W``; zero conditioning weights and biases.

        ``identity_autoregression`` starts ``B`` at the identity so an
        untrained node copies its previous frame.
        """
        p = cls.from_grbm(GrbmParams.initialize(n_v, n_h, rng, weight_init_std))
        if identity_autoregression:
            p = p.replace(B=np.eye(n_v))
        return p

    def __eq__(self, other):
        if not isinstance(other, TrbmParams):
            return NotImplemented
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name))
                   for f in dataclasses.fields(self))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ReferenceWindow:
    """Reference textures for the current (``s_t``) and previous stage."""

    s_t: np.ndarray
    s_prev: np.ndarray

    def __post_init__(self):
        s_t = np.asarray(self.s_t, dtype=np.float64)
        s_prev = np.asarray(self.s_prev, dtype=np.float64)
        if s_t.shape != s_prev.shape:
            raise InputError("reference textures differ in shape")
        object.__setattr__(self, "s_t", s_t)
        object.__setattr__(self, "s_prev", s_prev)

    def stacked(self) -> np.ndarray:
        return np.stack([self.s_t, self.s_prev], axis=-2)


@dataclass(frozen=True)
class DynamicBiases:
    b_t: np.ndarray
    a_t: np.ndarray


@dataclass(frozen=True, eq=False)
class FaceSequence:
    """Frames ``(T, n_v)`` at strictly monotone age-group indices.

    ``provenance`` records where the first frame came from (e.g. ``"real"``
    or ``"reconstruction"``).
    """

    frames: np.ndarray
    groups: tuple
    provenance: str = "real"

    def __post_init__(self):
        frames = np.atleast_2d(np.asarray(self.frames, dtype=np.float64))
        groups = tuple(int(g) for g in self.groups)
        if frames.ndim != 2 or len(groups) != frames.shape[0]:
            raise InputError("one group index per frame required")
        steps = np.diff(groups)
        if len(steps) and not (np.all(steps > 0) or np.all(steps < 0)):
            raise InputError(f"groups must be strictly monotone: {groups}")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "groups", groups)

    def __len__(self):
        return self.frames.shape[0]

    @property
    def consecutive(self) -> bool:
        return bool(np.all(np.abs(np.diff(self.groups)) == 1))

    def reversed(self) -> "FaceSequence":
        return FaceSequence(self.frames[::-1], self.groups[::-1], self.provenance)


@dataclass
class LikelihoodReport:
    per_step: list
    partition: list
    total: float = field(init=False)

    def __post_init__(self):
        self.total = float(sum(self.per_step))


@dataclass(frozen=True, eq=False)
class Transitions:
    """Flattened training steps: ``v_t``, ``v_prev`` (N, n_v), ``s`` (N, 2, n_v)."""

    v_t: np.ndarray
    v_prev: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        v_t = np.atleast_2d(np.asarray(self.v_t, dtype=np.float64))
        v_prev = np.atleast_2d(np.asarray(self.v_prev, dtype=np.float64))
        s = np.asarray(self.s, dtype=np.float64)
        if s.ndim == 2:
            s = s[None]
        if v_t.shape != v_prev.shape or s.shape != (v_t.shape[0], N_REFS, v_t.shape[1]):
            raise InputError("inconsistent transition array shapes")
        for name, arr in (("v_t", v_t), ("v_prev", v_prev), ("s", s)):
            if not np.all(np.isfinite(arr)):
                raise InputError(f"{name} contains non-finite values")
        object.__setattr__(self, "v_t", v_t)
        object.__setattr__(self, "v_prev", v_prev)
        object.__setattr__(self, "s", s)

    def __len__(self):
        return self.v_t.shape[0]

    def subset(self, idx) -> "Transitions":
        return Transitions(self.v_t[idx], self.v_prev[idx], self.s[idx])

    @classmethod
    def concatenate(cls, parts) -> "Transitions":
        parts = list(parts)
        if not parts:
            raise InputError("no transitions to concatenate")
        return cls(np.concatenate([t.v_t for t in parts]),
                   np.concatenate([t.v_prev for t in parts]),
                   np.concatenate([t.s for t in parts]))

    @classmethod
    def from_sequences(cls, sequences, refs) -> "Transitions":
        """One row per consecutive frame pair; ``refs[i][t]`` conditions the
        step into frame ``t + 1`` of ``sequences[i]``."""
        if not sequences:
            raise InputError("empty training set")
        if len(refs) != len(sequences):
            raise InputError("one reference list per sequence required")
        v_t, v_prev, s = [], [], []
        for seq, windows in zip(sequences, refs):
            if len(seq) < 2:
                raise InputError("training sequences need at least two frames")
            if not seq.consecutive:
                raise InputError(f"group gap in training sequence {seq.groups}")
            if len(windows) != len(seq) - 1:
                raise InputError("one reference window per transition required")
            for t, w in enumerate(windows):
                v_prev.append(seq.frames[t])
                v_t.append(seq.frames[t + 1])
                s.append(w.stacked())
        return cls(np.array(v_t), np.array(v_prev), np.array(s))


# ---------------------------------------------------------------------------


def _context(v_prev, s, p: TrbmParams):
    v_prev = np.asarray(v_prev, dtype=np.float64)
    if isinstance(s, ReferenceWindow):
        s = s.stacked()
    s = np.asarray(s, dtype=np.float64)
    if v_prev.shape[-1] != p.n_v or s.shape[-2:] != (N_REFS, p.n_v):
        raise InputError(f"conditioning inputs must have n_v={p.n_v} "
                         f"(v_prev {v_prev.shape}, s {s.shape})")
    if not (np.all(np.isfinite(v_prev)) and np.all(np.isfinite(s))):
        raise InputError("conditioning inputs contain non-finite values")
    return v_prev, s


def dynamic_biases(v_prev, s, p: TrbmParams) -> DynamicBiases:
    """Conditioning-dependent biases; batched when ``v_prev`` is 2-D."""
    v_prev, s = _context(v_prev, s, p)
    s0, s1 = s[..., 0, :], s[..., 1, :]
    b_t = p.b + v_prev @ p.B.T + s0 @ p.P[0].T + s1 @ p.P[1].T
    a_t = p.a + v_prev @ p.A.T + s0 @ p.Q[0] + s1 @ p.Q[1]
    return DynamicBiases(b_t=b_t, a_t=a_t)


def conditioned(v_prev, s, p: TrbmParams) -> GrbmParams:
    """The GRBM ``p(v^t, h^t | v^{t-1}, s)`` for a single context."""
    d = dynamic_biases(v_prev, s, p)
    if d.b_t.ndim != 1:
        raise InputError("conditioned() takes a single context")
    return GrbmParams(W=p.W, b=d.b_t, a=d.a_t, sigma2=p.sigma2)


def _visible(v, p: TrbmParams, name="v_t"):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim not in (1, 2) or v.shape[-1] != p.n_v:
        raise InputError(f"{name} must have trailing dimension n_v={p.n_v}, got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InputError(f"{name} contains non-finite values")
    return v


def trbm_energy(v_t, h_t, v_prev, s, p: TrbmParams):
    v_t = _visible(v_t, p)
    h = np.asarray(h_t, dtype=np.float64)
    if h.shape[-1] != p.n_h or not np.all((h == 0) | (h == 1)):
        raise InputError(f"h_t must be binary with n_h={p.n_h}")
    d = dynamic_biases(v_prev, s, p)
    quad = np.sum((v_t - d.b_t) ** 2 / (2.0 * p.sigma2), axis=-1)
    bias = np.sum(h * d.a_t, axis=-1) if d.a_t.ndim > 1 else h @ d.a_t
    inter = np.sum(((v_t / p.sigma) @ p.W) * h, axis=-1)
    return quad - bias - inter


def hidden_given_visible(v_t, v_prev, s, p: TrbmParams, biases: DynamicBiases | None = None):
    v_t = _visible(v_t, p)
    d = biases if biases is not None else dynamic_biases(v_prev, s, p)
    return expit((v_t / p.sigma) @ p.W + d.a_t)


def visible_given_hidden(h_t, v_prev, s, p: TrbmParams, biases: DynamicBiases | None = None,
                         binary: bool = True):
    """Mean and variance of ``v^t`` given hidden states and context."""
    h = np.asarray(h_t, dtype=np.float64)
    if h.shape[-1] != p.n_h:
        raise InputError(f"h_t must have trailing dimension n_h={p.n_h}")
    if binary and not np.all((h == 0) | (h == 1)):
        raise InputError("h_t must be binary")
    d = biases if biases is not None else dynamic_biases(v_prev, s, p)
    mean = p.sigma * (h @ p.W.T) + d.b_t
    return mean, np.broadcast_to(p.sigma2, mean.shape).copy()


# ---------------------------------------------------------------------------
# exact likelihood


def step_log_likelihood(v_t, v_prev, s, p: TrbmParams) -> tuple[float, float]:
    """``(log p(v^t | v^{t-1}, s), log Z)`` by hidden-state enumeration."""
    g = conditioned(v_prev, s, p)
    log_z = grbm.log_partition(g)
    return float(-grbm.free_energy(_visible(v_t, p), g) - log_z), log_z


def _check_refs(seq: FaceSequence, refs):
    if len(refs) != len(seq) - 1:
        raise InputError(f"need {len(seq) - 1} reference windows, got {len(refs)}")


def sequence_log_likelihood(seq: FaceSequence, refs, p: TrbmParams) -> LikelihoodReport:
    """Per-step conditional log-likelihoods of frames 2..T given frame 1."""
    if len(seq) < 2:
        raise InputError("sequence needs at least two frames")
    _check_refs(seq, refs)
    per_step, partition = [], []
    for t in range(1, len(seq)):
        ll, log_z = step_log_likelihood(seq.frames[t], seq.frames[t - 1], refs[t - 1], p)
        per_step.append(ll)
        partition.append(log_z)
    return LikelihoodReport(per_step=per_step, partition=partition)


def _chain_rule(gb, ga, data: Transitions) -> dict:
    """Map per-row gradients w.r.t. (b^t, a^t) onto every parameter family."""
    s0, s1 = data.s[:, 0], data.s[:, 1]
    return {
        "b": gb.sum(axis=0),
        "a": ga.sum(axis=0),
        "B": gb.T @ data.v_prev,
        "A": ga.T @ data.v_prev,
        "P": np.stack([gb.T @ s0, gb.T @ s1]),
        "Q": np.stack([s0.T @ ga, s1.T @ ga]),
    }


def exact_gradient(data: Transitions, p: TrbmParams, reduction: str = "sum") -> dict:
    """Exact gradient of the summed (or mean) step log-likelihoods.

    Keys ``W, A, B, P, Q, a, b``; model-phase terms by enumeration, one
    context at a time.
    """
    n = len(data)
    gW = np.zeros_like(p.W)
    gb = np.zeros((n, p.n_v))
    ga = np.zeros((n, p.n_h))
    for r in range(n):
        g = conditioned(data.v_prev[r], data.s[r], p)
        model = grbm.model_expectations(g)
        v = data.v_t[r]
        ph = grbm.hidden_given_visible(v, g)
        gW += np.outer(v / p.sigma, ph) - model["vh"]
        gb[r] = (v - g.b) / p.sigma2 - model["db"]
        ga[r] = ph - model["h"]
    out = _chain_rule(gb, ga, data)
    out["W"] = gW
    if reduction == "mean":
        out = {k: v / n for k, v in out.items()}
    elif reduction != "sum":
        raise InputError(f"unknown reduction {reduction!r}")
    return out


# ---------------------------------------------------------------------------
# training


def cd_statistics(data: Transitions, p: TrbmParams, k: int, rng: np.random.Generator,
                  sample_visible_units: bool = False) -> dict:
    """Mean data-phase minus reconstruction-phase statistics over ``data``.

    The reconstruction chain runs with the conditioning inputs clamped.
    """
    if len(data) == 0:
        raise InputError("empty batch")
    d = dynamic_biases(data.v_prev, data.s, p)
    sigma = p.sigma
    V0 = data.v_t
    ph0 = hidden_given_visible(V0, None, None, p, biases=d)
    Vk, phk = V0, ph0
    for _ in range(k):
        h = (rng.random(phk.shape) < phk).astype(np.float64)
        mean, _ = visible_given_hidden(h, None, None, p, biases=d)
        Vk = mean + sigma * rng.standard_normal(mean.shape) if sample_visible_units else mean
        phk = hidden_given_visible(Vk, None, None, p, biases=d)
    n = len(data)
    gb = (V0 - Vk) / p.sigma2
    ga = ph0 - phk
    out = {k_: v / n for k_, v in _chain_rule(gb, ga, data).items()}
    out["W"] = ((V0 / sigma).T @ ph0 - (Vk / sigma).T @ phk) / n
    return out


def cd_update(data: Transitions, p: TrbmParams, hyper: GrbmHyper, rng: np.random.Generator,
              velocity: dict | None = None, families=None,
              lr_scale: dict | None = None) -> TrbmParams:
    """One CD-k ascent step.

    ``families`` restricts which parameter groups move; ``lr_scale`` maps a
    family name to a multiplier on the learning rate.
    """
    grad = cd_statistics(data, p, hyper.k, rng, hyper.sample_visible)
    changes = {}
    for name, g in grad.items():
        if families is not None and name not in families:
            continue
        scale = 1.0 if lr_scale is None else lr_scale.get(name, 1.0)
        step = scale * hyper.learning_rate * g
        if velocity is not None:
            step = velocity.get(name, 0.0) * hyper.momentum + step
            velocity[name] = step
        changes[name] = getattr(p, name) + step
    return p.replace(**changes)


def train_transitions(data: Transitions, p0: TrbmParams, hyper: GrbmHyper,
                      rng: np.random.Generator | None = None, callback=None,
                      lr_scale: dict | None = None) -> TrbmParams:
    if len(data) == 0:
        raise InputError("empty training set")
    if data.v_t.shape[1] != p0.n_v:
        raise InputError(f"training frames have n_v={data.v_t.shape[1]}, model n_v={p0.n_v}")
    if rng is None:
        rng = np.random.default_rng(hyper.seed)
    p = p0
    velocity = {}
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), hyper.batch_size):
            p = cd_update(data.subset(order[start:start + hyper.batch_size]), p, hyper, rng,
                          velocity, lr_scale=lr_scale)
        if callback is not None:
            callback(epoch, p)
    return p


def cd_train(sequences, refs, p0: TrbmParams, hyper: GrbmHyper,
             rng: np.random.Generator | None = None, callback=None,
             lr_scale: dict | None = None) -> TrbmParams:
    """Train a node on consecutive-group sequences with their reference windows."""
    return train_transitions(Transitions.from_sequences(sequences, refs), p0, hyper, rng,
                             callback, lr_scale)


CONDITIONING = ("A", "B", "P", "Q")


def conditioning_scale(n_v: int, factor: float = 1.0) -> dict:
    """Learning-rate multipliers ``factor / n_v`` for the conditioning weights.

    Their gradients are summed over all ``n_v`` previous-frame and reference
    inputs, so an unscaled step moves the dynamic biases ``n_v`` times
    further than the static ones.
    """
    return {name: factor / n_v for name in CONDITIONING}


# ---------------------------------------------------------------------------
# inference


def predict_next(v_prev, s, p: TrbmParams, gibbs_steps: int = 0,
                 rng: np.random.Generator | None = None, stochastic: bool = False):
    """Estimate ``v^t`` from its context.

    The chain starts at ``b^t`` and alternates the two conditionals
    ``gibbs_steps`` times.  By default it is mean-field (probabilities up,
    means down, no noise); ``stochastic`` draws samples instead and returns
    the visible mean of the last sweep.
    """
    if gibbs_steps < 0:
        raise InputError("gibbs_steps must be non-negative")
    if stochastic and rng is None:
        raise InputError("stochastic inference requires rng")
    d = dynamic_biases(v_prev, s, p)
    v = d.b_t
    for _ in range(gibbs_steps):
        ph = hidden_given_visible(v, None, None, p, biases=d)
        if stochastic:
            h = (rng.random(ph.shape) < ph).astype(np.float64)
            mean, _ = visible_given_hidden(h, None, None, p, biases=d)
            v = mean + p.sigma * rng.standard_normal(mean.shape)
        else:
            mean, _ = visible_given_hidden(ph, None, None, p, biases=d, binary=False)
            v = mean
    return v if gibbs_steps == 0 else mean


def roll_forward(v_first, ref_windows, nodes, gibbs_steps: int = 0,
                 rng: np.random.Generator | None = None, stochastic: bool = False,
                 start_group: int = 0, direction: int = 1) -> FaceSequence:
    """Chain ``predict_next`` through ``nodes``; ``ref_windows[i]`` conditions node i."""
    if len(ref_windows) != len(nodes):
        raise InputError(f"{len(nodes)} nodes but {len(ref_windows)} reference windows")
    if direction not in (1, -1):
        raise InputError("direction must be +1 or -1")
    frames = [np.asarray(v_first, dtype=np.float64)]
    for node, window in zip(nodes, ref_windows):
        frames.append(predict_next(frames[-1], window, node, gibbs_steps, rng, stochastic))
    groups = [start_group + direction * i for i in range(len(frames))]
    return FaceSequence(np.array(frames), tuple(groups))
