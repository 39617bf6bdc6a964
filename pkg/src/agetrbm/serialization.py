"""The ``EBM1`` binary model container.

Layout (all little-endian)::

    bytes 0-3   magic b"EBM1"
    u32         type tag
    u32         number of dimension fields D
    D x u32     dimensions
    f64 ...     parameter blocks, each row-major, in the order listed below

    tag 1  GRBM          dims (n_v, n_h)   W, b, a, sigma2
    tag 2  TRBM          dims (n_v, n_h)   W, A, B, P[0], P[1], Q[0], Q[1], b, a, sigma2
    tag 3  age estimator dims (d,)         class_bounds(2), feature_mean(d), feature_std(d),
                                           clf_W(3 x d), clf_b(3), reg_W(3 x d), reg_b(3)
    tag 4  standardizer  dims (n,)         mean(n), std(n)

The file length must match the dimensions exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from agetrbm.errors import InputError
from agetrbm.grbm import GrbmParams, Standardizer
from agetrbm.trbm import TrbmParams

MAGIC = b"EBM1"
TAG_GRBM, TAG_TRBM, TAG_ESTIMATOR, TAG_STANDARDIZER = 1, 2, 3, 4


def _layout(tag, dims):
    if tag in (TAG_GRBM, TAG_TRBM):
        n_v, n_h = dims
        if tag == TAG_GRBM:
            return [("W", (n_v, n_h)), ("b", (n_v,)), ("a", (n_h,)), ("sigma2", (n_v,))]
        return [("W", (n_v, n_h)), ("A", (n_h, n_v)), ("B", (n_v, n_v)),
                ("P0", (n_v, n_v)), ("P1", (n_v, n_v)), ("Q0", (n_v, n_h)),
                ("Q1", (n_v, n_h)), ("b", (n_v,)), ("a", (n_h,)), ("sigma2", (n_v,))]
    if tag == TAG_ESTIMATOR:
        (d,) = dims
        return [("class_bounds", (2,)), ("feature_mean", (d,)), ("feature_std", (d,)),
                ("clf_W", (3, d)), ("clf_b", (3,)), ("reg_W", (3, d)), ("reg_b", (3,))]
    if tag == TAG_STANDARDIZER:
        (n,) = dims
        return [("mean", (n,)), ("std", (n,))]
    raise InputError(f"unknown EBM1 type tag {tag}")


def pack(tag: int, dims, blocks: dict) -> bytes:
    dims = [int(d) for d in dims]
    out = [MAGIC, struct.pack("<II", tag, len(dims)), struct.pack(f"<{len(dims)}I", *dims)]
    for name, shape in _layout(tag, dims):
        arr = np.asarray(blocks[name], dtype="<f8")
        if arr.shape != shape:
            raise InputError(f"block {name} has shape {arr.shape}, expected {shape}")
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def unpack(data: bytes, expected_tag: int | None = None):
    """Return ``(tag, dims, blocks)``."""
    if data[:4] != MAGIC:
        raise InputError("not an EBM1 file (bad magic)")
    if len(data) < 12:
        raise InputError("truncated EBM1 header")
    tag, ndims = struct.unpack_from("<II", data, 4)
    if expected_tag is not None and tag != expected_tag:
        raise InputError(f"EBM1 type tag {tag}, expected {expected_tag}")
    off = 12 + 4 * ndims
    if len(data) < off:
        raise InputError("truncated EBM1 header")
    dims = list(struct.unpack_from(f"<{ndims}I", data, 12))
    blocks = {}
    for name, shape in _layout(tag, dims):
        n = int(np.prod(shape))
        if len(data) < off + 8 * n:
            raise InputError(f"truncated EBM1 block {name}")
        blocks[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
    if off != len(data):
        raise InputError(f"{len(data) - off} trailing bytes after EBM1 blocks")
    return tag, dims, blocks


# ---------------------------------------------------------------------------


def dumps(obj) -> bytes:
    from agetrbm.age_estimator import AgeEstimator

    if isinstance(obj, GrbmParams):
        return pack(TAG_GRBM, (obj.n_v, obj.n_h),
                    {"W": obj.W, "b": obj.b, "a": obj.a, "sigma2": obj.sigma2})
    if isinstance(obj, TrbmParams):
        return pack(TAG_TRBM, (obj.n_v, obj.n_h),
                    {"W": obj.W, "A": obj.A, "B": obj.B, "P0": obj.P[0], "P1": obj.P[1],
                     "Q0": obj.Q[0], "Q1": obj.Q[1], "b": obj.b, "a": obj.a,
                     "sigma2": obj.sigma2})
    if isinstance(obj, AgeEstimator):
        return pack(TAG_ESTIMATOR, (obj.feature_dim,),
                    {"class_bounds": obj.class_bounds, "feature_mean": obj.feature_mean,
                     "feature_std": obj.feature_std, "clf_W": obj.clf_W, "clf_b": obj.clf_b,
                     "reg_W": obj.reg_W, "reg_b": obj.reg_b})
    if isinstance(obj, Standardizer):
        return pack(TAG_STANDARDIZER, (len(obj.mean),), {"mean": obj.mean, "std": obj.std})
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def loads(data: bytes, expected_tag: int | None = None):
    from agetrbm.age_estimator import AgeEstimator

    tag, _, b = unpack(data, expected_tag)
    if tag == TAG_GRBM:
        return GrbmParams(W=b["W"], b=b["b"], a=b["a"], sigma2=b["sigma2"])
    if tag == TAG_TRBM:
        return TrbmParams(W=b["W"], A=b["A"], B=b["B"], P=np.stack([b["P0"], b["P1"]]),
                          Q=np.stack([b["Q0"], b["Q1"]]), b=b["b"], a=b["a"],
                          sigma2=b["sigma2"])
    if tag == TAG_ESTIMATOR:
        return AgeEstimator(class_bounds=tuple(b["class_bounds"]),
                            feature_mean=b["feature_mean"], feature_std=b["feature_std"],
                            clf_W=b["clf_W"], clf_b=b["clf_b"], reg_W=b["reg_W"],
                            reg_b=b["reg_b"])
    return Standardizer(mean=b["mean"], std=b["std"])


def save(path, obj):
    Path(path).write_bytes(dumps(obj))


def load(path, expected_tag: int | None = None):
    return loads(Path(path).read_bytes(), expected_tag)
