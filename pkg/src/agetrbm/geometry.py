"""Landmark alignment and piecewise-affine warping.

Landmarks are ``(N, 2)`` float arrays of ``(x, y)`` = ``(column, row)``
pixel coordinates.  Rasters are indexed ``[row, column]`` and pixel centres
sit at integer coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay

from agetrbm.errors import DegenerateShapeError, InputError

N_LANDMARKS = 68
FRAME_SHAPE = (95, 95)
FRAME_MARGIN = 0.05


def check_landmarks(points, n_expected: int | None = None) -> np.ndarray:
    """Validate a landmark array and return it as float64.

    Raises ``DegenerateShapeError`` when the points are collapsed or collinear.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise InputError(f"landmarks must be an (N>=3, 2) array, got {pts.shape}")
    if n_expected is not None and pts.shape[0] != n_expected:
        raise InputError(f"expected {n_expected} landmarks, got {pts.shape[0]}")
    if not np.all(np.isfinite(pts)):
        raise InputError("landmarks contain non-finite values")
    sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    if sv[0] < 1e-9 or sv[1] < 1e-9 * sv[0]:
        raise DegenerateShapeError("landmarks are collapsed or collinear")
    return pts


def centroid_size(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    return float(np.sqrt(np.sum((pts - pts.mean(axis=0)) ** 2)))


def normalize_shape(points) -> np.ndarray:
    """Centre at the origin and scale to unit centroid size."""
    pts = check_landmarks(points)
    centred = pts - pts.mean(axis=0)
    return centred / centroid_size(centred)


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """``x -> scale * R x + translation`` acting on row-vector points."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if R.shape != (2, 2) or t.shape != (2,):
            raise InputError("rotation must be 2x2 and translation length 2")
        if not self.scale > 0:
            raise InputError("scale must be positive")
        if not np.allclose(R.T @ R, np.eye(2), atol=1e-10) or np.linalg.det(R) < 0:
            raise InputError("rotation must be a proper orthogonal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def angle(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(2), np.zeros(2))

    @classmethod
    def from_params(cls, scale, angle, translation) -> "SimilarityTransform":
        c, s = np.cos(angle), np.sin(angle)
        return cls(scale, np.array([[c, -s], [s, c]]), np.asarray(translation, float))

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * pts @ self.rotation.T + self.translation

    __call__ = apply

    def inverse(self) -> "SimilarityTransform":
        R = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, R, -(R @ self.translation) / self.scale)

    def compose(self, first: "SimilarityTransform") -> "SimilarityTransform":
        """The transform applying ``first`` and then ``self``."""
        return SimilarityTransform(self.scale * first.scale, self.rotation @ first.rotation,
                                   self.scale * self.rotation @ first.translation
                                   + self.translation)


def procrustes_pair(src, dst) -> SimilarityTransform:
    """Least-squares similarity transform taking ``src`` onto ``dst``."""
    src = check_landmarks(src)
    dst = check_landmarks(dst)
    if src.shape != dst.shape:
        raise InputError("shapes must have the same number of points")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    X, Y = src - mu_s, dst - mu_d
    U, S, Vt = np.linalg.svd(Y.T @ X)
    d = np.sign(np.linalg.det(U @ Vt)) or 1.0
    D = np.diag([1.0, d])
    R = U @ D @ Vt
    scale = np.trace(np.diag(S) @ D) / np.sum(X ** 2)
    return SimilarityTransform(scale, R, mu_d - scale * R @ mu_s)


def residual(src, dst, transform: SimilarityTransform) -> float:
    return float(np.sum((transform.apply(src) - np.asarray(dst, dtype=np.float64)) ** 2))


@dataclass
class GpaResult:
    reference: np.ndarray
    aligned: list
    residuals: list = field(default_factory=list)
    converged: bool = True

    @property
    def n_iter(self) -> int:
        return len(self.residuals)


def generalized_procrustes(shapes, tol: float = 1e-10, max_iter: int = 100) -> GpaResult:
    """Iteratively align all shapes to their evolving mean.

    The reference is centred with unit centroid size.  ``residuals[k]`` is the
    total squared distance of the aligned shapes to the mean at iteration
    ``k``.  Hitting ``max_iter`` returns the last iterate with
    ``converged=False`` instead of raising.
    """
    shapes = [check_landmarks(s) for s in shapes]
    if len(shapes) < 2:
        raise InputError("generalized Procrustes needs at least two shapes")
    if len({s.shape for s in shapes}) != 1:
        raise InputError("all shapes must have the same number of points")
    mean = normalize_shape(shapes[0])
    result = GpaResult(reference=mean, aligned=[], converged=False)
    for _ in range(max_iter):
        aligned = [procrustes_pair(s, mean).apply(s) for s in shapes]
        result.residuals.append(float(sum(np.sum((a - mean) ** 2) for a in aligned)))
        new_mean = normalize_shape(np.mean(aligned, axis=0))
        # pin the rotation to the previous mean so the frame cannot drift
        new_mean = normalize_shape(procrustes_pair(new_mean, mean).apply(new_mean))
        moved = float(np.sqrt(np.sum((new_mean - mean) ** 2)))
        mean = new_mean
        if moved < tol:
            result.converged = True
            break
    result.reference = mean
    result.aligned = [procrustes_pair(s, mean).apply(s) for s in shapes]
    return result


def mean_shape(shapes) -> np.ndarray:
    shapes = [check_landmarks(s) for s in shapes]
    if not shapes:
        raise InputError("mean of an empty shape list")
    if len({s.shape for s in shapes}) != 1:
        raise InputError("all shapes must have the same number of points")
    return check_landmarks(np.mean(shapes, axis=0))


def fit_to_frame(shape, frame_shape=FRAME_SHAPE, margin: float = FRAME_MARGIN) -> np.ndarray:
    """Scale and centre ``shape`` so its bounding box fits the frame with a margin."""
    pts = check_landmarks(shape)
    H, W = frame_shape
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    avail = np.array([W - 1, H - 1], dtype=np.float64) * (1.0 - 2.0 * margin)
    scale = float(np.min(avail / (hi - lo)))
    centre = np.array([(W - 1) / 2.0, (H - 1) / 2.0])
    return (pts - (lo + hi) / 2.0) * scale + centre


# ---------------------------------------------------------------------------
# triangulation and warping


@dataclass(frozen=True, eq=False)
class Triangulation:
    triangles: np.ndarray

    def __post_init__(self):
        tri = np.asarray(self.triangles, dtype=np.int64)
        if tri.ndim != 2 or tri.shape[1] != 3 or len(tri) == 0:
            raise InputError("triangles must be a non-empty (M, 3) index array")
        tri.flags.writeable = False
        object.__setattr__(self, "triangles", tri)

    def __len__(self):
        return len(self.triangles)

    def validate(self, points, min_area: float = 1e-9):
        """Check indices, triangle areas and edge manifoldness against ``points``."""
        pts = np.asarray(points, dtype=np.float64)
        if self.triangles.min() < 0 or self.triangles.max() >= len(pts):
            raise InputError("triangle index out of range")
        if np.any(np.abs(triangle_areas(pts, self)) < min_area):
            raise InputError("degenerate (zero-area) triangle")
        edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        if np.any(counts > 2):
            raise InputError("edge shared by more than two triangles")
        return self


def triangle_areas(points, tri: Triangulation) -> np.ndarray:
    """Signed areas (positive = counter-clockwise in x/y)."""
    p = np.asarray(points, dtype=np.float64)[tri.triangles]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def delaunay(points) -> Triangulation:
    pts = check_landmarks(points)
    return Triangulation(Delaunay(pts).simplices).validate(pts)


def bilinear_sample(image, x, y) -> np.ndarray:
    """Sample ``image`` at float coordinates, clamping to the border."""
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape[:2]
    x = np.clip(x, 0.0, W - 1.0)
    y = np.clip(y, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), W - 2) if W > 1 else np.zeros_like(x, int)
    y0 = np.minimum(np.floor(y).astype(np.int64), H - 2) if H > 1 else np.zeros_like(y, int)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx, fy = x - x0, y - y0
    if img.ndim == 3:
        fx, fy = fx[:, None], fy[:, None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def triangle_index_map(dst, tri: Triangulation, out_shape, eps: float = 1e-9):
    """Per-pixel index of the containing ``dst`` triangle (-1 outside).

    Ties on shared edges go to the lowest triangle index.  Also returns the
    barycentric coordinates of every covered pixel.
    """
    dst = np.asarray(dst, dtype=np.float64)
    H, W = out_shape
    owner = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    corners = dst[tri.triangles]
    for k, (p0, p1, p2) in enumerate(corners):
        T = np.column_stack([p1 - p0, p2 - p0])
        det = np.linalg.det(T)
        if abs(det) < 1e-12:
            raise InputError(f"degenerate triangle {k} in destination shape")
        lo = np.maximum(np.floor(np.min(corners[k], axis=0) - eps), 0).astype(int)
        hi = np.minimum(np.ceil(np.max(corners[k], axis=0) + eps), [W - 1, H - 1]).astype(int)
        if np.any(hi < lo):
            continue
        ys, xs = np.mgrid[lo[1]:hi[1] + 1, lo[0]:hi[0] + 1]
        free = owner[ys, xs] < 0
        if not free.any():
            continue
        xs, ys = xs[free], ys[free]
        rel = np.column_stack([xs - p0[0], ys - p0[1]])
        l12 = np.linalg.solve(T, rel.T).T
        lam = np.column_stack([1.0 - l12.sum(axis=1), l12])
        inside = np.all(lam >= -eps, axis=1)
        owner[ys[inside], xs[inside]] = k
        bary[ys[inside], xs[inside]] = lam[inside]
    return owner, bary


def piecewise_affine_warp(image, src, dst, tri: Triangulation, out_shape=None,
                          fill: float = 0.0, return_mask: bool = False, index_map=None):
    """Warp ``image`` so that landmarks ``src`` land on ``dst``.

    Each destination pixel inside a ``dst`` triangle is mapped back through
    that triangle's affine map and bilinearly sampled from ``image``.  Pixels
    outside the triangulation get ``fill``.  ``index_map`` is a precomputed
    ``triangle_index_map(dst, tri, out_shape)`` to reuse across calls.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise InputError("image must be 2-D (or 3-D with channels last)")
    src = check_landmarks(src)
    dst = check_landmarks(dst)
    if src.shape != dst.shape:
        raise InputError("src and dst must have the same number of points")
    if np.any(np.abs(triangle_areas(src, tri)) < 1e-12):
        raise InputError("degenerate triangle in source shape")
    out_shape = img.shape[:2] if out_shape is None else tuple(out_shape)
    if index_map is None:
        index_map = triangle_index_map(dst, tri, out_shape)
    owner, bary = index_map
    if owner.shape != out_shape:
        raise InputError("index_map does not match out_shape")
    rows, cols = np.nonzero(owner >= 0)
    src_corners = src[tri.triangles[owner[rows, cols]]]
    xy = np.einsum("nk,nkd->nd", bary[rows, cols], src_corners)
    out = np.full(out_shape + img.shape[2:], fill, dtype=np.float64)
    out[rows, cols] = bilinear_sample(img, xy[:, 0], xy[:, 1])
    if return_mask:
        return out, owner >= 0
    return out


def hull_mask(points, tri: Triangulation, out_shape) -> np.ndarray:
    owner, _ = triangle_index_map(points, tri, out_shape)
    return owner >= 0


def shape_adjust(texture, reference, target_shape, tri: Triangulation):
    """Warp a reference-frame raster onto ``target_shape``."""
    return piecewise_affine_warp(texture, reference, target_shape, tri)
