"""Region detail models and gradient-domain (Poisson) blending.

Each facial region (eye band, two cheek patches, mouth) has a GRBM per age
group trained on standardized patches.  Detail is drawn by a short Gibbs
run from the current patch and fused into the face by solving the discrete
Poisson equation with the sampled patch as guidance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from agetrbm import grbm
from agetrbm.errors import ConvergenceError, InputError
from agetrbm.grbm import GrbmHyper, GrbmParams, Standardizer

REGION_ORDER = ("eye", "cheek", "mouth")

# (row0, col0, height, width) in the 95x95 reference frame
DEFAULT_RECTS = {
    "eye": [("eye", (24, 14, 21, 67), False)],
    "cheek": [("cheek_left", (45, 14, 20, 23), False),
              ("cheek_right", (45, 58, 20, 23), True)],
    "mouth": [("mouth", (65, 24, 20, 47), False)],
}


@dataclass(frozen=True, eq=False)
class RegionSpec:
    """A rectangle in the reference frame plus its blend mask.

    ``mirror`` flips the patch left-right before it reaches the region model,
    so both cheeks share one model.
    """

    region_id: str
    rect: tuple
    mask: np.ndarray
    name: str = ""
    mirror: bool = False

    def __post_init__(self):
        if self.region_id not in REGION_ORDER:
            raise InputError(f"unknown region {self.region_id!r}")
        rect = tuple(int(x) for x in self.rect)
        if len(rect) != 4 or rect[2] < 1 or rect[3] < 1 or rect[0] < 0 or rect[1] < 0:
            raise InputError(f"bad rect {self.rect}")
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != rect[2:]:
            raise InputError(f"mask shape {mask.shape} does not match rect {rect[2:]}")
        if not mask.any():
            raise InputError("mask is empty")
        if mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any():
            raise InputError("mask must leave a one-pixel border of the rect")
        mask.flags.writeable = False
        object.__setattr__(self, "rect", rect)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "name", self.name or self.region_id)

    @property
    def shape(self):
        return self.rect[2:]

    def slices(self):
        r, c, h, w = self.rect
        return slice(r, r + h), slice(c, c + w)

    def check_frame(self, frame_shape):
        r, c, h, w = self.rect
        if r + h > frame_shape[0] or c + w > frame_shape[1]:
            raise InputError(f"region {self.name} rect {self.rect} exceeds frame {frame_shape}")


def interior_mask(shape) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    m[1:-1, 1:-1] = True
    return m


def default_regions(face_mask=None) -> list:
    """Default eye / cheek / mouth specs, optionally clipped to a face mask."""
    specs = []
    for region_id in REGION_ORDER:
        for name, rect, mirror in DEFAULT_RECTS[region_id]:
            mask = interior_mask(rect[2:])
            if face_mask is not None:
                r, c, h, w = rect
                mask &= np.asarray(face_mask, dtype=bool)[r:r + h, c:c + w]
            specs.append(RegionSpec(region_id, rect, mask, name, mirror))
    return specs


def extract_region(face, spec) -> np.ndarray:
    """Crop ``spec.rect``; ``spec`` may also be a bare ``(row0, col0, h, w)``."""
    face = np.asarray(face, dtype=np.float64)
    if isinstance(spec, RegionSpec):
        spec.check_frame(face.shape)
        r, c, h, w = spec.rect
    else:
        r, c, h, w = (int(x) for x in spec)
        if min(r, c) < 0 or min(h, w) < 1 or r + h > face.shape[0] or c + w > face.shape[1]:
            raise InputError(f"rect {tuple(spec)} outside frame {face.shape}")
    return face[r:r + h, c:c + w].copy()


def _orient(patch, spec: RegionSpec):
    return patch[:, ::-1] if spec.mirror else patch


# ---------------------------------------------------------------------------
# region models


@dataclass(frozen=True, eq=False)
class RegionModel:
    params: GrbmParams
    standardizer: Standardizer


def train_region_model(patches, n_h: int, hyper: GrbmHyper,
                       rng: np.random.Generator | None = None) -> RegionModel:
    """Fit a GRBM to flattened patches after per-pixel standardization."""
    X = np.asarray(patches, dtype=np.float64).reshape(len(patches), -1)
    std = Standardizer.fit(X)
    params = grbm.train(std.apply(X), n_h, hyper, rng=rng)
    return RegionModel(params, std)


def sample_detail(region_model, seed_patch, gibbs_steps: int, rng: np.random.Generator):
    """Gibbs-sample a detail patch starting from ``seed_patch``.

    ``region_model`` is a ``RegionModel`` or bare ``GrbmParams`` (identity
    standardization).  Returns the visible mean of the final sweep.
    """
    seed = np.asarray(seed_patch, dtype=np.float64)
    if isinstance(region_model, GrbmParams):
        params, std = region_model, None
    else:
        params, std = region_model.params, region_model.standardizer
    if seed.size != params.n_v:
        raise InputError(f"patch has {seed.size} pixels, region model expects {params.n_v}")
    if gibbs_steps < 0:
        raise InputError("gibbs_steps must be non-negative")
    if gibbs_steps == 0:
        return seed.copy()
    z = seed.reshape(-1) if std is None else std.apply(seed.reshape(-1))
    out = grbm.gibbs_chain(z, params, gibbs_steps, rng, return_mean=True)
    if std is not None:
        out = std.invert(out)
    return out.reshape(seed.shape)


# ---------------------------------------------------------------------------
# Poisson blending


@dataclass(frozen=True, eq=False)
class BlendProblem:
    target: np.ndarray
    source: np.ndarray
    spec: RegionSpec

    def __post_init__(self):
        target = np.asarray(self.target, dtype=np.float64)
        source = np.asarray(self.source, dtype=np.float64)
        if target.ndim != 2:
            raise InputError("blend target must be a 2-D raster")
        self.spec.check_frame(target.shape)
        if source.shape != self.spec.shape:
            raise InputError(f"source patch {source.shape} does not match rect {self.spec.shape}")
        if not (np.all(np.isfinite(target)) and np.all(np.isfinite(source))):
            raise InputError("blend inputs contain non-finite values")
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "source", source)


@dataclass
class PoissonSolution:
    image: np.ndarray
    residual: float
    iterations: int


def laplacian(patch) -> np.ndarray:
    """5-point Laplacian on the interior of ``patch`` (zero on its border)."""
    p = np.asarray(patch, dtype=np.float64)
    out = np.zeros_like(p)
    out[1:-1, 1:-1] = (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:]
                       - 4.0 * p[1:-1, 1:-1])
    return out


def _system(problem: BlendProblem):
    """Sparse SPD system ``A x = rhs`` for the masked pixels (A = -Laplacian)."""
    mask = problem.spec.mask
    h, w = mask.shape
    rows, cols = np.nonzero(mask)
    n = len(rows)
    index = np.full(mask.shape, -1, dtype=np.int64)
    index[rows, cols] = np.arange(n)
    tgt = extract_region(problem.target, problem.spec)
    rhs = -laplacian(problem.source)[rows, cols]
    ii, jj = [np.arange(n)], [np.arange(n)]
    vals = [np.full(n, 4.0)]
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nr, nc = rows + dr, cols + dc
        nb = index[nr, nc]
        inside = nb >= 0
        ii.append(np.nonzero(inside)[0])
        jj.append(nb[inside])
        vals.append(np.full(inside.sum(), -1.0))
        rhs = rhs + np.where(inside, 0.0, tgt[nr, nc])
    A = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(ii), np.concatenate(jj))),
                          shape=(n, n))
    return A, rhs, (rows, cols)


def conjugate_gradient(A, rhs, x0=None, tol: float = 1e-6, max_iter: int = 10_000):
    """Plain CG for SPD ``A``; stops when ``||rhs - A x||_2 < tol``."""
    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=np.float64)
    r = rhs - A @ x
    d = r.copy()
    rr = r @ r
    it = 0
    while np.sqrt(rr) >= tol:
        if it >= max_iter:
            raise ConvergenceError(f"CG did not converge in {max_iter} iterations "
                                   f"(residual {np.sqrt(rr):.3e})", np.sqrt(rr), x)
        Ad = A @ d
        alpha = rr / (d @ Ad)
        x += alpha * d
        r -= alpha * Ad
        rr_new = r @ r
        d = r + (rr_new / rr) * d
        rr = rr_new
        it += 1
    # recompute the true residual; the recurrence drifts in long runs
    return x, float(np.linalg.norm(rhs - A @ x)), it


def solve_poisson(problem: BlendProblem, tol: float = 1e-6, max_iter: int = 10_000,
                  x0=None) -> PoissonSolution:
    A, rhs, (rows, cols) = _system(problem)
    if x0 is not None:
        x0 = np.asarray(x0, dtype=np.float64)
        x0 = x0[rows, cols] if x0.shape == problem.spec.shape else x0
    x, res, it = conjugate_gradient(A, rhs, x0, tol, max_iter)
    out = problem.target.copy()
    rs, cs = problem.spec.slices()
    block = out[rs, cs]
    block[rows, cols] = x
    return PoissonSolution(out, res, it)


def poisson_blend(problem: BlendProblem, tol: float = 1e-6, max_iter: int = 10_000,
                  x0=None) -> np.ndarray:
    """Seamless fusion of ``problem.source`` into ``problem.target``.

    Inside the mask the result's Laplacian equals the source's; pixels on
    and outside the mask boundary keep their target values.
    """
    return solve_poisson(problem, tol, max_iter, x0).image


def laplacian_residual(result, problem: BlendProblem) -> float:
    """``max |lap(result) - lap(source)|`` over the masked pixels."""
    patch = extract_region(result, problem.spec)
    diff = laplacian(patch) - laplacian(problem.source)
    return float(np.max(np.abs(diff[problem.spec.mask])))


# ---------------------------------------------------------------------------


def enhance(face, bank: dict, specs, gibbs_steps: int, rng: np.random.Generator,
            tol: float = 1e-6) -> np.ndarray:
    """Sample and blend detail into ``face`` region by region.

    Regions are processed eye, cheek, mouth; each blend sees the result of
    the previous ones.  ``bank`` maps region id to ``RegionModel``.
    """
    out = np.asarray(face, dtype=np.float64).copy()
    specs = sorted(specs, key=lambda s: REGION_ORDER.index(s.region_id))
    for spec in specs:
        if spec.region_id not in bank:
            raise InputError(f"no region model for {spec.region_id!r}")
        seed = _orient(extract_region(out, spec), spec)
        detail = _orient(sample_detail(bank[spec.region_id], seed, gibbs_steps, rng), spec)
        out = poisson_blend(BlendProblem(out, detail, spec), tol=tol)
    return out


# ---------------------------------------------------------------------------
# region spec files


def save_regions(directory, specs, filename: str = "regions.json"):
    """Write ``regions.json`` plus one mask PGM per region."""
    from agetrbm.imageio import write_pgm

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for spec in specs:
        mask_file = f"mask_{spec.name}.pgm"
        write_pgm(directory / mask_file, spec.mask.astype(np.float64))
        entries.append({"region_id": spec.region_id, "name": spec.name,
                        "rect": list(spec.rect), "mirror": spec.mirror, "mask": mask_file})
    (directory / filename).write_text(json.dumps({"regions": entries}, indent=2) + "\n")


def load_regions(path) -> list:
    from agetrbm.imageio import read_pgm

    path = Path(path)
    doc = json.loads(path.read_text())
    specs = []
    for e in doc["regions"]:
        mask = read_pgm(path.parent / e["mask"]) > 0.5
        specs.append(RegionSpec(e["region_id"], tuple(e["rect"]), mask, e.get("name", ""),
                                bool(e.get("mirror", False))))
    return specs
