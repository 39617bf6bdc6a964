"""Age progression and regression over a bank of trained models.

Textures live at two resolutions: the full reference frame (95x95 by
default) and a coarse grid obtained by area averaging.  Group GRBMs and TRBM
nodes work on standardized grid vectors.  The full-resolution output is the
input texture plus the bilinearly upsampled change predicted on the grid, so
fine detail the grid cannot hold is carried over from the input.  Region
detail models and shape adjustment then act at full resolution.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from agetrbm import age_estimator as age_est
from agetrbm import geometry, grbm, serialization, trbm, wrinkle
from agetrbm.age_estimator import AgeEstimator, EstimatorHyper
from agetrbm.errors import CapabilityError, ConvergenceError, InputError, StateError
from agetrbm.geometry import Triangulation
from agetrbm.grbm import GrbmHyper, GrbmParams, Standardizer
from agetrbm.imageio import read_landmarks, write_landmarks
from agetrbm.trbm import FaceSequence, ReferenceWindow, TrbmParams, Transitions

log = logging.getLogger(__name__)

N_GROUPS = 11
N_NODES = N_GROUPS - 1
AGE_MIN, AGE_MAX, GROUP_SPAN = 10, 64, 5
DEFAULT_GRID = (19, 19)
BANK_FORMAT = "agetrbm-bank-1"


# ---------------------------------------------------------------------------
# age groups


@dataclass(frozen=True)
class AgeGroup:
    index: int

    def __post_init__(self):
        if int(self.index) != self.index or not 0 <= self.index < N_GROUPS:
            raise InputError(f"age group index {self.index} outside [0, {N_GROUPS - 1}]")
        object.__setattr__(self, "index", int(self.index))

    @property
    def span(self) -> tuple:
        low = AGE_MIN + GROUP_SPAN * self.index
        return low, low + GROUP_SPAN - 1


def assign_age_group(age) -> AgeGroup:
    a = float(age)
    if not np.isfinite(a) or a < AGE_MIN or a > AGE_MAX:
        raise InputError(f"age {age} outside [{AGE_MIN}, {AGE_MAX}]")
    return AgeGroup(int((a - AGE_MIN) // GROUP_SPAN))


def _group_index(g) -> int:
    return g.index if isinstance(g, AgeGroup) else AgeGroup(g).index


# ---------------------------------------------------------------------------
# resolution change


def _area_weights(n_out: int, n_in: int) -> np.ndarray:
    """Rows average the input cells each output cell covers."""
    f = n_in / n_out
    M = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * f, (i + 1) * f
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            M[i, j] = (min(hi, j + 1) - max(lo, j)) / f
    return M


def _interp_weights(n_out: int, n_in: int) -> np.ndarray:
    """Linear interpolation from ``n_in`` cell centres to ``n_out`` pixel centres."""
    M = np.zeros((n_out, n_in))
    if n_in == 1:
        M[:, 0] = 1.0
        return M
    pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1.0)
    j0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - j0
    M[np.arange(n_out), j0] = 1.0 - frac
    M[np.arange(n_out), j0 + 1] += frac
    return M


@dataclass(frozen=True, eq=False)
class TextureGrid:
    """Area-average down to ``grid_shape``; bilinear back up to ``frame_shape``."""

    frame_shape: tuple
    grid_shape: tuple

    def __post_init__(self):
        frame = tuple(int(x) for x in self.frame_shape)
        grid = tuple(int(x) for x in self.grid_shape)
        if len(frame) != 2 or len(grid) != 2 or min(grid) < 1:
            raise InputError("frame and grid shapes must be positive (H, W) pairs")
        if grid[0] > frame[0] or grid[1] > frame[1]:
            raise InputError(f"grid {grid} is finer than frame {frame}")
        object.__setattr__(self, "frame_shape", frame)
        object.__setattr__(self, "grid_shape", grid)
        object.__setattr__(self, "_dr", _area_weights(grid[0], frame[0]))
        object.__setattr__(self, "_dc", _area_weights(grid[1], frame[1]))
        object.__setattr__(self, "_ur", _interp_weights(frame[0], grid[0]))
        object.__setattr__(self, "_uc", _interp_weights(frame[1], grid[1]))

    @property
    def n_cells(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]

    def down(self, raster) -> np.ndarray:
        r = np.asarray(raster, dtype=np.float64)
        if r.shape[-2:] != self.frame_shape:
            raise InputError(f"raster shape {r.shape[-2:]} != frame {self.frame_shape}")
        g = self._dr @ r @ self._dc.T
        return g.reshape(r.shape[:-2] + (self.n_cells,))

    def up(self, vec) -> np.ndarray:
        v = np.asarray(vec, dtype=np.float64)
        if v.shape[-1] != self.n_cells:
            raise InputError(f"grid vector has {v.shape[-1]} cells, expected {self.n_cells}")
        g = v.reshape(v.shape[:-1] + self.grid_shape)
        return self._ur @ g @ self._uc.T


# ---------------------------------------------------------------------------
# model bank


@dataclass(frozen=True, eq=False)
class ModelBank:
    """Everything a progression request needs; immutable once built.

    ``nodes[i]`` maps group ``i`` to ``i + 1`` when ``direction == 1``; in a
    reversed bank (``direction == -1``) it maps ``i + 1`` to ``i``.
    ``wrinkle_models`` is ``{group: {region_id: RegionModel}}``.
    """

    frame_shape: tuple
    grid_shape: tuple
    reference_shape: np.ndarray
    triangulation: Triangulation
    standardizer: Standardizer
    group_rbms: tuple
    nodes: tuple
    mean_shapes: np.ndarray
    reverse_nodes: tuple | None = None
    regions: tuple = ()
    wrinkle_models: dict = field(default_factory=dict)
    estimator: AgeEstimator | None = None
    direction: int = 1

    def __post_init__(self):
        object.__setattr__(self, "frame_shape", tuple(int(x) for x in self.frame_shape))
        object.__setattr__(self, "grid_shape", tuple(int(x) for x in self.grid_shape))
        object.__setattr__(self, "group_rbms", tuple(self.group_rbms))
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "regions", tuple(self.regions))
        if self.reverse_nodes is not None:
            object.__setattr__(self, "reverse_nodes", tuple(self.reverse_nodes))
        ref = geometry.check_landmarks(self.reference_shape)
        ref.flags.writeable = False
        object.__setattr__(self, "reference_shape", ref)
        self.triangulation.validate(ref)
        n_cells = self.grid_shape[0] * self.grid_shape[1]
        if len(self.group_rbms) != N_GROUPS:
            raise InputError(f"bank needs {N_GROUPS} group RBMs, got {len(self.group_rbms)}")
        if len(self.nodes) != N_NODES:
            raise InputError(f"bank needs {N_NODES} nodes, got {len(self.nodes)}")
        if self.reverse_nodes is not None and len(self.reverse_nodes) != N_NODES:
            raise InputError(f"bank needs {N_NODES} reverse nodes")
        n_h = {p.n_h for p in self.group_rbms}
        if len(n_h) != 1:
            raise InputError("group RBMs must share one hidden size")
        for p in self.group_rbms + self.nodes + (self.reverse_nodes or ()):
            if p.n_v != n_cells:
                raise InputError(f"model has n_v={p.n_v}, grid has {n_cells} cells")
        if len(self.standardizer.mean) != n_cells:
            raise InputError("standardizer length does not match the grid")
        shapes = np.array(self.mean_shapes, dtype=np.float64)
        if shapes.shape != (N_GROUPS,) + ref.shape:
            raise InputError(f"mean_shapes must have shape {(N_GROUPS,) + ref.shape}")
        shapes.flags.writeable = False
        object.__setattr__(self, "mean_shapes", shapes)
        for spec in self.regions:
            spec.check_frame(self.frame_shape)
        for g, models in self.wrinkle_models.items():
            if not 0 <= int(g) < N_GROUPS:
                raise InputError(f"wrinkle models for unknown group {g}")
            for spec in self.regions:
                m = models.get(spec.region_id)
                if m is not None and m.params.n_v != spec.mask.size:
                    raise InputError(f"wrinkle model {g}/{spec.region_id} has n_v="
                                     f"{m.params.n_v}, region has {spec.mask.size} pixels")
        if self.estimator is not None and self.estimator.feature_dim != N_GROUPS * n_h.pop():
            raise InputError("estimator feature dimension does not match the group RBMs")
        if self.direction not in (1, -1):
            raise InputError("direction must be +1 or -1")

    @cached_property
    def grid(self) -> TextureGrid:
        return TextureGrid(self.frame_shape, self.grid_shape)

    @cached_property
    def reference_map(self):
        return geometry.triangle_index_map(self.reference_shape, self.triangulation,
                                           self.frame_shape)

    @cached_property
    def face_mask(self) -> np.ndarray:
        return self.reference_map[0] >= 0

    def reversed(self) -> "ModelBank":
        """The same bank with forward and reverse nodes swapped."""
        if self.reverse_nodes is None:
            raise CapabilityError("bank has no reverse nodes")
        return dataclasses.replace(self, nodes=self.reverse_nodes, reverse_nodes=self.nodes,
                                   direction=-self.direction)

    def node_for(self, group: int, direction: int) -> TrbmParams:
        """The node taking ``group`` to ``group + direction``."""
        if direction != self.direction:
            raise CapabilityError(f"bank runs in direction {self.direction}, not {direction}")
        target = group + direction
        if not (0 <= group < N_GROUPS and 0 <= target < N_GROUPS):
            raise InputError(f"no transition from group {group} to {target}")
        return self.nodes[min(group, target)]


# ---------------------------------------------------------------------------
# bank files


def _region_entry(g, rid):
    return f"wrinkle_g{int(g):02d}_{rid}.ebm", f"wrinkle_g{int(g):02d}_{rid}_std.ebm"


def save_bank(bank: ModelBank, directory) -> Path:
    """One EBM1 file per model plus ``manifest.json``.

    The bank is always written in forward orientation.
    """
    if bank.direction == -1:
        bank = bank.reversed()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"format": BANK_FORMAT, "frame_shape": list(bank.frame_shape),
                "grid_shape": list(bank.grid_shape), "standardizer": "standardizer.ebm",
                "reference_shape": "reference_shape.csv",
                "triangulation": bank.triangulation.triangles.tolist()}
    serialization.save(d / "standardizer.ebm", bank.standardizer)
    write_landmarks(d / "reference_shape.csv", bank.reference_shape)
    manifest["groups"] = []
    manifest["mean_shapes"] = []
    for g, p in enumerate(bank.group_rbms):
        serialization.save(d / f"group_{g:02d}.ebm", p)
        write_landmarks(d / f"mean_shape_{g:02d}.csv", bank.mean_shapes[g])
        manifest["groups"].append(f"group_{g:02d}.ebm")
        manifest["mean_shapes"].append(f"mean_shape_{g:02d}.csv")
    manifest["nodes"] = []
    for i, p in enumerate(bank.nodes):
        serialization.save(d / f"node_{i:02d}.ebm", p)
        manifest["nodes"].append(f"node_{i:02d}.ebm")
    manifest["reverse_nodes"] = None
    if bank.reverse_nodes is not None:
        manifest["reverse_nodes"] = []
        for i, p in enumerate(bank.reverse_nodes):
            serialization.save(d / f"reverse_node_{i:02d}.ebm", p)
            manifest["reverse_nodes"].append(f"reverse_node_{i:02d}.ebm")
    manifest["regions"] = None
    if bank.regions:
        wrinkle.save_regions(d, bank.regions)
        manifest["regions"] = "regions.json"
    manifest["wrinkle_models"] = {}
    for g in sorted(bank.wrinkle_models):
        entry = {}
        for rid in sorted(bank.wrinkle_models[g]):
            m = bank.wrinkle_models[g][rid]
            pf, sf = _region_entry(g, rid)
            serialization.save(d / pf, m.params)
            serialization.save(d / sf, m.standardizer)
            entry[rid] = {"params": pf, "standardizer": sf}
        manifest["wrinkle_models"][str(int(g))] = entry
    manifest["estimator"] = None
    if bank.estimator is not None:
        serialization.save(d / "estimator.ebm", bank.estimator)
        manifest["estimator"] = "estimator.ebm"
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return d


def load_bank(directory) -> ModelBank:
    d = Path(directory)
    path = d / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"bank manifest not found: {path}")
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: malformed manifest ({exc})") from None
    if m.get("format") != BANK_FORMAT:
        raise InputError(f"{path}: unsupported bank format {m.get('format')!r}")

    def ebm(name, tag):
        return serialization.load(d / name, tag)

    ref = read_landmarks(d / m["reference_shape"], None)
    wrinkles = {}
    for g, entry in m["wrinkle_models"].items():
        wrinkles[int(g)] = {rid: wrinkle.RegionModel(
            ebm(f["params"], serialization.TAG_GRBM),
            ebm(f["standardizer"], serialization.TAG_STANDARDIZER))
            for rid, f in entry.items()}
    return ModelBank(
        frame_shape=tuple(m["frame_shape"]), grid_shape=tuple(m["grid_shape"]),
        reference_shape=ref, triangulation=Triangulation(np.array(m["triangulation"])),
        standardizer=ebm(m["standardizer"], serialization.TAG_STANDARDIZER),
        group_rbms=[ebm(f, serialization.TAG_GRBM) for f in m["groups"]],
        nodes=[ebm(f, serialization.TAG_TRBM) for f in m["nodes"]],
        mean_shapes=np.array([read_landmarks(d / f, len(ref)) for f in m["mean_shapes"]]),
        reverse_nodes=(None if m["reverse_nodes"] is None else
                       [ebm(f, serialization.TAG_TRBM) for f in m["reverse_nodes"]]),
        regions=wrinkle.load_regions(d / m["regions"]) if m["regions"] else (),
        wrinkle_models=wrinkles,
        estimator=(ebm(m["estimator"], serialization.TAG_ESTIMATOR)
                   if m["estimator"] else None))


# ---------------------------------------------------------------------------
# inference


@dataclass(frozen=True, eq=False)
class PreparedFace:
    frame: np.ndarray       # (H, W) texture in the reference frame, raw intensities
    mask: np.ndarray        # pixels covered by the reference triangulation
    texture: np.ndarray     # standardized grid vector
    landmarks: np.ndarray   # input landmarks similarity-aligned to the reference
    transform: geometry.SimilarityTransform


@dataclass(frozen=True)
class ProgressionOptions:
    gibbs_steps: int = 5
    stochastic: bool = False
    wrinkles: bool = True
    wrinkle_threshold: int = 6
    wrinkle_final_only: bool = False
    wrinkle_gibbs_steps: int = 1
    shape: bool = True
    seed: int = 0
    poisson_tol: float = 1e-6

    def __post_init__(self):
        if self.gibbs_steps < 0 or self.wrinkle_gibbs_steps < 0:
            raise InputError("Gibbs step counts must be non-negative")
        if self.poisson_tol <= 0:
            raise InputError("poisson_tol must be positive")


@dataclass(frozen=True, eq=False)
class ProgressionResult:
    """``frames`` holds flattened reference-frame textures, ``shaped`` the
    rasters after shape adjustment, ``grid`` the raw node outputs."""

    frames: FaceSequence
    shaped: tuple
    provenance: tuple
    grid: FaceSequence
    age: float
    age_source: str

    def __post_init__(self):
        if not len(self.frames) == len(self.shaped) == len(self.provenance) == len(self.grid):
            raise InputError("frames, shaped rasters and provenance must align")

    @property
    def groups(self) -> tuple:
        return self.frames.groups

    def textures(self, frame_shape) -> np.ndarray:
        return self.frames.frames.reshape((len(self.frames),) + tuple(frame_shape))


@contextmanager
def _stage(name: str):
    """Tag errors escaping a pipeline stage with the stage name."""
    try:
        yield
    except (InputError, CapabilityError, StateError, ConvergenceError) as exc:
        if getattr(exc, "stage", None) is None:
            exc.stage = name
            head = exc.args[0] if exc.args else ""
            exc.args = (f"[{name}] {head}",) + exc.args[1:]
        raise


def preprocess(image, landmarks, bank: ModelBank) -> PreparedFace:
    """Align, warp into the reference frame and standardize on the grid."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise InputError("input image must be a 2-D grey-level raster")
    if not np.all(np.isfinite(img)):
        raise InputError("input image contains non-finite values")
    lm = geometry.check_landmarks(landmarks, len(bank.reference_shape))
    transform = geometry.procrustes_pair(lm, bank.reference_shape)
    frame = geometry.piecewise_affine_warp(img, lm, bank.reference_shape, bank.triangulation,
                                           out_shape=bank.frame_shape,
                                           index_map=bank.reference_map)
    texture = bank.standardizer.apply(bank.grid.down(frame))
    return PreparedFace(frame, bank.face_mask, texture, transform.apply(lm), transform)


def generate_reference_sequence(texture, from_group, to_group, bank: ModelBank) -> list:
    """References for every group from ``from_group`` to ``to_group`` inclusive.

    Each is the input encoded by its own group's RBM and decoded by the
    other group's; the first entry is the input's own reconstruction.
    """
    g0, g1 = _group_index(from_group), _group_index(to_group)
    step = 1 if g1 >= g0 else -1
    src = bank.group_rbms[g0]
    return [grbm.transfer_features(texture, src, bank.group_rbms[k])
            for k in range(g0, g1 + step, step)]


def _resolve_age(face: PreparedFace, age, bank: ModelBank):
    if age is not None:
        return float(age), "given"
    if bank.estimator is None:
        raise StateError("no age given and the bank has no age estimator")
    return age_est.estimate_age(face.texture, bank.estimator, bank.group_rbms), "estimated"


def _synthesize(image, landmarks, age, target_group, options: ProgressionOptions,
                bank: ModelBank, rng, direction: int) -> ProgressionResult:
    if rng is None:
        rng = np.random.default_rng(options.seed)
    with _stage("bank"):
        if bank.direction != direction:
            bank = bank.reversed()
    with _stage("preprocess"):
        face = preprocess(image, landmarks, bank)
    with _stage("age"):
        age, age_source = _resolve_age(face, age, bank)
        src = assign_age_group(age).index
        tgt = _group_index(target_group)
        if (tgt - src) * direction < 0:
            verb = "progress" if direction == 1 else "regress"
            raise InputError(f"cannot {verb} from group {src} to group {tgt}")
    groups = list(range(src, tgt + direction, direction)) if tgt != src else [src]
    with _stage("reference"):
        refs = generate_reference_sequence(face.texture, src, tgt, bank)
    with _stage("roll_forward"):
        windows = [ReferenceWindow(refs[i + 1], refs[i]) for i in range(len(refs) - 1)]
        nodes = [bank.node_for(g, direction) for g in groups[:-1]]
        seq = trbm.roll_forward(face.texture, windows, nodes, options.gibbs_steps, rng,
                                options.stochastic, start_group=src, direction=direction)
    with _stage("texture"):
        raw = bank.standardizer.invert(seq.frames)
        base = np.clip(face.frame, 0.0, 1.0)
        textures = [base]
        for i in range(1, len(groups)):
            change = np.where(face.mask, bank.grid.up(raw[i] - raw[0]), 0.0)
            textures.append(np.clip(base + change, 0.0, 1.0))
    enhanced = [False] * len(groups)
    with _stage("wrinkle"):
        for i in range(1, len(groups)):
            g = groups[i]
            if not options.wrinkles or g < options.wrinkle_threshold:
                continue
            if options.wrinkle_final_only and i != len(groups) - 1:
                continue
            if g not in bank.wrinkle_models or not bank.regions:
                raise InputError(f"bank has no wrinkle models for group {g}")
            textures[i] = np.clip(wrinkle.enhance(textures[i], bank.wrinkle_models[g],
                                                  bank.regions, options.wrinkle_gibbs_steps,
                                                  rng, tol=options.poisson_tol), 0.0, 1.0)
            enhanced[i] = True
    with _stage("shape"):
        if options.shape:
            shaped = tuple(np.clip(geometry.shape_adjust(t, bank.reference_shape,
                                                         bank.mean_shapes[g],
                                                         bank.triangulation), 0.0, 1.0)
                           for t, g in zip(textures, groups))
        else:
            shaped = tuple(t.copy() for t in textures)
    provenance = []
    for i, g in enumerate(groups):
        node = None if i == 0 else min(groups[i - 1], g)
        provenance.append({"group": g, "ages": list(AgeGroup(g).span), "node": node,
                           "direction": direction, "gibbs_steps": options.gibbs_steps,
                           "seed": options.seed, "wrinkles": enhanced[i],
                           "shape": options.shape})
    frames = FaceSequence(np.array([t.reshape(-1) for t in textures]), tuple(groups),
                          provenance="real")
    return ProgressionResult(frames, shaped, tuple(provenance), seq, age, age_source)


def progress(image, landmarks, age, target_group, options: ProgressionOptions, bank: ModelBank,
             rng: np.random.Generator | None = None) -> ProgressionResult:
    """Synthesize the face at every group from its own up to ``target_group``.

    ``age`` may be ``None``; the bank's estimator then supplies it.  All
    randomness comes from ``rng`` (default: seeded with ``options.seed``).
    """
    return _synthesize(image, landmarks, age, target_group, options, bank, rng, 1)


def regress(image, landmarks, age, target_group, options: ProgressionOptions, bank: ModelBank,
            rng: np.random.Generator | None = None) -> ProgressionResult:
    """Same machinery as ``progress`` run with the reverse nodes toward younger groups."""
    return _synthesize(image, landmarks, age, target_group, options, bank, rng, -1)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    grid_shape: tuple = DEFAULT_GRID
    n_h: int = 64
    rbm_hyper: GrbmHyper = GrbmHyper(learning_rate=0.005, epochs=30, batch_size=16)
    node_hyper: GrbmHyper = GrbmHyper(learning_rate=0.002, epochs=30, batch_size=16)
    identity_init: bool = True
    conditioning_lr_factor: float = 1.0
    starts_per_subject: int = 1
    shared_weights: bool = False
    train_reverse: bool = True
    train_wrinkles: bool = True
    wrinkle_n_h: int = 32
    wrinkle_hyper: GrbmHyper = GrbmHyper(learning_rate=0.005, epochs=15, batch_size=16)
    train_estimator: bool = True
    estimator_hyper: EstimatorHyper = EstimatorHyper()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid_shape", tuple(int(x) for x in self.grid_shape))
        if self.n_h < 1 or self.wrinkle_n_h < 1 or self.starts_per_subject < 1:
            raise InputError("n_h, wrinkle_n_h and starts_per_subject must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["grid_shape"] = list(self.grid_shape)
        d["estimator_hyper"]["class_bounds"] = list(self.estimator_hyper.class_bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise InputError(f"unknown training options: {', '.join(unknown)}")
        for key, typ in (("rbm_hyper", GrbmHyper), ("node_hyper", GrbmHyper),
                         ("wrinkle_hyper", GrbmHyper), ("estimator_hyper", EstimatorHyper)):
            if key in d and isinstance(d[key], dict):
                sub = dict(d[key])
                allowed = {f.name for f in dataclasses.fields(typ)}
                bad = sorted(set(sub) - allowed)
                if bad:
                    raise InputError(f"unknown {key} options: {', '.join(bad)}")
                if "class_bounds" in sub:
                    sub["class_bounds"] = tuple(sub["class_bounds"])
                d[key] = typ(**sub)
        return cls(**d)


@dataclass
class TrainingSet:
    """Training subjects brought into the reference frame.

    ``frames`` (S, T, H, W) raw textures; ``textures`` (S, T, n_cells)
    standardized grid vectors; ``shapes`` (S, T, 68, 2) aligned landmarks.
    """

    frames: np.ndarray
    textures: np.ndarray
    shapes: np.ndarray
    ages: np.ndarray


def build_reference_frame(landmark_sets, frame_shape=geometry.FRAME_SHAPE):
    """GPA mean of all landmark sets, fitted into the frame, and its triangulation."""
    gpa = geometry.generalized_procrustes(np.asarray(landmark_sets, dtype=np.float64))
    ref = geometry.fit_to_frame(gpa.reference, frame_shape)
    return ref, geometry.delaunay(ref)


def prepare_training_set(subjects, reference_shape, tri, frame_shape, grid: TextureGrid,
                         standardizer: Standardizer | None = None):
    """Warp every training photo into the frame; fit the grid standardizer
    unless one is given.  Returns ``(TrainingSet, standardizer)``."""
    index_map = geometry.triangle_index_map(reference_shape, tri, frame_shape)
    frames, shapes, ages = [], [], []
    for s in subjects:
        if len(s.images) != N_GROUPS:
            raise InputError(f"subject {s.subject_id} has {len(s.images)} stages, "
                             f"need {N_GROUPS}")
        frames.append([geometry.piecewise_affine_warp(img, lm, reference_shape, tri,
                                                      out_shape=frame_shape,
                                                      index_map=index_map)
                       for img, lm in zip(s.images, s.landmarks)])
        shapes.append([geometry.procrustes_pair(lm, reference_shape).apply(lm)
                       for lm in s.landmarks])
        ages.append(s.ages)
    frames = np.array(frames)
    raw = grid.down(frames)
    if standardizer is None:
        standardizer = Standardizer.fit(raw.reshape(-1, raw.shape[-1]))
    data = TrainingSet(frames, standardizer.apply(raw), np.array(shapes),
                       np.array(ages, dtype=np.float64))
    return data, standardizer


def _child_rng(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng([int(seed)] + [int(k) for k in key])


def transfer_table(textures, group_rbms) -> np.ndarray:
    """``out[s, g, k]`` = subject s's group-g texture transferred to group k."""
    S, G, n = textures.shape
    out = np.empty((S, G, G, n))
    for g in range(G):
        for k in range(G):
            out[:, g, k] = grbm.transfer_features(textures[:, g], group_rbms[g], group_rbms[k])
    return out


def node_transitions(textures, refs, source: int, target: int, starts_per_subject: int,
                     rng: np.random.Generator) -> Transitions:
    """Training rows for the node taking ``source`` to ``target``.

    For every subject the reference window comes from a start group drawn
    uniformly from the groups at or before ``source`` along the direction of
    travel, mirroring inference where all references derive from the input.
    """
    step = 1 if target > source else -1
    starts = np.arange(0, source + 1) if step == 1 else np.arange(source, N_GROUPS)
    S = textures.shape[0]
    v_t, v_prev, s = [], [], []
    for _ in range(starts_per_subject):
        chosen = rng.choice(starts, size=S)
        idx = np.arange(S)
        v_t.append(textures[:, target])
        v_prev.append(textures[:, source])
        s.append(np.stack([refs[idx, chosen, target], refs[idx, chosen, source]], axis=1))
    return Transitions(np.concatenate(v_t), np.concatenate(v_prev), np.concatenate(s))


def initial_node(data: Transitions, group_rbm: GrbmParams, identity: bool,
                 rng: np.random.Generator, weight_init_std: float = 0.01) -> TrbmParams:
    """Starting point for node training.

    With ``identity`` the node starts as "previous frame plus the mean
    change" (``B = I``) with small random weights; otherwise it is the
    target group's GRBM with zero conditioning.
    """
    if not identity:
        return TrbmParams.from_grbm(group_rbm)
    p = TrbmParams.initialize(group_rbm.n_v, group_rbm.n_h, rng, weight_init_std,
                              identity_autoregression=True)
    return p.replace(b=np.mean(data.v_t - data.v_prev, axis=0))


def _node_lr_scale(p: TrbmParams, config: TrainConfig) -> dict:
    return trbm.conditioning_scale(p.n_v, config.conditioning_lr_factor)


def train_nodes(textures, refs, group_rbms, config: TrainConfig, direction: int,
                callback=None) -> list:
    """Train the 10 nodes for one direction; index ``i`` covers groups i and i+1."""
    pairs = [(i, i + 1) if direction == 1 else (i + 1, i) for i in range(N_NODES)]
    sets = [node_transitions(textures, refs, src, tgt, config.starts_per_subject,
                             _child_rng(config.seed, 2 if direction == 1 else 3, i))
            for i, (src, tgt) in enumerate(pairs)]
    if config.shared_weights:
        pooled = Transitions.concatenate(sets)
        rng = _child_rng(config.seed, 4, direction + 1)
        p0 = initial_node(pooled, group_rbms[N_GROUPS // 2], config.identity_init, rng,
                          config.node_hyper.weight_init_std)
        shared = trbm.train_transitions(pooled, p0, config.node_hyper, rng,
                                        lr_scale=_node_lr_scale(p0, config))
        return [shared] * N_NODES
    nodes = []
    for i, ((src, tgt), data) in enumerate(zip(pairs, sets)):
        rng = _child_rng(config.seed, 5, direction + 1, i)
        p0 = initial_node(data, group_rbms[tgt], config.identity_init, rng,
                          config.node_hyper.weight_init_std)
        nodes.append(trbm.train_transitions(data, p0, config.node_hyper, rng,
                                            lr_scale=_node_lr_scale(p0, config)))
        if callback is not None:
            callback(f"node {src}->{tgt}")
    return nodes


def region_patches(frames, spec) -> np.ndarray:
    """Flattened, orientation-normalized patches of ``spec`` from rasters ``frames``."""
    rs, cs = spec.slices()
    p = np.asarray(frames)[..., rs, cs]
    if spec.mirror:
        p = p[..., ::-1]
    return p.reshape(p.shape[:-2] + (-1,))


def train_wrinkle_models(frames, regions, config: TrainConfig) -> dict:
    """``{group: {region_id: RegionModel}}`` from raw frames (S, T, H, W)."""
    models = {}
    for g in range(frames.shape[1]):
        models[g] = {}
        for r, rid in enumerate(wrinkle.REGION_ORDER):
            specs = [s for s in regions if s.region_id == rid]
            if not specs:
                continue
            patches = np.concatenate([region_patches(frames[:, g], s) for s in specs])
            models[g][rid] = wrinkle.train_region_model(
                patches, config.wrinkle_n_h, config.wrinkle_hyper,
                _child_rng(config.seed, 6, g, r))
    return models


def train_bank(subjects, config: TrainConfig = TrainConfig(),
               frame_shape=geometry.FRAME_SHAPE, progress_cb=None) -> ModelBank:
    """Fit every model in a bank from subjects with one photo per age group."""
    subjects = list(subjects)
    if not subjects:
        raise InputError("no training subjects")

    def report(msg):
        log.info("train: %s", msg)
        if progress_cb is not None:
            progress_cb(msg)

    all_lm = np.concatenate([s.landmarks for s in subjects])
    ref, tri = build_reference_frame(all_lm, frame_shape)
    grid = TextureGrid(frame_shape, config.grid_shape)
    data, std = prepare_training_set(subjects, ref, tri, frame_shape, grid)
    report("prepared training set")
    Z = data.textures
    group_rbms = [grbm.train(Z[:, g], config.n_h, config.rbm_hyper,
                             rng=_child_rng(config.seed, 1, g)) for g in range(N_GROUPS)]
    report("trained group RBMs")
    refs = transfer_table(Z, group_rbms)
    nodes = train_nodes(Z, refs, group_rbms, config, 1, report)
    reverse = train_nodes(Z, refs, group_rbms, config, -1, report) if config.train_reverse \
        else None
    mask = geometry.hull_mask(ref, tri, frame_shape)
    regions = tuple(wrinkle.default_regions(mask))
    wrinkles = train_wrinkle_models(data.frames, regions, config) if config.train_wrinkles \
        else {}
    report("trained wrinkle models")
    mean_shapes = data.shapes.mean(axis=0)
    estimator = None
    if config.train_estimator:
        feats = age_est.extract_features(Z.reshape(-1, Z.shape[-1]), group_rbms)
        estimator = age_est.train_estimator(feats, data.ages.reshape(-1), config.estimator_hyper)
        report("trained age estimator")
    return ModelBank(frame_shape, config.grid_shape, ref, tri, std, group_rbms, nodes,
                     mean_shapes, reverse, regions, wrinkles, estimator)
