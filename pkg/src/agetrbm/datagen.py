"""Procedural synthetic aging corpus.

Every subject has a canonical texture in the 95x95 reference frame and a
68-point shape.  Stage ``t`` (0..10, age group ``t``) applies a closed-form
aging law to both.  With ``u = col / (W - 1)`` and ``w = row / (H - 1)``::

    base(u, w)  = 0.62 + brightness
                  - sum_f depth_f * exp(-|(u, w) - c_f|^2 / (2 r_f^2))
                  + sum_m coef_m * cos(pi ku_m u) * cos(pi kw_m w)
    texture_t   = clip(base - darkening * t * (0.5 + 0.5 w)
                       + (amp_start + amp_ramp * t) * noise * in_regions, 0, 1)
    shape_t     = template + jitter, y scaled by elongation**t about the centroid

``noise`` is unit-variance band-pass noise (difference of Gaussians) fixed
per subject; ``in_regions`` is the union of the default eye, cheek and mouth
rectangles.  The photo for a stage is the texture warped onto ``shape_t``
after a random similarity placement.  The warp mesh also carries the frame
corners (placed by the same similarity), so texture continues past the face
outline; only the strip outside the placed frame is flat background.

Per-subject generators are seeded with ``splitmix64(seed + subject_id)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from agetrbm import geometry
from agetrbm.errors import InputError
from agetrbm.imageio import read_landmarks, read_pgm, write_landmarks, write_pgm
from agetrbm.wrinkle import DEFAULT_RECTS

N_STAGES = 11
BACKGROUND = 0.15

FEATURES = (  # centre u, centre w, radius
    (0.32, 0.38, 0.05),
    (0.68, 0.38, 0.05),
    (0.50, 0.56, 0.05),
    (0.50, 0.80, 0.06),
)
MODES = ((1, 0), (0, 1), (1, 1), (2, 0), (0, 2), (2, 1), (1, 2), (2, 2))


@dataclass(frozen=True)
class AgingLaw:
    darkening: float = 0.02
    amp_start: float = 0.01
    amp_ramp: float = 0.006
    elongation: float = 1.015

    def __post_init__(self):
        if self.darkening < 0 or self.amp_start < 0 or self.amp_ramp < 0:
            raise InputError("aging ramps must be non-negative (monotone law)")
        if self.elongation < 1.0:
            raise InputError("elongation factor must be >= 1")

    @classmethod
    def null(cls) -> "AgingLaw":
        return cls(darkening=0.0, amp_start=0.0, amp_ramp=0.0, elongation=1.0)


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 200
    frame: tuple = geometry.FRAME_SHAPE
    stages: int = N_STAGES
    seed: int = 0
    aging_law: AgingLaw = field(default_factory=AgingLaw)
    placement_scale: float = 0.8
    max_rotation_deg: float = 3.0
    max_shift: float = 2.0
    shape_jitter: float = 0.6

    def __post_init__(self):
        if self.n_subjects < 1 or self.stages < 1:
            raise InputError("n_subjects and stages must be positive")
        object.__setattr__(self, "frame", tuple(int(x) for x in self.frame))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frame"] = list(self.frame)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        d["aging_law"] = AgingLaw(**d.get("aging_law", {}))
        return cls(**d)


@dataclass
class SubjectParams:
    """The random draws that define one subject."""

    brightness: float
    depths: np.ndarray
    coefs: np.ndarray
    noise: np.ndarray
    jitter: np.ndarray
    age_offsets: np.ndarray
    placements: list


@dataclass
class SubjectData:
    subject_id: int
    images: np.ndarray      # (T, H, W) photos
    landmarks: np.ndarray   # (T, 68, 2) photo landmarks
    ages: np.ndarray        # (T,) integer years
    groups: np.ndarray      # (T,) stage indices
    textures: np.ndarray    # (T, H, W) canonical reference-frame textures


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def subject_seed(master_seed: int, subject_id: int) -> int:
    return splitmix64((int(master_seed) + int(subject_id)) & 0xFFFFFFFFFFFFFFFF)


def template_landmarks() -> np.ndarray:
    """A 68-point frontal face layout in unit coordinates (x right, y down).

    Point order follows the common jaw / brows / nose / eyes / mouth scheme.
    """
    pts = []
    cx, cy, rx, ry, n = 0.5, 0.36, 0.46, 0.62, 3.0
    for th in np.linspace(np.pi, 0.0, 17):
        c, s = np.cos(th), np.sin(th)
        pts.append((cx + rx * np.sign(c) * abs(c) ** (2 / n), cy + ry * abs(s) ** (2 / n)))
    for xs in (np.linspace(0.12, 0.42, 5), np.linspace(0.58, 0.88, 5)):
        mid = (xs[0] + xs[-1]) / 2
        pts.extend((x, 0.20 - 0.05 * (1 - ((x - mid) / 0.15) ** 2)) for x in xs)
    pts.extend((0.5, y) for y in np.linspace(0.34, 0.56, 4))
    pts.extend((x, 0.62 - 0.02 * (1 - ((x - 0.5) / 0.08) ** 2))
               for x in np.linspace(0.42, 0.58, 5))
    for ex in (0.32, 0.68):
        pts.extend((ex + 0.08 * np.cos(th), 0.38 - 0.03 * np.sin(th))
                   for th in np.linspace(np.pi, -np.pi, 7)[:-1])
    pts.extend((0.5 + 0.15 * np.cos(th), 0.80 - 0.06 * np.sin(th))
               for th in np.linspace(np.pi, -np.pi, 13)[:-1])
    pts.extend((0.5 + 0.10 * np.cos(th), 0.80 - 0.025 * np.sin(th))
               for th in np.linspace(np.pi, -np.pi, 9)[:-1])
    return np.array(pts)


def frame_template(frame=geometry.FRAME_SHAPE) -> np.ndarray:
    return geometry.fit_to_frame(template_landmarks(), frame)


def frame_corners(frame=geometry.FRAME_SHAPE) -> np.ndarray:
    H, W = frame
    return np.array([[0.0, 0.0], [W - 1.0, 0.0], [0.0, H - 1.0], [W - 1.0, H - 1.0]])


def region_indicator(frame=geometry.FRAME_SHAPE) -> np.ndarray:
    ind = np.zeros(frame, dtype=bool)
    for entries in DEFAULT_RECTS.values():
        for _, (r, c, h, w), _ in entries:
            ind[r:r + h, c:c + w] = True
    return ind


def bandpass_noise(rng: np.random.Generator, frame) -> np.ndarray:
    white = rng.standard_normal(frame)
    band = gaussian_filter(white, 0.7, mode="reflect") - gaussian_filter(white, 2.0,
                                                                         mode="reflect")
    return band / band.std()


def subject_params(spec: SynthSpec, subject_id: int) -> SubjectParams:
    if not 0 <= subject_id < spec.n_subjects:
        raise InputError(f"subject_id {subject_id} outside [0, {spec.n_subjects})")
    rng = np.random.default_rng(subject_seed(spec.seed, subject_id))
    brightness = rng.uniform(-0.06, 0.06)
    depths = rng.uniform(0.06, 0.14, size=len(FEATURES))
    coefs = rng.normal(0.0, 0.02, size=len(MODES))
    noise = bandpass_noise(rng, spec.frame)
    jitter = rng.normal(0.0, spec.shape_jitter, size=(geometry.N_LANDMARKS, 2))
    age_offsets = rng.integers(0, 5, size=spec.stages)
    placements = []
    for _ in range(spec.stages):
        angle = np.deg2rad(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
        shift = rng.uniform(-spec.max_shift, spec.max_shift, size=2)
        placements.append((angle, shift))
    return SubjectParams(brightness, depths, coefs, noise, jitter, age_offsets, placements)


def base_texture(params: SubjectParams, frame) -> np.ndarray:
    H, W = frame
    w, u = np.meshgrid(np.arange(H) / (H - 1), np.arange(W) / (W - 1), indexing="ij")
    base = 0.62 + params.brightness + np.zeros(frame)
    for depth, (cu, cw, r) in zip(params.depths, FEATURES):
        base -= depth * np.exp(-((u - cu) ** 2 + (w - cw) ** 2) / (2 * r * r))
    for coef, (ku, kw) in zip(params.coefs, MODES):
        base += coef * np.cos(np.pi * ku * u) * np.cos(np.pi * kw * w)
    return base


def stage_texture(params: SubjectParams, law: AgingLaw, stage: int, frame) -> np.ndarray:
    H = frame[0]
    w = (np.arange(H) / (H - 1))[:, None]
    tex = base_texture(params, frame) - law.darkening * stage * (0.5 + 0.5 * w)
    tex = tex + (law.amp_start + law.amp_ramp * stage) * params.noise * region_indicator(frame)
    return np.clip(tex, 0.0, 1.0)


def stage_shape(params: SubjectParams, law: AgingLaw, stage: int, frame) -> np.ndarray:
    """Subject shape at ``stage`` in reference-frame coordinates."""
    shape = frame_template(frame) + params.jitter
    c = shape.mean(axis=0)
    shape[:, 1] = c[1] + (shape[:, 1] - c[1]) * law.elongation ** stage
    return shape


def synth_subject(spec: SynthSpec, subject_id: int) -> SubjectData:
    params = subject_params(spec, subject_id)
    law, frame = spec.aging_law, spec.frame
    corners = frame_corners(frame)
    template = np.vstack([frame_template(frame), corners])
    tri = geometry.delaunay(template)
    centre = np.array([(frame[1] - 1) / 2.0, (frame[0] - 1) / 2.0])
    images, marks, textures = [], [], []
    for t in range(spec.stages):
        tex = stage_texture(params, law, t, frame)
        angle, shift = params.placements[t]
        place = geometry.SimilarityTransform.from_params(spec.placement_scale, angle,
                                                         centre + shift)
        lm = place.apply(stage_shape(params, law, t, frame) - centre)
        mesh = np.vstack([lm, place.apply(corners - centre)])
        warped, inside = geometry.piecewise_affine_warp(tex, template, mesh, tri,
                                                        out_shape=frame, return_mask=True)
        images.append(np.where(inside, warped, BACKGROUND))
        marks.append(lm)
        textures.append(tex)
    stages = np.arange(spec.stages)
    ages = 10 + 5 * stages + params.age_offsets
    return SubjectData(subject_id, np.array(images), np.array(marks), ages, stages,
                       np.array(textures))


def synth_corpus(spec: SynthSpec, out_dir) -> Path:
    """Write PGM photos, landmark files and ``manifest.json`` under ``out_dir``.

    Layout: ``subject_XXXX/stage_YY.pgm`` and ``subject_XXXX/stage_YY.csv``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out}: {exc}") from exc
    subjects = []
    for sid in range(spec.n_subjects):
        data = synth_subject(spec, sid)
        sub = f"subject_{sid:04d}"
        (out / sub).mkdir(exist_ok=True)
        stages = []
        for t in range(spec.stages):
            img_rel, lmk_rel = f"{sub}/stage_{t:02d}.pgm", f"{sub}/stage_{t:02d}.csv"
            write_pgm(out / img_rel, data.images[t])
            write_landmarks(out / lmk_rel, data.landmarks[t])
            stages.append({"stage": t, "age": int(data.ages[t]), "image": img_rel,
                           "landmarks": lmk_rel})
        subjects.append({"id": sid, "stages": stages})
    manifest = {"format": "agetrbm-corpus-1", "spec": spec.to_dict(), "subjects": subjects}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_corpus(corpus_dir) -> list:
    """Read a corpus written by ``synth_corpus`` back into ``SubjectData``.

    Canonical textures are not stored on disk, so ``textures`` is ``None``.
    """
    root = Path(corpus_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    subjects = []
    for entry in manifest["subjects"]:
        stages = sorted(entry["stages"], key=lambda s: s["stage"])
        subjects.append(SubjectData(
            subject_id=int(entry["id"]),
            images=np.array([read_pgm(root / s["image"]) for s in stages]),
            landmarks=np.array([read_landmarks(root / s["landmarks"]) for s in stages]),
            ages=np.array([s["age"] for s in stages]),
            groups=np.array([s["stage"] for s in stages]),
            textures=None))
    return subjects
