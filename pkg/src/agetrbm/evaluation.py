"""Held-out measurements on a synthetic corpus.

Used by the ``eval`` command and the acceptance suite.  Ground truth for
stage ``k`` is the subject's stage-``k`` photo brought into the reference
frame by the same preprocessing as the input.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from agetrbm import age_estimator as age_est
from agetrbm import pipeline, wrinkle
from agetrbm.errors import InputError

PROGRESSION_RATIO = 0.5
ESTIMATOR_RATIO = 0.7
POISSON_RESIDUAL = 1e-5


@dataclass
class StageErrors:
    """Mean over subjects of per-stage MSE (model and copy-input baseline).

    ``full`` is measured on reference-frame rasters inside the face mask,
    ``grid`` on standardized grid vectors.  Index ``k`` is the number of
    transitions from the input.
    """

    groups: list
    full: np.ndarray
    full_baseline: np.ndarray
    grid: np.ndarray
    grid_baseline: np.ndarray

    @property
    def full_ratio(self) -> np.ndarray:
        return self.full[1:] / self.full_baseline[1:]

    @property
    def grid_ratio(self) -> np.ndarray:
        return self.grid[1:] / self.grid_baseline[1:]


def held_out_set(subjects, bank: pipeline.ModelBank) -> pipeline.TrainingSet:
    data, _ = pipeline.prepare_training_set(subjects, bank.reference_shape, bank.triangulation,
                                            bank.frame_shape, bank.grid, bank.standardizer)
    return data


def stage_errors(bank: pipeline.ModelBank, subjects, gibbs_steps: int = 5,
                 direction: int = 1, truth: pipeline.TrainingSet | None = None) -> StageErrors:
    """Roll every subject from its first (``direction=1``) or last stage to
    the other end and score each synthesized stage against the truth."""
    subjects = list(subjects)
    if not subjects:
        raise InputError("no evaluation subjects")
    truth = held_out_set(subjects, bank) if truth is None else truth
    opts = pipeline.ProgressionOptions(gibbs_steps=gibbs_steps, wrinkles=False, shape=False)
    start, end = (0, pipeline.N_GROUPS - 1) if direction == 1 else (pipeline.N_GROUPS - 1, 0)
    run = pipeline.progress if direction == 1 else pipeline.regress
    groups = list(range(start, end + direction, direction))
    n = len(groups)
    full, full_b, grid, grid_b = (np.zeros(n) for _ in range(4))
    mask = bank.face_mask
    for j, s in enumerate(subjects):
        age = pipeline.AgeGroup(start).span[0]
        res = run(s.images[start], s.landmarks[start], age, end, opts, bank)
        tex = res.textures(bank.frame_shape)
        for i, g in enumerate(groups):
            true_full, true_grid = truth.frames[j, g], truth.textures[j, g]
            full[i] += np.mean((tex[i] - true_full)[mask] ** 2)
            full_b[i] += np.mean((tex[0] - true_full)[mask] ** 2)
            grid[i] += np.mean((res.grid.frames[i] - true_grid) ** 2)
            grid_b[i] += np.mean((res.grid.frames[0] - true_grid) ** 2)
    m = len(subjects)
    return StageErrors(groups, full / m, full_b / m, grid / m, grid_b / m)


def estimator_errors(bank: pipeline.ModelBank, subjects, reference_ages=None,
                     truth: pipeline.TrainingSet | None = None) -> tuple:
    """``(model MAE, global-mean MAE)`` over every photo of ``subjects``.

    The constant predictor uses the mean of ``reference_ages`` (default: the
    evaluated labels themselves, the strongest constant).
    """
    if bank.estimator is None:
        raise InputError("bank has no age estimator")
    truth = held_out_set(subjects, bank) if truth is None else truth
    faces = truth.textures.reshape(-1, truth.textures.shape[-1])
    ages = truth.ages.reshape(-1)
    centre = np.mean(ages if reference_ages is None else reference_ages)
    mae = age_est.evaluate_mae(bank.estimator, faces, ages, bank.group_rbms)
    return mae, age_est.mean_absolute_error(np.full_like(ages, centre), ages)


def poisson_residuals(bank: pipeline.ModelBank, truth: pipeline.TrainingSet,
                      gibbs_steps: int = 1, seed: int = 0, tol: float = 1e-6) -> dict:
    """Worst ``max |lap(result) - lap(source)|`` per region over every frame
    whose group has region models."""
    rng = np.random.default_rng(seed)
    worst = {spec.name: 0.0 for spec in bank.regions}
    for g, models in sorted(bank.wrinkle_models.items()):
        for face in truth.frames[:, g]:
            for spec in bank.regions:
                seed_patch = wrinkle.extract_region(face, spec)
                oriented = seed_patch[:, ::-1] if spec.mirror else seed_patch
                detail = wrinkle.sample_detail(models[spec.region_id], oriented, gibbs_steps,
                                               rng)
                detail = detail[:, ::-1] if spec.mirror else detail
                problem = wrinkle.BlendProblem(face, detail, spec)
                out = wrinkle.poisson_blend(problem, tol=tol)
                worst[spec.name] = max(worst[spec.name],
                                       wrinkle.laplacian_residual(out, problem))
    return worst


CSV_HEADER = ("measurement", "stage", "value", "baseline", "ratio", "threshold", "pass")


def _fmt(x) -> str:
    return "" if x is None else f"{float(x):.9e}"


def write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for name, stage, value, baseline, ratio, threshold, ok in rows:
            w.writerow([name, "" if stage is None else stage, _fmt(value), _fmt(baseline),
                        _fmt(ratio), _fmt(threshold), "1" if ok else "0"])


def stage_rows(name: str, errs: StageErrors) -> list:
    rows = []
    for i in range(1, len(errs.groups)):
        for kind, v, b in (("full", errs.full, errs.full_baseline),
                           ("grid", errs.grid, errs.grid_baseline)):
            r = v[i] / b[i]
            rows.append((f"{name}_{kind}_mse", errs.groups[i], v[i], b[i], r,
                         PROGRESSION_RATIO, r <= PROGRESSION_RATIO))
    return rows
