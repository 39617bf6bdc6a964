"""Command-line interface: ``agetrbm <command> [options]``.

Commands: ``synth-data``, ``train``, ``progress``, ``regress``, ``estimate``,
``eval``.  Options come from built-in defaults, then an optional JSON file
(``--config``), then flags; unknown config keys are rejected.

Exit codes: 0 success, 2 usage error, 3 IO error, 4 data error.  Failures
print one line ``agetrbm: error[<category>]: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from agetrbm.errors import CapabilityError, ConvergenceError, InputError, StateError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DATA = 0, 2, 3, 4

log = logging.getLogger("agetrbm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# Documented defaults per command.  ``None`` means "required" for paths and
# "absent" for the optional age.
COMMON = {"seed": 0, "threads": 1}
DEFAULTS = {
    "synth-data": {"out_dir": None, "n_subjects": 200, "aging_law": {},
                   "placement_scale": 0.8, "max_rotation_deg": 3.0, "max_shift": 2.0,
                   "shape_jitter": 0.6},
    "train": {"data_dir": None, "bank_dir": None, "subjects": "", "n_h": 64, "train": {}},
    "progress": {"bank_dir": None, "input_image": None, "input_landmarks": None, "age": None,
                 "target_group": None, "out_dir": None, "gibbs_steps": 5,
                 "no_wrinkles": False, "no_shape": False, "wrinkle_threshold": 6,
                 "wrinkle_final_only": False, "wrinkle_gibbs_steps": 1, "stochastic": False},
    "estimate": {"bank_dir": None, "input_image": None, "input_landmarks": None},
    "eval": {"bank_dir": None, "data_dir": None, "out_dir": None, "subjects": "",
             "gibbs_steps": 5, "regression": True, "poisson": True},
}
DEFAULTS["regress"] = dict(DEFAULTS["progress"])
REQUIRED = {
    "synth-data": ("out_dir",),
    "train": ("data_dir", "bank_dir"),
    "progress": ("bank_dir", "input_image", "input_landmarks", "target_group", "out_dir"),
    "estimate": ("bank_dir", "input_image", "input_landmarks"),
    "eval": ("bank_dir", "data_dir", "out_dir"),
}
REQUIRED["regress"] = REQUIRED["progress"]


def _bool_flag(p, name, help_):
    p.add_argument(f"--{name.replace('_', '-')}", dest=name, action="store_const", const=True,
                   default=argparse.SUPPRESS, help=help_)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="agetrbm", description="Texture age progression with temporal RBMs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of options (flags override it)")
        p.add_argument("--seed", type=int, help="master seed (default 0)")
        p.add_argument("--threads", type=int, help="BLAS threads (default 1)")
        return p

    p = cmd("synth-data", "write a synthetic aging corpus")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--n-subjects", dest="n_subjects", type=int)

    p = cmd("train", "train a model bank from a corpus")
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--bank-dir", dest="bank_dir")
    p.add_argument("--subjects", help="subject slice START:STOP (default: all)")
    p.add_argument("--n-h", dest="n_h", type=int)

    for name in ("progress", "regress"):
        p = cmd(name, f"{name} a face to a target age group")
        p.add_argument("--bank-dir", dest="bank_dir")
        p.add_argument("--input-image", dest="input_image")
        p.add_argument("--input-landmarks", dest="input_landmarks")
        p.add_argument("--age", type=float, help="input age in years (default: estimated)")
        p.add_argument("--target-group", dest="target_group", type=int)
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--gibbs-steps", dest="gibbs_steps", type=int)
        p.add_argument("--wrinkle-threshold", dest="wrinkle_threshold", type=int)
        _bool_flag(p, "no_wrinkles", "skip region detail enhancement")
        _bool_flag(p, "no_shape", "skip shape adjustment")
        _bool_flag(p, "wrinkle_final_only", "enhance only the final frame")
        _bool_flag(p, "stochastic", "sample instead of mean-field inference")

    p = cmd("estimate", "print the estimated age of a face")
    p.add_argument("--bank-dir", dest="bank_dir")
    p.add_argument("--input-image", dest="input_image")
    p.add_argument("--input-landmarks", dest="input_landmarks")

    p = cmd("eval", "held-out measurements written as CSV")
    p.add_argument("--bank-dir", dest="bank_dir")
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--subjects", help="subject slice START:STOP (default: all)")
    p.add_argument("--gibbs-steps", dest="gibbs_steps", type=int)
    return parser


def resolve_config(command: str, flags: dict) -> dict:
    """defaults <- config file <- flags; unknown file keys are a usage error."""
    cfg = dict(COMMON)
    cfg.update(DEFAULTS[command])
    path = flags.pop("config", None)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(doc)
    cfg.update(flags)
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required options: "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    if int(cfg["threads"]) < 1:
        raise UsageError("--threads must be >= 1")
    return cfg


def _slice(spec: str, n: int) -> slice:
    if not spec:
        return slice(0, n)
    try:
        a, b = spec.split(":")
        return slice(int(a) if a else 0, int(b) if b else n)
    except ValueError:
        raise UsageError(f"bad subject slice {spec!r}; expected START:STOP") from None


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(cfg: dict) -> int:
    from agetrbm import datagen

    spec = datagen.SynthSpec.from_dict({
        "n_subjects": cfg["n_subjects"], "seed": cfg["seed"], "aging_law": cfg["aging_law"],
        "placement_scale": cfg["placement_scale"], "max_rotation_deg": cfg["max_rotation_deg"],
        "max_shift": cfg["max_shift"], "shape_jitter": cfg["shape_jitter"]})
    out = datagen.synth_corpus(spec, cfg["out_dir"])
    log.info("wrote %d subjects to %s", spec.n_subjects, out)
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    from agetrbm import datagen, pipeline

    subjects = datagen.load_corpus(cfg["data_dir"])
    subjects = subjects[_slice(cfg["subjects"], len(subjects))]
    options = dict(cfg["train"])
    options.setdefault("n_h", cfg["n_h"])
    options.setdefault("seed", cfg["seed"])
    config = pipeline.TrainConfig.from_dict(options)
    bank = pipeline.train_bank(subjects, config)
    pipeline.save_bank(bank, cfg["bank_dir"])
    Path(cfg["bank_dir"], "train_config.json").write_text(
        json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
    log.info("trained bank on %d subjects -> %s", len(subjects), cfg["bank_dir"])
    return EXIT_OK


def _load_face(cfg):
    from agetrbm.imageio import read_landmarks, read_pgm

    return read_pgm(cfg["input_image"]), read_landmarks(cfg["input_landmarks"])


def _run_progression(cfg: dict, direction: int) -> int:
    from agetrbm import pipeline
    from agetrbm.imageio import write_pgm

    bank = pipeline.load_bank(cfg["bank_dir"])
    image, landmarks = _load_face(cfg)
    opts = pipeline.ProgressionOptions(
        gibbs_steps=int(cfg["gibbs_steps"]), stochastic=bool(cfg["stochastic"]),
        wrinkles=not cfg["no_wrinkles"], wrinkle_threshold=int(cfg["wrinkle_threshold"]),
        wrinkle_final_only=bool(cfg["wrinkle_final_only"]),
        wrinkle_gibbs_steps=int(cfg["wrinkle_gibbs_steps"]), shape=not cfg["no_shape"],
        seed=int(cfg["seed"]))
    run = pipeline.progress if direction == 1 else pipeline.regress
    res = run(image, landmarks, cfg["age"], int(cfg["target_group"]), opts, bank)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, g in enumerate(res.groups):
        write_pgm(out / f"group_{g:02d}.pgm", res.shaped[i])
        write_pgm(out / f"texture_{g:02d}.pgm", res.textures(bank.frame_shape)[i])
        frames.append(dict(res.provenance[i], image=f"group_{g:02d}.pgm",
                           texture=f"texture_{g:02d}.pgm"))
    manifest = {"command": "progress" if direction == 1 else "regress",
                "age": res.age, "age_source": res.age_source,
                "source_group": res.groups[0], "target_group": res.groups[-1],
                "frames": frames}
    (out / "provenance.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_progress(cfg: dict) -> int:
    return _run_progression(cfg, 1)


def cmd_regress(cfg: dict) -> int:
    return _run_progression(cfg, -1)


def cmd_estimate(cfg: dict) -> int:
    from agetrbm import age_estimator, pipeline

    bank = pipeline.load_bank(cfg["bank_dir"])
    if bank.estimator is None:
        raise StateError("bank has no age estimator")
    image, landmarks = _load_face(cfg)
    face = pipeline.preprocess(image, landmarks, bank)
    age = age_estimator.estimate_age(face.texture, bank.estimator, bank.group_rbms)
    print(f"{age:.2f}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    from agetrbm import datagen, evaluation, pipeline

    bank = pipeline.load_bank(cfg["bank_dir"])
    subjects = datagen.load_corpus(cfg["data_dir"])
    subjects = subjects[_slice(cfg["subjects"], len(subjects))]
    if not subjects:
        raise InputError("subject slice selects no subjects")
    truth = evaluation.held_out_set(subjects, bank)
    gs = int(cfg["gibbs_steps"])
    rows = evaluation.stage_rows("progression", evaluation.stage_errors(
        bank, subjects, gs, 1, truth))
    if cfg["regression"] and bank.reverse_nodes is not None:
        rows += evaluation.stage_rows("regression", evaluation.stage_errors(
            bank, subjects, gs, -1, truth))
    if bank.estimator is not None:
        mae, base = evaluation.estimator_errors(bank, subjects, truth=truth)
        rows.append(("age_mae", None, mae, base, mae / base, evaluation.ESTIMATOR_RATIO,
                     mae / base <= evaluation.ESTIMATOR_RATIO))
    if cfg["poisson"] and bank.wrinkle_models:
        for name, r in evaluation.poisson_residuals(bank, truth, seed=cfg["seed"]).items():
            rows.append((f"poisson_residual_{name}", None, r, None, None,
                         evaluation.POISSON_RESIDUAL, r < evaluation.POISSON_RESIDUAL))
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_csv(out / "metrics.csv", rows)
    failed = sum(not r[-1] for r in rows)
    log.info("%d measurements, %d outside threshold", len(rows), failed)
    return EXIT_OK


COMMANDS = {"synth-data": cmd_synth_data, "train": cmd_train, "progress": cmd_progress,
            "regress": cmd_regress, "estimate": cmd_estimate, "eval": cmd_eval}


def _fail(category: str, message: str, code: int) -> int:
    text = " ".join(str(message).split())
    print(f"agetrbm: error[{category}]: {text}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    level = os.environ.get("EBM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = vars(build_parser().parse_args(argv))
        command = args.pop("command")
        cfg = resolve_config(command, args)
        threads = str(int(cfg["threads"]))
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = threads
        return COMMANDS[command](cfg)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except OSError as exc:
        msg = str(exc)
        if exc.filename is not None and str(exc.filename) not in msg:
            msg = f"{msg}: {exc.filename}"
        return _fail("io", msg, EXIT_IO)
    except (InputError, CapabilityError, StateError, ConvergenceError, KeyError,
            TypeError) as exc:
        return _fail("data", exc, EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
