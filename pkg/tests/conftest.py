import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_grbm(rng, n_v, n_h, scale=0.5, unit_variance=False):
    from agetrbm.grbm import GrbmParams

    sigma2 = np.ones(n_v) if unit_variance else rng.uniform(0.5, 2.0, n_v)
    return GrbmParams(W=rng.normal(0, scale, (n_v, n_h)), b=rng.normal(0, 1, n_v),
                      a=rng.normal(0, scale, n_h), sigma2=sigma2)


def random_trbm(rng, n_v, n_h, scale=0.3, unit_variance=False):
    from agetrbm.trbm import TrbmParams

    sigma2 = np.ones(n_v) if unit_variance else rng.uniform(0.5, 2.0, n_v)
    return TrbmParams(W=rng.normal(0, scale, (n_v, n_h)), A=rng.normal(0, scale, (n_h, n_v)),
                      B=rng.normal(0, scale, (n_v, n_v)), P=rng.normal(0, scale, (2, n_v, n_v)),
                      Q=rng.normal(0, scale, (2, n_v, n_h)), b=rng.normal(0, 1, n_v),
                      a=rng.normal(0, scale, n_h), sigma2=sigma2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# A small corpus and bank shared by the pipeline, CLI and evaluation tests.
# Everything is seeded, so session scope only saves time.

SMALL_TRAIN = 24
SMALL_TEST = 4


@pytest.fixture(scope="session")
def small_corpus():
    from agetrbm import datagen

    spec = datagen.SynthSpec(n_subjects=SMALL_TRAIN + SMALL_TEST, seed=7)
    return [datagen.synth_subject(spec, i) for i in range(spec.n_subjects)]


@pytest.fixture(scope="session")
def small_config():
    from agetrbm.grbm import GrbmHyper
    from agetrbm.pipeline import TrainConfig

    return TrainConfig(n_h=16, rbm_hyper=GrbmHyper(learning_rate=0.005, epochs=10,
                                                  batch_size=8),
                       node_hyper=GrbmHyper(learning_rate=0.002, epochs=10, batch_size=8),
                       wrinkle_n_h=8, wrinkle_hyper=GrbmHyper(epochs=3, batch_size=8), seed=3)


@pytest.fixture(scope="session")
def small_bank(small_corpus, small_config):
    from agetrbm import pipeline

    return pipeline.train_bank(small_corpus[:SMALL_TRAIN], small_config)


# One summary line per acceptance criterion.  Test classes in
# test_acceptance.py carry ``criterion = (number, title)`` and record
# measurements with ``record_property("measured", text)``.

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    key = getattr(item.cls, "criterion", None)
    if key is None or not (report.when == "call" or report.failed):
        return
    entry = _criteria.setdefault(key, {"ok": True, "notes": []})
    entry["ok"] = entry["ok"] and report.passed
    if report.when == "call":
        entry["notes"] += [v for k, v in item.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for (number, title), entry in sorted(_criteria.items()):
        status = "PASS" if entry["ok"] else "FAIL"
        notes = "; ".join(entry["notes"])
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}"
                                    + (f"  [{notes}]" if notes else ""))
