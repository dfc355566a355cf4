import numpy as np
import pytest

from jointemb import data as D
from jointemb.kernels import numeric_grad


def max_rel_error(analytic, numeric, floor=1e-7):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(floor, np.abs(a) + np.abs(n))))


def check_grad(f, x, analytic, tol=1e-4):
    num = numeric_grad(f, x)
    err = max_rel_error(analytic, num)
    assert err <= tol, f"relative error {err:.2e} > {tol}"
    return err


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """4 subjects x 2 sensors x 6 images, split 70:30."""
    cfg = D.SynthConfig(n_subjects=4, n_sensors=2, images_per_class=6, seed=7)
    out = tmp_path_factory.mktemp("small_synth")
    samples = D.generate_synthetic(cfg, out)
    D.split_70_30(samples, 7)
    D.write_manifest(samples, out / "manifest.json")
    return out, cfg, samples


@pytest.fixture(scope="session")
def default_synth(tmp_path_factory):
    """The default 10 x 3 x 20 synthetic benchmark, split with seed 42."""
    cfg = D.SynthConfig()
    out = tmp_path_factory.mktemp("default_synth")
    samples = D.generate_synthetic(cfg, out)
    D.split_70_30(samples, cfg.seed)
    D.write_manifest(samples, out / "manifest.json")
    return out, cfg, samples


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    """Keep one PASS/FAIL line per acceptance criterion for the terminal summary."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
