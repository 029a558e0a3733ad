import numpy as np
import pytest

_ACCEPTANCE_LINES = []


def record_criterion(number, name, passed, detail=""):
    line = f"[criterion {number}] {'PASS' if passed else 'FAIL'}  {name}"
    if detail:
        line += f"  ({detail})"
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_diff(f, x, h=1e-4, idx=None):
    """Central-difference gradient of scalar ``f`` w.r.t. array ``x`` (in place perturbation)."""
    if not x.flags.c_contiguous:
        raise ValueError("central_diff perturbs x through a flat view; pass a contiguous array")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    indices = range(flat.size) if idx is None else idx
    for i in indices:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    """Largest component error relative to the scale of the numeric gradient."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)
