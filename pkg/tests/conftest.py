import numpy as np
import pytest

from auxfl.mtl import TaskSpec
from auxfl.sim import build_model

_CRITERIA = []


def central_difference(f, x, h=1e-6):
    """Gradient of scalar ``f`` at ``x`` by central differences (forward evaluations only)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(x.shape)


def relative_error(analytic, numeric):
    """Largest absolute deviation relative to the gradient's largest entry."""
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


TINY_TRUNK = [
    {"kind": "conv1d", "in_channels": 1, "out_channels": 3, "kernel_size": 3},
    {"kind": "relu"},
    {"kind": "maxpool1d", "pool_size": 2},
    {"kind": "flatten"},
    {"kind": "dense", "in_features": 9, "out_features": 6},
    {"kind": "relu"},
]

TINY_TASKS = [
    TaskSpec("service", "main", 4),
    TaskSpec("duration", "auxiliary", 3),
    TaskSpec("bandwidth", "auxiliary", 2),
]


def tiny_model(tasks=TINY_TASKS, head=()):
    return build_model(TINY_TRUNK, list(head), tasks, (1, 8))


@pytest.fixture
def criterion(request):
    """Record an acceptance criterion outcome for the end-of-run summary."""

    def record(label):
        """Call at the start of the test; put measured values in the returned dict."""
        notes = {}
        request.node.user_properties.append(("criterion", label, notes))
        return notes

    return record


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    for item in report.user_properties:
        if item[0] == "criterion":
            _CRITERIA.append((item[1], report.outcome, item[2]))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome, detail in _CRITERIA:
        mark = "PASS" if outcome == "passed" else "FAIL"
        extra = ", ".join(f"{k}={v}" for k, v in detail.items())
        terminalreporter.write_line(f"[{mark}] {label}" + (f" ({extra})" if extra else ""))
