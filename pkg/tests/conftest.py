import os
import time
from pathlib import Path

import numpy as np
import pytest

from overfitmeter.config import load_config
from overfitmeter.harness import Pipeline

from overfitmeter.nn import Dense, Flatten, Model

_CRITERIA = []
MINIPOOL_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "acceptance_minipool.yaml"


@pytest.fixture
def record_criterion():
    """Log one acceptance line; printed again in the terminal summary."""

    def record(number, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
        print(line)
        _CRITERIA.append((number, line))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERIA, key=lambda t: t[0]):
            terminalreporter.write_line(line)


def central_difference(fn, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """d fn / d x by central differences; fn maps an array to a float."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(x)
        flat[i] = orig - step
        down = fn(x)
        flat[i] = orig
        g[i] = (up - down) / (2 * step)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def logistic_model(w, b: float = 0.0) -> Model:
    """Two-class linear model whose class-1 logit is w.x + b (class 0 logit is 0)."""
    w = np.asarray(w, dtype=np.float64)
    dense = Dense(len(w), 2)
    dense.w.data = np.stack([np.zeros_like(w), w], axis=1)
    dense.b.data = np.array([0.0, b])
    return Model([Flatten(), dense], (1, 1, len(w)), 2)


def linear_model(weights: np.ndarray, bias: np.ndarray, input_shape) -> Model:
    d, k = weights.shape
    dense = Dense(d, k)
    dense.w.data = np.array(weights, dtype=np.float64)
    dense.b.data = np.array(bias, dtype=np.float64)
    return Model([Flatten(), dense], tuple(input_shape), k)


@pytest.fixture(scope="session")
def minipool(tmp_path_factory):
    """Train the four-model pool over three seeds and run every sweep once."""
    reuse = os.environ.get("OVERFITMETER_MINIPOOL_DIR")
    out = Path(reuse) if reuse else tmp_path_factory.mktemp("minipool")
    cfg = load_config(MINIPOOL_CONFIG)
    pipe = Pipeline(cfg, out)
    start = time.perf_counter()
    pipe.train_pool()
    pipe.label_noise()
    label_noise_seconds = time.perf_counter() - start
    for method in ("spatial", "fgsm", "gaussian", "corruption"):
        pipe.sweep(method)
    pipe.report()
    return {"config": cfg, "out": out, "pipe": pipe, "label_noise_seconds": label_noise_seconds,
            "total_seconds": time.perf_counter() - start}
