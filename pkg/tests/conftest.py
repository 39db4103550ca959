import numpy as np
import pytest

from mome.config import ExperimentConfig, from_dict, merge
from mome.tensor import Tape, Tensor


ACCEPTANCE: list[str] = []  # lines reported by the acceptance suite


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


def numeric_grad(fn, arr, h=1e-6):
    """Central differences of scalar ``fn()`` w.r.t. the array ``arr`` (mutated in place)."""
    out = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return out


def tape_grads(fn, tensors):
    """Reverse-mode gradients of scalar Tensor ``fn()`` for each tensor."""
    for t in tensors:
        t.requires_grad = True
    with Tape() as tape:
        out = fn()
    g = tape.backward(out, write=False)
    return [g.get(id(t), np.zeros_like(t.data)) for t in tensors]


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a)))) if np.size(a) else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(**sections):
    """Experiment config trimmed for fast tests; ``sections`` merge over it."""
    base = ExperimentConfig().to_dict()
    base = merge(base, {"train": {"steps": 8, "stage2_steps": 4, "warmup": 2, "batch_size": 8},
                        "data": {"eval_size": 16}})
    return from_dict(merge(base, sections))


def rand_tensor(rng, *shape, grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=grad)
