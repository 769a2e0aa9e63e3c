from pathlib import Path

import numpy as np
import pytest

from mbq import autograd as ag

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist5k"


def central_difference(fn, arrays, h=1e-3):
    """d fn / d arrays[k] by central differences; ``fn`` maps arrays to a float."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            up = fn(*arrays)
            a[idx] = orig - h
            down = fn(*arrays)
            a[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def assert_grad_close(analytic, numeric, rtol=1e-3, floor=1e-6):
    """Relative agreement on every coordinate with |analytic| > floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    assert analytic.shape == numeric.shape
    big = np.abs(analytic) > floor
    rel = np.abs(analytic - numeric)[big] / np.abs(analytic)[big]
    assert rel.size == 0 or rel.max() <= rtol, f"max relative error {rel.max():.3g}"
    # coordinates below the floor must be small in absolute terms too
    assert np.all(np.abs(numeric[~big]) < 1e-4)


def check_gradients(build, shapes, seed=0, rtol=1e-3, h=1e-4, scale=1.0):
    """Compare autodiff with central differences for ``build(*tensors) -> scalar Tensor``."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) * scale for s in shapes]
    with ag.precision(np.float64):
        tensors = [ag.Tensor(a.copy(), requires_grad=True) for a in arrays]
        grads = ag.backward(build(*tensors))

        def value(*arrs):
            with ag.no_grad():
                return float(build(*[ag.Tensor(a) for a in arrs]).data)

        numeric = central_difference(value, [a.copy() for a in arrays], h)
    for t, n in zip(tensors, numeric):
        assert_grad_close(grads[t], n, rtol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_paths():
    paths = {
        "train_images": MNIST_DIR / "train-images-idx3-ubyte.gz",
        "train_labels": MNIST_DIR / "train-labels-idx1-ubyte.gz",
        "test_images": MNIST_DIR / "t10k-images-idx3-ubyte.gz",
        "test_labels": MNIST_DIR / "t10k-labels-idx1-ubyte.gz",
    }
    missing = [str(p) for p in paths.values() if not p.is_file()]
    if missing:
        pytest.skip(f"MNIST subset not present: {missing}")
    return paths


# criterion number -> (passed, title, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {title}  [{detail}]")
