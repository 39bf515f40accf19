import numpy as np
import pytest

from unfoldlab import autodiff as ad


def central_diff(f, arrays, wrt, step=1e-5):
    """Central finite differences of scalar f(*arrays) w.r.t. arrays[wrt].

    Independent oracle for reverse-mode gradients: perturbs one coordinate
    at a time and re-evaluates the forward function.
    """
    arrays = [a.copy() for a in arrays]
    target = arrays[wrt]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(*arrays)
        flat[i] = orig - step
        fm = f(*arrays)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return np.linalg.norm(a - b) / denom


def tape_grad(build, arrays, n_out=None):
    """Reverse-mode gradients of the scalar built by `build(tape, leaves)`."""
    tape = ad.Tape()
    leaves = [tape.leaf(a, requires_grad=True) for a in arrays]
    loss = build(tape, leaves)
    store = ad.backward(tape, loss)
    return [store[leaf] for leaf in leaves]


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
