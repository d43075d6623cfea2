import numpy as np
import pytest

from groupmoe import tensor as T


def finite_diff_grad(fn, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_grad(build, x0: np.ndarray, tol: float = 1e-4, eps: float = 1e-5):
    """Compare analytic grad of build(Tensor) against central differences.

    ``build`` maps a leaf Tensor to a scalar Tensor.
    """
    leaf = T.Tensor(x0.copy(), requires_grad=True)
    out = build(leaf)
    out.backward()
    analytic = leaf.grad.copy()

    def scalar_fn(arr):
        return build(T.Tensor(arr)).item()

    numeric = finite_diff_grad(scalar_fn, x0.copy(), eps=eps)
    err = rel_err(analytic, numeric)
    assert err < tol, f"gradient mismatch: rel err {err:.3e}\nanalytic={analytic}\nnumeric={numeric}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
