import numpy as np
import pytest

from spiketransfer import autodiff as ad


def rel_err(approx: np.ndarray, exact: np.ndarray) -> float:
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = np.maximum(np.abs(exact), 1e-6)
    return float(np.max(np.abs(approx - exact) / denom))


def gradcheck(build_loss, params, h=1e-5, tol=1e-4):
    """Compare tape gradients of a scalar loss against central differences.

    build_loss() must re-run the forward from the current param data."""
    loss = build_loss()
    for p in params:
        p.zero_grad()
    loss.backward()
    for p in params:
        got = p.grad if p.grad is not None else np.zeros_like(p.data)
        want = ad.finite_difference_gradient(lambda _: build_loss().item(), p, h=h)
        err = rel_err(got, want)
        assert err < tol, f"gradient mismatch {err:.3e} on param shape {p.data.shape}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
