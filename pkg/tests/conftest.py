import numpy as np
import pytest

from localexplore.gp import GaussianProcess, KernelParams, JITTER


def dense_posterior(kernel, noise, X, y, Q):
    """Posterior through an explicit inverse of the noisy Gram matrix."""
    def k(A, B):
        d = (A[:, None, :] - B[None, :, :]) / kernel.lengthscales
        return kernel.signal_variance * np.exp(-0.5 * np.sum(d * d, axis=2))

    Kinv = np.linalg.inv(k(X, X) + (noise + JITTER * kernel.signal_variance) * np.eye(len(X)))
    Ks = k(Q, X)
    mean = Ks @ Kinv @ y
    var = kernel.signal_variance - np.einsum("ij,jk,ik->i", Ks, Kinv, Ks)
    return mean, var


def random_gp(rng, n, D, noise_range=(1e-2, 0.5)):
    kernel = KernelParams(rng.uniform(0.3, 3.0), rng.uniform(0.3, 2.0, D))
    noise = rng.uniform(*noise_range)
    X = rng.uniform(-2, 2, (n, D))
    y = rng.normal(size=n)
    return GaussianProcess(kernel, noise, X, y)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# (criterion, passed, detail) lines reported by the acceptance suite
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
