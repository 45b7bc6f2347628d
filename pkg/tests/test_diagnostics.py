import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from localexplore.diagnostics import (
    DIAG_COLUMNS,
    BoundInputs,
    a_priori_constant,
    bound_events,
    gram_derivative_eigbound,
    gram_derivative_fd,
    kernel_lipschitz,
    max_gram_derivative_eig,
    required_constant,
    run_diagnostics,
    sigma_lipschitz,
    theorem1_bound,
    variance_perturbation,
    write_diagnostics,
)
from localexplore.explore import ExplorationConfig, MpcConfig, entropy_run, local_run
from localexplore.gp import GaussianProcess, KernelParams, se_ard
from localexplore.systems import make_toy


def test_kernel_lipschitz_unit():
    L = kernel_lipschitz(KernelParams(1.0, [1.0]))
    assert L == pytest.approx(np.exp(-0.5), rel=1e-15)
    assert L == pytest.approx(0.6065, abs=1e-4)


def test_kernel_lipschitz_scales_with_variance():
    a = kernel_lipschitz(KernelParams(1.3, [0.4, 2.0]))
    assert kernel_lipschitz(KernelParams(2.6, [0.4, 2.0])) == pytest.approx(2 * a, rel=1e-15)


def test_kernel_lipschitz_dominates_sampled_slopes():
    rng = np.random.default_rng(8)
    p = KernelParams(1.7, [0.5, 1.2, 3.0])
    L = kernel_lipschitz(p)
    A = rng.uniform(-2, 2, (10_000, 3))
    B = A + rng.normal(scale=0.05, size=A.shape)
    C = rng.uniform(-2, 2, (10_000, 3))
    kA = p.signal_variance * np.exp(-0.5 * np.sum(((A - C) / p.lengthscales) ** 2, axis=1))
    kB = p.signal_variance * np.exp(-0.5 * np.sum(((B - C) / p.lengthscales) ** 2, axis=1))
    slopes = np.abs(kA - kB) / np.linalg.norm(A - B, axis=1)
    assert np.max(slopes) <= L * (1 + 1e-3)
    # the constant is tight along the shortest lengthscale
    z = np.linspace(0, 3, 3001)
    assert np.max(p.signal_variance * z * np.exp(-z * z / 2) / 0.5) == pytest.approx(L, rel=1e-6)


def test_sigma_lipschitz_examples():
    assert sigma_lipschitz(1.0, 1.0, 1.0, 1) == pytest.approx(4.0, rel=1e-15)
    assert sigma_lipschitz(1.0, 1.0, 1.0, 0) == pytest.approx(2.0, rel=1e-15)
    assert sigma_lipschitz(1.0, 1.0, 1.0, 4) == pytest.approx(6.0, rel=1e-15)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(0, 500), Lk=st.floats(0.01, 10), kmax=st.floats(0.01, 10),
       s=st.floats(0.01, 2))
def test_sigma_lipschitz_increases_with_n(n, Lk, kmax, s):
    assert sigma_lipschitz(Lk, kmax, s, n + 1) > sigma_lipschitz(Lk, kmax, s, n)


def test_eigbound_examples():
    assert gram_derivative_eigbound(1, 0.7) == pytest.approx(1.4, rel=1e-15)
    assert gram_derivative_eigbound(16, 0.6065) == pytest.approx(4.852, rel=1e-12)


def analytic_gram_derivative(p, X, i, j):
    K = se_ard(p, X, X)
    dK = np.zeros_like(K)
    diff = (X[:, i] - X[j, i]) / p.lengthscales[i] ** 2
    dK[j, :] = K[j, :] * diff
    dK[:, j] = dK[j, :]
    dK[j, j] = 0.0
    return dK


def test_gram_derivative_fd_matches_analytic(rng):
    p = KernelParams(1.4, [0.7, 1.3])
    X = rng.uniform(-1, 1, (6, 2))
    for i in range(2):
        for j in range(6):
            np.testing.assert_allclose(gram_derivative_fd(p, X, i, j),
                                       analytic_gram_derivative(p, X, i, j), atol=1e-8)


def test_empirical_derivative_eigenvalues_within_bound(rng):
    for _ in range(20):
        D = int(rng.integers(1, 4))
        p = KernelParams(rng.uniform(0.2, 3), rng.uniform(0.2, 2, D))
        X = rng.uniform(-1, 1, (10, D))
        assert max_gram_derivative_eig(p, X) <= gram_derivative_eigbound(10, kernel_lipschitz(p)) + 1e-6


def test_variance_perturbation_single_point(rng):
    for _ in range(20):
        D, n = int(rng.integers(1, 4)), int(rng.integers(2, 15))
        kern = KernelParams(rng.uniform(0.3, 2), rng.uniform(0.3, 2, D))
        sn2 = rng.uniform(0.01, 0.5)
        gp = GaussianProcess(kern, sn2, rng.uniform(-1, 1, (n, D)), rng.normal(size=n))
        L = sigma_lipschitz(kernel_lipschitz(kern), kern.k_max, np.sqrt(sn2), n)
        for _ in range(5):
            delta = rng.normal(scale=rng.choice([1e-3, 0.1, 1.0]), size=D)
            dv = variance_perturbation(gp, rng.uniform(-1, 1, D), int(rng.integers(n)), delta)
            assert dv <= L * np.linalg.norm(delta) + 1e-6


def test_variance_perturbation_whole_dataset(rng):
    for _ in range(20):
        D, n = 2, int(rng.integers(2, 12))
        kern = KernelParams(rng.uniform(0.3, 2), rng.uniform(0.3, 2, D))
        sn2 = rng.uniform(0.01, 0.5)
        X = rng.uniform(-1, 1, (n, D))
        gp = GaussianProcess(kern, sn2, X, np.zeros(n))
        delta = rng.normal(scale=0.1, size=X.shape)
        q = rng.uniform(-1, 1, D)
        dv = abs(gp.with_data(X + delta, gp.y).posterior(q)[1] - gp.posterior(q)[1])
        L = sigma_lipschitz(kernel_lipschitz(kern), kern.k_max, np.sqrt(sn2), n)
        assert dv <= L * np.linalg.norm(delta) + 1e-6


def bound(dxi, t=5, n_ref=9, Lk=0.6, kmax=1.0, sn2=0.01):
    return BoundInputs(np.atleast_1d(dxi), t, n_ref, [Lk], [kmax], [sn2])


def test_theorem_bound_zero_distance():
    assert theorem1_bound(bound([0.0, 0.0])) == 0.0
    assert theorem1_bound(bound([0.0, 0.0]), L=np.inf) == 0.0


def test_theorem_bound_saturates():
    b = bound([1e9, 0.0], n_ref=7, kmax=2.0, sn2=0.05)
    assert theorem1_bound(b) == pytest.approx(7 * np.log(1 + 2.0 / 0.05) / 2, rel=1e-14)


def test_theorem_bound_hand_value():
    # L = 2, |dxi| = 3, t + n_ref = 9: C = min(1, 2 * 3 / 3) / 0.5 = 2
    b = BoundInputs([3.0], 4, 5, [1.0], [1.0], [0.5])
    assert theorem1_bound(b, L=2.0) == pytest.approx(5 * np.log(3.0) / 2, rel=1e-14)


def test_a_priori_constant_formula():
    b = BoundInputs([1.0], 3, 6, [0.5], [2.0], [0.1])
    n = 9
    expected = 2 * 0.5 * np.sqrt(2.0) / np.sqrt(0.1) * (1 + np.sqrt(n * 2.0) / np.sqrt(0.1)) * 3
    assert a_priori_constant(b)[0] == pytest.approx(expected, rel=1e-14)


def test_bound_sums_over_outputs():
    one = BoundInputs([0.3], 2, 4, [0.6], [1.0], [0.01])
    two = BoundInputs([0.3], 2, 4, [0.6, 0.6], [1.0, 1.0], [0.01, 0.01])
    assert theorem1_bound(two) == pytest.approx(2 * theorem1_bound(one), rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(r1=st.floats(0, 10), r2=st.floats(0, 10), n1=st.integers(1, 50), n2=st.integers(1, 50),
       t=st.integers(1, 300))
def test_theorem_bound_monotone(r1, r2, n1, n2, t):
    lo_r, hi_r = sorted((r1, r2))
    lo_n, hi_n = sorted((n1, n2))
    assert theorem1_bound(bound([lo_r], t, lo_n)) <= theorem1_bound(bound([hi_r], t, lo_n))
    for L in (None, 3.0):
        assert theorem1_bound(bound([hi_r], t, lo_n), L=L) \
            <= theorem1_bound(bound([hi_r], t, hi_n), L=L) * (1 + 1e-12)


def test_required_constant_is_tight():
    b = bound([0.4])
    dI = 0.5 * theorem1_bound(b, L=np.inf)
    L = required_constant(b, dI)
    assert theorem1_bound(b, L) >= dI
    assert theorem1_bound(b, L * (1 - 1e-9)) < dI
    assert required_constant(b, 0.0) == 0.0
    assert required_constant(b, 10 * theorem1_bound(b, np.inf)) == np.inf


def test_bound_inputs_validation():
    with pytest.raises(ValueError):
        BoundInputs([1.0], 0, 5, [1.0], [1.0], [0.1])
    with pytest.raises(ValueError):
        BoundInputs([1.0], 1, 5, [1.0], [1.0], [0.0])


@pytest.fixture(scope="module")
def toy_run():
    toy = make_toy()
    cfg = ExplorationConfig(mpc=MpcConfig(population=32, elites=4, iterations=5),
                            mi_starts=4, mi_evals=60, train_budget=20)
    return local_run(toy, toy.make_region(), cfg, seed=1, total_steps=50)


def test_run_diagnostics_on_toy(toy_run, tmp_path):
    rows = run_diagnostics(toy_run)
    events = bound_events(toy_run)
    assert len(rows) == int(np.sum(toy_run.is_replan)) == len(events)
    for r in rows:
        assert np.isfinite(r["dxi_norm"]) and r["delta_I"] >= -1e-9
        assert r["bound_fitted"] >= r["delta_I"]
        assert r["L_required"] <= r["L_fitted"]
    path = write_diagnostics(rows, tmp_path / "d.csv")
    header = path.read_text().splitlines()[0].split(",")
    assert header == DIAG_COLUMNS


def test_bound_events_reject_entropy_runs():
    toy = make_toy()
    rec = entropy_run(toy, toy.make_region(), ExplorationConfig(), seed=0, total_steps=3)
    with pytest.raises(ValueError):
        bound_events(rec)
