"""
Squared-exponential ARD kernel and exact Gaussian process regression.

One :class:`GaussianProcess` models a single output dimension; state
transitions with several state dimensions use a :class:`MultiGP`, which keeps
one independent GP per output and shares the training inputs between them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

__all__ = [
    "GPStateError",
    "KernelParams",
    "GaussianProcess",
    "MultiGP",
    "se_ard",
    "kernel_eval",
    "train_hyperparameters",
]

log = logging.getLogger(__name__)

# relative diagonal jitter, scaled by the signal variance
JITTER = 1e-10
# below this many points every update refactorizes from scratch
REFACTOR_LIMIT = 200
DEFAULT_BOUNDS = (1e-3, 1e3)


class GPStateError(RuntimeError):
    """Cached factorization does not match the training data."""


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters of an SE-ARD kernel.

    Attributes:
        signal_variance: kernel amplitude, equal to the kernel's upper bound.
        lengthscales: one positive lengthscale per input dimension.
    """

    signal_variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.array(self.lengthscales, dtype=float).reshape(-1)
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        if ls.size == 0:
            raise ValueError("at least one lengthscale is required")
        if not (np.isfinite(self.signal_variance) and self.signal_variance > 0):
            raise ValueError(f"signal variance must be positive, got {self.signal_variance}")
        if not (np.all(np.isfinite(ls)) and np.all(ls > 0)):
            raise ValueError(f"lengthscales must be positive, got {ls}")

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    @property
    def k_max(self) -> float:
        return self.signal_variance

    def __eq__(self, other):
        if not isinstance(other, KernelParams):
            return NotImplemented
        return (self.signal_variance == other.signal_variance
                and np.array_equal(self.lengthscales, other.lengthscales))

    def __hash__(self):
        return hash((self.signal_variance, self.lengthscales.tobytes()))


def _sqdist(params: KernelParams, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = A / params.lengthscales
    B = B / params.lengthscales
    d = (np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :]
         - 2.0 * A @ B.T)
    return np.maximum(d, 0.0)


def se_ard(params: KernelParams, A, B) -> np.ndarray:
    """Kernel matrix between the rows of ``A`` (n, D) and ``B`` (m, D)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != params.dim or B.shape[1] != params.dim:
        raise ValueError(
            f"input dimension mismatch: kernel has {params.dim} lengthscales, "
            f"inputs have {A.shape[1]} and {B.shape[1]} columns")
    return params.signal_variance * np.exp(-0.5 * _sqdist(params, A, B))


def kernel_eval(params: KernelParams, a, b) -> float:
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.size != params.dim or b.size != params.dim:
        raise ValueError(
            f"kernel expects {params.dim}-dimensional points, got {a.size} and {b.size}")
    r = (a - b) / params.lengthscales
    return params.signal_variance * float(np.exp(-0.5 * np.dot(r, r)))


class GaussianProcess:
    """Exact zero-mean GP posterior for a single output.

    Instances are treated as immutable: :meth:`add_point` and
    :meth:`with_hyperparameters` return new models, so concurrent posterior
    queries on one instance are safe.
    """

    def __init__(self, kernel: KernelParams, noise_variance: float, X=None, y=None):
        noise_variance = float(noise_variance)
        if not (np.isfinite(noise_variance) and noise_variance >= 0):
            raise ValueError(f"noise variance must be nonnegative, got {noise_variance}")
        if X is None or np.size(X) == 0:
            X = np.zeros((0, kernel.dim))
            y = np.zeros(0) if y is None else y
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != kernel.dim:
            raise ValueError(f"inputs must have {kernel.dim} columns, got {X.shape[1]}")
        y = np.asarray(y, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} inputs but {y.shape[0]} targets")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("training data must be finite")
        self.kernel = kernel
        self.noise_variance = noise_variance
        self._X = X
        self._y = y
        self._L, self._alpha = self._factorize(X, y)

    @classmethod
    def _assemble(cls, kernel, noise_variance, X, y, L, alpha):
        gp = cls.__new__(cls)
        gp.kernel = kernel
        gp.noise_variance = noise_variance
        gp._X, gp._y, gp._L, gp._alpha = X, y, L, alpha
        return gp

    @property
    def diag_offset(self) -> float:
        return self.noise_variance + JITTER * self.kernel.signal_variance

    def _factorize(self, X, y):
        if X.shape[0] == 0:
            return np.zeros((0, 0)), np.zeros(0)
        K = se_ard(self.kernel, X, X)
        K[np.diag_indices_from(K)] += self.diag_offset
        L = np.linalg.cholesky(K)
        alpha = sla.cho_solve((L, True), y)
        return L, alpha

    @property
    def X(self) -> np.ndarray:
        return self._X

    @property
    def y(self) -> np.ndarray:
        return self._y

    @property
    def L(self) -> np.ndarray:
        return self._L

    @property
    def alpha(self) -> np.ndarray:
        return self._alpha

    @property
    def n(self) -> int:
        return self._X.shape[0]

    @property
    def dim(self) -> int:
        return self.kernel.dim

    def _require_factor(self):
        if self._L.shape != (self.n, self.n) or self._alpha.shape != (self.n,) \
                or self._y.shape != (self.n,):
            raise GPStateError(
                f"factorization of size {self._L.shape[0]} is stale for {self.n} points")

    def _queries(self, Q):
        Q = np.asarray(Q, dtype=float)
        single = Q.ndim == 1
        Q = np.atleast_2d(Q)
        if Q.shape[1] != self.dim:
            raise ValueError(f"queries must have {self.dim} columns, got {Q.shape[1]}")
        return Q, single

    def mean(self, Q):
        self._require_factor()
        Q, single = self._queries(Q)
        if self.n == 0:
            mu = np.zeros(Q.shape[0])
        else:
            mu = se_ard(self.kernel, Q, self._X) @ self._alpha
        return float(mu[0]) if single else mu

    def posterior(self, Q):
        """Posterior mean and variance of the latent function at ``Q``.

        ``Q`` is a single point (D,) or a batch (m, D); scalars are returned
        for a single point. Variances are clipped into ``[0, k(q, q)]``.
        """
        self._require_factor()
        Q, single = self._queries(Q)
        sf2 = self.kernel.signal_variance
        if self.n == 0:
            mu = np.zeros(Q.shape[0])
            var = np.full(Q.shape[0], sf2)
        else:
            Ks = se_ard(self.kernel, Q, self._X)
            mu = Ks @ self._alpha
            V = sla.solve_triangular(self._L, Ks.T, lower=True)
            var = np.clip(sf2 - np.sum(V * V, axis=0), 0.0, sf2)
        if single:
            return float(mu[0]), float(var[0])
        return mu, var

    def add_point(self, xi, y) -> "GaussianProcess":
        """Return the model conditioned on one more observation."""
        self._require_factor()
        xi = np.asarray(xi, dtype=float).reshape(-1)
        y = float(y)
        if xi.size != self.dim:
            raise ValueError(f"point must have {self.dim} entries, got {xi.size}")
        if not (np.all(np.isfinite(xi)) and np.isfinite(y)):
            raise ValueError("observation must be finite")
        X = np.vstack([self._X, xi[None, :]])
        Y = np.append(self._y, y)
        if self.n < REFACTOR_LIMIT:
            return GaussianProcess(self.kernel, self.noise_variance, X, Y)

        # rank-1 extension of the existing Cholesky factor
        k = se_ard(self.kernel, self._X, xi[None, :])[:, 0]
        l12 = sla.solve_triangular(self._L, k, lower=True)
        d2 = self.kernel.signal_variance + self.diag_offset - l12 @ l12
        if d2 <= 0:
            return GaussianProcess(self.kernel, self.noise_variance, X, Y)
        n = self.n
        L = np.zeros((n + 1, n + 1))
        L[:n, :n] = self._L
        L[n, :n] = l12
        L[n, n] = np.sqrt(d2)
        alpha = sla.cho_solve((L, True), Y)
        return GaussianProcess._assemble(self.kernel, self.noise_variance, X, Y, L, alpha)

    def with_hyperparameters(self, kernel: KernelParams, noise_variance: float):
        return GaussianProcess(kernel, noise_variance, self._X, self._y)

    def with_data(self, X, y):
        return GaussianProcess(self.kernel, self.noise_variance, X, y)

    # hyperparameter vector: (log sf2, log l_1..l_D, log sn2)
    def get_theta(self) -> np.ndarray:
        return np.log(np.r_[self.kernel.signal_variance, self.kernel.lengthscales,
                            self.noise_variance])

    def with_theta(self, theta) -> "GaussianProcess":
        p = np.exp(np.asarray(theta, dtype=float))
        return self.with_hyperparameters(KernelParams(p[0], p[1:-1]), p[-1])

    def log_marginal_likelihood(self, grad: bool = False):
        """Log evidence of the targets, optionally with its gradient.

        The gradient is taken with respect to :meth:`get_theta`, i.e. the
        logarithms of signal variance, lengthscales and noise variance.
        """
        n = self.n
        if n == 0:
            raise ValueError("log marginal likelihood needs at least one observation")
        self._require_factor()
        L, a, y = self._L, self._alpha, self._y
        lml = (-0.5 * float(y @ a) - float(np.sum(np.log(np.diag(L))))
               - 0.5 * n * np.log(2 * np.pi))
        if not grad:
            return lml

        p = self.kernel
        Xs = self._X / p.lengthscales
        D = (Xs[:, None, :] - Xs[None, :, :]) ** 2
        Kf = p.signal_variance * np.exp(-0.5 * D.sum(axis=2))
        W = np.outer(a, a) - sla.cho_solve((L, True), np.eye(n))
        dlml = np.empty(p.dim + 2)
        dlml[0] = 0.5 * (np.sum(W * Kf) + JITTER * p.signal_variance * np.trace(W))
        dlml[1:-1] = 0.5 * np.einsum("ij,ij,ijk->k", W, Kf, D)
        dlml[-1] = 0.5 * self.noise_variance * np.trace(W)
        return lml, dlml

    def __repr__(self):
        return (f"GaussianProcess(n={self.n}, sf2={self.kernel.signal_variance:.4g}, "
                f"ls={np.array2string(self.kernel.lengthscales, precision=4)}, "
                f"sn2={self.noise_variance:.4g})")


class MultiGP:
    """Independent GPs, one per output dimension, on shared inputs."""

    def __init__(self, dims):
        dims = list(dims)
        if not dims:
            raise ValueError("MultiGP needs at least one output")
        X0 = dims[0].X
        for gp in dims[1:]:
            if gp.X.shape != X0.shape or not np.array_equal(gp.X, X0):
                raise ValueError("all output GPs must share identical training inputs")
        self.dims = dims

    @classmethod
    def empty(cls, kernels, noise_variances):
        return cls([GaussianProcess(k, s) for k, s in zip(kernels, noise_variances)])

    @property
    def n(self) -> int:
        return self.dims[0].n

    @property
    def input_dim(self) -> int:
        return self.dims[0].dim

    @property
    def output_dim(self) -> int:
        return len(self.dims)

    @property
    def X(self) -> np.ndarray:
        return self.dims[0].X

    @property
    def Y(self) -> np.ndarray:
        return np.column_stack([gp.y for gp in self.dims])

    def mean(self, Q) -> np.ndarray:
        """Posterior means, shape (m, d_x) for a batch or (d_x,) for one point."""
        Q = np.asarray(Q, dtype=float)
        single = Q.ndim == 1
        Q2 = np.atleast_2d(Q)
        if self.n == 0:
            mu = np.zeros((Q2.shape[0], self.output_dim))
        else:
            mu = np.column_stack([gp.mean(Q2) for gp in self.dims])
        return mu[0] if single else mu

    def posterior(self, Q):
        Q = np.asarray(Q, dtype=float)
        single = Q.ndim == 1
        res = [gp.posterior(np.atleast_2d(Q)) for gp in self.dims]
        mu = np.column_stack([r[0] for r in res])
        var = np.column_stack([r[1] for r in res])
        if single:
            return mu[0], var[0]
        return mu, var

    def add_point(self, xi, y) -> "MultiGP":
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.size != self.output_dim:
            raise ValueError(f"target must have {self.output_dim} entries, got {y.size}")
        return MultiGP([gp.add_point(xi, yd) for gp, yd in zip(self.dims, y)])

    def with_data(self, X, Y) -> "MultiGP":
        Y = np.asarray(Y, dtype=float).reshape(len(X), self.output_dim) if len(X) else \
            np.zeros((0, self.output_dim))
        return MultiGP([gp.with_data(X, Y[:, d]) for d, gp in enumerate(self.dims)])

    def __repr__(self):
        return f"MultiGP({self.dims!r})"


def _projected(grad, theta, lo, hi):
    g = grad.copy()
    g[(theta <= lo) & (g < 0)] = 0.0
    g[(theta >= hi) & (g > 0)] = 0.0
    return g


def _train_single(gp: GaussianProcess, budget: int, bounds, noise_bounds) -> GaussianProcess:
    if budget <= 0:
        return gp
    if gp.n < 2:
        raise ValueError(f"hyperparameter training needs at least 2 points, got {gp.n}")
    D = gp.dim
    lo = np.log(np.r_[np.full(D + 1, bounds[0]), noise_bounds[0]])
    hi = np.log(np.r_[np.full(D + 1, bounds[1]), noise_bounds[1]])

    def evaluate(theta):
        try:
            model = gp.with_theta(theta)
            return model, model.log_marginal_likelihood()
        except (np.linalg.LinAlgError, ValueError, FloatingPointError):
            return None, -np.inf

    try:
        f0, g = gp.log_marginal_likelihood(grad=True)
    except np.linalg.LinAlgError:
        f0, g = -np.inf, None
    if not np.isfinite(f0) or g is None or not np.all(np.isfinite(g)):
        log.warning("non-finite log likelihood before training; keeping parameters")
        return gp

    theta = np.clip(gp.get_theta(), lo, hi)
    model, f = evaluate(theta)
    if model is None or not np.isfinite(f):
        log.warning("initial parameters outside bounds are infeasible; keeping parameters")
        return gp
    _, g = model.log_marginal_likelihood(grad=True)
    step = 1.0 / max(np.linalg.norm(g), 1.0)

    for _ in range(budget):
        d = _projected(g, theta, lo, hi)
        if not np.any(d):
            break
        accepted = False
        for _ in range(30):
            trial = np.clip(theta + step * d, lo, hi)
            trial_model, ft = evaluate(trial)
            # Armijo sufficient increase
            if trial_model is not None and np.isfinite(ft) \
                    and ft >= f + 1e-4 * float(g @ (trial - theta)):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        theta, model, f = trial, trial_model, ft
        _, g = model.log_marginal_likelihood(grad=True)
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient during training; rolling back")
            return gp
        step *= 2.0

    if not np.isfinite(f) or f < f0:
        log.warning("training did not improve the likelihood; rolling back")
        return gp
    return model


def train_hyperparameters(model, budget: int = 50, bounds=DEFAULT_BOUNDS, noise_bounds=None):
    """Maximize the log marginal likelihood by projected gradient ascent.

    Works in log-space with box bounds on each hyperparameter and a
    backtracking (Armijo) line search. ``model`` is a :class:`GaussianProcess`
    or a :class:`MultiGP`; the result has the same type and training data.
    The log likelihood of every output never decreases.
    """
    if noise_bounds is None:
        noise_bounds = bounds
    if isinstance(model, MultiGP):
        return MultiGP([_train_single(gp, budget, bounds, noise_bounds) for gp in model.dims])
    return _train_single(model, budget, bounds, noise_bounds)
