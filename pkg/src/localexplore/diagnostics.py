"""
Numerical checks of the sensitivity bounds for mutual-information tracking.

The bounds relate how far the system is from the most informative point to
how much information is lost by sampling where the system actually is. They
involve constants that are only known up to existence; the run diagnostic
therefore reports both an a-priori constant built from kernel Lipschitz
bounds and the smallest constant consistent with the observed run.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gp import GaussianProcess, KernelParams, se_ard

__all__ = [
    "BoundInputs",
    "kernel_lipschitz",
    "sigma_lipschitz",
    "gram_derivative_eigbound",
    "gram_derivative_fd",
    "max_gram_derivative_eig",
    "variance_perturbation",
    "a_priori_constant",
    "theorem1_bound",
    "required_constant",
    "bound_events",
    "run_diagnostics",
    "write_diagnostics",
    "DIAG_COLUMNS",
]

DIAG_COLUMNS = ["t", "dxi_norm", "delta_I", "bound_a_priori", "L_fitted",
                "L_required", "L_a_priori", "bound_fitted"]


def kernel_lipschitz(p: KernelParams) -> float:
    """Lipschitz constant of ``k(., b)`` in the Euclidean norm.

    The SE-ARD gradient norm is at most ``sf2 * max_i |z| e^{-z^2/2} / l_i``,
    and ``max_z z e^{-z^2/2} = e^{-1/2}``.
    """
    return p.signal_variance / (float(np.min(p.lengthscales)) * np.sqrt(np.e))


def sigma_lipschitz(L_k, k_max, sigma_on, n) -> float:
    """Lipschitz constant of the posterior variance with respect to one datum."""
    return 2.0 * L_k * np.sqrt(k_max) / sigma_on * (1.0 + np.sqrt(n * k_max) / sigma_on)


def gram_derivative_eigbound(t, L_k) -> float:
    return 2.0 * L_k * np.sqrt(t)


def gram_derivative_fd(p: KernelParams, X, i: int, j: int, h: float = 1e-6) -> np.ndarray:
    """Central finite difference of the Gram matrix w.r.t. entry ``i`` of point ``j``."""
    Xp = np.array(X, dtype=float)
    Xm = Xp.copy()
    Xp[j, i] += h
    Xm[j, i] -= h
    return (se_ard(p, Xp, Xp) - se_ard(p, Xm, Xm)) / (2 * h)


def max_gram_derivative_eig(p: KernelParams, X, h: float = 1e-6) -> float:
    """Largest absolute eigenvalue of any single-entry Gram derivative."""
    X = np.asarray(X, dtype=float)
    worst = 0.0
    for j in range(X.shape[0]):
        for i in range(X.shape[1]):
            dK = gram_derivative_fd(p, X, i, j, h)
            dK = 0.5 * (dK + dK.T)
            worst = max(worst, float(np.max(np.abs(np.linalg.eigvalsh(dK)))))
    return worst


def variance_perturbation(gp: GaussianProcess, q, j: int, delta) -> float:
    """Change of the posterior variance at ``q`` when data point ``j`` moves by ``delta``."""
    X = np.array(gp.X, dtype=float)
    X[j] += np.asarray(delta, dtype=float)
    moved = gp.with_data(X, gp.y)
    return abs(moved.posterior(q)[1] - gp.posterior(q)[1])


@dataclass(frozen=True)
class BoundInputs:
    """Inputs of the information-loss bound at one replanning step.

    ``k_max``, ``noise_variance`` and ``L_k`` are per output dimension; with
    several outputs the bound is the sum of the per-output bounds. ``t`` is
    the 1-based step index, i.e. one more than the number of collected
    transitions.
    """

    dxi: np.ndarray
    t: int
    n_ref: int
    L_k: np.ndarray
    k_max: np.ndarray
    noise_variance: np.ndarray

    def __post_init__(self):
        for name in ("dxi", "L_k", "k_max", "noise_variance"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name),
                                                                    dtype=float)))
        if self.t < 1 or self.n_ref < 1:
            raise ValueError("t and n_ref must be at least 1")
        for name in ("L_k", "k_max", "noise_variance"):
            if np.any(getattr(self, name) <= 0):
                raise ValueError(f"{name} must be positive")

    @property
    def dxi_norm(self) -> float:
        return float(np.linalg.norm(self.dxi))


def a_priori_constant(b: BoundInputs) -> np.ndarray:
    """Per-output constant ``L_sigma(t + n_ref) * sqrt(t + n_ref)``."""
    n = b.t + b.n_ref
    return sigma_lipschitz(b.L_k, b.k_max, np.sqrt(b.noise_variance), n) * np.sqrt(n)


def theorem1_bound(b: BoundInputs, L=None) -> float:
    """Upper bound on the information lost by sampling away from the optimum.

    ``n_ref * log(1 + min(k_max, L (t + n_ref)^{-1/2} |dxi|) / sn2) / 2``,
    summed over outputs. ``L`` defaults to :func:`a_priori_constant`.
    """
    L = a_priori_constant(b) if L is None else np.broadcast_to(np.asarray(L, dtype=float),
                                                                b.k_max.shape)
    if b.dxi_norm == 0:
        return 0.0
    lin = L * b.dxi_norm / np.sqrt(b.t + b.n_ref)
    C = np.minimum(b.k_max, lin) / b.noise_variance
    return float(np.sum(b.n_ref * np.log1p(C) / 2.0))


def required_constant(b: BoundInputs, delta_I: float) -> float:
    """Smallest scalar ``L`` with ``delta_I <= theorem1_bound(b, L)``.

    Returns ``inf`` if even the saturated bound is smaller than ``delta_I``.
    """
    if delta_I <= 0:
        return 0.0
    if b.dxi_norm == 0 or theorem1_bound(b, np.inf) < delta_I:
        return np.inf
    lo, hi = 0.0, 1.0
    while theorem1_bound(b, hi) < delta_I:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if theorem1_bound(b, mid) >= delta_I:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-14 * hi:
            break
    return hi


def bound_events(record):
    """``(t, BoundInputs, delta_I)`` for every replanning step of a LocAL run."""
    if record.strategy != "local":
        raise ValueError("bound diagnostics need a localized-learning run record")
    D = record.dim
    events = []
    for t in np.flatnonzero(record.is_replan):
        h = record.hyper[t]                 # (d_x, D + 2)
        dxi = record.xi_star[t] - np.r_[record.states[t], record.inputs[t]]
        L_k = np.array([kernel_lipschitz(KernelParams(r[0], r[1:D + 1])) for r in h])
        b = BoundInputs(dxi=dxi, t=int(t) + 1, n_ref=record.n_ref, L_k=L_k,
                        k_max=h[:, 0], noise_variance=h[:, D + 1])
        events.append((int(t), b, float(record.score[t] - record.score_current[t])))
    return events


def run_diagnostics(record) -> list[dict]:
    """Diagnostic rows for one run, including the fitted constant.

    ``L_fitted`` is the smallest constant for which the bound holds at every
    replanning step of the run, so ``bound_fitted >= delta_I`` by
    construction whenever ``L_fitted`` is finite.
    """
    events = bound_events(record)
    required = [required_constant(b, dI) for _, b, dI in events]
    L_fit = max(required, default=0.0)
    rows = []
    for (t, b, dI), L_req in zip(events, required):
        L_ap = a_priori_constant(b)
        rows.append({
            "t": t,
            "dxi_norm": b.dxi_norm,
            "delta_I": dI,
            "bound_a_priori": theorem1_bound(b),
            "L_fitted": L_fit,
            "L_required": L_req,
            "L_a_priori": float(np.max(L_ap)),
            "bound_fitted": theorem1_bound(b, L_fit),
        })
    return rows


def write_diagnostics(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAG_COLUMNS)
        for r in rows:
            w.writerow([r["t"]] + [repr(float(r[c])) for c in DIAG_COLUMNS[1:]])
    return path
