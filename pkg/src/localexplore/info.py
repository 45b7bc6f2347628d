"""
Mutual information between a candidate observation and a discretized region.

All covariances are posterior covariances given the model's current training
data, so re-running the selection after every model update accounts for the
information that has already been collected.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .gp import GaussianProcess, MultiGP, se_ard

__all__ = [
    "DegenerateRegionError",
    "Region",
    "CandidateScore",
    "MIScorer",
    "mutual_information_single",
    "most_informative_point",
    "greedy_batch",
]

log = logging.getLogger(__name__)


class DegenerateRegionError(ValueError):
    """Reference covariance is singular, e.g. from duplicate reference points."""


@dataclass(frozen=True)
class Region:
    """Box in augmented state space and its finite set of reference points."""

    lower: np.ndarray
    upper: np.ndarray
    ref_points: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float).reshape(-1)
        hi = np.array(self.upper, dtype=float).reshape(-1)
        R = np.atleast_2d(np.array(self.ref_points, dtype=float))
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ValueError("region bounds must satisfy lower <= upper")
        if R.shape[0] < 1 or R.shape[1] != lo.size:
            raise ValueError(f"need at least one {lo.size}-dimensional reference point")
        if np.any(R < lo) or np.any(R > hi):
            raise ValueError("reference points must lie inside the region box")
        if np.unique(R, axis=0).shape[0] != R.shape[0]:
            raise DegenerateRegionError("reference points must be pairwise distinct")
        for a in (lo, hi, R):
            a.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "ref_points", R)

    @classmethod
    def grid(cls, lower, upper, per_dim=5, cap=625, rng=None) -> "Region":
        """Uniform grid over the box, randomly thinned to ``cap`` points."""
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        counts = np.broadcast_to(np.asarray(per_dim, dtype=int), lower.shape)
        axes = [np.linspace(lo, hi, c) if c > 1 else np.array([(lo + hi) / 2])
                for lo, hi, c in zip(lower, upper, counts)]
        R = np.array(list(itertools.product(*axes)))
        if R.shape[0] > cap:
            rng = np.random.default_rng(0) if rng is None else rng
            keep = np.sort(rng.choice(R.shape[0], size=cap, replace=False))
            R = R[keep]
        return cls(lower, upper, R)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def n_ref(self) -> int:
        return self.ref_points.shape[0]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def halfwidth(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def contains(self, points) -> bool:
        P = np.atleast_2d(points)
        return bool(np.all(P >= self.lower) and np.all(P <= self.upper))

    def sample(self, n: int, rng) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))


@dataclass(frozen=True)
class CandidateScore:
    point: np.ndarray
    mi: float


def _outputs(gp):
    if isinstance(gp, MultiGP):
        return gp.dims
    if isinstance(gp, GaussianProcess):
        return [gp]
    raise TypeError(f"expected a GaussianProcess or MultiGP, got {type(gp).__name__}")


class _OutputTerm:
    # precomputed quantities for one output GP
    def __init__(self, gp: GaussianProcess, R: np.ndarray):
        self.gp = gp
        self.sn2 = gp.noise_variance
        K_RR = se_ard(gp.kernel, R, R)
        if gp.n > 0:
            self.V = sla.solve_triangular(gp.L, se_ard(gp.kernel, gp.X, R), lower=True)
            S = K_RR - self.V.T @ self.V
        else:
            self.V = None
            S = K_RR
        S[np.diag_indices_from(S)] += self.sn2
        try:
            self.LA = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as err:
            raise DegenerateRegionError(
                "reference covariance is not positive definite") from err

    def score(self, Xi, R):
        gp = self.gp
        sf2 = gp.kernel.signal_variance
        C = se_ard(gp.kernel, R, Xi)
        if self.V is not None:
            v = sla.solve_triangular(gp.L, se_ard(gp.kernel, gp.X, Xi), lower=True)
            var = np.clip(sf2 - np.sum(v * v, axis=0), 0.0, sf2)
            C = C - self.V.T @ v
        else:
            var = np.full(Xi.shape[0], sf2)
        z = sla.solve_triangular(self.LA, C, lower=True)
        s = var + self.sn2
        # Schur complement, which equals sn2 + a nonnegative conditional variance
        cond = np.maximum(s - np.sum(z * z, axis=0), max(self.sn2, 1e-300))
        return 0.5 * np.log(s / cond)


class MIScorer:
    """Vectorized mutual information of candidates with the reference points.

    For one output the score of a candidate ``xi`` is::

        0.5 * log((s2(xi) + sn2) * |S_R + sn2 I| / |S_{R+xi} + sn2 I|)

    with posterior covariances ``S`` given the model's training data. Several
    outputs are conditionally independent, so their scores add.
    """

    def __init__(self, gp, region: Region):
        self.region = region
        if _outputs(gp)[0].dim != region.dim:
            raise ValueError("model and region dimensions differ")
        self._terms = [_OutputTerm(g, region.ref_points) for g in _outputs(gp)]

    def __call__(self, Xi):
        Xi = np.asarray(Xi, dtype=float)
        single = Xi.ndim == 1
        Xi = np.atleast_2d(Xi)
        if not np.all(np.isfinite(Xi)):
            raise ValueError("candidates must be finite")
        R = self.region.ref_points
        total = np.zeros(Xi.shape[0])
        for term in self._terms:
            total += term.score(Xi, R)
        return float(total[0]) if single else total


def mutual_information_single(gp, region: Region, xi) -> float:
    return MIScorer(gp, region)(np.asarray(xi, dtype=float).reshape(-1))


def _compass_search(fun, starts, lower, upper, evals_per_start, init_frac=0.25, tol=1e-9):
    # parallel compass search: poll +-step along each axis, halve on failure
    X = np.clip(starts, lower, upper)
    fX = fun(X)
    S, D = X.shape
    step = np.tile(init_frac * (upper - lower), (S, 1))
    eye = np.eye(D)
    for _ in range(max(1, (evals_per_start - 1) // (2 * D))):
        active = np.max(step, axis=1) > tol * np.max(upper - lower)
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        dirs = np.concatenate([eye, -eye])                # (2D, D)
        P = X[idx, None, :] + dirs[None] * step[idx, None, :]
        P = np.clip(P, lower, upper).reshape(-1, D)
        fP = fun(P).reshape(idx.size, 2 * D)
        best = np.argmax(fP, axis=1)
        gain = fP[np.arange(idx.size), best] > fX[idx]
        moved = idx[gain]
        X[moved] = P.reshape(idx.size, 2 * D, D)[gain, best[gain]]
        fX[moved] = fP[gain, best[gain]]
        step[idx[~gain]] *= 0.5
    return X, fX


def most_informative_point(gp, region: Region, n_starts: int = 16,
                           evals_per_start: int = 200, rng=None,
                           scorer: MIScorer | None = None) -> CandidateScore:
    """Maximize the mutual information over the region box.

    Multi-start derivative-free compass search from the best reference point
    plus ``n_starts`` uniform random points. The result is never worse than the
    best reference point.
    """
    rng = np.random.default_rng() if rng is None else rng
    scorer = MIScorer(gp, region) if scorer is None else scorer
    R = region.ref_points
    ref_scores = scorer(R)
    i_ref = int(np.argmax(ref_scores))
    fallback = CandidateScore(R[i_ref].copy(), float(ref_scores[i_ref]))
    if not np.all(np.isfinite(ref_scores)):
        log.warning("non-finite reference scores; using best finite reference point")
        finite = np.where(np.isfinite(ref_scores), ref_scores, -np.inf)
        i_ref = int(np.argmax(finite))
        return CandidateScore(R[i_ref].copy(), float(finite[i_ref]))

    starts = np.vstack([R[i_ref][None, :], region.sample(n_starts, rng)])
    try:
        X, fX = _compass_search(scorer, starts, region.lower, region.upper, evals_per_start)
    except (np.linalg.LinAlgError, ValueError, FloatingPointError) as err:
        log.warning("informative point search failed (%s); using best reference point", err)
        return fallback
    if not np.all(np.isfinite(fX)):
        log.warning("non-finite scores during search; using best reference point")
        return fallback
    j = int(np.argmax(fX))
    if fX[j] < fallback.mi:
        return fallback
    return CandidateScore(X[j].copy(), float(fX[j]))


def _condition(gp, xi):
    # the posterior covariance does not depend on target values
    if isinstance(gp, MultiGP):
        return gp.add_point(xi, np.zeros(gp.output_dim))
    return gp.add_point(xi, 0.0)


def greedy_batch(gp, region: Region, m: int, candidates=None, rng=None,
                 **search) -> list[CandidateScore]:
    """Select ``m`` points sequentially, conditioning on each pick.

    With ``candidates`` given, each step picks the best not yet chosen member
    of that finite set; otherwise each step runs :func:`most_informative_point` over the box.
    The sum of the returned scores is the joint mutual information of the
    batch with the reference points.
    """
    if m < 1:
        raise ValueError("batch size must be at least 1")
    rng = np.random.default_rng() if rng is None else rng
    if candidates is not None:
        candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
        if m > candidates.shape[0]:
            raise ValueError("batch size exceeds the number of candidates")
        free = np.ones(candidates.shape[0], dtype=bool)
    picks = []
    for _ in range(m):
        scorer = MIScorer(gp, region)
        if candidates is None:
            pick = most_informative_point(gp, region, rng=rng, scorer=scorer, **search)
        else:
            s = np.where(free, scorer(candidates), -np.inf)
            i = int(np.argmax(s))
            free[i] = False
            pick = CandidateScore(candidates[i].copy(), float(s[i]))
        picks.append(pick)
        gp = _condition(gp, pick.point)
    return picks
