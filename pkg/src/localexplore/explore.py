"""
Exploration strategies: localized active learning and the entropy baseline.

The localized strategy alternates two decoupled problems. It first searches
the region of interest for the single most informative augmented state, then
solves a finite-horizon tracking MPC under the mean GP dynamics, applies the
first few inputs and adds every measured transition to the model.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .gp import DEFAULT_BOUNDS, KernelParams, MultiGP, train_hyperparameters
from .info import MIScorer, Region, most_informative_point
from .records import RunRecord

__all__ = [
    "RolloutDivergenceError",
    "RunFailed",
    "MpcConfig",
    "ExplorationConfig",
    "MpcResult",
    "q_from_kernel",
    "rollout_mean",
    "mpc_cost",
    "mpc_solve",
    "initial_model",
    "local_run",
    "entropy_run",
    "entropy_objective",
]

log = logging.getLogger(__name__)


class RolloutDivergenceError(FloatingPointError):
    """Mean-model rollout produced a non-finite state."""


class RunFailed(RuntimeError):
    """An exploration run stopped early; ``record`` holds the steps taken so far."""

    def __init__(self, message, record):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class MpcConfig:
    """Tracking MPC and its cross-entropy shooting optimizer.

    ``Q`` is either ``"auto"`` (weights derived from the kernel
    hyperparameters) or a symmetric PSD matrix over the augmented state.
    Input bounds default to the system's input box.
    """

    horizon: int = 10
    apply_count: int = 7
    Q: object = "auto"
    population: int = 64
    elites: int = 8
    iterations: int = 10
    polish_iterations: int = 10
    init_std_frac: float = 0.5
    input_lower: object = None
    input_upper: object = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if not 1 <= self.apply_count <= self.horizon:
            raise ValueError("apply_count must lie in [1, horizon]")
        if not 1 <= self.elites <= self.population:
            raise ValueError("elites must lie in [1, population]")
        if self.iterations < 0 or self.polish_iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if not (isinstance(self.Q, str) and self.Q == "auto"):
            Q = np.array(self.Q, dtype=float)
            if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or not np.allclose(Q, Q.T):
                raise ValueError("Q must be a symmetric square matrix")
            if np.min(np.linalg.eigvalsh(Q)) < -1e-12 * max(1.0, np.abs(Q).max()):
                raise ValueError("Q must be positive semidefinite")
            object.__setattr__(self, "Q", Q)

    def bounds(self, d_u=None):
        if self.input_lower is None or self.input_upper is None:
            raise ValueError("MPC input bounds are not set")
        lo = np.asarray(self.input_lower, dtype=float).reshape(-1)
        hi = np.asarray(self.input_upper, dtype=float).reshape(-1)
        if d_u is not None and lo.size != d_u:
            raise ValueError(f"input bounds have {lo.size} entries, expected {d_u}")
        return lo, hi


@dataclass(frozen=True)
class ExplorationConfig:
    mpc: MpcConfig = field(default_factory=MpcConfig)
    mi_starts: int = 16
    mi_evals: int = 200
    train_every: int | None = None   # steps between retrains; None means every replan
    train_budget: int = 50
    min_train_points: int = 5
    param_bounds: tuple = DEFAULT_BOUNDS
    init_signal_variance: float = 1.0
    init_lengthscale_frac: float = 0.5
    init_noise_variance: float | None = None
    entropy_grid: int = 21
    checkpoint_every: int = 10
    x0_std_frac: float = 0.1

    @property
    def retrain_interval(self) -> int:
        return self.mpc.apply_count if self.train_every is None else self.train_every


@dataclass
class MpcResult:
    inputs: np.ndarray          # (horizon, d_u)
    cost: float
    candidate_costs: np.ndarray
    baseline_cost: float        # cost of the constant mid-box sequence


def _as_multi(gp) -> MultiGP:
    return gp if isinstance(gp, MultiGP) else MultiGP([gp])


def q_from_kernel(gp) -> np.ndarray:
    """Diagonal weights ``sum_d sigma_d * diag(l_d**-2)`` from the kernels.

    ``sigma_d`` is the kernel standard deviation of output ``d``.
    """
    Q = np.zeros((_as_multi(gp).input_dim,) * 2)
    for g in _as_multi(gp).dims:
        Q += np.sqrt(g.kernel.signal_variance) * np.diag(g.kernel.lengthscales ** -2.0)
    return Q


def _rollout_batch(gp: MultiGP, f, x0, U) -> np.ndarray:
    P, N, _ = U.shape
    X = np.empty((P, N, x0.size))
    x = np.broadcast_to(x0, (P, x0.size))
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(N):
            u = U[:, k]
            alive = np.all(np.isfinite(x), axis=1)
            mu = np.full(x.shape, np.nan)
            if np.any(alive):
                mu[alive] = gp.mean(np.hstack([x[alive], u[alive]]))
            x = f(x, u) + mu
            X[:, k] = x
    return X


def rollout_mean(gp, f, x0, inputs) -> np.ndarray:
    """States ``x_1..x_N`` predicted by ``x+ = f(x, u) + mu(x, u)``."""
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    U = np.asarray(inputs, dtype=float)
    U = U.reshape(U.shape[0], -1)
    X = _rollout_batch(_as_multi(gp), f, x0, U[None])[0]
    if not np.all(np.isfinite(X)):
        raise RolloutDivergenceError("mean rollout diverged")
    return X


def _stage_inputs(U):
    # stage tau pairs x_tau with u_tau; the last stage reuses the final input
    return np.concatenate([U[:, 1:], U[:, -1:]], axis=1)


def _costs(gp, f, x0, U, target, Q):
    X = _rollout_batch(gp, f, x0, U)
    diff = target - np.concatenate([X, _stage_inputs(U)], axis=-1)
    with np.errstate(over="ignore", invalid="ignore"):
        c = np.einsum("pnd,de,pne->p", diff, Q, diff)
    return np.where(np.isfinite(c), c, np.inf)


def mpc_cost(gp, f, x0, inputs, target, Q) -> float:
    """Tracking cost of one input sequence under the mean dynamics."""
    U = np.asarray(inputs, dtype=float)
    U = U.reshape(1, U.shape[0], -1)
    return float(_costs(_as_multi(gp), f, np.asarray(x0, dtype=float).reshape(-1), U,
                        np.asarray(target, dtype=float), np.asarray(Q, dtype=float))[0])


def _polish(cost, U, c, lo, hi, iterations, history):
    # coordinate pattern search around the best sampled sequence; resolves
    # weakly weighted entries (late inputs) that the sampler leaves unconverged
    N, d_u = U.shape
    M = N * d_u
    step = np.broadcast_to(0.25 * (hi - lo), (N, d_u)).reshape(M).copy()
    lo_f, hi_f = np.tile(lo, N), np.tile(hi, N)
    u = U.reshape(M).copy()
    for _ in range(iterations):
        if np.max(step) <= 1e-9 * np.max(hi - lo):
            break
        trial = np.concatenate([u + np.diag(step), u - np.diag(step)])
        trial = np.clip(trial, lo_f, hi_f)
        tc = cost(trial.reshape(2 * M, N, d_u))
        history.append(tc)
        both = tc.reshape(2, M)
        side = np.argmin(both, axis=0)
        gain = both[side, np.arange(M)] < c
        if not np.any(gain):
            step *= 0.5
            continue
        j = int(np.argmin(tc))
        best_u, best_c = trial[j], float(tc[j])
        if np.count_nonzero(gain) > 1:
            joint = u.copy()
            joint[gain] = trial[side[gain] * M + np.flatnonzero(gain), np.flatnonzero(gain)]
            jc = float(cost(joint.reshape(1, N, d_u))[0])
            history.append(np.array([jc]))
            if jc < best_c:
                best_u, best_c = joint, jc
        u, c = best_u.copy(), best_c
        step[~gain] *= 0.5
    return u.reshape(N, d_u), c


def mpc_solve(gp, f, x, target, cfg: MpcConfig, rng=None, warm=None, Q=None) -> MpcResult:
    """Cross-entropy shooting for the tracking MPC.

    Samples are drawn from a Gaussian over input sequences and clipped to the
    input box before evaluation, while the sampling distribution itself is
    refit on the unclipped elites; saturated inputs are hit exactly. A short
    coordinate pattern search then polishes the best sample. The returned
    sequence is the cheapest one evaluated, which is never worse
    than the constant mid-box sequence or the warm start.
    """
    gp = _as_multi(gp)
    rng = np.random.default_rng() if rng is None else rng
    x = np.asarray(x, dtype=float).reshape(-1)
    target = np.asarray(target, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ValueError("current state must be finite")
    d_u = gp.input_dim - x.size
    lo, hi = cfg.bounds(d_u)
    if Q is None:
        Q = q_from_kernel(gp) if isinstance(cfg.Q, str) else cfg.Q
    N, P, E = cfg.horizon, cfg.population, cfg.elites

    mid = np.broadcast_to(0.5 * (lo + hi), (N, d_u))
    seeds = [mid]
    if warm is not None:
        seeds.append(np.clip(np.asarray(warm, dtype=float).reshape(N, d_u), lo, hi))
    seeds = np.stack(seeds)
    seed_costs = _costs(gp, f, x, seeds, target, Q)
    baseline = float(seed_costs[0])
    i = int(np.argmin(seed_costs))
    best_u, best_cost = seeds[i].copy(), float(seed_costs[i])
    all_costs = [seed_costs]

    mean = seeds[-1].copy()
    std = np.broadcast_to(cfg.init_std_frac * (hi - lo), (N, d_u)).copy()
    for _ in range(cfg.iterations):
        samples = mean + std * rng.standard_normal((P, N, d_u))
        samples[0] = mean
        cand = np.clip(samples, lo, hi)
        costs = _costs(gp, f, x, cand, target, Q)
        all_costs.append(costs)
        j = int(np.argmin(costs))
        if costs[j] < best_cost:
            best_u, best_cost = cand[j].copy(), float(costs[j])
        elite = samples[np.argsort(costs, kind="stable")[:E]]
        mean = elite.mean(axis=0)
        std = elite.std(axis=0)

    if np.isfinite(best_cost) and cfg.polish_iterations:
        best_u, best_cost = _polish(lambda U: _costs(gp, f, x, U, target, Q), best_u, best_cost,
                                    lo, hi, cfg.polish_iterations, all_costs)
    if not np.isfinite(best_cost):
        log.warning("MPC found no finite-cost sequence; applying mid-box inputs")
        best_u = mid.copy()
    return MpcResult(best_u, best_cost, np.concatenate(all_costs), baseline)


def initial_model(system, cfg: ExplorationConfig) -> MultiGP:
    half = 0.5 * (system.region_upper - system.region_lower)
    ls = np.where(half > 0, cfg.init_lengthscale_frac * half, 1.0)
    lo_b = cfg.param_bounds[0]
    kernels, noises = [], []
    for d in range(system.d_x):
        kernels.append(KernelParams(cfg.init_signal_variance, ls))
        if cfg.init_noise_variance is not None:
            noises.append(cfg.init_noise_variance)
        else:
            noises.append(max(float(system.noise_std[d]) ** 2, lo_b))
    return MultiGP.empty(kernels, noises)


def _hyper_array(gp: MultiGP) -> np.ndarray:
    return np.array([np.r_[g.kernel.signal_variance, g.kernel.lengthscales, g.noise_variance]
                     for g in gp.dims])


def entropy_objective(gp, x, U) -> np.ndarray:
    """Predicted differential entropy of the next transition for each input row."""
    gp = _as_multi(gp)
    U = np.atleast_2d(U)
    Xi = np.hstack([np.broadcast_to(np.asarray(x, dtype=float), (U.shape[0], np.size(x))), U])
    total = np.zeros(U.shape[0])
    for g in gp.dims:
        _, var = g.posterior(Xi)
        total += 0.5 * np.log(2 * np.pi * np.e * (g.noise_variance + var))
    return total


def _input_grid(lo, hi, per_dim):
    axes = [np.linspace(a, b, per_dim) for a, b in zip(lo, hi)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(lo))


class _Recorder:
    # accumulates per-step rows and converts them into a RunRecord

    def __init__(self, system, strategy, seed, run_index, n_ref, initial_size, meta):
        self.head = dict(system=system.name, strategy=strategy, seed=seed,
                         run_index=run_index, d_x=system.d_x, d_u=system.d_u,
                         n_ref=n_ref, initial_size=initial_size, meta=dict(meta or {}))
        self.rows = {k: [] for k in ("states", "inputs", "next_states", "is_replan",
                                     "xi_star", "score", "score_current", "n_data", "hyper")}
        self.checkpoints, self.rmse = [], []
        self.timings = {"select": 0.0, "mpc": 0.0, "train": 0.0, "total": 0.0}
        self.final_hyper = None

    def add(self, **row):
        for k, v in row.items():
            self.rows[k].append(v)

    def build(self, error=""):
        d_x, d_u = self.head["d_x"], self.head["d_u"]
        rec = RunRecord.empty(**{k: self.head[k] for k in
                                 ("system", "strategy", "seed", "run_index", "d_x", "d_u")})
        if self.rows["states"]:
            rec.states = np.array(self.rows["states"]).reshape(-1, d_x)
            rec.inputs = np.array(self.rows["inputs"]).reshape(-1, d_u)
            rec.next_states = np.array(self.rows["next_states"]).reshape(-1, d_x)
            rec.is_replan = np.array(self.rows["is_replan"], dtype=bool)
            rec.xi_star = np.array(self.rows["xi_star"]).reshape(-1, d_x + d_u)
            rec.score = np.array(self.rows["score"], dtype=float)
            rec.score_current = np.array(self.rows["score_current"], dtype=float)
            rec.n_data = np.array(self.rows["n_data"], dtype=int)
            rec.hyper = np.array(self.rows["hyper"])
        rec.checkpoints = np.array(self.checkpoints, dtype=int)
        rec.rmse = np.array(self.rmse, dtype=float)
        if self.final_hyper is not None:
            rec.final_hyper = self.final_hyper
        rec.n_ref = self.head["n_ref"]
        rec.initial_size = self.head["initial_size"]
        rec.timings = dict(self.timings)
        rec.meta = self.head["meta"]
        rec.error = error
        return rec


def _rngs(seed):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def _sample_x0(system, cfg, rng):
    return system.state_center + cfg.x0_std_frac * system.state_halfwidth \
        * rng.standard_normal(system.d_x)


def _run(strategy, system, region: Region, cfg: ExplorationConfig, seed, total_steps,
         x0=None, evaluate=None, gp=None, run_index=0, meta=None) -> RunRecord:
    if total_steps < 1:
        raise ValueError("total_steps must be at least 1")
    if region.dim != system.dim:
        raise ValueError("region dimension does not match the system")
    rng_x0, rng_noise, rng_select, rng_mpc = _rngs(seed)
    mpc_cfg = cfg.mpc
    if mpc_cfg.input_lower is None or mpc_cfg.input_upper is None:
        mpc_cfg = replace(mpc_cfg, input_lower=system.input_lower,
                          input_upper=system.input_upper)
    lo, hi = mpc_cfg.bounds(system.d_u)
    x = _sample_x0(system, cfg, rng_x0) if x0 is None else np.asarray(x0, dtype=float)
    gp = initial_model(system, cfg) if gp is None else _as_multi(gp)
    n0 = gp.n
    seed_label = seed if isinstance(seed, (int, np.integer)) else run_index
    rec = _Recorder(system, strategy, int(seed_label), run_index, region.n_ref, n0, meta)
    u_grid = _input_grid(lo, hi, cfg.entropy_grid) if strategy == "entropy" else None
    cadence = max(1, cfg.checkpoint_every)

    def checkpoint(t):
        if evaluate is not None:
            rec.checkpoints.append(t)
            rec.rmse.append(float(evaluate(gp)))

    t_start = time.perf_counter()
    last_train = None
    plan, k, target, score, current = None, 0, None, np.nan, np.nan
    try:
        checkpoint(0)
        for t in range(total_steps):
            replan = strategy == "entropy" or t % mpc_cfg.apply_count == 0
            if replan:
                due = last_train is None or t - last_train >= cfg.retrain_interval
                if due and gp.n >= max(2, cfg.min_train_points) and cfg.train_budget > 0:
                    tic = time.perf_counter()
                    gp = train_hyperparameters(gp, cfg.train_budget, cfg.param_bounds)
                    rec.timings["train"] += time.perf_counter() - tic
                    last_train = t

            if strategy == "local" and replan:
                tic = time.perf_counter()
                scorer = MIScorer(gp, region)
                best = most_informative_point(gp, region, cfg.mi_starts, cfg.mi_evals,
                                              rng_select, scorer)
                rec.timings["select"] += time.perf_counter() - tic
                tic = time.perf_counter()
                warm = None
                if plan is not None:
                    warm = np.vstack([plan[mpc_cfg.apply_count:],
                                      np.repeat(plan[-1:], mpc_cfg.apply_count, axis=0)])
                plan = mpc_solve(gp, system.known_f, x, best.point, mpc_cfg, rng_mpc, warm).inputs
                rec.timings["mpc"] += time.perf_counter() - tic
                k = 0
                target, score = best.point, best.mi
                current = scorer(np.r_[x, plan[0]])
            elif strategy == "entropy":
                tic = time.perf_counter()
                obj = entropy_objective(gp, x, u_grid)
                j = int(np.argmax(obj))
                plan, k = u_grid[j:j + 1], 0
                target, score, current = np.full(system.dim, np.nan), float(obj[j]), np.nan
                rec.timings["select"] += time.perf_counter() - tic

            u = plan[k]
            k += 1
            if not system.inputs_valid(u):
                raise RuntimeError(f"input {u} outside the admissible box")
            hyper = _hyper_array(gp)
            x_next = system.step(x, u, rng_noise)
            xi = np.r_[x, u]
            gp = gp.add_point(xi, x_next - system.known_f(x, u))
            if gp.n != n0 + t + 1:
                raise RuntimeError(f"model has {gp.n} points after {t + 1} steps")
            rec.add(states=x.copy(), inputs=np.array(u, dtype=float), next_states=x_next,
                    is_replan=replan, xi_star=np.array(target, dtype=float), score=score,
                    score_current=current if replan else np.nan, n_data=gp.n, hyper=hyper)
            x = x_next
            if (t + 1) % cadence == 0 or t + 1 == total_steps:
                checkpoint(t + 1)
    except Exception as err:
        rec.timings["total"] = time.perf_counter() - t_start
        rec.final_hyper = _hyper_array(gp)
        raise RunFailed(f"{strategy} run failed: {err}", rec.build(error=repr(err))) from err
    rec.timings["total"] = time.perf_counter() - t_start
    rec.final_hyper = _hyper_array(gp)
    return rec.build()


def local_run(system, region: Region, cfg: ExplorationConfig, seed, total_steps,
              **kw) -> RunRecord:
    """Run localized active learning for ``total_steps`` steps.

    ``seed`` fully determines the run (initial state, process noise and both
    optimizers). ``evaluate`` maps the current model to its RMSE and is
    called at every checkpoint. On failure :class:`RunFailed` carries the
    partial record.
    """
    return _run("local", system, region, cfg, seed, total_steps, **kw)


def entropy_run(system, region: Region, cfg: ExplorationConfig, seed, total_steps,
                **kw) -> RunRecord:
    """Greedy one-step entropy maximization over a grid of admissible inputs."""
    return _run("entropy", system, region, cfg, seed, total_steps, **kw)
