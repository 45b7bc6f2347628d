"""
Multi-seed exploration experiments and their CSV outputs.

An experiment runs one or both strategies ``n_runs`` times on one system,
evaluates the model RMSE over the region of interest at regular checkpoints
and aggregates median and quartiles per checkpoint. The RMSE sample set and
every run's random stream are derived from the master seed, so an experiment
is reproducible bit for bit.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .explore import ExplorationConfig, MpcConfig, RunFailed, entropy_run, local_run
from .gp import GaussianProcess, KernelParams, MultiGP
from .records import RunRecord, read_run, write_run
from .systems import SYSTEMS, get_system

__all__ = [
    "ConfigError",
    "ExperimentError",
    "ExperimentConfig",
    "ExperimentReport",
    "load_config",
    "parse_config_text",
    "rmse_eval",
    "rmse_samples",
    "model_from_record",
    "evaluate_record",
    "aggregate",
    "write_aggregate",
    "run_experiment",
    "OUT_ENV",
]

log = logging.getLogger(__name__)

OUT_ENV = "LOCAL_EXPLORE_OUT"
STRATEGIES = ("local", "entropy")
DEFAULT_STEPS = {"toy": 200, "surface": 400, "pendulum": 400, "cartpole": 400}
AGGREGATE_COLUMNS = ["checkpoint", "strategy", "median", "q25", "q75"]
MIN_SUCCESS = 0.8

# stream ids appended to the master seed; run streams use the run index
_SAMPLE_STREAM = 2 ** 32 - 1
_GRID_STREAM = 2 ** 32 - 2


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class ExperimentError(RuntimeError):
    """Too many runs of an experiment failed."""


@dataclass
class ExperimentConfig:
    system: str = "toy"
    strategy: str = "local"           # local, entropy or both
    total_steps: int = 0              # 0 selects the system default
    n_runs: int = 50
    n_rmse_samples: int = 500
    checkpoint_every: int = 10
    horizon: int = 10
    apply_count: int = 7
    q_policy: str = "auto"            # "auto" or a comma-separated diagonal
    cem_population: int = 64
    cem_elites: int = 8
    cem_iterations: int = 10
    cem_polish: int = 10
    mi_starts: int = 16
    mi_evals: int = 200
    grid_per_dim: int = 5
    grid_cap: int = 625
    train_every: int = 0              # 0 retrains at every replan
    train_budget: int = 50
    entropy_grid: int = 21
    x0_std_frac: float = 0.1
    noise_std: float = -1.0           # negative keeps the system default
    seed: int = 0
    out_dir: str = "results"
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.system not in SYSTEMS:
            raise ConfigError(f"unknown system {self.system!r}; valid systems: "
                              f"{', '.join(SYSTEMS)}")
        if self.strategy not in STRATEGIES + ("both",):
            raise ConfigError(f"unknown strategy {self.strategy!r}; use local, entropy or both")
        if self.n_runs < 1 or self.n_rmse_samples < 1:
            raise ConfigError("n_runs and n_rmse_samples must be at least 1")
        if self.total_steps < 0 or self.checkpoint_every < 1:
            raise ConfigError("total_steps must be nonnegative and checkpoint_every positive")
        if not 1 <= self.apply_count <= self.horizon:
            raise ConfigError("apply_count must lie in [1, horizon]")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        self.q_matrix()

    @property
    def steps(self) -> int:
        return self.total_steps or DEFAULT_STEPS[self.system]

    @property
    def strategies(self) -> tuple:
        return STRATEGIES if self.strategy == "both" else (self.strategy,)

    def q_matrix(self):
        if self.q_policy.strip() == "auto":
            return "auto"
        try:
            diag = [float(v) for v in self.q_policy.split(",")]
        except ValueError:
            raise ConfigError(f"q_policy must be 'auto' or a diagonal, got {self.q_policy!r}")
        if any(v < 0 for v in diag):
            raise ConfigError("Q diagonal must be nonnegative")
        return np.diag(diag)

    def make_system(self):
        opts = {} if self.noise_std < 0 else {"noise_std": self.noise_std}
        return get_system(self.system, **opts)

    def make_region(self, system=None):
        system = self.make_system() if system is None else system
        rng = np.random.default_rng([self.seed, _GRID_STREAM])
        return system.make_region(self.grid_per_dim, self.grid_cap, rng)

    def exploration(self) -> ExplorationConfig:
        mpc = MpcConfig(horizon=self.horizon, apply_count=self.apply_count, Q=self.q_matrix(),
                        population=self.cem_population, elites=self.cem_elites,
                        iterations=self.cem_iterations,
                        polish_iterations=self.cem_polish)
        return ExplorationConfig(
            mpc=mpc, mi_starts=self.mi_starts, mi_evals=self.mi_evals,
            train_every=self.train_every or None, train_budget=self.train_budget,
            entropy_grid=self.entropy_grid, checkpoint_every=self.checkpoint_every,
            x0_std_frac=self.x0_std_frac)

    def to_mapping(self) -> dict:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_mapping(cls, values: dict, base: "ExperimentConfig | None" = None):
        """Build a config from string values, e.g. a parsed config file."""
        types = {f.name: f.type for f in fields(cls)}
        current = asdict(base) if base is not None else {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kind = types[key]
            try:
                if kind == "int":
                    current[key] = int(raw)
                elif kind == "float":
                    current[key] = float(raw)
                else:
                    current[key] = str(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"invalid value {raw!r} for {key}") from None
        return cls(**current)


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        values[key.strip()] = value.strip()
    return values


def load_config(path, base=None) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    return ExperimentConfig.from_mapping(parse_config_text(text), base)


def rmse_samples(system, n: int, seed: int) -> np.ndarray:
    """Uniform samples of the region box, shared by all runs of an experiment."""
    rng = np.random.default_rng([seed, _SAMPLE_STREAM])
    return rng.uniform(system.region_lower, system.region_upper, size=(n, system.dim))


def rmse_eval(gp, system, samples) -> float:
    """Root-mean-square error of the posterior mean against the true residual."""
    S = np.atleast_2d(np.asarray(samples, dtype=float))
    if S.shape[0] == 0 or S.size == 0:
        raise ValueError("RMSE needs at least one sample")
    if S.shape[1] != system.dim:
        raise ValueError(f"samples must have {system.dim} columns")
    tol = 1e-12 * np.maximum(1.0, np.abs(system.region_upper - system.region_lower))
    if np.any(S < system.region_lower - tol) or np.any(S > system.region_upper + tol):
        raise ValueError("RMSE samples must lie inside the region of interest")
    mu = gp.mean(S) if isinstance(gp, MultiGP) else np.asarray(gp.mean(S)).reshape(-1, 1)
    g = np.asarray(system.target(S[:, :system.d_x], S[:, system.d_x:])).reshape(mu.shape)
    return float(np.sqrt(np.mean((mu - g) ** 2)))


class _Evaluator:
    # picklable checkpoint callback
    def __init__(self, system, samples):
        self.system = system
        self.samples = samples

    def __call__(self, gp):
        return rmse_eval(gp, self.system, self.samples)


def _run_one(cfg: ExperimentConfig, strategy: str, run_index: int, out_dir: Path):
    system = cfg.make_system()
    region = cfg.make_region(system)
    evaluate = _Evaluator(system, rmse_samples(system, cfg.n_rmse_samples, cfg.seed))
    fn = local_run if strategy == "local" else entropy_run
    path = out_dir / f"{strategy}_run_{run_index:03d}.csv"
    try:
        rec = fn(system, region, cfg.exploration(), [cfg.seed, run_index], cfg.steps,
                 evaluate=evaluate, run_index=run_index, meta=cfg.to_mapping())
    except RunFailed as err:
        rec = err.record
        log.warning("%s run %d failed: %s", strategy, run_index, rec.error)
    rec.seed = cfg.seed
    write_run(rec, path)
    return rec, path


def model_from_record(record: RunRecord) -> MultiGP:
    """Rebuild the final model of a run from its transitions and hyperparameters."""
    cfg = ExperimentConfig.from_mapping(record.meta)
    system = cfg.make_system()
    X = record.augmented()
    Y = record.next_states - system.known_f(record.states, record.inputs)
    D = record.dim
    dims = [GaussianProcess(KernelParams(h[0], h[1:D + 1]), h[D + 1], X, Y[:, d])
            for d, h in enumerate(record.final_hyper)]
    return MultiGP(dims)


def evaluate_record(record: RunRecord) -> float:
    """Final-model RMSE recomputed from a persisted run."""
    cfg = ExperimentConfig.from_mapping(record.meta)
    system = cfg.make_system()
    samples = rmse_samples(system, cfg.n_rmse_samples, cfg.seed)
    return rmse_eval(model_from_record(record), system, samples)


def aggregate(records_by_strategy: dict) -> list[dict]:
    """Median and quartiles of the RMSE at every checkpoint, per strategy."""
    rows = []
    for strategy, records in records_by_strategy.items():
        good = [r for r in records if r.ok]
        if not good:
            continue
        cps = good[0].checkpoints
        if any(not np.array_equal(r.checkpoints, cps) for r in good):
            raise ExperimentError("runs disagree on checkpoint times")
        R = np.array([r.rmse for r in good])
        q25, med, q75 = np.percentile(R, [25, 50, 75], axis=0)
        for i, c in enumerate(cps):
            rows.append({"checkpoint": int(c), "strategy": strategy, "median": float(med[i]),
                         "q25": float(q25[i]), "q75": float(q75[i])})
    return rows


def write_aggregate(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_COLUMNS)
        for r in rows:
            w.writerow([r["checkpoint"], r["strategy"], repr(r["median"]), repr(r["q25"]),
                        repr(r["q75"])])
    return path


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    records: dict = field(default_factory=dict)     # strategy -> list of RunRecord
    run_paths: list = field(default_factory=list)
    aggregate_rows: list = field(default_factory=list)
    aggregate_path: Path | None = None

    def final_medians(self) -> dict:
        out = {}
        for r in self.aggregate_rows:
            out[r["strategy"]] = r["median"]   # rows are ordered by checkpoint
        return out


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Execute all runs, write per-run CSVs and the aggregate CSV."""
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(s, i) for s in cfg.strategies for i in range(cfg.n_runs)]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_run_one, cfg, s, i, out_dir) for s, i in jobs]
            results = [f.result() for f in futures]
    else:
        results = [_run_one(cfg, s, i, out_dir) for s, i in jobs]

    report = ExperimentReport(cfg)
    for (strategy, _), (rec, path) in zip(jobs, results):
        report.records.setdefault(strategy, []).append(rec)
        report.run_paths.append(path)
    for strategy, recs in report.records.items():
        ok = sum(r.ok for r in recs)
        if ok < len(recs):
            log.warning("%d of %d %s runs failed and are excluded", len(recs) - ok,
                        len(recs), strategy)
        if ok < MIN_SUCCESS * len(recs):
            raise ExperimentError(f"only {ok} of {len(recs)} {strategy} runs succeeded")
    report.aggregate_rows = aggregate(report.records)
    report.aggregate_path = write_aggregate(report.aggregate_rows, out_dir / "aggregate.csv")
    return report


def out_dir_from_env(default: str) -> str:
    return os.environ.get(OUT_ENV) or default


def read_runs(paths) -> list[RunRecord]:
    return [read_run(p) for p in paths]
