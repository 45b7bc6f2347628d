import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from localexplore import harness
from localexplore.explore import RunFailed
from localexplore.gp import GaussianProcess, KernelParams, MultiGP
from localexplore.harness import (
    AGGREGATE_COLUMNS,
    ConfigError,
    ExperimentConfig,
    ExperimentError,
    aggregate,
    evaluate_record,
    load_config,
    parse_config_text,
    rmse_eval,
    rmse_samples,
    run_experiment,
)
from localexplore.records import RunRecord, read_run, write_run
from localexplore.systems import make_surface, make_toy

FAST = dict(cem_population=16, cem_elites=4, cem_iterations=3, cem_polish=2, mi_starts=2,
            mi_evals=30, train_budget=10, n_rmse_samples=100)


def fast_config(tmp_path, **kw):
    values = dict(FAST, out_dir=str(tmp_path))
    values.update(kw)
    return ExperimentConfig(**values)


class OffsetModel:
    """Posterior mean equal to the true residual plus a constant."""

    def __init__(self, system, c):
        self.system, self.c = system, c

    def mean(self, S):
        d = self.system.d_x
        return np.asarray(self.system.true_g(S[:, :d], S[:, d:])).reshape(len(S), -1) + self.c


def test_rmse_of_exact_model_is_zero():
    toy = make_toy()
    assert rmse_eval(OffsetModel(toy, 0.0), toy, rmse_samples(toy, 50, 0)) == 0.0


def test_rmse_of_constant_offset():
    surf = make_surface()
    S = rmse_samples(surf, 200, 3)
    assert rmse_eval(OffsetModel(surf, -0.37), surf, S) == pytest.approx(0.37, rel=1e-12)


def test_rmse_of_prior_is_root_mean_square_of_g():
    toy = make_toy()
    S = rmse_samples(toy, 500, 1)
    gp = MultiGP.empty([KernelParams(1.0, [1.0, 1.0])], [0.01])
    g = toy.true_g(S[:, 0], S[:, 1])
    assert rmse_eval(gp, toy, S) == pytest.approx(math.sqrt(sum(v * v for v in g) / len(g)),
                                                  rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_rmse_permutation_invariant(seed):
    toy = make_toy()
    rng = np.random.default_rng(seed)
    S = rmse_samples(toy, 100, seed)
    X = rng.uniform(toy.region_lower, toy.region_upper, (10, 2))
    gp = MultiGP([GaussianProcess(KernelParams(1.0, [1.0, 0.5]), 0.01, X, rng.normal(size=10))])
    assert rmse_eval(gp, toy, S[rng.permutation(100)]) == pytest.approx(rmse_eval(gp, toy, S),
                                                                        rel=1e-12)


def test_rmse_rejects_bad_samples():
    toy = make_toy()
    gp = MultiGP.empty([KernelParams(1.0, [1.0, 1.0])], [0.01])
    with pytest.raises(ValueError):
        rmse_eval(gp, toy, np.zeros((0, 2)))
    with pytest.raises(ValueError):
        rmse_eval(gp, toy, [[5.0, 0.0]])


def test_rmse_samples_reproducible_and_inside():
    surf = make_surface()
    a, b = rmse_samples(surf, 500, 9), rmse_samples(surf, 500, 9)
    np.testing.assert_array_equal(a, b)
    assert surf.region.contains(a)
    assert not np.array_equal(a, rmse_samples(surf, 500, 10))


def sorted_quantile(values, p):
    """Linear interpolation between order statistics at rank (n - 1) p."""
    s = sorted(values)
    h = (len(s) - 1) * p
    lo = int(math.floor(h))
    hi = min(lo + 1, len(s) - 1)
    t = h - lo
    a, b = s[lo], s[hi]
    # evaluate from the nearer end, as numpy does
    return b - (b - a) * (1 - t) if t >= 0.5 else a + (b - a) * t


def fake_record(rmse, strategy="local", checkpoints=(0, 10, 20)):
    rec = RunRecord.empty("toy", strategy, 0, 0, 1, 1)
    rec.checkpoints = np.array(checkpoints)
    rec.rmse = np.asarray(rmse, dtype=float)
    return rec


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 50), seed=st.integers(0, 2 ** 31))
def test_aggregate_matches_sort_oracle(n, seed):
    rng = np.random.default_rng(seed)
    R = rng.lognormal(size=(n, 3))
    rows = aggregate({"local": [fake_record(r) for r in R]})
    assert [r["checkpoint"] for r in rows] == [0, 10, 20]
    for j, row in enumerate(rows):
        col = list(R[:, j])
        assert row["median"] == sorted_quantile(col, 0.5)
        assert row["q25"] == sorted_quantile(col, 0.25)
        assert row["q75"] == sorted_quantile(col, 0.75)


def test_aggregate_excludes_failed_runs():
    good = [fake_record([1.0, 0.5, 0.2]), fake_record([3.0, 1.5, 0.4])]
    bad = fake_record([100.0, 100.0, 100.0])
    bad.error = "RuntimeError('x')"
    rows = aggregate({"local": good + [bad]})
    assert rows[-1]["median"] == pytest.approx(0.3)


def test_aggregate_checkpoint_mismatch():
    with pytest.raises(ExperimentError):
        aggregate({"local": [fake_record([1, 2, 3]), fake_record([1, 2], checkpoints=(0, 10))]})


def test_config_text_parsing(tmp_path):
    text = "# comment\nsystem = surface   # trailing\n\nn_runs=3\nq_policy = 1,2,0.5,0.5\n"
    assert parse_config_text(text) == {"system": "surface", "n_runs": "3",
                                       "q_policy": "1,2,0.5,0.5"}
    path = tmp_path / "c.cfg"
    path.write_text(text)
    cfg = load_config(path)
    assert cfg.system == "surface" and cfg.n_runs == 3 and cfg.steps == 400
    np.testing.assert_array_equal(cfg.q_matrix(), np.diag([1, 2, 0.5, 0.5]))


@pytest.mark.parametrize("text", ["nonsense", "bogus_key = 1", "n_runs = many",
                                  "system = nosuch", "n_runs = 0", "apply_count = 11",
                                  "q_policy = 1,-1"])
def test_config_errors(tmp_path, text):
    path = tmp_path / "c.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_config_round_trips_through_mapping():
    cfg = ExperimentConfig(system="pendulum", n_runs=4, noise_std=0.02, x0_std_frac=0.2)
    assert ExperimentConfig.from_mapping(cfg.to_mapping()) == cfg


def test_default_steps():
    assert ExperimentConfig(system="toy").steps == 200
    assert ExperimentConfig(system="cartpole").steps == 400
    assert ExperimentConfig(system="toy", total_steps=30).steps == 30


def test_record_round_trip(tmp_path):
    cfg = fast_config(tmp_path, total_steps=12, n_runs=1, strategy="both")
    report = run_experiment(cfg)
    for path in report.run_paths:
        rec = read_run(path)
        again = tmp_path / "again.csv"
        write_run(rec, again)
        assert read_run(again) == rec
        assert again.read_bytes() == path.read_bytes()
    local = report.records["local"][0]
    assert read_run(report.run_paths[0]) == local


def test_two_run_bookkeeping(tmp_path):
    cfg = fast_config(tmp_path, total_steps=10, n_runs=2, strategy="both")
    report = run_experiment(cfg)
    names = sorted(p.name for p in tmp_path.glob("*_run_*.csv"))
    assert names == ["entropy_run_000.csv", "entropy_run_001.csv",
                     "local_run_000.csv", "local_run_001.csv"]
    lines = (tmp_path / "aggregate.csv").read_text().splitlines()
    assert lines[0].split(",") == AGGREGATE_COLUMNS
    assert len(lines) == 1 + 2 * 2          # checkpoints 0 and 10 per strategy
    for rec in report.records["local"]:
        assert rec.n_steps == 10
        np.testing.assert_array_equal(rec.n_data, np.arange(1, 11))
        assert np.all(rec.rmse >= 0)
    # distinct runs start from different initial states
    a, b = report.records["local"]
    assert a.states[0, 0] != b.states[0, 0]


def test_checkpoint_cadence_truncates(tmp_path):
    cfg = fast_config(tmp_path, total_steps=25, n_runs=1, checkpoint_every=10)
    rec = run_experiment(cfg).records["local"][0]
    np.testing.assert_array_equal(rec.checkpoints, [0, 10, 20, 25])


def test_aggregate_is_byte_identical(tmp_path):
    outs = []
    for name in ("a", "b"):
        cfg = fast_config(tmp_path / name, total_steps=15, n_runs=2, strategy="both", seed=4)
        outs.append(run_experiment(cfg).aggregate_path.read_bytes())
    assert outs[0] == outs[1]


def test_parallel_workers_match_serial(tmp_path):
    a = run_experiment(fast_config(tmp_path / "s", total_steps=8, n_runs=2, workers=1))
    b = run_experiment(fast_config(tmp_path / "p", total_steps=8, n_runs=2, workers=2))
    assert a.aggregate_path.read_bytes() == b.aggregate_path.read_bytes()


def test_eval_reproduces_stored_rmse(tmp_path):
    cfg = fast_config(tmp_path, total_steps=20, n_runs=1)
    run_experiment(cfg)
    rec = read_run(tmp_path / "local_run_000.csv")
    assert abs(evaluate_record(rec) - rec.final_rmse) <= 1e-9


def test_failed_runs_are_recorded(tmp_path, monkeypatch):
    real = harness.local_run

    def flaky(system, region, cfg, seed, steps, **kw):
        if kw.get("run_index") == 1:
            rec = real(system, region, cfg, seed, 3, **kw)
            rec.error = "RuntimeError('injected')"
            raise RunFailed("injected", rec)
        return real(system, region, cfg, seed, steps, **kw)

    monkeypatch.setattr(harness, "local_run", flaky)
    report = run_experiment(fast_config(tmp_path, total_steps=6, n_runs=5))
    assert sum(r.ok for r in report.records["local"]) == 4
    assert "injected" in read_run(tmp_path / "local_run_001.csv").error
    with pytest.raises(ExperimentError):
        run_experiment(fast_config(tmp_path / "x", total_steps=6, n_runs=2))
