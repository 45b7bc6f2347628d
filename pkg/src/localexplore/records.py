"""
Run records and their CSV persistence.

A run file starts with ``# key = value`` metadata lines, followed by a
mandatory header row and one row per time step. Floats are written with
``repr`` so that reading a file back reproduces every value exactly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["RunRecord", "write_run", "read_run", "step_columns"]

_SCALARS = ("system", "strategy", "seed", "run_index", "d_x", "d_u", "n_ref",
            "initial_size", "error")
_INTS = {"seed", "run_index", "d_x", "d_u", "n_ref", "initial_size"}


@dataclass(eq=False)
class RunRecord:
    """Everything measured during one exploration run.

    Per-step arrays have one row per applied input. ``hyper`` holds, for every
    step and output dimension, ``(signal variance, lengthscales..., noise
    variance)`` of the model that chose the input.
    """

    system: str
    strategy: str
    seed: int
    run_index: int
    d_x: int
    d_u: int
    states: np.ndarray
    inputs: np.ndarray
    next_states: np.ndarray
    is_replan: np.ndarray
    xi_star: np.ndarray
    score: np.ndarray
    score_current: np.ndarray
    n_data: np.ndarray
    hyper: np.ndarray
    checkpoints: np.ndarray
    rmse: np.ndarray
    final_hyper: np.ndarray
    n_ref: int = 0
    initial_size: int = 0
    timings: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    error: str = ""

    @property
    def n_steps(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.d_x + self.d_u

    @property
    def final_rmse(self) -> float:
        return float(self.rmse[-1]) if len(self.rmse) else float("nan")

    @property
    def ok(self) -> bool:
        return not self.error

    def augmented(self) -> np.ndarray:
        return np.hstack([self.states, self.inputs])

    @classmethod
    def empty(cls, system, strategy, seed, run_index, d_x, d_u, **kw):
        D = d_x + d_u
        return cls(
            system=system, strategy=strategy, seed=seed, run_index=run_index,
            d_x=d_x, d_u=d_u,
            states=np.zeros((0, d_x)), inputs=np.zeros((0, d_u)),
            next_states=np.zeros((0, d_x)), is_replan=np.zeros(0, dtype=bool),
            xi_star=np.zeros((0, D)), score=np.zeros(0), score_current=np.zeros(0),
            n_data=np.zeros(0, dtype=int), hyper=np.zeros((0, d_x, D + 2)),
            checkpoints=np.zeros(0, dtype=int), rmse=np.zeros(0),
            final_hyper=np.full((d_x, D + 2), np.nan), **kw)

    def __eq__(self, other):
        if not isinstance(other, RunRecord):
            return NotImplemented
        for name in self.__dataclass_fields__:
            a, b = getattr(self, name), getattr(other, name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                a, b = np.asarray(a), np.asarray(b)
                if a.shape != b.shape or a.dtype.kind != b.dtype.kind:
                    return False
                if not np.array_equal(a, b, equal_nan=a.dtype.kind == "f"):
                    return False
            elif a != b:
                return False
        return True


def step_columns(d_x: int, d_u: int) -> list[str]:
    D = d_x + d_u
    cols = ["t"]
    cols += [f"x_{i + 1}" for i in range(d_x)]
    cols += [f"u_{i + 1}" for i in range(d_u)]
    cols += [f"x_next_{i + 1}" for i in range(d_x)]
    cols += ["is_replan"]
    cols += [f"xi_star_{i + 1}" for i in range(D)]
    cols += ["mi_score", "mi_current", "n_data"]
    for d in range(d_x):
        cols += [f"sf2_{d + 1}"] + [f"ls_{d + 1}_{i + 1}" for i in range(D)] + [f"sn2_{d + 1}"]
    return cols


def _fmt(v) -> str:
    return repr(float(v))


def _fmt_list(values) -> str:
    return " ".join(_fmt(v) for v in np.asarray(values, dtype=float).reshape(-1))


def _parse_list(text: str) -> np.ndarray:
    text = text.strip()
    return np.array([float(v) for v in text.split()]) if text else np.zeros(0)


def _clean(text: str) -> str:
    return str(text).replace("\n", " ").replace("\r", " ")


def write_run(record: RunRecord, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    for key in _SCALARS:
        buf.write(f"# {key} = {_clean(getattr(record, key))}\n")
    buf.write(f"# checkpoints = {' '.join(str(int(c)) for c in record.checkpoints)}\n")
    buf.write(f"# rmse = {_fmt_list(record.rmse)}\n")
    buf.write(f"# final_hyper = {_fmt_list(record.final_hyper)}\n")
    for key in sorted(record.timings):
        buf.write(f"# time.{key} = {_fmt(record.timings[key])}\n")
    for key in sorted(record.meta):
        buf.write(f"# cfg.{key} = {_clean(record.meta[key])}\n")

    w = csv.writer(buf, lineterminator="\n")
    w.writerow(step_columns(record.d_x, record.d_u))
    hyper = record.hyper.reshape(record.n_steps, -1)
    for t in range(record.n_steps):
        row = [str(t)]
        row += [_fmt(v) for v in record.states[t]]
        row += [_fmt(v) for v in record.inputs[t]]
        row += [_fmt(v) for v in record.next_states[t]]
        row += ["1" if record.is_replan[t] else "0"]
        row += [_fmt(v) for v in record.xi_star[t]]
        row += [_fmt(record.score[t]), _fmt(record.score_current[t]), str(int(record.n_data[t]))]
        row += [_fmt(v) for v in hyper[t]]
        w.writerow(row)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_run(path) -> RunRecord:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    head, timings, meta = {}, {}, {}
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        key, sep, value = lines[i][1:].partition("=")
        if not sep:
            raise ValueError(f"malformed metadata line {i + 1} in {path}")
        key, value = key.strip(), value.strip()
        if key.startswith("time."):
            timings[key[5:]] = float(value)
        elif key.startswith("cfg."):
            meta[key[4:]] = value
        else:
            head[key] = value
        i += 1
    try:
        scal = {k: (int(head[k]) if k in _INTS else head[k]) for k in _SCALARS}
    except KeyError as err:
        raise ValueError(f"{path} is missing metadata field {err}") from None
    d_x, d_u = scal["d_x"], scal["d_u"]
    D = d_x + d_u

    reader = csv.reader(lines[i:])
    header = next(reader, None)
    if header != step_columns(d_x, d_u):
        raise ValueError(f"{path} has an unexpected header row")
    rows = [r for r in reader if r]
    A = np.array([[float(v) for v in r] for r in rows]).reshape(len(rows), len(header))
    c = 1
    def take(k):
        nonlocal c
        out = A[:, c:c + k]
        c += k
        return out
    states, inputs, nxt = take(d_x), take(d_u), take(d_x)
    is_replan = take(1)[:, 0] != 0
    xi_star = take(D)
    score, current, n_data = take(1)[:, 0], take(1)[:, 0], take(1)[:, 0].astype(int)
    hyper = take(d_x * (D + 2)).reshape(len(rows), d_x, D + 2)

    return RunRecord(
        states=states, inputs=inputs, next_states=nxt, is_replan=is_replan,
        xi_star=xi_star, score=score, score_current=current, n_data=n_data,
        hyper=hyper,
        checkpoints=_parse_list(head.get("checkpoints", "")).astype(int),
        rmse=_parse_list(head.get("rmse", "")),
        final_hyper=_parse_list(head.get("final_hyper", "")).reshape(d_x, D + 2),
        timings=timings, meta=meta, **scal)
