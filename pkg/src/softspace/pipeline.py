"""Bayesian optimization of the control-space basis (RBBO).

Each evaluation runs receding-horizon MPC with a candidate ``B_c`` for T
steps and records the cumulative task reward.  The outer loop fits a GP to
those rewards, picks the next basis by maximizing the UCB at full length,
and picks a trajectory length from a ladder of cheaper fidelities.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import bayesopt as bo
from . import grassmann as gr
from .dynamics import Environment, ReducedState, SimCounter, Task
from .mpc import MPCConfig, mpc_run
from .rom import SCHEMA_VERSION, ReducedModel

PHASES = ("init", "iter", "reeval", "baseline")
_BASELINE_KEY = 2**31 - 1


class DatasetError(ValueError):
    pass


class RbboError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class EvalRecord:
    """One MPC evaluation of a control basis.  Immutable once written."""

    B_c: np.ndarray
    T: int
    reward: float
    regularizer: float
    wall_time_s: float
    seed: int
    controller: str
    phase: str = "iter"
    index: int = 0

    def __post_init__(self):
        B = gr.check_point(self.B_c)
        B = B.copy()
        B.setflags(write=False)
        object.__setattr__(self, "B_c", B)
        if int(self.T) < 1:
            raise DatasetError(f"T must be >= 1, got {self.T}")
        if not math.isfinite(self.reward):
            raise DatasetError(f"reward must be finite, got {self.reward}")
        if self.phase not in PHASES:
            raise DatasetError(f"unknown phase {self.phase!r}")

    @property
    def m(self) -> int:
        return self.B_c.shape[0]

    @property
    def c(self) -> int:
        return self.B_c.shape[1]

    @property
    def full_rank(self) -> bool:
        return self.c == self.m

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "index": self.index,
            "phase": self.phase,
            "m": self.m,
            "c": self.c,
            "b_c": self.B_c.reshape(-1).tolist(),
            "t": int(self.T),
            "reward": self.reward,
            "lambda": self.regularizer,
            "seed": self.seed,
            "controller": self.controller,
            "wall_time_s": self.wall_time_s,
        }

    def content(self) -> dict:
        """Everything except wall time: the part that must replay exactly."""
        d = self.to_dict()
        del d["wall_time_s"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalRecord":
        m, c = int(d["m"]), int(d["c"])
        B = np.asarray(d["b_c"], float)
        if B.size != m * c:
            raise DatasetError(f"b_c has {B.size} entries, expected m*c = {m * c}")
        return cls(B_c=B.reshape(m, c), T=int(d["t"]), reward=float(d["reward"]),
                   regularizer=float(d["lambda"]), wall_time_s=float(d["wall_time_s"]),
                   seed=int(d["seed"]), controller=str(d["controller"]),
                   phase=str(d.get("phase", "iter")), index=int(d.get("index", 0)))


# ------------------------------------------------------------------ persistence


def append_record(path, rec: EvalRecord) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(rec.to_dict()) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def persist_dataset(path, records) -> None:
    """Write all records (truncating) as JSON lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")


def load_dataset(path) -> list[EvalRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(EvalRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}: line {lineno}: {exc}") from exc
    return out


# ------------------------------------------------------------------ configuration


@dataclass(frozen=True)
class RbboConfig:
    n_iter: int = 30
    n_init: int = 5
    C: int = 2
    T_max: int = 300
    ladder_rungs: int = 4  # 1 disables the fidelity ladder (plain BO)
    q_T: float = 0.1
    noise_floor: bool = True
    seed: int = 0
    normalize: bool = True  # GP targets R * T_max / T
    hyperopt_every: int = 5
    hyperopt_restarts: int = 4
    beta: float | None = None  # None: logarithmic schedule
    n_random_starts: int = 8
    n_incumbent_starts: int = 2
    wall_budget_s: float | None = None

    def __post_init__(self):
        if self.n_init < 2:
            raise ValueError(f"n_init must be >= 2, got {self.n_init}")
        if self.n_iter < 0:
            raise ValueError(f"n_iter must be >= 0, got {self.n_iter}")
        for name in ("C", "T_max", "ladder_rungs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.q_T < 0 or self.hyperopt_every < 1:
            raise ValueError("q_T must be >= 0 and hyperopt_every >= 1")
        if self.beta is not None and self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.wall_budget_s is not None and not self.wall_budget_s > 0:
            raise ValueError("wall_budget_s must be positive")

    @property
    def ladder(self) -> list[int]:
        return bo.fidelity_ladder(self.T_max, self.ladder_rungs)


@dataclass(frozen=True)
class Problem:
    """A reduced model placed in an environment with a task and start state."""

    model: ReducedModel
    env: Environment
    task: Task
    s0: ReducedState | None = None

    @property
    def start(self) -> ReducedState:
        return self.s0 if self.s0 is not None else ReducedState.rest(self.model)


STREAM_EVAL, STREAM_INIT, STREAM_ACQ, STREAM_HYPER = range(4)


def eval_seed(seed: int, index: int, stream: int = STREAM_EVAL) -> int:
    """Independent 32-bit seed for record ``index`` on a given random stream."""
    return int(np.random.SeedSequence([int(seed), stream, int(index)]).generate_state(1)[0])


def evaluate(problem: Problem, B_c, T: int, mpc_cfg: MPCConfig, seed: int, *, phase: str = "iter",
             index: int = 0, counter: SimCounter | None = None) -> EvalRecord:
    t0 = time.perf_counter()
    res = mpc_run(problem.model, problem.start, B_c, int(T), mpc_cfg, problem.env, problem.task,
                  seed=seed, counter=counter)
    wall = time.perf_counter() - t0
    return EvalRecord(B_c=np.asarray(B_c, float), T=int(T), reward=float(res.total_reward),
                      regularizer=float(res.total_regularizer), wall_time_s=wall, seed=int(seed),
                      controller=mpc_cfg.controller, phase=phase, index=index)


def identity_baseline(problem: Problem, cfg: RbboConfig, mpc_cfg: MPCConfig, *,
                      path=None, counter: SimCounter | None = None) -> EvalRecord:
    """Evaluate ``B_c = I[:, :C]`` (the C lowest actuated modes) at full length."""
    M = problem.model.control_dim
    if cfg.C > M:
        raise ValueError(f"C = {cfg.C} exceeds the control-space dimension {M}")
    rec = evaluate(problem, gr.identity_point(M, cfg.C), cfg.T_max, mpc_cfg,
                   eval_seed(cfg.seed, _BASELINE_KEY), phase="baseline", index=-1, counter=counter)
    if path is not None:
        append_record(path, rec)
    return rec


# ------------------------------------------------------------------ main loop


@dataclass
class RbboResult:
    best: EvalRecord
    records: list[EvalRecord]
    params: bo.KernelParams | None = None
    series: list[dict] = field(default_factory=list)

    @property
    def B_c(self) -> np.ndarray:
        return self.best.B_c

    @property
    def evaluations(self) -> int:
        return len(self.records)


def _target(rec: EvalRecord, cfg: RbboConfig) -> float:
    return rec.reward * cfg.T_max / rec.T if cfg.normalize else rec.reward


def _fit_data(records, cfg):
    Bs = np.array([r.B_c for r in records])
    Ts = np.array([r.T for r in records], float)
    y = np.array([_target(r, cfg) for r in records])
    return Bs, Ts, y


def _params_for(records: list[EvalRecord], cfg: RbboConfig) -> bo.KernelParams:
    """Kernel parameters in force when ``len(records)`` data points exist.

    Refit every ``hyperopt_every`` records after the initial design,
    always on the prefix present at that moment, so a resumed run
    recomputes exactly what an uninterrupted run used.
    """
    n = len(records)
    last = n - (n - cfg.n_init) % cfg.hyperopt_every
    prefix = records[:last]
    Bs, Ts, y = _fit_data(prefix, cfg)
    if len(prefix) < 3:
        return bo.median_heuristic(Bs, Ts, y)
    return bo.gp_hyperopt(Bs, Ts, y, restarts=cfg.hyperopt_restarts, seed=eval_seed(cfg.seed, last, STREAM_HYPER))


def _series_point(records, cfg, elapsed):
    full = [r.reward for r in records if r.T == cfg.T_max]
    return {
        "evaluations": len(records),
        "time_s": elapsed,
        "T": records[-1].T,
        "reward": records[-1].reward,
        "best_normalized": max(_target(r, cfg) for r in records),
        "best_at_T_max": max(full) if full else None,
    }


def rbbo(problem: Problem, cfg: RbboConfig, mpc_cfg: MPCConfig, *, path=None, resume: bool = False,
         counter: SimCounter | None = None, clock: Callable[[], float] = time.perf_counter) -> RbboResult:
    """Run the outer optimization loop.

    With ``path`` every record is appended to a JSON-lines file as soon as
    it exists.  With ``resume`` the file is read first and the loop
    continues where it stopped; all randomness is derived from
    ``(seed, record index)`` so the continuation matches an uninterrupted run.
    """
    M = problem.model.control_dim
    C = cfg.C
    if not 1 <= C <= M:
        raise ValueError(f"need 1 <= C <= M, got C = {C}, M = {M}")
    ladder = cfg.ladder
    records: list[EvalRecord] = []
    if path is not None:
        path = Path(path)
        if resume and path.exists():
            records = [r for r in load_dataset(path) if r.phase != "baseline"]
            for r in records:
                if r.B_c.shape != (M, C):
                    raise DatasetError(f"{path}: record {r.index} has shape {r.B_c.shape}, expected {(M, C)}")
        elif path.exists() and not resume:
            path.unlink()
    loop = [r for r in records if r.phase in ("init", "iter")]
    reevals = [r for r in records if r.phase == "reeval"]
    elapsed = sum(r.wall_time_s for r in records)
    start = clock() - elapsed
    series = [_series_point(loop[: i + 1], cfg, sum(r.wall_time_s for r in loop[: i + 1]))
              for i in range(len(loop))]

    def run(B, T, phase, index):
        try:
            rec = evaluate(problem, B, T, mpc_cfg, eval_seed(cfg.seed, index), phase=phase,
                           index=index, counter=counter)
        except Exception as exc:
            raise RbboError(f"evaluation {index} failed: {exc}") from exc
        if path is not None:
            append_record(path, rec)
        return rec

    # initial design at the cheapest fidelity
    while len(loop) < cfg.n_init:
        i = len(loop)
        B = gr.random_grassmann(M, C, np.random.default_rng(eval_seed(cfg.seed, i, STREAM_INIT))) if C < M \
            else gr.identity_point(M, C)
        loop.append(run(B, ladder[0], "init", i))
        series.append(_series_point(loop, cfg, clock() - start))

    params = None
    while len(loop) < cfg.n_init + cfg.n_iter and not reevals:
        if cfg.wall_budget_s is not None and clock() - start >= cfg.wall_budget_s:
            break
        i = len(loop)
        it = i - cfg.n_init + 1
        params = _params_for(loop, cfg)
        gp = bo.gp_fit(*_fit_data(loop, cfg), params)
        beta = cfg.beta if cfg.beta is not None else bo.beta_schedule(it)
        rng = np.random.default_rng(eval_seed(cfg.seed, i, STREAM_ACQ))
        if C < M:
            B = bo.maximize_acquisition(gp, beta, M, C, rng, T_eval=cfg.T_max,
                                        n_random=cfg.n_random_starts, n_incumbent=cfg.n_incumbent_starts)
        else:
            B = gr.identity_point(M, C)
        T = bo.boca_select_fidelity(gp, B, ladder, cfg.q_T, cfg.T_max, noise_floor=cfg.noise_floor)
        loop.append(run(B, T, "iter", i))
        series.append(_series_point(loop, cfg, clock() - start))

    full = [r for r in loop + reevals if r.T == cfg.T_max]
    if not full:
        cand = max(loop, key=lambda r: _target(r, cfg))
        rec = run(cand.B_c, cfg.T_max, "reeval", len(loop))
        reevals.append(rec)
        full = [rec]
    best = max(full, key=lambda r: r.reward)
    if params is None and len(loop) >= 3:
        params = _params_for(loop, cfg)
    return RbboResult(best=best, records=loop + reevals, params=params, series=series)


def compare_bo_vs_boca(problem: Problem, cfg: RbboConfig, mpc_cfg: MPCConfig, wall_budget_s: float, *,
                       counter_factory: Callable[[], SimCounter] = SimCounter) -> dict:
    """Run the loop with the fidelity ladder and with fixed ``T_max`` under the same wall budget."""
    if not wall_budget_s > 0:
        raise ValueError("wall budget must be positive")
    report = {"schema_version": SCHEMA_VERSION, "wall_budget_s": wall_budget_s}
    big = max(cfg.n_iter, 10_000)
    variants = {
        "boca": replace(cfg, wall_budget_s=wall_budget_s, n_iter=big),
        "bo": replace(cfg, wall_budget_s=wall_budget_s, n_iter=big, ladder_rungs=1),
    }
    for name, vcfg in variants.items():
        counter = counter_factory()
        res = rbbo(problem, vcfg, mpc_cfg, counter=counter)
        report[name] = {
            "evaluations": sum(r.phase in ("init", "iter") for r in res.records),
            "best_reward": res.best.reward,
            "best_b_c": res.best.B_c.tolist(),
            "executed_steps": counter.snapshot()["executed_steps"],
            "series": res.series,
        }
    return report

