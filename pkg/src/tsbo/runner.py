"""Experiment runner: initial design, BO loop, traces and comparison studies."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from tsbo import __version__
from tsbo.acquisition import BoundBox, maximize_acquisition
from tsbo.bilevel import TsState, augment_query_set, create_state, ts_train_round, warmup
from tsbo.config import RunConfig
from tsbo.errors import AcquisitionFailure, TsboError
from tsbo.gp import GpHyper, LabeledSet, gp_fit, gp_nll
from tsbo.objectives import Objective, make_objective
from tsbo.student import PseudoSet

log = logging.getLogger(__name__)

TRACE_HEADER = ["iter", "y", "best", "teacher_nll", "feedback_loss", "unlabeled_nll", "wall_ms"]


class NumericFailure(TsboError):
    pass


@dataclass
class TraceRecord:
    iteration: int
    queried_z: np.ndarray
    observed_y: float
    best_so_far: float
    teacher_nll: float = math.nan
    feedback_loss: float = math.nan
    unlabeled_nll: float = math.nan
    wall_ms: int = 0


@dataclass
class RunResult:
    config: RunConfig
    data: LabeledSet
    true_y: np.ndarray
    trace: list = field(default_factory=list)
    state: TsState | None = None
    pseudo: PseudoSet | None = None
    n_evals: int = 0

    @property
    def best_observed(self) -> float:
        return float(np.max(self.data.y))

    @property
    def best_true(self) -> float:
        """Noise-free objective value at the best observed point."""
        return float(self.true_y[int(np.argmax(self.data.y))])

    @property
    def best_z(self) -> np.ndarray:
        return self.data.z[int(np.argmax(self.data.y))]

    def best_curve(self) -> np.ndarray:
        """Best observed label after the initial design and after each query."""
        n0 = self.config.n_init
        return np.maximum.accumulate(self.data.y)[n0 - 1:]


class CountingObjective:
    def __init__(self, objective: Objective):
        self.objective = objective
        self.calls = 0

    def __call__(self, z) -> float:
        self.calls += 1
        return self.objective(z)


def _streams(seed: int):
    """Independent generators for design, label noise, teacher-student and acquisition."""
    children = np.random.SeedSequence(seed).spawn(4)
    return [np.random.default_rng(c) for c in children]


def sobol_engine(dim: int, rng) -> qmc.Sobol:
    return qmc.Sobol(dim, scramble=True, seed=rng)


def _sobol_next(engine: qmc.Sobol, n: int, box: BoundBox) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        u = engine.random(n)
    return box.lo + (box.hi - box.lo) * u


def default_hyper(data: LabeledSet) -> GpHyper:
    var = float(np.var(data.y)) or 1.0
    return GpHyper(math.log(var), math.log(0.5 * math.sqrt(data.dim)), math.log(1e-2 * var), float(np.mean(data.y)))


def run_experiment(cfg: RunConfig, write: bool = False) -> RunResult:
    """Run one (config, seed) cell; optionally persist trace and summary."""
    objective = CountingObjective(make_objective(cfg.objective, cfg.dim))
    box = BoundBox.cube(cfg.dim, cfg.box_half_width)
    design_rng, noise_rng, ts_rng, acq_rng = _streams(cfg.seed)
    engine = sobol_engine(cfg.dim, design_rng)

    def observe(z):
        f = objective(z)
        noise = noise_rng.normal(0.0, cfg.label_noise_std) if cfg.label_noise_std > 0 else 0.0
        return f + noise, f

    z0 = _sobol_next(engine, cfg.n_init, box)
    obs = [observe(z) for z in z0]
    data = LabeledSet(z0, [o[0] for o in obs])
    true_y = np.array([o[1] for o in obs])
    result = RunResult(cfg, data, true_y)

    ts_cfg = cfg.resolved_ts()
    state = None
    hyper = None
    pseudo = PseudoSet.empty(cfg.dim)
    if cfg.uses_teacher:
        state = create_state(data, ts_cfg, box, ts_rng)
        state = warmup(state, data, ts_cfg, ts_rng)

    try:
        for it in range(1, cfg.n_query + 1):
            t0 = time.perf_counter()
            if cfg.method == "sobol":
                z_next = _sobol_next(engine, 1, box)[0]
            else:
                if state is not None:
                    state, pseudo = ts_train_round(state, data, ts_cfg, ts_rng)
                train, noise = augment_query_set(data, pseudo)
                hyper = gp_fit(train, noise, init=hyper or default_hyper(train), steps=cfg.gp_steps, lr=cfg.gp_lr)
                try:
                    z_next = maximize_acquisition(hyper, train, noise, float(np.max(data.y)), box,
                                                  cfg.acq_restarts, acq_rng, maxiter=cfg.acq_maxiter)
                except AcquisitionFailure:
                    log.warning("acquisition failed at iteration %d; using a random probe", it)
                    z_next = box.uniform(1, acq_rng)[0]
            y, f = observe(z_next)
            data = LabeledSet(np.vstack([data.z, z_next]), np.append(data.y, y))
            true_y = np.append(true_y, f)
            rec = TraceRecord(it, z_next, y, float(np.max(data.y)), wall_ms=int(1000 * (time.perf_counter() - t0)))
            if state is not None:
                rec.teacher_nll = state.log.teacher_nll
                rec.feedback_loss = state.log.feedback_loss
                rec.unlabeled_nll = state.log.unlabeled_nll
            result.trace.append(rec)
    except (TsboError, np.linalg.LinAlgError, FloatingPointError) as exc:
        result.data, result.true_y, result.n_evals = data, true_y, objective.calls
        if write:
            write_outputs(result, error=f"{type(exc).__name__}: {exc}")
        raise NumericFailure(f"run aborted: {exc}") from exc

    result.data, result.true_y = data, true_y
    result.state, result.pseudo = state, pseudo
    result.n_evals = objective.calls
    if write:
        write_outputs(result)
    return result


def run_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out) / f"{cfg.objective}{cfg.dim}-{cfg.method}-seed{cfg.seed}"


def _fmt(x: float) -> str:
    return repr(float(x))


def summary_dict(result: RunResult, error: str | None = None) -> dict:
    cfg = result.config
    out = {
        "version": __version__,
        "seed": cfg.seed,
        "method": cfg.method,
        "objective": cfg.objective,
        "best_value": result.best_observed,
        "best_true_value": result.best_true,
        "argmax": result.best_z.tolist(),
        "n_evals": result.n_evals,
        "config": cfg.as_dict(),
    }
    if error is not None:
        out["error"] = error
    return out


def write_outputs(result: RunResult, error: str | None = None) -> Path:
    path = run_dir(result.config)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for rec in result.trace:
            w.writerow([rec.iteration, _fmt(rec.observed_y), _fmt(rec.best_so_far), _fmt(rec.teacher_nll),
                        _fmt(rec.feedback_loss), _fmt(rec.unlabeled_nll), rec.wall_ms])
    with open(path / "points.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        for rec in result.trace:
            w.writerow([_fmt(v) for v in rec.queried_z])
    (path / "summary.json").write_text(json.dumps(summary_dict(result, error), indent=2))
    return path


# --- studies ---------------------------------------------------------------


def eval_generalization(cfg: RunConfig, result: RunResult, rng: np.random.Generator | None = None) -> dict:
    """Query-GP NLL on global and local test points, with and without pseudo labels."""
    objective = make_objective(cfg.objective, cfg.dim)
    box = BoundBox.cube(cfg.dim, cfg.box_half_width)
    rng = rng if rng is not None else np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    tests = {
        "global": box.clip(rng.standard_normal((cfg.n_test, cfg.dim))),
        "local": box.clip(result.best_z + cfg.local_std * rng.standard_normal((cfg.n_test, cfg.dim))),
    }
    data = result.data
    pseudo = result.pseudo if result.pseudo is not None else PseudoSet.empty(cfg.dim)
    plain_h = gp_fit(data, None, init=default_hyper(data), steps=cfg.gp_steps * 4, lr=cfg.gp_lr)
    if len(pseudo):
        aug, noise = augment_query_set(data, pseudo)
        aug_h = gp_fit(aug, noise, init=default_hyper(aug), steps=cfg.gp_steps * 4, lr=cfg.gp_lr)
    report = {}
    for region, z in tests.items():
        test = LabeledSet(z, [objective(row) for row in z])
        without = gp_nll(plain_h, data, None, test)
        with_ = gp_nll(aug_h, aug, noise, test) if len(pseudo) else without
        report[region] = {"nll_with_pseudo": with_, "nll_without_pseudo": without}
    return report


ABLATION_VARIANTS = {
    "full": {},
    "random_sampler": {"sampler_kind": "random"},
    "no_uncertainty": {"uncertainty_aware": False},
    "no_feedback": {"feedback_enabled": False},
}


def seeds_for(base: RunConfig) -> list[int]:
    return [base.seed + i for i in range(base.n_seeds)]


def run_ablation_suite(base: RunConfig, variants=None) -> dict:
    """Run each variant over shared seeds; returns per-variant best values and stats."""
    variants = variants or ABLATION_VARIANTS
    if not base.uses_teacher:
        base = base.with_(method="tsbo-gaussian")
    table = {}
    for name, overrides in variants.items():
        bests = []
        for seed in seeds_for(base):
            cfg = base.with_(seed=seed, **overrides)
            bests.append(run_experiment(cfg).best_observed)
        table[name] = _stats(bests)
    return table


def lambda_sweep(base: RunConfig, lams=(0.001, 0.01, 0.1, 1.0)) -> dict:
    return run_ablation_suite(base, {f"lambda={lam:g}": {"lam": lam} for lam in lams})


def _stats(values) -> dict:
    v = np.asarray(values, dtype=float)
    return {"values": v.tolist(), "mean": float(v.mean()), "std": float(v.std()), "median": float(np.median(v))}


def format_table(table: dict) -> str:
    lines = [f"{'variant':<20} {'mean':>12} {'std':>10} {'median':>12}"]
    for name, row in table.items():
        lines.append(f"{name:<20} {row['mean']:>12.4f} {row['std']:>10.4f} {row['median']:>12.4f}")
    return "\n".join(lines)
