"""Alternating one-step training of teacher, student and unlabeled sampler.

Every inner step draws unlabeled points, pseudo-labels them with the teacher,
takes one student step on the unlabeled NLL, then one teacher step on the
labeled NLL plus the weighted feedback loss of the (frozen) student on the
top-K validation labels, and finally one sampler step on the feedback loss.

Labels are standardized with the statistics of the current labeled set before
they reach the teacher and student; emitted pseudo labels are mapped back.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from tsbo.acquisition import BoundBox
from tsbo.errors import ChainStuck, DegenerateInput, NotPositiveDefinite
from tsbo.gp import GpHyper, LabeledSet
from tsbo.numerics import Adam
from tsbo.samplers import (
    GaussSamplerParams,
    GevParams,
    McmcChain,
    extreme_labels,
    gauss_init,
    gauss_param_grads,
    gauss_sample,
    gev_fit,
    gev_mcmc_sample,
    random_sample,
)
from tsbo.student import PseudoSet, apply_student_grad, feedback_backward, student_nll_grad
from tsbo.teacher import (
    TeacherNet,
    forward_activations,
    init_teacher,
    labeled_loss_upstream,
    prediction_from_acts,
    teacher_adam_step,
    teacher_backward,
    teacher_forward,
    teacher_labeled_loss,
    teacher_optimizer,
    teacher_supervised_step,
)

SAMPLER_KINDS = ("gaussian", "gev", "random")


@dataclass
class TsConfig:
    steps_per_iter: int = 20
    warmup_steps: int = 2000
    lam: float = 0.1
    n_unlabeled: int = 100
    k_validation: int = 10
    lr_teacher: float = 1e-3
    lr_student: float = 1e-2
    lr_sampler: float = 1e-2
    sampler_kind: str = "gaussian"
    uncertainty_aware: bool = True
    feedback_enabled: bool = True
    batch_size: int = 32
    hidden_width: int = 64
    hidden_layers: int = 5
    warmup_mode: str = "full"
    gev_burn_in: int = 500
    gev_thin: int = 5
    gev_fit_steps: int = 500

    def __post_init__(self):
        for name in ("steps_per_iter", "warmup_steps", "n_unlabeled", "k_validation", "batch_size",
                     "hidden_width", "hidden_layers", "gev_burn_in", "gev_thin", "gev_fit_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.sampler_kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler kind {self.sampler_kind!r}")
        if self.warmup_mode not in ("full", "teacher"):
            raise ValueError(f"unknown warmup mode {self.warmup_mode!r}")


@dataclass
class GevSamplerState:
    params: GevParams | None = None
    chain: McmcChain | None = None


@dataclass
class StepLog:
    teacher_nll: float = math.nan
    feedback_loss: float = math.nan
    unlabeled_nll: float = math.nan


@dataclass
class TsState:
    teacher: TeacherNet
    teacher_opt: Adam
    student_hyper: GpHyper
    student_opt: Adam
    gauss: GaussSamplerParams
    gauss_opt: Adam
    box: BoundBox
    gev: GevSamplerState = field(default_factory=GevSamplerState)
    log: StepLog = field(default_factory=StepLog)


def standardize_labels(data: LabeledSet) -> tuple[LabeledSet, float, float]:
    mu = float(np.mean(data.y))
    sd = float(np.std(data.y))
    if not np.isfinite(sd) or sd < 1e-12:
        sd = 1.0
    return LabeledSet(data.z, (data.y - mu) / sd), mu, sd


def select_validation(data: LabeledSet, k: int) -> LabeledSet:
    """Rows with the ``k`` largest labels; ties go to the earlier row."""
    if len(data) == 0:
        raise ValueError("empty labeled set")
    if k < 1:
        raise ValueError("k must be >= 1")
    order = np.argsort(-data.y, kind="stable")[: min(k, len(data))]
    return LabeledSet(data.z[order], data.y[order])


def create_state(data: LabeledSet, cfg: TsConfig, box: BoundBox, rng: np.random.Generator) -> TsState:
    d = data.dim
    teacher = init_teacher(d, rng, hidden=cfg.hidden_width, n_hidden=cfg.hidden_layers)
    student = GpHyper(0.0, 0.5 * math.log(d), math.log(0.1), 0.0)
    top = select_validation(data, cfg.k_validation)
    gauss = gauss_init(top.z)
    return TsState(
        teacher=teacher,
        teacher_opt=teacher_optimizer(teacher),
        student_hyper=student,
        student_opt=Adam([(3,)]),
        gauss=gauss,
        gauss_opt=Adam.like([gauss.mu, gauss.log_scale]),
        box=box,
    )


def _refresh_gev(state: TsState, data_s: LabeledSet, cfg: TsConfig, rng) -> None:
    """Refit the GEV on extreme labels and burn in chains at the best point."""
    try:
        params = gev_fit(extreme_labels(data_s.y), steps=cfg.gev_fit_steps)
        best = data_s.z[int(np.argmax(data_s.y))]
        chain = McmcChain(np.repeat(best[None, :], max(cfg.n_unlabeled, 1), axis=0), step_scale=0.5)
        gev_mcmc_sample(params, state.teacher, chain, cfg.gev_burn_in, 0, rng, bounds=(state.box.lo, state.box.hi))
        state.gev = GevSamplerState(params, chain)
    except (DegenerateInput, ChainStuck):
        state.gev = GevSamplerState()


def _draw(state: TsState, cfg: TsConfig, rng):
    """Unlabeled inputs plus the reparameterization noise (Gaussian sampler only)."""
    m = cfg.n_unlabeled
    if cfg.sampler_kind == "random":
        return random_sample((state.box.lo, state.box.hi), m, rng), None
    if cfg.sampler_kind == "gev" and state.gev.chain is not None:
        z = gev_mcmc_sample(state.gev.params, state.teacher, state.gev.chain, 0, m, rng,
                            thin=cfg.gev_thin, bounds=(state.box.lo, state.box.hi))
        return z, None
    return gauss_sample(state.gauss, m, rng, bounds=(state.box.lo, state.box.hi))


def _pseudo(state: TsState, z_u, cfg: TsConfig, pred=None) -> PseudoSet:
    if pred is None:
        pred = teacher_forward(state.teacher, z_u)
    var_t = pred.variance if cfg.uncertainty_aware else np.zeros_like(pred.variance)
    return PseudoSet(z_u, pred.mean, var_t)


def _minibatch(data: LabeledSet, size: int, rng) -> LabeledSet:
    if size <= 0 or size >= len(data):
        return data
    idx = rng.choice(len(data), size=size, replace=False)
    return LabeledSet(data.z[idx], data.y[idx])


def alternating_step(state: TsState, data_s: LabeledSet, val: LabeledSet, cfg: TsConfig,
                     batch_rng, sampler_rng) -> PseudoSet:
    """One inner iteration; mutates ``state`` and returns the pseudo set it used."""
    z_u, r = _draw(state, cfg, sampler_rng)
    batch = _minibatch(data_s, cfg.batch_size, batch_rng)
    m = z_u.shape[0]
    teach_fb = cfg.feedback_enabled and cfg.lam > 0
    move_sampler = cfg.sampler_kind == "gaussian" and r is not None

    acts_u = forward_activations(state.teacher, z_u)
    pseudo = _pseudo(state, z_u, cfg, prediction_from_acts(acts_u))
    # labeled rows get their own pass so the supervised path does not depend on z_u
    acts_l = forward_activations(state.teacher, batch.z)
    loss_l, g_mean, g_var = labeled_loss_upstream(state.teacher, batch, prediction_from_acts(acts_l))
    state.log.teacher_nll = loss_l

    try:
        nll, grad = student_nll_grad(state.student_hyper, pseudo)
        state.student_hyper = apply_student_grad(state.student_hyper, grad, cfg.lr_student, state.student_opt)
        state.log.unlabeled_nll = nll / m
    except NotPositiveDefinite:
        state.log.unlabeled_nll = math.nan

    fb = None
    if teach_fb or move_sampler:
        fb = feedback_backward(state.student_hyper, pseudo, val)
        state.log.feedback_loss = fb.loss

    grads, _ = teacher_backward(state.teacher, g_mean, g_var, batch.z, acts_l)
    if fb is not None:
        d_var = fb.d_vart if cfg.uncertainty_aware else np.zeros_like(fb.d_vart)
        fb_grads, d_inputs = teacher_backward(state.teacher, fb.d_yhat, d_var, z_u, acts_u)
        if teach_fb:
            grads = grads + cfg.lam * fb_grads
    state.teacher = teacher_adam_step(state.teacher, grads, cfg.lr_teacher, state.teacher_opt)

    if move_sampler:
        # total derivative: kernel path plus the path through the teacher outputs
        d_zu = fb.d_zu + d_inputs
        d_mu, d_ls = gauss_param_grads(state.gauss, d_zu, r, bounds=(state.box.lo, state.box.hi))
        mu, ls = state.gauss_opt.step([state.gauss.mu, state.gauss.log_scale], [d_mu, d_ls], cfg.lr_sampler)
        state.gauss = GaussSamplerParams(mu, ls).clamped()
    return pseudo


def _run_steps(state: TsState, data: LabeledSet, cfg: TsConfig, n_steps: int, rng, teacher_only: bool = False):
    data_s, mu, sd = standardize_labels(data)
    val = select_validation(data_s, cfg.k_validation)
    batch_rng, sampler_rng = rng.spawn(2)
    if cfg.sampler_kind == "gev" and not teacher_only:
        _refresh_gev(state, data_s, cfg, sampler_rng)
    last_z = None
    for _ in range(n_steps):
        if teacher_only:
            batch = _minibatch(data_s, cfg.batch_size, batch_rng)
            state.teacher, state.log.teacher_nll = teacher_supervised_step(
                state.teacher, state.teacher_opt, batch, cfg.lr_teacher)
        else:
            last_z = alternating_step(state, data_s, val, cfg, batch_rng, sampler_rng).z_u
    return data_s, mu, sd, last_z, sampler_rng


def warmup(state: TsState, data: LabeledSet, cfg: TsConfig, rng: np.random.Generator) -> TsState:
    """Alternating (or teacher-only) training before the first query."""
    if len(data) == 0:
        raise ValueError("empty labeled set")
    state = copy.deepcopy(state)
    if cfg.warmup_steps > 0:
        _run_steps(state, data, cfg, cfg.warmup_steps, rng, teacher_only=cfg.warmup_mode == "teacher")
    return state


def ts_train_round(state: TsState, data: LabeledSet, cfg: TsConfig, rng: np.random.Generator):
    """``steps_per_iter`` alternating steps; returns the new state and pseudo set.

    The pseudo set is expressed in the original label units; its inputs are
    those of the last draw, relabeled by the final teacher.
    """
    if len(data) == 0:
        raise ValueError("empty labeled set")
    state = copy.deepcopy(state)
    data_s, mu, sd, last_z, sampler_rng = _run_steps(state, data, cfg, cfg.steps_per_iter, rng)
    if last_z is None:
        last_z, _ = _draw(state, cfg, sampler_rng)
    pseudo = _pseudo(state, last_z, cfg)
    state.log.teacher_nll = teacher_labeled_loss(state.teacher, data_s)
    return state, PseudoSet(pseudo.z_u, pseudo.y_hat * sd + mu, pseudo.var_t * sd * sd)


def augment_query_set(data: LabeledSet, pseudo: PseudoSet):
    """Real and pseudo rows stacked; noise is zero on real rows, teacher variance on pseudo rows."""
    if len(pseudo) and pseudo.z_u.shape[1] != data.dim:
        raise ValueError("pseudo inputs and labeled inputs differ in width")
    z = np.vstack([data.z, pseudo.z_u]) if len(pseudo) else data.z
    y = np.concatenate([data.y, pseudo.y_hat])
    noise = np.concatenate([np.zeros(len(data)), pseudo.var_t])
    return LabeledSet(z, y), noise
