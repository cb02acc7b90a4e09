"""Ecosystem optimizer: sharpness probe, multi-step fine-tuning, restoration
plus base update, and a final update on FGSM/PGD adversarial inputs."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import attnmodel
from .attnmodel import GradSet, ParamSet

ATTACKS = ("none", "fgsm", "pgd")
BASES = ("sgd", "adam")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class EcosError(RuntimeError):
    pass


class NonFiniteLossError(EcosError):
    pass


@dataclass(frozen=True)
class EcosConfig:
    rho: float = 0.1
    n_steps: int = 3
    lr: float = 1e-3
    epsilon: float = 0.1
    fgsm_alpha: float = 0.05  # 0.5 * epsilon
    attack: str = "pgd"
    pgd_iters: int = 3
    base: str = "adam"

    def __post_init__(self):
        if self.rho < 0:
            raise EcosError("rho must be non-negative")
        if self.n_steps < 1:
            raise EcosError("n_steps must be >= 1")
        if self.lr < 0 or self.epsilon < 0 or self.fgsm_alpha < 0:
            raise EcosError("lr, epsilon and fgsm_alpha must be non-negative")
        if self.attack not in ATTACKS:
            raise EcosError(f"attack must be one of {ATTACKS}")
        if self.base not in BASES:
            raise EcosError(f"base must be one of {BASES}")
        if self.pgd_iters < 1:
            raise EcosError("pgd_iters must be >= 1")
        if self.attack == "pgd" and self.fgsm_alpha > self.epsilon:
            raise EcosError("PGD step must not exceed epsilon")


@dataclass
class EcosState:
    stashed_perturbation: Optional[ParamSet] = None
    base_state: dict = field(default_factory=dict)
    step_count: int = 0
    events: list = field(default_factory=list)


# -- base optimizers --------------------------------------------------------

def sgd_step(params: ParamSet, grads: GradSet, state: dict, lr: float) -> ParamSet:
    _check_like(params, grads)
    return {k: params[k] - lr * grads[k] for k in params}


def adam_step(params: ParamSet, grads: GradSet, state: dict, lr: float) -> ParamSet:
    """Bias-corrected Adam; moments and the step counter live in ``state``."""
    _check_like(params, grads)
    m = state.setdefault("m", {k: np.zeros_like(v) for k, v in params.items()})
    v = state.setdefault("v", {k: np.zeros_like(v) for k, v in params.items()})
    t = state["t"] = state.get("t", 0) + 1
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    out = {}
    for k in params:
        g = grads[k]
        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g
        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * (g * g)
        out[k] = params[k] - lr * (m[k] / bc1) / (np.sqrt(v[k] / bc2) + ADAM_EPS)
    return out


def base_step(params: ParamSet, grads: GradSet, cfg: EcosConfig, state: EcosState) -> ParamSet:
    step = adam_step if cfg.base == "adam" else sgd_step
    return step(params, grads, state.base_state, cfg.lr)


def _check_like(a: dict, b: dict):
    if a.keys() != b.keys():
        raise EcosError(f"parameter/gradient names differ: {sorted(set(a) ^ set(b))}")
    for k in a:
        if np.shape(a[k]) != np.shape(b[k]):
            raise EcosError(f"shape mismatch for {k}: {np.shape(a[k])} vs {np.shape(b[k])}")


def global_norm(grads: GradSet) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))


# -- objective ---------------------------------------------------------------

@dataclass
class TrainBatch:
    z_orig: np.ndarray
    z_aug: np.ndarray
    target: np.ndarray


class Objective:
    """MSE of the attention forecaster on one batch.

    Gradients of names in ``frozen`` are reported as zero.
    """

    def __init__(self, batch: TrainBatch, frozen=()):
        self.batch = batch
        self.frozen = frozenset(frozen)

    def __call__(self, params: ParamSet, z_orig=None) -> tuple[float, GradSet]:
        x = self.batch.z_orig if z_orig is None else z_orig
        loss, grads = attnmodel.loss_and_grads(params, x, self.batch.z_aug, self.batch.target)
        return loss, self._mask(grads)

    def input_grad(self, params: ParamSet, z_orig) -> tuple[float, np.ndarray]:
        loss, _, gx = attnmodel.loss_and_grads(params, z_orig, self.batch.z_aug,
                                               self.batch.target, with_input_grad=True)
        return loss, gx

    def _mask(self, grads):
        for k in self.frozen:
            grads[k] = np.zeros_like(grads[k])
        return grads


# -- adversarial inputs -------------------------------------------------------

def fgsm_attack(x, input_grad, alpha: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    input_grad = np.asarray(input_grad)
    if x.shape != input_grad.shape:
        raise EcosError(f"shape mismatch: {x.shape} vs {input_grad.shape}")
    return x + alpha * np.sign(input_grad)


def pgd_attack(x, params: ParamSet, target, cfg: EcosConfig, z_aug=None,
               objective: Optional[Objective] = None) -> np.ndarray:
    """Iterated sign steps of size ``fgsm_alpha`` projected onto the
    L-infinity ball of radius ``epsilon`` around ``x``.

    The gradient is taken w.r.t. the original-series channel only; ``z_aug``
    defaults to ``x`` when neither it nor an objective is supplied.
    """
    x = np.asarray(x, dtype=np.float64)
    if objective is None:
        objective = Objective(TrainBatch(x, x if z_aug is None else z_aug, target))
    lo, hi = x - cfg.epsilon, x + cfg.epsilon
    x_adv = x.copy()
    for _ in range(cfg.pgd_iters):
        _, gx = objective.input_grad(params, x_adv)
        x_adv = np.clip(x_adv + cfg.fgsm_alpha * np.sign(gx), lo, hi)
    return x_adv


def adversarial_input(params: ParamSet, objective: Objective, cfg: EcosConfig) -> np.ndarray:
    x = objective.batch.z_orig
    if cfg.attack == "fgsm":
        _, gx = objective.input_grad(params, x)
        return fgsm_attack(x, gx, cfg.fgsm_alpha)
    if cfg.attack == "pgd":
        return pgd_attack(x, params, objective.batch.target, cfg, objective=objective)
    raise EcosError("adversarial update requested with attack='none'")


def adversarial_update(params: ParamSet, batch: TrainBatch, cfg: EcosConfig, state: EcosState,
                       objective: Optional[Objective] = None) -> tuple[ParamSet, float]:
    """One base-optimizer step on the loss at adversarial inputs."""
    objective = objective or Objective(batch)
    x_adv = adversarial_input(params, objective, cfg)
    loss_adv, grads = objective(params, x_adv)
    if not math.isfinite(loss_adv):
        raise NonFiniteLossError("non-finite adversarial loss")
    return base_step(params, grads, cfg, state), loss_adv


# -- phases -------------------------------------------------------------------

def phase1_perturb(params: ParamSet, grads: GradSet, cfg: EcosConfig,
                   state: EcosState) -> ParamSet:
    """Move to ``theta + rho * g / ||g||`` and stash the offset.

    A zero gradient stashes a zero offset and logs a skip event.
    """
    _check_like(params, grads)
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise EcosError("non-finite gradient in phase 1")
    norm = global_norm(grads)
    if norm == 0.0:
        e = {k: np.zeros_like(v) for k, v in params.items()}
        state.events.append(f"step {state.step_count}: zero gradient norm, perturbation skipped")
    else:
        scale = cfg.rho / norm
        e = {k: scale * grads[k] for k in params}
    state.stashed_perturbation = e
    return {k: params[k] + e[k] for k in params}


def phase2_finetune(params: ParamSet, loss_fn: Callable, cfg: EcosConfig, state: EcosState,
                    n_steps: Optional[int] = None) -> tuple[ParamSet, list[float]]:
    """``n_steps`` base-optimizer steps, each with a fresh loss/gradient.

    Returns the fine-tuned parameters and the loss seen before each step.
    """
    steps = cfg.n_steps if n_steps is None else n_steps
    losses = []
    for s in range(steps):
        loss, grads = loss_fn(params)
        if not math.isfinite(loss):
            raise NonFiniteLossError(f"non-finite loss at fine-tuning step {s}")
        losses.append(loss)
        params = base_step(params, grads, cfg, state)
    return params, losses


def restore(params: ParamSet, state: EcosState) -> ParamSet:
    if state.stashed_perturbation is None:
        raise EcosError("no stashed perturbation: phase 1 has not run for this step")
    e = state.stashed_perturbation
    return {k: params[k] - e[k] for k in params}


def phase3_restore_and_update(params: ParamSet, grads_at_current: GradSet, cfg: EcosConfig,
                              state: EcosState) -> ParamSet:
    """Subtract the stashed offset, then take one base step; clears the stash."""
    recovered = restore(params, state)
    state.stashed_perturbation = None
    return base_step(recovered, grads_at_current, cfg, state)


def ecos_step(params: ParamSet, batch: TrainBatch, cfg: EcosConfig, state: EcosState,
              objective: Optional[Objective] = None,
              finetune_steps: Optional[int] = None) -> tuple[ParamSet, dict]:
    """One full optimizer step on ``batch``.

    Order: clean loss/grad, phase 1, phase 2, gradient at the restored point,
    phase 3, then the adversarial update unless ``cfg.attack == 'none'``.
    On any error the optimizer state is rolled back and the exception
    re-raised; ``params`` itself is never modified.
    """
    objective = objective or Objective(batch)
    snapshot = copy.deepcopy(state)
    try:
        loss_clean, grads = objective(params)
        if not math.isfinite(loss_clean):
            raise NonFiniteLossError("non-finite clean loss")
        grad_norm = global_norm(grads)
        perturbed = phase1_perturb(params, grads, cfg, state)
        e_norm = global_norm(state.stashed_perturbation)
        tuned, losses = phase2_finetune(perturbed, objective, cfg, state, finetune_steps)
        loss_rec, grads_rec = objective(restore(tuned, state))
        if not math.isfinite(loss_rec):
            raise NonFiniteLossError("non-finite loss at restored parameters")
        new_params = phase3_restore_and_update(tuned, grads_rec, cfg, state)
        loss_adv = None
        if cfg.attack != "none":
            new_params, loss_adv = adversarial_update(new_params, batch, cfg, state, objective)
    except Exception as exc:
        state.__dict__.update(snapshot.__dict__)
        if isinstance(exc, EcosError):
            raise
        raise EcosError(f"ECOS step failed: {exc}") from exc

    diag = {
        "step": state.step_count,
        "loss_clean": loss_clean,
        "loss_perturbed": losses[0] if losses else None,
        "loss_adv": loss_adv,
        "grad_norm": grad_norm,
        "e_theta_norm": e_norm,
        "skipped_perturbation": grad_norm == 0.0,
    }
    state.step_count += 1
    return new_params, diag
