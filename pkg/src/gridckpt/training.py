"""Synthetic sequence tasks, first-order optimizers, and gradient checks.

These exist to prove the checkpointed gradients train: the tasks are tiny,
deterministic and cheap, the optimizers are standard, and the
finite-difference check is the independent oracle for every hand-derived
adjoint in the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import CheckpointPlan, run_strategy
from .ledger import ActivationLedger
from .planner import engine_constants, optimal_plan
from .ssd import (
    GradientBundle,
    ModelConfig,
    SSDStack,
    chunk_forward,
    init_params,
    loss_mse,
)

TASK_KINDS = ("delayed_copy", "decay_sum")


class TrainingDivergedError(RuntimeError):
    """A training step produced a non-finite loss."""


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    S: int
    d: int
    delay: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"kind must be one of {TASK_KINDS}")
        if self.S < 1 or self.d < 1:
            raise ValueError("S and d must be >= 1")
        if not (0 <= self.delay < self.S):
            raise ValueError("delay must satisfy 0 <= delay < S")


def gen_task(spec: TaskSpec):
    """Deterministic (input, target) pair for the spec.

    delayed_copy: target_t = x_{t-delay}, zeros before the delay.
    decay_sum:    target_t = sum_{k<=t} 0.9^(t-k) x_k, generated by the
                  recurrence target_t = 0.9 target_{t-1} + x_t.
    """
    rng = np.random.default_rng(spec.seed)
    x = rng.standard_normal((spec.S, spec.d))
    target = np.zeros_like(x)
    if spec.kind == "delayed_copy":
        if spec.delay == 0:
            target[...] = x
        else:
            target[spec.delay:] = x[:-spec.delay]
    else:
        acc = np.zeros(spec.d)
        for t in range(spec.S):
            acc = 0.9 * acc + x[t]
            target[t] = acc
    return x, target


def sgd_step(params: list, grads: GradientBundle, lr: float) -> list:
    """Plain gradient descent, in place."""
    for p, g in zip(params, grads.layers):
        p.w_delta -= lr * g.w_delta
        p.b_delta -= lr * g.b_delta
        p.W_B -= lr * g.W_B
        p.W_C -= lr * g.W_C
    return params


@dataclass
class OptimizerState:
    """Adam moments, one pair of arrays per parameter array."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list, lr: float) -> "OptimizerState":
        state = cls(lr=lr)
        for p in params:
            state.m.append([np.zeros_like(a) for a in
                            (p.w_delta, p.b_delta, p.W_B, p.W_C)])
            state.v.append([np.zeros_like(a) for a in
                            (p.w_delta, p.b_delta, p.W_B, p.W_C)])
        return state


def adam_step(params: list, grads: GradientBundle, state: OptimizerState):
    """Bias-corrected Adam update, in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, ms, vs in zip(params, grads.layers, state.m, state.v):
        for arr, grad, m, v in zip((p.w_delta, p.b_delta, p.W_B, p.W_C),
                                   g.arrays(), ms, vs):
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            arr -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def magc_plan_for(config: ModelConfig, S: int, granularity: int = 1) -> CheckpointPlan:
    """Memory-optimal grid plan for this engine's cost constants."""
    report = optimal_plan(config.L, S, engine_constants(config), granularity)
    return CheckpointPlan(l=report.l, s=report.s, granularity=granularity)


def train(config: ModelConfig, task: TaskSpec, steps: int, strategy: str,
          seed: int, lr: float = 1e-2) -> np.ndarray:
    """Train on one fixed task instance; returns the per-step loss curve.

    steps=0 performs a single initial evaluation (curve of length 1).
    A non-finite loss raises TrainingDivergedError instead of being
    swallowed.
    """
    model = SSDStack(config, init_params(config, seed))
    x, target = gen_task(task)
    x = x.astype(config.dtype)
    target = target.astype(config.dtype)
    plan = magc_plan_for(config, task.S) if strategy == "magc" else None

    if steps == 0:
        y = forward_only(model, x)
        loss, _ = loss_mse(y, target)
        return np.array([loss])

    opt = OptimizerState.for_params(model.layers, lr)
    losses = np.empty(steps)
    for i in range(steps):
        ledger = ActivationLedger()
        loss, grads, _ = run_strategy(model, x, target, strategy, ledger, plan)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss at step {i}")
        losses[i] = loss
        adam_step(model.layers, grads, opt)
    return losses


def forward_only(model: SSDStack, x_seq: np.ndarray) -> np.ndarray:
    """Forward pass with nothing retained; used by the finite-difference oracle."""
    x_cur = x_seq
    for layer in model.layers:
        x_cur, _, _ = chunk_forward(layer, x_cur, model.zero_state())
    return x_cur


def gradcheck_fd(config: ModelConfig, task: TaskSpec, eps: float = 1e-5,
                 seed: int = 0, n_input_samples: int = 8,
                 linear_only: bool = False, corrupt: bool = False) -> float:
    """Max relative error between checkpointed gradients and central differences.

    Every parameter entry is perturbed by +-eps (plus a sample of input
    entries); the relative error floors its denominator so near-zero entries
    are held to an absolute tolerance of eps-independent 1e-8 when the
    reported maximum is compared against 1e-6.

    linear_only freezes the decay coefficients out of the check, leaving
    only parameters the output depends on linearly, for which central
    differences are exact up to roundoff.

    corrupt is a negative-control hook that perturbs one analytic gradient
    entry; the check must then fail.
    """
    model = SSDStack(config, init_params(config, seed))
    x, target = gen_task(task)
    x = x.astype(config.dtype)
    target = target.astype(config.dtype)

    plan = magc_plan_for(config, task.S)
    _, grads, _ = run_strategy(model, x, target, "magc", ActivationLedger(), plan)
    if corrupt:
        grads.layers[0].W_B.flat[0] += 0.5 * abs(grads.layers[0].W_B.flat[0]) + 0.1

    def loss_at() -> float:
        return loss_mse(forward_only(model, x), target)[0]

    worst = 0.0

    def check(analytic: float, arr: np.ndarray, idx) -> None:
        nonlocal worst
        orig = arr[idx]
        arr[idx] = orig + eps
        up = loss_at()
        arr[idx] = orig - eps
        down = loss_at()
        arr[idx] = orig
        numeric = (up - down) / (2 * eps)
        denom = max(abs(analytic), abs(numeric), 1e-2)
        worst = max(worst, abs(analytic - numeric) / denom)

    for p, g in zip(model.layers, grads.layers):
        pairs = [(p.W_B, g.W_B), (p.W_C, g.W_C)]
        if not linear_only:
            pairs += [(p.w_delta, g.w_delta), (p.b_delta, g.b_delta)]
        for arr, garr in pairs:
            for idx in np.ndindex(arr.shape):
                check(garr[idx], arr, idx)

    rng = np.random.default_rng(seed + 1)
    flat_idx = rng.choice(x.size, size=min(n_input_samples, x.size), replace=False)
    for fi in sorted(flat_idx):
        idx = np.unravel_index(fi, x.shape)
        check(grads.x_seq[idx], x, idx)
    return worst


def losses_to_csv(losses: np.ndarray) -> str:
    lines = ["step,loss"]
    lines += [f"{i},{float(v)!r}" for i, v in enumerate(losses)]
    return "\n".join(lines) + "\n"
