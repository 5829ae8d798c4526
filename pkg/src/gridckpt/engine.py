"""Bi-axial checkpointing: grid forward storage and grid-cell backward restoration.

The sequence axis is cut every s steps and the layer axis every l layers,
tiling the L x S computation into grid cells. The forward pass stores two
checkpoint families instead of per-step internals:

  * l_ckpt[(i, j)]  -- the input block of layer-block j over sequence block i
                       (the activations crossing the layer boundary below j),
                       kept for every interior layer boundary (j >= 2);
  * s_ckpt[(i, j)]  -- each member layer's recurrent state at the left time
                       boundary of sequence block i, kept for every interior
                       sequence boundary (i >= 2).

The original input sequence serves as the j = 1 input block and zero states
as the i = 1 seeds; neither is duplicated in the maps. Cell (i, j) covers
steps [(i-1)s+1 .. i*s] and layers [(j-1)l+1 .. j*l], 1-based, with short
trailing blocks when the intervals do not divide S or L.

The backward pass walks sequence blocks last to first and layer blocks top
to bottom within each. Every cell is recomputed exactly once (chunk_forward
with retain over its member layers), then consumed layer by layer, carrying
a gradient frontier: grad_x flowing down through layer blocks within the
current sequence block, and per-layer grad_h flowing backward in time
across sequence blocks. Parameter gradients funnel into one shared
accumulator per layer in the same time-descending order the full-cache
reference uses, so both paths produce bitwise-identical bundles.

The baseline strategies are the same machinery at degenerate plans:
per-layer checkpointing is the (l=1, s=S) grid and sqrt-of-L grouping is
the (ceil(sqrt(L)), S) grid; the no-checkpointing baseline is the
full-cache reference path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ledger import ActivationLedger, RunClock, StepEvalCounter, measure
from .ssd import (
    GradientBundle,
    SSDStack,
    chunk_backward,
    chunk_forward,
    loss_mse,
    model_backward_full,
    model_forward_full,
)

STRATEGIES = ("gc_off", "gc_on", "sqrt_gc", "magc")


class PlanMismatchError(RuntimeError):
    """A backward pass asked for a checkpoint its forward never stored."""


@dataclass(frozen=True)
class CheckpointPlan:
    """Checkpoint intervals: every l layers, every s steps; granularity | s."""

    l: int
    s: int
    granularity: int = 1

    def __post_init__(self):
        if self.l < 1 or self.s < 1 or self.granularity < 1:
            raise ValueError("l, s, granularity must be >= 1")
        if self.s % self.granularity != 0:
            raise ValueError(f"granularity {self.granularity} must divide s={self.s}")

    def validate_for(self, L: int, S: int) -> None:
        if not (1 <= self.l <= L):
            raise ValueError(f"l={self.l} outside [1, {L}]")
        if not (1 <= self.s <= S):
            raise ValueError(f"s={self.s} outside [1, {S}]")

    def num_cells(self, L: int, S: int) -> tuple[int, int]:
        """(sequence blocks, layer blocks), ceilings for short trailing blocks."""
        return (-(-S // self.s), -(-L // self.l))

    def seq_block(self, i_idx: int, S: int) -> tuple[int, int]:
        """Half-open 0-based step range of sequence block i_idx (1-based)."""
        return ((i_idx - 1) * self.s, min(i_idx * self.s, S))

    def layer_block(self, j_idx: int, L: int) -> tuple[int, int]:
        """Half-open 0-based layer range of layer block j_idx (1-based)."""
        return ((j_idx - 1) * self.l, min(j_idx * self.l, L))


@dataclass
class GridStore:
    """The two checkpoint families plus the implicit layer-0 input."""

    plan: CheckpointPlan
    input_seq: np.ndarray
    num_cells: tuple[int, int]
    l_ckpt: dict = field(default_factory=dict)   # (i, j) -> (block_len, d)
    s_ckpt: dict = field(default_factory=dict)   # (i, j) -> (block_layers, H, N, P)

    def stored_x_positions(self) -> int:
        return sum(v.shape[0] for v in self.l_ckpt.values())

    def stored_states(self) -> int:
        return sum(v.shape[0] for v in self.s_ckpt.values())


def forward_checkpointed(model: SSDStack, x_seq: np.ndarray, plan: CheckpointPlan,
                         ledger: ActivationLedger | None = None,
                         counter: StepEvalCounter | None = None):
    """Forward pass that retains only grid checkpoints.

    Output and final states are bitwise equal to model_forward_full's; the
    ledger sees the input (io), the two stores, and at most one transient
    inter-layer block at a time (io).
    """
    c = model.config
    S = x_seq.shape[0]
    plan.validate_for(c.L, S)
    if S > c.S_max:
        raise ValueError(f"S={S} exceeds S_max={c.S_max}")
    n_i, n_j = plan.num_cells(c.L, S)
    grids = GridStore(plan=plan, input_seq=x_seq, num_cells=(n_i, n_j))
    if ledger is not None:
        ledger.charge("io", x_seq.nbytes)

    states = [model.zero_state() for _ in range(c.L)]
    y_seq = np.empty_like(x_seq)
    for i_idx in range(1, n_i + 1):
        t0, t1 = plan.seq_block(i_idx, S)
        x_cur = x_seq[t0:t1]
        working = 0
        for j in range(c.L):
            y_blk, h_new, _ = chunk_forward(model.layers[j], x_cur, states[j])
            if counter is not None:
                counter.forward_evals += t1 - t0
            states[j] = h_new
            stored = (j + 1) % plan.l == 0 and (j + 1) < c.L
            if ledger is not None:
                if stored:
                    ledger.charge("l_ckpt", y_blk.nbytes)
                elif j + 1 < c.L:
                    ledger.charge("io", y_blk.nbytes)
                ledger.release("io", working)
                working = 0 if stored or j + 1 == c.L else y_blk.nbytes
            if stored:
                grids.l_ckpt[(i_idx, (j + 1) // plan.l + 1)] = y_blk
            x_cur = y_blk
        y_seq[t0:t1] = x_cur
        if i_idx < n_i:
            for j_idx in range(1, n_j + 1):
                lo, hi = plan.layer_block(j_idx, c.L)
                snap = np.stack([states[j] for j in range(lo, hi)])
                grids.s_ckpt[(i_idx + 1, j_idx)] = snap
                if ledger is not None:
                    ledger.charge("s_ckpt", snap.nbytes)
    return y_seq, states, grids


def recompute_cell(model: SSDStack, grids: GridStore, cell: tuple[int, int],
                   ledger: ActivationLedger | None = None,
                   counter: StepEvalCounter | None = None):
    """Re-run the forward inside one grid cell, retaining per-step internals.

    Seeds come from the stores (or the input sequence / zero states on the
    first column and row). Returns the member layers' caches, bottom first.
    """
    c = model.config
    plan = grids.plan
    S = grids.input_seq.shape[0]
    i_idx, j_idx = cell
    n_i, n_j = grids.num_cells
    if not (1 <= i_idx <= n_i and 1 <= j_idx <= n_j):
        raise ValueError(f"cell {cell} outside grid {grids.num_cells}")
    t0, t1 = plan.seq_block(i_idx, S)
    lo, hi = plan.layer_block(j_idx, c.L)

    if j_idx == 1:
        x_cur = grids.input_seq[t0:t1]
    else:
        try:
            x_cur = grids.l_ckpt[(i_idx, j_idx)]
        except KeyError:
            raise PlanMismatchError(f"missing l_ckpt for cell {cell}") from None
    if i_idx == 1:
        seeds = [model.zero_state() for _ in range(lo, hi)]
    else:
        try:
            seeds = grids.s_ckpt[(i_idx, j_idx)]
        except KeyError:
            raise PlanMismatchError(f"missing s_ckpt for cell {cell}") from None

    caches = []
    for k, j in enumerate(range(lo, hi)):
        y_blk, _, cache = chunk_forward(model.layers[j], x_cur, seeds[k], retain=True)
        if counter is not None:
            counter.recompute_evals += t1 - t0
        if ledger is not None:
            ledger.charge("cell_cache", cache.scan_nbytes)
            if j + 1 < hi:
                ledger.charge("cell_cache", y_blk.nbytes)  # input of the layer above
        caches.append(cache)
        x_cur = y_blk
    return caches


def _release_cell(ledger: ActivationLedger, caches) -> None:
    for k, cache in enumerate(caches):
        ledger.release("cell_cache", cache.scan_nbytes)
        if k > 0:
            ledger.release("cell_cache", cache.x.nbytes)


def backward_grid(model: SSDStack, grids: GridStore, grad_y_seq: np.ndarray,
                  grad_state=None, plan: CheckpointPlan | None = None,
                  ledger: ActivationLedger | None = None,
                  counter: StepEvalCounter | None = None) -> GradientBundle:
    """Backward with grid-cell restoration; sequence blocks last to first,
    layer blocks top to bottom within each.

    Consumed checkpoints and each finished cell cache are released before
    the next cell begins, so the ledger peak is the first cell's footprint:
    full stores + one cell cache + the gradient frontier.
    """
    c = model.config
    if plan is None:
        plan = grids.plan
    elif plan != grids.plan:
        raise PlanMismatchError("plan does not match the one used in forward")
    S = grids.input_seq.shape[0]
    n_i, n_j = grids.num_cells
    bundle = GradientBundle.zeros(model, S)

    gh = [grad_state[j].copy() if grad_state is not None else model.zero_state()
          for j in range(c.L)]
    if ledger is not None:
        ledger.charge("frontier", sum(g.nbytes for g in gh))

    for i_idx in range(n_i, 0, -1):
        t0, t1 = plan.seq_block(i_idx, S)
        g_x = grad_y_seq[t0:t1].copy()
        if ledger is not None:
            ledger.charge("frontier", g_x.nbytes)
        for j_idx in range(n_j, 0, -1):
            lo, hi = plan.layer_block(j_idx, c.L)
            caches = recompute_cell(model, grids, (i_idx, j_idx), ledger, counter)
            for k in range(hi - lo - 1, -1, -1):
                j = lo + k
                g_new, gh[j], _ = chunk_backward(
                    model.layers[j], caches[k], g_x, gh[j], accum=bundle.layers[j]
                )
                if ledger is not None:
                    ledger.charge("frontier", g_new.nbytes)
                    ledger.release("frontier", g_x.nbytes)
                g_x = g_new
            if ledger is not None:
                _release_cell(ledger, caches)
                if j_idx > 1:
                    ledger.release("l_ckpt", grids.l_ckpt[(i_idx, j_idx)].nbytes)
                if i_idx > 1:
                    ledger.release("s_ckpt", grids.s_ckpt[(i_idx, j_idx)].nbytes)
            if j_idx > 1:
                del grids.l_ckpt[(i_idx, j_idx)]
            if i_idx > 1:
                del grids.s_ckpt[(i_idx, j_idx)]
        bundle.x_seq[t0:t1] = g_x
        if ledger is not None:
            ledger.release("frontier", g_x.nbytes)
    if ledger is not None:
        ledger.release("frontier", sum(g.nbytes for g in gh))
        ledger.release("io", grids.input_seq.nbytes)
    return bundle


def baseline_plan(strategy: str, L: int, S: int) -> CheckpointPlan:
    """The degenerate grid plans behind the two recompute baselines."""
    if strategy == "gc_on":
        return CheckpointPlan(l=1, s=S)
    if strategy == "sqrt_gc":
        return CheckpointPlan(l=min(L, math.isqrt(L - 1) + 1), s=S)
    raise ValueError(f"no baseline plan for strategy {strategy!r}")


def run_strategy(model: SSDStack, x_seq: np.ndarray, target_seq: np.ndarray,
                 strategy: str, ledger: ActivationLedger,
                 plan: CheckpointPlan | None = None):
    """One measured forward+loss+backward under the chosen strategy.

    Returns (loss, GradientBundle, metrics). Loss and gradients are
    identical across strategies; only the metrics differ. The wall-clock
    window covers forward+backward only.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy == "magc":
        if plan is None:
            raise ValueError("strategy 'magc' requires a CheckpointPlan")
    elif strategy in ("gc_on", "sqrt_gc"):
        plan = baseline_plan(strategy, model.config.L, x_seq.shape[0])

    counter = StepEvalCounter()
    clock = RunClock()

    def runner():
        with clock:
            if strategy == "gc_off":
                y, _, caches = model_forward_full(model, x_seq, ledger, counter)
                loss, gy = loss_mse(y, target_seq)
                bundle = model_backward_full(model, caches, gy, None, ledger)
            else:
                y, _, grids = forward_checkpointed(model, x_seq, plan, ledger, counter)
                loss, gy = loss_mse(y, target_seq)
                bundle = backward_grid(model, grids, gy, None, plan, ledger, counter)
        return loss, bundle

    result = measure(ledger, runner)
    loss, bundle = result.value
    metrics = {
        "baseline_units": result.baseline_units,
        "peak_units": result.peak_units,
        "overhead_units": result.overhead_units,
        "leak": result.leak,
        "forward_evals": counter.forward_evals,
        "recompute_evals": counter.recompute_evals,
        "step_evals": counter.total,
        "wall_ms": clock.elapsed_ms,
        "l": None if strategy == "gc_off" else plan.l,
        "s": None if strategy == "gc_off" else plan.s,
    }
    return loss, bundle, metrics
