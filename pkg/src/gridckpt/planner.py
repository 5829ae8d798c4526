"""Analytic activation-memory model of the checkpoint grid and interval search.

For intervals (l, s) on an L-layer, S-step computation the retained
activation units are modelled as

    M(l, s) = LS/l + LS/s + l*s                       (unit costs)

and in weighted form, with per-unit costs for each retention family,

    M(l, s) = (LS/l) c_l + (LS/s) c_s + (l s) c_grid + s c_state,

where the last term covers per-step buffers that scale with the sequence
interval alone (state-recompute scratch, the block-gradient frontier).
The model uses real-valued division; measured peaks use ceiling block
counts, so small discrepancies between prediction and measurement are
expected and are what calibration absorbs.

The unconstrained minimum of the unit-cost model sits at l = s = (LS)^(1/3)
with value 3 (LS)^(2/3). Clamping to the feasible box [1, L] x [1, S] gives
three asymptotic regimes for the optimized memory: (LS)^(2/3) when neither
bound binds, linear in S once L^2 <= S (the long-sequence regime, where the
savings ratio LS/M* grows linearly in L), and linear in L once S^2 <= L.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .ssd import ModelConfig

REGIMES = ("CubeRoot", "LinearInS", "LinearInL")


class CalibrationError(ValueError):
    """Probe data cannot identify the cost constants."""


@dataclass(frozen=True)
class CostConstants:
    """Per-unit retention costs: layer blocks, state snapshots, cell, per-step."""

    c_l: float
    c_s: float
    c_grid: float
    c_state: float

    def __post_init__(self):
        if min(self.c_l, self.c_s, self.c_grid, self.c_state) < 0:
            raise ValueError("cost constants must be >= 0")
        if self.c_grid <= 0:
            raise ValueError("c_grid must be > 0")

    def as_dict(self) -> dict:
        return {"c_l": self.c_l, "c_s": self.c_s,
                "c_grid": self.c_grid, "c_state": self.c_state}


UNIT_CONSTANTS = CostConstants(1.0, 1.0, 1.0, 0.0)


def engine_constants(config: ModelConfig) -> CostConstants:
    """Analytic per-unit costs, in bytes, of the engine in this package.

    One stored boundary position is d elements; one state snapshot is H*N*P;
    one recomputed cell position caches (x, a, B, C, h) = d + H(1 + 2N + NP);
    the per-step s-term covers the block gradient frontier plus two working
    blocks (3d).
    """
    b = config.dtype.itemsize
    d, H, N, P = config.d, config.H, config.N, config.P
    return CostConstants(
        c_l=d * b,
        c_s=H * N * P * b,
        c_grid=(d + H * (1 + 2 * N + N * P)) * b,
        c_state=3 * d * b,
    )


def _check_box(l, s, L, S) -> None:
    if L < 1 or S < 1:
        raise ValueError("L and S must be >= 1")
    if not (1 <= l <= L):
        raise ValueError(f"l={l} outside [1, {L}]")
    if not (1 <= s <= S):
        raise ValueError(f"s={s} outside [1, {S}]")


def raw_memory(l, s, L, S) -> float:
    """Unit-cost model LS/l + LS/s + l*s; real-valued l, s allowed."""
    _check_box(l, s, L, S)
    return L * S / l + L * S / s + l * s


def weighted_memory(l, s, L, S, constants: CostConstants) -> float:
    """Weighted model (LS/l) c_l + (LS/s) c_s + l*s c_grid + s c_state."""
    _check_box(l, s, L, S)
    return (L * S / l * constants.c_l + L * S / s * constants.c_s
            + l * s * constants.c_grid + s * constants.c_state)


def cube_root_plan(L: int, S: int) -> tuple[float, float, float]:
    """Real-valued critical point of the unit-cost model: l = s = (LS)^(1/3).

    The stationarity conditions -LS/l^2 + s = 0 and -LS/s^2 + l = 0 meet
    there, with memory 3 (LS)^(2/3). Perfect cubes are snapped to their
    exact integer root.
    """
    if L < 1 or S < 1:
        raise ValueError("L and S must be >= 1")
    prod = L * S
    c = float(np.cbrt(prod))
    nearest = round(c)
    if nearest**3 == prod:
        c = float(nearest)
    return c, c, 3.0 * c * c


def regime(L: int, S: int) -> str:
    """Which asymptotic case the optimized memory falls in.

    The cases overlap at the boundary equalities; the cube-root case takes
    priority there (the values coincide asymptotically, e.g. 3(LS)^(2/3)
    equals 3S at S = L^2, so the choice is immaterial).
    """
    if L < 1 or S < 1:
        raise ValueError("L and S must be >= 1")
    if L <= S * S and S <= L * L:
        return "CubeRoot"
    if L * L <= S:
        return "LinearInS"
    return "LinearInL"


def savings_ratio(L: int, S: int, M: float) -> float:
    """Activation units without checkpointing over optimized units: LS / M."""
    if M <= 0:
        raise ValueError("M must be > 0")
    return L * S / M


@dataclass
class PlanReport:
    """Result of an interval search, JSON-serializable."""

    l: int
    s: int
    predicted_units: float
    predicted_raw: float
    regime: str
    savings_ratio: float
    constants: CostConstants

    def to_json_dict(self) -> dict:
        return {
            "l": self.l,
            "s": self.s,
            "predicted_units": self.predicted_units,
            "predicted_raw": self.predicted_raw,
            "regime": self.regime,
            "savings_ratio": self.savings_ratio,
            "constants": self.constants.as_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)


def optimal_plan(L: int, S: int, constants: CostConstants = UNIT_CONSTANTS,
                 granularity: int = 1) -> PlanReport:
    """Exhaustive integer minimization of the weighted model.

    Candidates are l in [1, L] and s in the multiples of `granularity` up
    to S. Ties break toward smaller l, then smaller s. The reported
    savings ratio uses the unit-cost value at the chosen point, keeping it
    dimensionless.
    """
    if L < 1 or S < 1:
        raise ValueError("L and S must be >= 1")
    if granularity < 1:
        raise ValueError("granularity must be >= 1")
    if granularity > S:
        raise ValueError(f"granularity {granularity} leaves no feasible s <= {S}")
    s_cand = np.arange(granularity, S + 1, granularity, dtype=np.float64)
    ls_prod = float(L) * float(S)
    seq_term = ls_prod / s_cand * constants.c_s + s_cand * constants.c_state
    best_val = np.inf
    best = (1, int(s_cand[0]))
    for l in range(1, L + 1):
        vals = seq_term + ls_prod / l * constants.c_l + l * s_cand * constants.c_grid
        k = int(np.argmin(vals))  # first minimum -> smallest s at this l
        if vals[k] < best_val:
            best_val = float(vals[k])
            best = (l, int(s_cand[k]))
    l_star, s_star = best
    return PlanReport(
        l=l_star,
        s=s_star,
        predicted_units=best_val,
        predicted_raw=raw_memory(l_star, s_star, L, S),
        regime=regime(L, S),
        savings_ratio=savings_ratio(L, S, raw_memory(l_star, s_star, L, S)),
        constants=constants,
    )


@dataclass
class CalibrationResult:
    constants: CostConstants
    residual_rel_errors: list[float]

    def to_json_dict(self) -> dict:
        return {"constants": self.constants.as_dict(),
                "residual_rel_errors": self.residual_rel_errors}


def calibrate(probe_runs) -> CalibrationResult:
    """Least-squares fit of the four cost constants from measured peaks.

    Each probe is (L, S, l, s, measured_peak_units). Needs at least four
    probes with a full-rank design over the basis (LS/l, LS/s, l*s, s);
    negative fitted constants mean the probes do not match the model and
    are treated as a calibration failure.
    """
    probes = list(probe_runs)
    if len(probes) < 4:
        raise CalibrationError(f"need >= 4 probes, got {len(probes)}")
    X = np.empty((len(probes), 4), dtype=np.float64)
    y = np.empty(len(probes), dtype=np.float64)
    for i, (L, S, l, s, peak) in enumerate(probes):
        _check_box(l, s, L, S)
        X[i] = (L * S / l, L * S / s, l * s, s)
        y[i] = peak
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < 4:
        raise CalibrationError(f"design matrix rank {rank} < 4; vary the probes")
    if np.any(coef < 0):
        raise CalibrationError(f"negative fitted constants {coef.tolist()}")
    pred = X @ coef
    rel = (np.abs(pred - y) / np.abs(y)).tolist()
    return CalibrationResult(
        constants=CostConstants(*(float(v) for v in coef)),
        residual_rel_errors=rel,
    )
