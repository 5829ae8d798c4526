"""Bi-axial gradient checkpointing for deep time-varying linear-recurrence stacks.

The package has four layers:

  * ssd       -- the recurrent layers, chunked forward/backward and the
                 full-cache reference path (gradient ground truth);
  * engine    -- grid checkpoint storage, grid-cell backward restoration and
                 the strategy runner (gc_off / gc_on / sqrt_gc / magc);
  * planner   -- the analytic memory model, interval search, regime
                 classification and constant calibration;
  * ledger    -- byte-exact accounting of retained activations;
  * training  -- synthetic tasks, optimizers and the finite-difference oracle.

See demos/ for narrative walkthroughs and the `gridckpt` CLI for benchmarks.
"""

from .engine import (
    CheckpointPlan,
    GridStore,
    PlanMismatchError,
    STRATEGIES,
    backward_grid,
    baseline_plan,
    forward_checkpointed,
    recompute_cell,
    run_strategy,
)
from .ledger import (
    ActivationLedger,
    BudgetExceededError,
    LedgerError,
    MeasureResult,
    StepEvalCounter,
    measure,
)
from .planner import (
    CalibrationError,
    CalibrationResult,
    CostConstants,
    PlanReport,
    UNIT_CONSTANTS,
    calibrate,
    cube_root_plan,
    engine_constants,
    optimal_plan,
    raw_memory,
    regime,
    savings_ratio,
    weighted_memory,
)
from .ssd import (
    ChunkCache,
    GradientBundle,
    LayerGrads,
    ModelConfig,
    RNNLayerParams,
    SSDLayerParams,
    SSDStack,
    ShapeError,
    chunk_backward,
    chunk_forward,
    init_params,
    loss_mse,
    make_config,
    model_backward_full,
    model_forward_full,
    project_selective,
    rnn_step,
    ssd_step,
)
from .training import (
    OptimizerState,
    TaskSpec,
    TrainingDivergedError,
    adam_step,
    gen_task,
    gradcheck_fd,
    magc_plan_for,
    sgd_step,
    train,
)

__version__ = "0.1.0"
