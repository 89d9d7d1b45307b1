"""Block-iterative least-squares solver for sources, attitude, calibration and global."""

from .agis import (
    AgisData,
    BatchResult,
    ConvergenceReport,
    IterationRecord,
    Job,
    LocalExecutor,
    SecondaryResult,
    SolverConfig,
    SolverState,
    initial_state,
    outer_iteration,
    partition,
    process_sources,
    residual_rms,
    run_agis,
    secondary_solve,
)
from .blocks import attitude_update, calibration_update, global_update
from .frame import FrameRotation, estimate_rotation, frame_align, rotate_attitude, rotate_catalog
from .normal import BlockKind, BlockPartials, PartialNormalEquations, accumulate_rows, sum_partials
from .sources import (
    ObservationBatch,
    SourceSolution,
    accumulate_block_partials,
    solve_sources,
    source_update,
)

__all__ = [
    "AgisData", "BatchResult", "BlockKind", "BlockPartials", "ConvergenceReport",
    "FrameRotation", "IterationRecord", "Job", "LocalExecutor", "ObservationBatch",
    "PartialNormalEquations", "SecondaryResult", "SolverConfig", "SolverState",
    "SourceSolution", "accumulate_block_partials", "accumulate_rows", "attitude_update",
    "calibration_update", "estimate_rotation", "frame_align", "global_update",
    "initial_state", "outer_iteration", "partition", "process_sources", "residual_rms",
    "rotate_attitude", "rotate_catalog", "run_agis", "secondary_solve", "solve_sources",
    "source_update", "sum_partials",
]
