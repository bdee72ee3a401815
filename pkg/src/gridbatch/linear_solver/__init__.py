"""Sparse LU machinery: ordering, one-time factorization, batched refactorization and solves."""
from .amd import amd_order, natural_order
from .gp import gp_factor, gp_solve
from .kernels import fs_bs, refactorize_inplace, refactorize_workspace, run_ops
from .schedule import ExecutionPlan, build_plan, execute_schedule
from .symbolic import (
    BULK,
    NARROW,
    SCALAR,
    LevelSchedule,
    SingularMatrixError,
    StructurallySingularError,
    SymbolicLu,
    build_level_schedule,
    factorize_initial,
    second_chance_refactorize,
    symbolic_from_pattern,
)
from .tape import BatchTape, from_minibatches, to_minibatches

__all__ = [
    "BULK", "NARROW", "SCALAR", "BatchTape", "ExecutionPlan", "LevelSchedule", "SingularMatrixError",
    "StructurallySingularError", "SymbolicLu", "amd_order", "build_level_schedule", "build_plan",
    "execute_schedule", "factorize_initial", "from_minibatches", "fs_bs", "gp_factor", "gp_solve",
    "natural_order", "refactorize_inplace", "refactorize_workspace", "run_ops", "second_chance_refactorize",
    "symbolic_from_pattern", "to_minibatches",
]
