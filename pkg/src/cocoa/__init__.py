"""Communication-efficient distributed primal-dual optimization.

The package splits into data handling (:mod:`cocoa.data`), objective pieces
and the case table (:mod:`cocoa.problems`), the local subproblem
(:mod:`cocoa.subproblem`, :mod:`cocoa.local_solvers`), the outer loop
(:mod:`cocoa.engine`), reference methods (:mod:`cocoa.baselines`),
executors (:mod:`cocoa.runtime`) and the experiment harness
(:mod:`cocoa.harness`, :mod:`cocoa.cli`).
"""

from .data import ColumnMatrix, Dataset, Partition, load_libsvm, parse_libsvm, partition_balanced
from .engine import EngineConfig, RunResult, run_cocoa, solve
from .local_solvers import LocalSolverConfig, measure_theta, run_local_solver
from .problems import (ProblemInstance, Regularizer, SeparableTerm, SmoothTerm, build_problem,
                       choose_variant, duality_gap, objective_A, objective_B)

__version__ = "0.1.0"

__all__ = [
    "ColumnMatrix", "Dataset", "EngineConfig", "LocalSolverConfig", "Partition", "ProblemInstance",
    "Regularizer", "RunResult", "SeparableTerm", "SmoothTerm", "build_problem", "choose_variant",
    "duality_gap", "load_libsvm", "measure_theta", "objective_A", "objective_B", "parse_libsvm",
    "partition_balanced", "run_cocoa", "run_local_solver", "solve",
]
