"""Space-time hybridizable DG solver for the 2D transient Navier-Stokes equations."""
from .forms import FormParams
from .geometry import (SpatialMesh, TimePartition, build_structured_mesh,
                       uniform_time_partition)
from .problems import ProblemSpec, manufactured_problem, representable_problem
from .slab_solver import NonlinearSettings, SlabSolveError, run_simulation
from .spaces import SlabSpace, SlabState, evaluate
from .verification import compute_errors, conservation_report, convergence_study

__all__ = [
    "FormParams", "SpatialMesh", "TimePartition", "build_structured_mesh",
    "uniform_time_partition", "ProblemSpec", "manufactured_problem",
    "representable_problem", "NonlinearSettings", "SlabSolveError", "run_simulation",
    "SlabSpace", "SlabState", "evaluate", "compute_errors", "conservation_report",
    "convergence_study",
]

__version__ = "0.1.0"
