"""Three-phase feeder power flow and infeasibility analysis with slack sources."""
from .casegen import BUILTIN_CASES, GenSpec, generate, scale_loads
from .linsys import LinearSolver, SingularityReport, SparseSystem, factor_solve
from .model import (
    Branch,
    Bus,
    BusKind,
    Capacitor,
    Connection,
    Formulation,
    Load,
    Network,
    PhasorState,
    SlackRatingLimits,
    SlackVariables,
    Source,
    TpiaDefaults,
    Transformer,
    ValidationError,
    VoltageBounds,
    from_per_unit,
    to_per_unit,
    validate,
)
from .netlist import ParseError, load_feeder, parse_feeder, serialize_feeder, write_results
from .pdip import PdipOptions, solve
from .powerflow import HomotopySchedule, NewtonOptions, NonConvergence, homotopy_solve, solve_powerflow
from .tpia import SolveReport, apply_compensation, build_problem, localize

__version__ = "0.1.0"
