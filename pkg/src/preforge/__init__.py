"""Physically realizable ensembles for Lindblad master equations.

Find pure-state ensembles whose members jump between each other at constant
rates so that the ensemble average is the steady state, then build the
measurement scheme that realises the jumps and simulate it.
"""

__version__ = "0.1.0"

from .errors import PreforgeError  # noqa: E402
from .lindblad import Lindbladian, SymmetryDescriptor, steady_state  # noqa: E402
from .constraints import build_system  # noqa: E402
from .solver import homotopy_solve, multistart_search, newton_refine, search_pass  # noqa: E402
from .verify import PRE, verify_pre  # noqa: E402
from .scheme import MeasurementScheme, derive_scheme, verify_scheme  # noqa: E402
from .trajectory import compare_statistics, simulate_pre  # noqa: E402

__all__ = ["__version__", "PreforgeError", "Lindbladian", "SymmetryDescriptor", "steady_state",
           "build_system", "homotopy_solve", "multistart_search", "newton_refine", "search_pass",
           "PRE", "verify_pre", "MeasurementScheme", "derive_scheme", "verify_scheme",
           "compare_statistics", "simulate_pre"]
