"""avgbound: long-time-average cost bounds and small-feedback synthesis
for polynomial dynamical systems via sum-of-squares programming."""

__version__ = "0.1.0"

from .polynomial import (  # noqa: F401
    Mono,
    ParseError,
    Polynomial,
    PolyMat,
    PolyVec,
    grad_dot,
    monomial_basis,
    parse_poly,
)
from .bound import (  # noqa: F401
    AttractorCertificate,
    BoundCertificate,
    PolySystem,
    attractor_certificate,
    average_bound_program,
    cylinder_wake_system,
    lower_bound,
    upper_bound,
)
from .synthesis import (  # noqa: F401
    Controller,
    ExpansionState,
    ExpansionTerm,
    StepOptions,
    refine_fixed_eps,
)
from .simulator import (  # noqa: F401
    Equilibrium,
    SimConfig,
    SimReport,
    SweepBoundOptions,
    SweepResult,
    SweepRow,
    check_certificate,
    find_equilibria,
    integrate,
    sweep_eps,
    time_average,
)
