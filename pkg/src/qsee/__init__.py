"""Numerical toolkit for quasilinear stochastic evolution equations.

Modules
-------
spaces     grids, fractional norm surrogates, cut-off and stopping monitor
noise      counter-based truncated cylindrical Brownian increments
stepper    frozen-coefficient segments, Picard iteration, MR constants
localizer  stopping-time restarts, truncation hierarchy, blow-up flags
models     divergence and non-divergence models and their verifiers
harness    JSON-configured experiments and the ``qsee`` command line
"""

__version__ = "0.1.0"

from .errors import *  # noqa: E402,F401,F403
from .localizer import (  # noqa: E402
    Caps,
    LocalizedPath,
    StoppingRecord,
    classify_termination,
    run_localized,
    run_truncated_hierarchy,
    truncate_Rn,
)
from .models import (  # noqa: E402
    ModelSpec,
    bounded_diffusivity,
    make_gdiv_model,
    make_nondivergence_model,
    moment_verify,
    ou_oracle,
    phi_n,
)
from .noise import NoisePath, NoiseSpec, coarsen, sample_path  # noqa: E402
from .spaces import GridField, SpaceTriple, theta_lambda  # noqa: E402
from .stepper import (  # noqa: E402
    SmallnessBudget,
    assemble_operator,
    choose_lambda,
    estimate_mr_constants,
    picard_solve,
    semi_implicit_step,
    solve_frozen_segment,
)
