"""Stochastic moving ball approximation for convex problems with many smooth constraints."""
from ._accel import BACKEND, HAS_NUMBA
from .ball import (BallApprox, DegenerateConstraintError, FeasibilityCase, adaptive_p, build_ball,
                   feasibility_step, feasibility_step_via_projection, project_onto_ball)
from .generate import GenSpec, gen_instance, gen_psd
from .problem import (ConstrainedProblem, FunctionConstraints, FunctionObjective, QCQPInstance,
                      QuadraticConstraints, QuadraticObjective, ReferenceOptimum, estimate_lipschitz,
                      qcqp_as_problem)
from .sets import Box, HyperplaneOrthant, NonnegativeOrthant, ProductSet, WholeSpace
from .solver import (RunTrace, SolverConfig, StepsizeSchedule, StoppingRule, deterministic_max_violation_step,
                     fit_loglog_slope, fit_rate_slope, run, run_repeated, smba_iterate)

__version__ = "0.1.0"
