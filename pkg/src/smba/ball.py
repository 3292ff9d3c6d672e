"""Ball approximations of smooth constraints and the three-case feasibility step.

For a constraint ``h`` with ``L``-Lipschitz gradient, the quadratic upper model
at ``v`` is ``(L/2)(|y - c|^2 - R)`` with center ``c = v - grad/L`` and
``R = |grad|^2/L^2 - 2h/L``. Its zero sublevel set is a ball, empty when
``R <= 0``.
"""
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import kernels as K


class FeasibilityCase(Enum):
    ALREADY_FEASIBLE = K.CASE_FEASIBLE
    NONEMPTY_BALL = K.CASE_NONEMPTY
    EMPTY_BALL = K.CASE_EMPTY


class DegenerateConstraintError(ArithmeticError):
    """A violated constraint with zero gradient: no ball step is defined."""

    def __init__(self, index=None, h_value=None):
        self.index = index
        self.h_value = h_value
        where = "" if index is None else f" (constraint {index})"
        super().__init__(f"violated constraint has zero gradient{where}, h = {h_value}")


@dataclass(frozen=True, eq=False)
class BallApprox:
    center: np.ndarray
    radius_sq: float
    h_value: float
    grad_norm_sq: float
    lipschitz: float

    @property
    def case(self):
        if self.h_value <= 0.0:
            return FeasibilityCase.ALREADY_FEASIBLE
        if self.radius_sq > 0.0:
            return FeasibilityCase.NONEMPTY_BALL
        return FeasibilityCase.EMPTY_BALL


def build_ball(v, h_value, gradient, lipschitz):
    if not lipschitz > 0:
        raise ValueError(f"lipschitz must be positive, got {lipschitz}")
    v = np.asarray(v, dtype=float)
    g = np.asarray(gradient, dtype=float)
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(g)) and np.isfinite(h_value)):
        raise ValueError("non-finite input to build_ball")
    gn2 = float(g @ g)
    radius_sq = gn2 / lipschitz**2 - 2.0 * h_value / lipschitz
    return BallApprox(v - g / lipschitz, radius_sq, float(h_value), gn2, float(lipschitz))


def adaptive_p(ball: BallApprox, v, index=None):
    """Normalizer of the feasibility step; zero exactly when ``h <= 0``.

    Uses ``p = |g|(|g| + L sqrt(R+)) / 2`` for violated constraints, which equals
    ``h+ L / (1 - sqrt(R+)/|v - c|)`` but does not cancel when ``sqrt(R) ~ |v - c|``.
    """
    h = ball.h_value
    if h <= 0.0:
        return 0.0
    if ball.grad_norm_sq == 0.0:
        raise DegenerateConstraintError(index, h)
    if ball.radius_sq <= 0.0:
        return h * ball.lipschitz
    gn = np.sqrt(ball.grad_norm_sq)
    return 0.5 * gn * (gn + ball.lipschitz * np.sqrt(ball.radius_sq))


def project_onto_ball(v, ball: BallApprox):
    if not ball.radius_sq > 0:
        raise ValueError("cannot project onto an empty ball (radius_sq <= 0)")
    v = np.asarray(v, dtype=float)
    d = v - ball.center
    dist = float(np.linalg.norm(d))
    r = np.sqrt(ball.radius_sq)
    if dist <= r:
        return v.copy()
    return ball.center + (r / dist) * d


def feasibility_step(v, ball: BallApprox, gradient, beta, index=None):
    """One feasibility step ``z = v - beta h+ / p * grad``; returns ``(z, FeasibilityCase)``."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    z, case, _ = K.ball_step(np.asarray(v, dtype=float), float(ball.h_value),
                             np.asarray(gradient, dtype=float), float(ball.lipschitz), float(beta))
    if case == K.CASE_DEGENERATE:
        raise DegenerateConstraintError(index, ball.h_value)
    return z, FeasibilityCase(case)


def feasibility_step_via_projection(v, ball: BallApprox, beta):
    """``(1 - beta) v + beta P_ball(v)``; only defined for a violated constraint with a nonempty ball."""
    if ball.case is not FeasibilityCase.NONEMPTY_BALL:
        raise ValueError(f"projection form needs a nonempty ball and h > 0, got {ball.case.name}")
    v = np.asarray(v, dtype=float)
    return (1.0 - beta) * v + beta * project_onto_ball(v, ball)
