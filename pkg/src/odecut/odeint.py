"""Explicit ODE integrators over tensor states.

All solvers are differentiated by unrolling: every stage evaluation stays on
the autograd tape, so ``h1.backward()`` reaches both ``h0`` and any
parameters captured by the dynamics.  Adaptive step-size selection is plain
Python control flow and carries no gradient.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import torch

Dynamics = Callable[[float, torch.Tensor], torch.Tensor]


class Method(str, enum.Enum):
    EULER = "euler"
    RK4 = "rk4"
    DOPRI5 = "dopri5"


class OdeError(RuntimeError):
    pass


class InvalidDynamicsError(OdeError):
    pass


class DivergenceError(OdeError):
    pass


class NonConvergenceError(OdeError):
    """Raised when ``max_steps`` is exhausted; ``state`` holds the best-so-far solution."""

    def __init__(self, message: str, state: torch.Tensor, t: float):
        super().__init__(message)
        self.state = state
        self.t = t


@dataclass(frozen=True)
class OdeProblem:
    dynamics: Dynamics
    t0: float
    t1: float
    h0: torch.Tensor

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ValueError(f"t1 must exceed t0, got [{self.t0}, {self.t1}]")


@dataclass(frozen=True)
class SolverConfig:
    method: Method = Method.DOPRI5
    fixed_step: float = 0.1
    rtol: float = 1e-3
    atol: float = 1e-4
    max_steps: int = 1000
    # None selects the starting step from the local derivative scale.
    initial_step: Optional[float] = None
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if self.fixed_step <= 0:
            raise ValueError("fixed_step must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.initial_step is not None and self.initial_step <= 0:
            raise ValueError("initial_step must be positive")

    def with_overrides(self, **kwargs) -> "SolverConfig":
        return replace(self, **kwargs)


@dataclass
class OdeSolution:
    h1: torch.Tensor
    steps_taken: int
    rejected_steps: int = 0
    max_error_estimate: float = 0.0
    n_evals: int = 0
    step_sizes: list = field(default_factory=list)


def _eval(problem: OdeProblem, t: float, h: torch.Tensor) -> torch.Tensor:
    out = problem.dynamics(t, h)
    if out.shape != h.shape:
        raise InvalidDynamicsError(
            f"dynamics returned shape {tuple(out.shape)} for state shape {tuple(h.shape)}"
        )
    return out


def euler_step(problem: OdeProblem, t: float, h: torch.Tensor, dt: float) -> torch.Tensor:
    if dt <= 0:
        raise ValueError("dt must be positive")
    return h + dt * _eval(problem, t, h)


def rk4_step(problem: OdeProblem, t: float, h: torch.Tensor, dt: float) -> torch.Tensor:
    if dt <= 0:
        raise ValueError("dt must be positive")
    k1 = _eval(problem, t, h)
    k2 = _eval(problem, t + dt / 2, h + (dt / 2) * k1)
    k3 = _eval(problem, t + dt / 2, h + (dt / 2) * k2)
    k4 = _eval(problem, t + dt, h + dt * k3)
    return h + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


_FIXED_STEPPERS = {Method.EULER: (euler_step, 1), Method.RK4: (rk4_step, 4)}


def _check_finite(h: torch.Tensor, t: float):
    if not bool(torch.isfinite(h).all()):
        raise DivergenceError(f"non-finite state at t={t:.6g}")


def integrate_fixed(problem: OdeProblem, config: SolverConfig) -> OdeSolution:
    if config.method not in _FIXED_STEPPERS:
        raise ValueError(f"integrate_fixed needs euler or rk4, got {config.method.value}")
    step, evals_per_step = _FIXED_STEPPERS[config.method]
    span = problem.t1 - problem.t0
    n_full = int(math.floor(span / config.fixed_step + 1e-9))
    dts = [config.fixed_step] * n_full
    remainder = span - n_full * config.fixed_step
    if remainder > 1e-12 * max(1.0, abs(span)):
        dts.append(remainder)
    if len(dts) > config.max_steps:
        raise NonConvergenceError(
            f"{len(dts)} fixed steps exceed max_steps={config.max_steps}", problem.h0, problem.t0
        )
    h, t = problem.h0, problem.t0
    for dt in dts:
        h = step(problem, t, h, dt)
        t += dt
        _check_finite(h, t)
    return OdeSolution(h1=h, steps_taken=len(dts), n_evals=evals_per_step * len(dts), step_sizes=dts)


# Dormand-Prince 5(4) tableau.
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))


def _combine(h: torch.Tensor, dt: float, coeffs, ks) -> torch.Tensor:
    out = h
    for c, k in zip(coeffs, ks):
        if c != 0.0:
            out = out + (dt * c) * k
    return out


def _rms_norm(err: torch.Tensor, h: torch.Tensor, h_new: torch.Tensor, config: SolverConfig) -> float:
    with torch.no_grad():
        scale = config.atol + config.rtol * torch.maximum(h.abs(), h_new.abs())
        return float(torch.sqrt(torch.mean((err / scale) ** 2)))


def _initial_step(problem: OdeProblem, h0: torch.Tensor, f0: torch.Tensor, config: SolverConfig) -> float:
    # Hairer, Norsett & Wanner, "Solving ODEs I", II.4.
    span = problem.t1 - problem.t0
    with torch.no_grad():
        scale = config.atol + config.rtol * h0.abs()
        d0 = float(torch.sqrt(torch.mean((h0 / scale) ** 2)))
        d1 = float(torch.sqrt(torch.mean((f0 / scale) ** 2)))
        h_a = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
        h_a = min(h_a, span)
        f1 = _eval(problem, problem.t0 + h_a, h0 + h_a * f0)
        d2 = float(torch.sqrt(torch.mean(((f1 - f0) / scale) ** 2))) / h_a
        if max(d1, d2) <= 1e-15:
            h_b = max(1e-6, h_a * 1e-3)
        else:
            h_b = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h_a, h_b, span)


def dopri5_integrate(problem: OdeProblem, config: SolverConfig) -> OdeSolution:
    if config.method is not Method.DOPRI5:
        raise ValueError(f"dopri5_integrate needs method dopri5, got {config.method.value}")
    t, t1 = problem.t0, problem.t1
    h = problem.h0
    k1 = _eval(problem, t, h)
    n_evals = 1
    if config.initial_step is not None:
        dt = min(config.initial_step, t1 - t)
    else:
        dt = _initial_step(problem, h, k1, config)
        n_evals += 1

    accepted = rejected = 0
    max_err = 0.0
    step_sizes = []
    eps = 1e-12 * max(1.0, abs(t1))
    while t1 - t > eps:
        if accepted + rejected >= config.max_steps:
            raise NonConvergenceError(
                f"max_steps={config.max_steps} exhausted at t={t:.6g}", h, t
            )
        last = dt >= t1 - t
        if last:
            dt = t1 - t
        ks = [k1]
        for i in range(1, 7):
            hi = _combine(h, dt, _A[i], ks)
            ks.append(_eval(problem, t + _C[i] * dt, hi))
        n_evals += 6
        # Row 7 of the tableau equals the 5th-order weights, so stage 7's
        # input is the new state (first-same-as-last).
        h_new = hi
        err = _combine(torch.zeros_like(h), dt, _E, ks)
        if not bool(torch.isfinite(h_new).all()):
            raise DivergenceError(f"non-finite state at t={t + dt:.6g}")
        norm = _rms_norm(err, h, h_new, config)

        if norm <= 1.0:
            t = t1 if last else t + dt
            h = h_new
            k1 = ks[6]
            accepted += 1
            step_sizes.append(dt)
            max_err = max(max_err, norm)
            factor = config.max_factor if norm == 0 else config.safety * norm ** -0.2
            factor = min(config.max_factor, max(config.min_factor, factor))
        else:
            rejected += 1
            factor = max(config.min_factor, config.safety * norm ** -0.2)
            factor = min(1.0, factor)
        dt = dt * factor

    return OdeSolution(
        h1=h,
        steps_taken=accepted,
        rejected_steps=rejected,
        max_error_estimate=max_err,
        n_evals=n_evals,
        step_sizes=step_sizes,
    )


def dopri5_replay(problem: OdeProblem, step_sizes: Sequence[float]) -> OdeSolution:
    """Take the given Dopri5 steps with no error control.

    Replaying the accepted steps of an earlier adaptive solve gives the
    smooth map whose derivative the unrolled tape computes; the adaptive map
    itself jumps wherever an accept/reject decision flips.
    """
    if abs(problem.t0 + sum(step_sizes) - problem.t1) > 1e-9 * max(1.0, abs(problem.t1)):
        raise ValueError("replayed steps do not span [t0, t1]")
    t, h = problem.t0, problem.h0
    k1 = _eval(problem, t, h)
    n_evals = 1
    for dt in step_sizes:
        ks = [k1]
        for i in range(1, 7):
            hi = _combine(h, dt, _A[i], ks)
            ks.append(_eval(problem, t + _C[i] * dt, hi))
        n_evals += 6
        t, h, k1 = t + dt, hi, ks[6]
    return OdeSolution(h1=h, steps_taken=len(step_sizes), rejected_steps=0, max_error_estimate=float("nan"),
                       n_evals=n_evals, step_sizes=list(step_sizes))


def odeint(problem: OdeProblem, config: SolverConfig) -> OdeSolution:
    """Integrate ``problem`` with whichever method ``config`` selects."""
    if config.method is Method.DOPRI5:
        return dopri5_integrate(problem, config)
    return integrate_fixed(problem, config)
