"""Vehicle models, fixed-step discretization, and input-to-state rollouts.

All model right-hand sides are written against the generic scalar math in
:mod:`gpgdrive.exprgraph`, so the same code paths produce numeric states for
simulation and expression nodes when a problem graph is being assembled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .exprgraph import ExprLike, atan, cos, sin, tan


class DomainError(ValueError):
    """Input outside the model's valid region (e.g. steering at +-pi/2)."""


def _normalize_angle(psi: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.fmod(psi + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class VehicleState:
    """Planar pose and speed of one vehicle's center of mass."""

    px: float  # m
    py: float  # m
    psi: float  # rad, normalized to (-pi, pi]
    v: float  # m/s

    def __post_init__(self):
        for name in ("px", "py", "psi", "v"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite state component {name}")
        object.__setattr__(self, "psi", _normalize_angle(self.psi))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.px, self.py, self.psi, self.v)


@dataclass(frozen=True)
class InputSample:
    """One control sample: acceleration and (for bicycle models) steering."""

    a: float = 0.0  # m/s^2
    delta: float = 0.0  # rad

    def as_tuple(self) -> tuple[float, float]:
        return (self.a, self.delta)


@dataclass(frozen=True)
class VehicleGeometry:
    """Rectangular footprint: CM-to-front, CM-to-rear, and width."""

    lf: float  # m
    lr: float  # m
    width: float  # m

    def __post_init__(self):
        if min(self.lf, self.lr, self.width) <= 0.0:
            raise ValueError("geometry lengths must be positive")


@dataclass(frozen=True)
class KinematicBicycle:
    """Kinematic bicycle with slip angle from the front/rear split."""

    lf: float
    lr: float
    mu: float = 0.0  # 1/s speed decay

    input_dim = 2


@dataclass(frozen=True)
class LongitudinalDoubleIntegrator:
    """Straight-lane vehicle: exact double-integrator in px, frozen py/psi."""

    input_dim = 1


@dataclass(frozen=True)
class ConstantVelocity:
    """Scripted vehicle advancing along its heading at fixed speed."""

    input_dim = 0


@dataclass(frozen=True)
class Stationary:
    """Scripted obstacle; ignores inputs entirely."""

    input_dim = 0


DynamicsModel = Union[KinematicBicycle, LongitudinalDoubleIntegrator, ConstantVelocity, Stationary]

State4 = tuple[ExprLike, ExprLike, ExprLike, ExprLike]


def _bicycle_rhs(x: State4, u: Sequence[ExprLike], lf: float, lr: float, mu: float) -> State4:
    px, py, psi, v = x
    a, delta = u[0], u[1]
    beta = atan(lr / (lf + lr) * tan(delta))
    return (
        v * cos(psi + beta),
        v * sin(psi + beta),
        v / lr * sin(beta),
        a - mu * v,
    )


def bicycle_derivative(
    x: VehicleState, u: InputSample, g: VehicleGeometry, mu: float = 0.0
) -> tuple[float, float, float, float]:
    """Continuous-time state derivative of the kinematic bicycle."""
    if abs(u.delta) >= math.pi / 2.0:
        raise DomainError(f"steering {u.delta} outside (-pi/2, pi/2)")
    return _bicycle_rhs(x.as_tuple(), u.as_tuple(), g.lf, g.lr, mu)


def step_scalars(m: DynamicsModel, x: State4, u: Sequence[ExprLike], ts: float) -> State4:
    """One discrete step, generic over floats and graph expressions."""
    px, py, psi, v = x
    if isinstance(m, KinematicBicycle):
        # Fixed-step RK4 on the smooth bicycle right-hand side.
        def rhs(s: State4) -> State4:
            return _bicycle_rhs(s, u, m.lf, m.lr, m.mu)

        k1 = rhs(x)
        k2 = rhs(tuple(xi + 0.5 * ts * ki for xi, ki in zip(x, k1)))
        k3 = rhs(tuple(xi + 0.5 * ts * ki for xi, ki in zip(x, k2)))
        k4 = rhs(tuple(xi + ts * ki for xi, ki in zip(x, k3)))
        return tuple(
            xi + ts / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
            for xi, a1, a2, a3, a4 in zip(x, k1, k2, k3, k4)
        )
    if isinstance(m, LongitudinalDoubleIntegrator):
        a = u[0]
        return (px + ts * v + 0.5 * ts * ts * a, py, psi, v + ts * a)
    if isinstance(m, ConstantVelocity):
        return (px + ts * v * cos(psi), py + ts * v * sin(psi), psi, v)
    if isinstance(m, Stationary):
        return (px, py, psi, v)
    raise TypeError(f"unknown dynamics model {m!r}")


def step(m: DynamicsModel, x: VehicleState, u: InputSample | None, ts: float) -> VehicleState:
    """Advance one vehicle by one sampling period."""
    uu: tuple[float, ...] = () if u is None else u.as_tuple()
    if isinstance(m, KinematicBicycle) and abs(uu[1]) >= math.pi / 2.0:
        raise DomainError(f"steering {uu[1]} outside (-pi/2, pi/2)")
    nxt = step_scalars(m, x.as_tuple(), uu, ts)
    return VehicleState(*nxt)


def rollout_scalars(
    m: DynamicsModel, x0: State4, inputs: Sequence[Sequence[ExprLike]], ts: float
) -> list[State4]:
    """States (start, after input 0, ..., after input N-1); length N+1."""
    states = [x0]
    for u in inputs:
        states.append(step_scalars(m, states[-1], u, ts))
    return states


def rollout(
    m: DynamicsModel, x0: VehicleState, useq: Sequence[InputSample | None], ts: float
) -> list[VehicleState]:
    """Single-shooting solution map: apply the whole input sequence."""
    states = [x0]
    for u in useq:
        states.append(step(m, states[-1], u, ts))
    return states


def predict(m: DynamicsModel, x0: VehicleState, n: int, ts: float) -> list[VehicleState]:
    """Input-free rollout for scripted vehicles (constant velocity, parked)."""
    if m.input_dim != 0:
        raise DomainError("predict() only applies to input-free models")
    return rollout(m, x0, [None] * n, ts)


def body_points_scalars(
    px: ExprLike, py: ExprLike, psi: ExprLike, g: VehicleGeometry
) -> list[tuple[ExprLike, ExprLike]]:
    """Four footprint corners plus the nose, generic over scalar kinds.

    The footprint is the rectangle of length lf+lr and the given width,
    centered at the CM; the nose sits lf ahead of the CM along the heading.
    """
    c, s = cos(psi), sin(psi)
    half_len = 0.5 * (g.lf + g.lr)
    half_w = 0.5 * g.width
    pts = []
    for ex, ey in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        dx, dy = ex * half_len, ey * half_w
        pts.append((px + dx * c - dy * s, py + dx * s + dy * c))
    pts.append((px + g.lf * c, py + g.lf * s))
    return pts


def body_points(x: VehicleState, g: VehicleGeometry) -> np.ndarray:
    """(5, 2) array: corners (front-left, front-right, rear-left, rear-right), nose."""
    return np.array(body_points_scalars(x.px, x.py, x.psi, g))
