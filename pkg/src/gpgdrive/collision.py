"""Rectangle obstacles as half-plane intersections and the clamped-margin
product used for collision avoidance.

A footprint is four inward-pointing half-planes; the avoidance value for a
point is the product of the clamped margins, which is zero exactly when the
point is outside (or on the boundary of) the rectangle. Half of its square
is continuously differentiable everywhere, including across the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import VehicleGeometry, VehicleState, body_points_scalars
from .exprgraph import ExprLike, cos, plus, sin


@dataclass(frozen=True)
class HalfPlaneRect:
    """Rectangle {p : a_i . p + b_i > 0 for all i}; normals point inward."""

    a: np.ndarray  # (4, 2) unit inward normals
    b: np.ndarray  # (4,) offsets, m

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(4, 2)
        b = np.asarray(self.b, dtype=float).reshape(4)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        if not np.allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-9):
            raise ValueError("normals must be unit vectors")
        if not (np.allclose(a[0], -a[1], atol=1e-9) and np.allclose(a[2], -a[3], atol=1e-9)):
            raise ValueError("normals must come in opposite pairs (front/back, left/right)")
        if b[0] + b[1] <= 0.0 or b[2] + b[3] <= 0.0:
            raise ValueError("half-planes do not bound a nonempty rectangle")

    def margins(self, p: np.ndarray) -> np.ndarray:
        return self.a @ np.asarray(p, dtype=float) + self.b


def rect_params_scalars(
    px: ExprLike, py: ExprLike, psi: ExprLike, g: VehicleGeometry
) -> tuple[list[tuple[ExprLike, ExprLike]], list[ExprLike]]:
    """Half-plane (a, b) parameters of a posed footprint, generic scalars.

    Order: front, back, left, right (matching the body-corner convention).
    """
    c, s = cos(psi), sin(psi)
    half_len = 0.5 * (g.lf + g.lr)
    half_w = 0.5 * g.width
    e1 = (c, s)
    e2 = (-s, c)
    a_list = [e1, (-c, -s), e2, (s, -c)]
    # b_i = s_i - a_i . center for +axis, s_i + a_i . center for -axis
    b_list = [
        half_len - (c * px + s * py),
        half_len + (c * px + s * py),
        half_w - (-s * px + c * py),
        half_w + (-s * px + c * py),
    ]
    return a_list, b_list


def rect_from_pose(x: VehicleState, g: VehicleGeometry) -> HalfPlaneRect:
    """Footprint of a posed vehicle; interior iff strictly inside the body."""
    a_list, b_list = rect_params_scalars(x.px, x.py, x.psi, g)
    return HalfPlaneRect(np.array(a_list), np.array(b_list))


def overlap_scalars(
    px: ExprLike,
    py: ExprLike,
    a_list: list[tuple[ExprLike, ExprLike]],
    b_list: list[ExprLike],
) -> ExprLike:
    """Product of clamped half-plane margins, generic over scalar kinds."""
    prod: ExprLike | None = None
    for (ax, ay), b in zip(a_list, b_list):
        m = plus(ax * px + ay * py + b)
        prod = m if prod is None else prod * m
    assert prod is not None
    return prod


def overlap(p, r: HalfPlaneRect) -> float:
    """Clamped-margin product; 0 iff p is outside or on the boundary."""
    return float(np.prod(np.maximum(r.margins(p), 0.0)))


def overlap_sq_grad(p, r: HalfPlaneRect) -> np.ndarray:
    """Gradient of half the squared overlap; identically (0, 0) outside."""
    m = r.margins(p)
    if np.any(m <= 0.0):
        return np.zeros(2)
    grad = np.zeros(2)
    for i in range(4):
        others = np.prod(np.delete(m, i) ** 2)
        grad += m[i] * others * r.a[i]
    return grad


def pair_constraint_scalars(
    pose_a: tuple[ExprLike, ExprLike, ExprLike],
    geom_a: VehicleGeometry,
    pose_b: tuple[ExprLike, ExprLike, ExprLike],
    geom_b: VehicleGeometry,
) -> list[ExprLike]:
    """The 10 separation values for one vehicle pair at one time step.

    Corners and nose of A evaluated against B's rectangle, then corners and
    nose of B against A's; all 10 must be zero for the pair to be separated.
    """
    rect_a = rect_params_scalars(*pose_a, geom_a)
    rect_b = rect_params_scalars(*pose_b, geom_b)
    pts_a = body_points_scalars(*pose_a, geom_a)
    pts_b = body_points_scalars(*pose_b, geom_b)
    values = [overlap_scalars(px, py, *rect_b) for px, py in pts_a]
    values += [overlap_scalars(px, py, *rect_a) for px, py in pts_b]
    return values


def pair_constraints(
    xa: VehicleState, ga: VehicleGeometry, xb: VehicleState, gb: VehicleGeometry
) -> np.ndarray:
    """All 10 pairwise separation values for two posed vehicles."""
    vals = pair_constraint_scalars(
        (xa.px, xa.py, xa.psi), ga, (xb.px, xb.py, xb.psi), gb
    )
    return np.asarray(vals, dtype=float)
