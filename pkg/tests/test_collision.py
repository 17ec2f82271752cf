import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpgdrive import collision as col
from gpgdrive import dynamics as dyn

GEOM = dyn.VehicleGeometry(2.0, 2.0, 2.0)
AXIS_RECT = col.rect_from_pose(dyn.VehicleState(0, 0, 0, 1), GEOM)


def test_axis_aligned_half_planes():
    assert np.array_equal(AXIS_RECT.a, [[1, 0], [-1, 0], [0, 1], [0, -1]])
    assert np.array_equal(AXIS_RECT.b, [2, 2, 1, 1])


def test_corners_sit_on_two_boundaries():
    corners = dyn.body_points(dyn.VehicleState(0.4, -0.7, 0.6, 1), GEOM)[:4]
    rect = col.rect_from_pose(dyn.VehicleState(0.4, -0.7, 0.6, 1), GEOM)
    for corner in corners:
        margins = rect.margins(corner)
        assert np.sum(np.abs(margins) <= 1e-12) == 2


def _inside_oracle(p, pose, geom):
    """Point-in-rotated-rectangle via the inverse rotation."""
    c, s = math.cos(pose.psi), math.sin(pose.psi)
    dx, dy = p[0] - pose.px, p[1] - pose.py
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return abs(lx) < (geom.lf + geom.lr) / 2 and abs(ly) < geom.width / 2


def test_interior_test_matches_geometry_oracle():
    pose = dyn.VehicleState(1.3, -0.4, 0.77, 1)
    rect = col.rect_from_pose(pose, GEOM)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-4, 4, size=(1000, 2)) + np.array([pose.px, pose.py])
    for p in pts:
        inside = bool(np.all(rect.margins(p) > 0))
        assert inside == _inside_oracle(p, pose, GEOM)


def test_overlap_center_value():
    assert col.overlap((0.0, 0.0), AXIS_RECT) == 4.0


def test_overlap_outside_is_zero():
    assert col.overlap((3.0, 0.0), AXIS_RECT) == 0.0


def test_overlap_hand_value():
    assert col.overlap((1.5, 0.5), AXIS_RECT) == pytest.approx(3.5 * 0.5 * 1.5 * 0.5)


def test_overlap_nonnegative_and_zero_iff_outside():
    rng = np.random.default_rng(1)
    pose = dyn.VehicleState(0.5, 0.2, -0.4, 1)
    rect = col.rect_from_pose(pose, GEOM)
    for p in rng.uniform(-5, 5, size=(500, 2)):
        v = col.overlap(p, rect)
        assert v >= 0.0
        assert (v > 0) == _inside_oracle(p, pose, GEOM)


def test_grad_outside_zero():
    assert np.array_equal(col.overlap_sq_grad((5.0, 0.0), AXIS_RECT), [0.0, 0.0])


def test_grad_center_symmetry():
    assert np.array_equal(col.overlap_sq_grad((0.0, 0.0), AXIS_RECT), [0.0, 0.0])


def test_grad_hand_value_and_fd():
    got = col.overlap_sq_grad((1.0, 0.0), AXIS_RECT)
    assert got == pytest.approx([-6.0, 0.0], abs=1e-12)
    h = 1e-6
    for i in range(2):
        p_hi = np.array([1.0, 0.0])
        p_lo = p_hi.copy()
        p_hi[i] += h
        p_lo[i] -= h
        fd = (0.5 * col.overlap(p_hi, AXIS_RECT) ** 2 - 0.5 * col.overlap(p_lo, AXIS_RECT) ** 2) / (2 * h)
        assert got[i] == pytest.approx(fd, rel=1e-6, abs=1e-6)


def test_grad_matches_fd_at_interior_points():
    rng = np.random.default_rng(2)
    pose = dyn.VehicleState(0.3, -0.1, 0.5, 1)
    rect = col.rect_from_pose(pose, GEOM)
    checked = 0
    for p in rng.uniform(-2, 2, size=(400, 2)) + np.array([pose.px, pose.py]):
        if np.min(rect.margins(p)) < 1e-3:
            continue
        grad = col.overlap_sq_grad(p, rect)
        for i in range(2):
            h = 1e-6
            hi, lo = p.copy(), p.copy()
            hi[i] += h
            lo[i] -= h
            fd = (0.5 * col.overlap(hi, rect) ** 2 - 0.5 * col.overlap(lo, rect) ** 2) / (2 * h)
            assert grad[i] == pytest.approx(fd, rel=1e-6, abs=1e-8)
        checked += 1
    assert checked > 50


def test_grad_vanishes_toward_boundary():
    # Approach the right edge x=2 from inside along the axis.
    p = np.array([2.0 - 1e-4, 0.0])
    g = col.overlap_sq_grad(p, AXIS_RECT)
    # |grad| ~ margin * (other margins)^2, so O(1e-4 * 16) near the face.
    assert np.linalg.norm(g) <= 16.0 * 1e-4 + 1e-6


def test_pair_constraints_far_apart():
    vals = col.pair_constraints(
        dyn.VehicleState(0, 0, 0, 5), GEOM, dyn.VehicleState(100, 0, 0, 5), GEOM
    )
    assert vals.shape == (10,)
    assert np.array_equal(vals, np.zeros(10))


def test_pair_constraints_detect_interpenetration():
    # Deep overlap: B's center inside A and vice versa.
    vals = col.pair_constraints(
        dyn.VehicleState(0, 0, 0, 5), GEOM, dyn.VehicleState(1.0, 0.5, 0.0, 5), GEOM
    )
    assert vals.shape == (10,)
    assert np.max(vals) > 0.0
    # At exactly identical poses every probe point sits on the other
    # rectangle's boundary, so all ten values clamp to zero.
    same = col.pair_constraints(
        dyn.VehicleState(0, 0, 0, 5), GEOM, dyn.VehicleState(0, 0, 0, 5), GEOM
    )
    assert np.array_equal(same, np.zeros(10))


def test_pair_constraints_always_length_ten():
    rng = np.random.default_rng(3)
    for _ in range(20):
        xa = dyn.VehicleState(*rng.uniform(-5, 5, 2), rng.uniform(-1, 1), 5)
        xb = dyn.VehicleState(*rng.uniform(-5, 5, 2), rng.uniform(-1, 1), 5)
        assert col.pair_constraints(xa, GEOM, xb, GEOM).shape == (10,)


@given(
    st.floats(-6, 6), st.floats(-6, 6), st.floats(-1.5, 1.5),
    st.floats(-6, 6), st.floats(-6, 6), st.floats(-1.5, 1.5),
)
@settings(max_examples=60, deadline=None)
def test_pair_constraints_swap_symmetry(ax, ay, apsi, bx, by, bpsi):
    xa = dyn.VehicleState(ax, ay, apsi, 5)
    xb = dyn.VehicleState(bx, by, bpsi, 5)
    ab = col.pair_constraints(xa, GEOM, xb, GEOM)
    ba = col.pair_constraints(xb, GEOM, xa, GEOM)
    # Swapping the pair reorders the ten entries: A-against-B block swaps
    # with B-against-A.
    assert np.allclose(ab, np.concatenate([ba[5:], ba[:5]]), atol=1e-12)
