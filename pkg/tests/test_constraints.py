from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import central_diff, rel_err
from neuroproj.constraints import Bend, CircleBoundary, Distance, PolygonCollision, wrap_angle
from neuroproj.sim import lattice


def _jac_fd(c, P):
    r0 = c.residuals(P[None])[0]
    J = np.zeros((r0.size,) + P.shape)
    for k in range(r0.size):
        J[k] = central_diff(lambda Q: float(c.residuals(Q[None])[0, k]), P)
    return J


def test_distance_residual_and_jacobian(rng):
    c = Distance(0, 2, 1.5)
    P = rng.normal(size=(3, 2))
    assert c.residuals(P[None])[0, 0] == pytest.approx(np.linalg.norm(P[2] - P[0]) - 1.5)
    assert rel_err(c.jacobian(P[None])[0], _jac_fd(c, P)) < 1e-8


def test_bend_residual_and_jacobian(rng):
    c = Bend(0, 1, 2, rest_angle=0.3)
    P = np.array([[0.0, 0.0], [1.0, 0.1], [1.7, 0.9]])
    a, b = P[1] - P[0], P[2] - P[1]
    ang = math.atan2(a[0] * b[1] - a[1] * b[0], a @ b)
    assert c.residuals(P[None])[0, 0] == pytest.approx(ang - 0.3)
    assert rel_err(c.jacobian(P[None])[0], _jac_fd(c, P)) < 1e-8
    assert c.soft and not Bend(0, 1, 2, stiffness=1.0).soft


def test_circle_signed_distance_and_jacobian():
    c = CircleBoundary((0.0, 0.0), 2.0, (0, 1))
    P = np.array([[0.5, 0.3], [0.0, 2.2]])
    np.testing.assert_allclose(c.residuals(P[None])[0], [2.0 - np.hypot(0.5, 0.3), -0.2])
    assert rel_err(c.jacobian(P[None])[0], _jac_fd(c, P)) < 1e-8
    out = CircleBoundary((0.0, 0.0), 2.0, (0,), inside=False)
    assert out.residuals(np.array([[[3.0, 0.0]]]))[0, 0] == pytest.approx(1.0)


def test_circle_projection_closed_form():
    c = CircleBoundary((1.0, -1.0), 2.0, (0,))
    pts = [[1.0, -1.0 - 2.2]]  # signed distance -0.2
    c.project(pts, [1.0])
    assert c.residuals(np.array([pts]))[0, 0] == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(pts[0], [1.0, -3.0], atol=1e-12)


def test_distance_projection_equal_masses():
    pts = [[0.0, 0.0], [2.0, 0.0]]
    Distance(0, 1, 1.0).project(pts, [1.0, 1.0])
    np.testing.assert_allclose(pts, [[0.5, 0.0], [1.5, 0.0]], atol=1e-15)


def test_distance_projection_respects_pins():
    pts = [[0.0, 0.0], [2.0, 0.0]]
    Distance(0, 1, 1.0).project(pts, [0.0, 1.0])
    np.testing.assert_allclose(pts, [[0.0, 0.0], [1.0, 0.0]], atol=1e-15)


@given(st.floats(-3.0, 3.0), st.floats(-0.5, 0.5))
def test_bend_projection_reduces_error(theta, rest):
    P = [[-1.0, 0.0], [0.0, 0.0], [math.cos(theta), math.sin(theta)]]
    c = Bend(0, 1, 2, rest, stiffness=1.0)
    before = abs(c.residuals(np.array([P]))[0, 0])
    c.project(P, [1.0, 1.0, 1.0])
    after = abs(c.residuals(np.array([P]))[0, 0])
    assert after <= before + 1e-12


def test_wrap_angle_range():
    a = np.linspace(-10, 10, 101)
    w = wrap_angle(a)
    assert np.all(w >= -np.pi) and np.all(w < np.pi)
    np.testing.assert_allclose(np.sin(w), np.sin(a), atol=1e-12)


def _two_boxes(offset):
    box = lattice(2, 2)  # CCW hull order (0, 1, 3, 2)
    return np.vstack([box, box + np.asarray(offset)])


def test_polygon_collision_signed_distance():
    c = PolygonCollision((0, 1, 2, 3), (0, 1, 3, 2), (4, 5, 6, 7), (4, 5, 7, 6))
    apart = _two_boxes((3.0, 0.0))
    assert np.all(c.residuals(apart[None]) > 0)
    overlap = _two_boxes((0.8, 0.1))
    r = c.residuals(overlap[None])[0]
    # deepest vertex (0.3, -0.4) of the second box: 0.2 from the right edge, 0.1 from the bottom
    assert r.min() == pytest.approx(-0.1)
    J = c.jacobian(overlap[None])[0]
    # only the penetrating vertices have a linear, locally exact signed distance
    fd = _jac_fd(c, overlap)
    k = int(np.argmin(r))
    assert rel_err(J[k], fd[k]) < 1e-8


def test_polygon_projection_resolves_overlap():
    c = PolygonCollision((0, 1, 2, 3), (0, 1, 3, 2), (4, 5, 6, 7), (4, 5, 7, 6))
    pts = _two_boxes((0.8, 0.1)).tolist()
    for _ in range(20):
        c.project(pts, [1.0] * 8)
    assert c.residuals(np.array([pts])).min() > -1e-9
