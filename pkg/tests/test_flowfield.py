from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from helpers import angles, circle_field, uniform_field, vc_field
from uasflow.airspace import AirspaceGeometry, FloorDefinition, ParaboloidSurface, UnplannedRegion
from uasflow.errors import ConfigurationError, DomainError, SingularityError
from uasflow.flowfield import (
    FlowElement,
    FlowField,
    lift_to_floor,
    obstacle_radius,
    potential_at,
    stream_at,
    stream_point_on_segment,
    surface_acceleration,
    surface_velocity,
    trace_streamline,
    velocity_at,
)
from uasflow.scenario import inflow_point

FIELD = circle_field()  # u = 40, R = 10, sector [-40, 40]^2


class TestPotential:
    def test_uniform(self):
        assert potential_at(uniform_field(), (1.0, 0.0)) == pytest.approx(40.0, abs=1e-14)

    def test_circle_top_vanishes(self):
        assert potential_at(FIELD, (0.0, 10.0)) == pytest.approx(0.0, abs=1e-12)

    def test_axis_value(self):
        # 40 * 20 + 4000 * 20 / 400
        assert potential_at(FIELD, (20.0, 0.0)) == pytest.approx(1000.0, rel=1e-15)

    def test_axis_value_matches_line_integral(self):
        # phi(40, 0) - phi(20, 0) is the integral of K * u along the axis
        integral, _ = quad(lambda x: velocity_at(FIELD, (x, 0.0))[0], 20.0, 40.0, epsabs=1e-12)
        assert potential_at(FIELD, (40.0, 0.0)) - potential_at(FIELD, (20.0, 0.0)) == pytest.approx(
            integral, rel=1e-10
        )

    def test_singularity(self):
        with pytest.raises(SingularityError):
            potential_at(FIELD, (0.0, 1e-10))


class TestStream:
    @pytest.mark.parametrize("x", [-35.0, -10.5, 12.0, 39.0])
    def test_axis_is_zero(self, x):
        assert stream_at(FIELD, (x, 0.0)) == 0.0

    def test_circle_is_zero(self):
        for a in angles(360):
            assert abs(stream_at(FIELD, 10.0 * np.array([math.cos(a), math.sin(a)]))) < 1e-11

    def test_closed_form_point(self):
        # 40 * (1 - 100 / 400) * 20
        assert stream_at(FIELD, (0.0, 20.0)) == pytest.approx(600.0, rel=1e-15)

    def test_closed_form_everywhere(self, rng):
        for x, y in rng.uniform(-40, 40, size=(200, 2)):
            r2 = x * x + y * y
            if r2 < 1:
                continue
            assert stream_at(FIELD, (x, y)) == pytest.approx(40.0 * (1 - 100.0 / r2) * y, rel=1e-12, abs=1e-10)


class TestVelocity:
    def test_uniform(self):
        np.testing.assert_allclose(velocity_at(uniform_field(), (3.0, -2.0)), [40.0, 0.0], atol=1e-14)

    def test_cost_divides(self):
        f = FlowField(FloorDefinition(1), (FlowElement("uniform", 40.0),), 4.0)
        np.testing.assert_allclose(f.velocity((0.0, 0.0)), [10.0, 0.0])

    def test_callable_cost(self):
        f = FlowField(FloorDefinition(1), (FlowElement("uniform", 40.0),), lambda p, t: 2.0 + p[0] ** 2)
        np.testing.assert_allclose(f.velocity((2.0, 0.0)), [40.0 / 6.0, 0.0])

    @pytest.mark.parametrize("x", [-10.0, 10.0])
    def test_stagnation_points(self, x):
        h = 1e-5
        gx = (potential_at(FIELD, (x + h, 0.0)) - potential_at(FIELD, (x - h, 0.0))) / (2 * h)
        gy = (potential_at(FIELD, (x, h)) - potential_at(FIELD, (x, -h))) / (2 * h)
        assert abs(gx) < 1e-6 and abs(gy) < 1e-6
        assert np.linalg.norm(velocity_at(FIELD, (x, 0.0))) < 1e-9

    def test_no_penetration(self):
        for a in angles(360):
            n = np.array([math.cos(a), math.sin(a)])
            v = velocity_at(FIELD, 10.0 * n)
            assert abs(v @ n) <= 1e-9 * max(np.linalg.norm(v), 1.0)

    def test_inside_obstacle_raises(self):
        with pytest.raises(DomainError):
            velocity_at(FIELD, (3.0, 3.0))

    def test_hessian_matches_differences(self, rng):
        f = FlowField(
            FloorDefinition(1),
            (
                FlowElement("uniform", 3.0, 0.4),
                FlowElement("doublet", 50.0, 0.4, (1.0, 2.0)),
                FlowElement("source", 7.0, 0.0, (-5.0, 0.0)),
                FlowElement("sink", 4.0, 1.0, (6.0, -3.0)),
            ),
        )
        h = 1e-5
        for p in rng.uniform(-12, 12, size=(30, 2)):
            if f.singular_distance(p) < 1.0:
                continue
            H = f.hessian_potential(p)
            for k in range(2):
                e = np.zeros(2)
                e[k] = h
                col = (f.grad_potential(p + e) - f.grad_potential(p - e)) / (2 * h)
                np.testing.assert_allclose(H[:, k], col, rtol=1e-6, atol=1e-7)


class TestElements:
    def test_exactly_one_uniform(self):
        with pytest.raises(ConfigurationError, match="one Uniform element required"):
            FlowField(FloorDefinition(1), ())
        with pytest.raises(ConfigurationError):
            FlowField(FloorDefinition(1), (FlowElement("uniform", 1.0), FlowElement("uniform", 2.0)))

    def test_positive_strength(self):
        with pytest.raises(ConfigurationError):
            FlowElement("source", 0.0, center=(0.0, 0.0))

    def test_xi_zero_disables_exclusions(self):
        geo = AirspaceGeometry((-40, -40), (40, 40), (FloorDefinition(1, xi=0),), (UnplannedRegion("c", "circle", (0.0, 0.0), radius=10.0),))
        f = FlowField.from_geometry(geo, 1, 40.0)
        assert f.stream((0.0, 20.0)) == pytest.approx(800.0)

    def test_gamma_zero_switches_to_pair(self):
        els = (
            FlowElement("uniform", 10.0),
            FlowElement("doublet", 100.0, 0.0, (0.0, 0.0), "z"),
            FlowElement("source", 5.0, 0.0, (-1.0, 0.0), "z"),
            FlowElement("sink", 5.0, 0.0, (1.0, 0.0), "z"),
        )
        p = np.array([3.0, 4.0])
        doublet = FlowField(FloorDefinition(1, gamma={"z": 1}), els)
        pair = FlowField(FloorDefinition(1, gamma={"z": 0}), els)
        assert doublet.potential(p) == pytest.approx(10 * 3 + 100 * 3 / 25)
        # the (1 - gamma) factor gates the source/sink pair in the potential too
        expect = 10 * 3 + 5 * 0.5 * math.log(16 + 16) - 5 * 0.5 * math.log(4 + 16)
        assert pair.potential(p) == pytest.approx(expect)

    def test_oval_boundary_is_a_streamline(self):
        region = UnplannedRegion("o", "oval", (0.0, 0.0), delta=20.0, half_separation=2.0, u_inf=5.0)
        geo = AirspaceGeometry((-20, -20), (20, 20), unplanned=(region,))
        f = FlowField.from_geometry(geo, 1, 5.0)
        from uasflow.boundary_control import _boundary_samples

        for p in _boundary_samples(region, 90):
            assert abs(f.stream(p)) < 1e-9
            v = f.velocity(p)
            assert abs(v @ region.outward_normal(p)) < 1e-9 * max(1.0, np.linalg.norm(v))


class TestRadius:
    @pytest.mark.parametrize("u,delta,R", [(40, 4000, 10), (1, 1, 1), (40, 16000, 20)])
    def test_examples(self, u, delta, R):
        assert obstacle_radius(u, delta) == pytest.approx(R, rel=1e-15)

    @pytest.mark.parametrize("u,delta", [(0, 1), (1, 0), (-1, 1)])
    def test_non_positive(self, u, delta):
        with pytest.raises(DomainError):
            obstacle_radius(u, delta)

    @given(st.floats(0.1, 100), st.floats(1, 1e5), st.floats(1.01, 3))
    def test_monotone(self, u, delta, k):
        assert obstacle_radius(u, delta * k) > obstacle_radius(u, delta)
        assert obstacle_radius(u * k, delta) < obstacle_radius(u, delta)


class TestLift:
    def test_flat(self):
        np.testing.assert_array_equal(lift_to_floor(FloorDefinition(1), (3.0, 4.0)), [3.0, 4.0, 0.0])

    @pytest.mark.parametrize("p,z", [((25.0, 0.0), 1000.0), ((25.0, 100.0), 950.0)])
    def test_paraboloid(self, p, z):
        fl = FloorDefinition(1, ParaboloidSurface(1000.0, -5e-3, (25.0, 0.0)))
        assert lift_to_floor(fl, p)[2] == pytest.approx(z, rel=1e-15)

    def test_surface_velocity_is_tangent(self):
        f = vc_field()
        for p in [(-20.0, 50.0), (60.0, -70.0)]:
            v = surface_velocity(f, p)
            grad = f.floor.surface.gradient(*p)
            assert v[2] == pytest.approx(grad @ v[:2])

    def test_surface_acceleration_matches_difference(self):
        f = vc_field()
        p = np.array([-10.0, 60.0])
        v = f.velocity(p)
        h = 1e-4
        a_fd = (surface_velocity(f, p + h * v) - surface_velocity(f, p - h * v)) / (2 * h)
        np.testing.assert_allclose(surface_acceleration(f, p), a_fd, rtol=1e-6, atol=1e-9)


class TestStreamline:
    def test_uniform_straight(self):
        line = trace_streamline(uniform_field(), (0.0, 5.0), arc_step=1.0)
        np.testing.assert_allclose(line.polyline[:, 1], 5.0, atol=1e-12)
        assert line.polyline[-1, 0] == pytest.approx(40.0, abs=1e-9)

    def test_zero_level_hugs_circle(self):
        line = trace_streamline(FIELD, (-40.0, 0.0), arc_step=0.25)
        P = line.polyline
        assert np.allclose(P[-1], [40.0, 0.0], atol=1e-9)
        off_axis = np.abs(P[:, 1]) > 1e-6
        assert off_axis.sum() > 50
        np.testing.assert_allclose(np.hypot(P[off_axis, 0], P[off_axis, 1]), 10.0, atol=1e-6)

    def test_level_drift_on_paraboloid_case(self):
        f = vc_field()
        seed = inflow_point(f, 375.0)
        line = trace_streamline(f, seed, arc_step=0.5, max_arc=1000.0)
        drift = max(abs(f.stream(p) - 375.0) for p in line.polyline)
        assert drift < 1e-6 * 375.0
        assert line.polyline[-1, 0] == pytest.approx(75.0, abs=1e-9)

    def test_unplanned_seed(self):
        with pytest.raises(DomainError):
            trace_streamline(FIELD, (1.0, 1.0))

    def test_max_arc(self):
        line = trace_streamline(uniform_field(), (-40.0, 0.0), arc_step=1.0, max_arc=10.0)
        assert line.polyline[-1, 0] == pytest.approx(-30.0, abs=1e-9)

    def test_segment_root(self):
        p = stream_point_on_segment(FIELD, 600.0, (0.0, 15.0), (0.0, 30.0))
        assert p[1] == pytest.approx(20.0, rel=1e-12)


# -- properties over random compositions ------------------------------------------
ELEMENT = st.tuples(
    st.sampled_from(["source", "sink", "doublet"]),
    st.floats(1.0, 200.0),
    st.floats(-math.pi, math.pi),
    st.floats(-20.0, 20.0),
    st.floats(-20.0, 20.0),
)


def _compose(u, theta, parts) -> FlowField:
    els = [FlowElement("uniform", u, theta)] + [FlowElement(k, s, t, (x, y)) for k, s, t, x, y in parts]
    return FlowField(FloorDefinition(1), tuple(els))


def _near_cut(f: FlowField, p, margin: float) -> bool:
    # the stream of a source or sink jumps across the ray center - s * n
    for e in f.elements:
        if e.kind in ("source", "sink"):
            d = np.asarray(p) - np.asarray(e.center)
            along = float(d @ e.n)
            across = e.n[0] * d[1] - e.n[1] * d[0]
            if along < margin and abs(across) < margin:
                return True
    return False


@settings(max_examples=150, deadline=None)
@given(st.floats(0.5, 50.0), st.floats(-math.pi, math.pi), st.lists(ELEMENT, max_size=4), st.floats(-30, 30), st.floats(-30, 30))
def test_cauchy_riemann_and_orthogonality(u, theta, parts, x, y):
    f = _compose(u, theta, parts)
    p = np.array([x, y])
    assume(f.singular_distance(p) > 1.0 and not _near_cut(f, p, 0.1))
    h = 1e-5
    ex, ey = np.array([h, 0.0]), np.array([0.0, h])
    phx = (f.potential(p + ex) - f.potential(p - ex)) / (2 * h)
    phy = (f.potential(p + ey) - f.potential(p - ey)) / (2 * h)
    psx = (f.stream(p + ex) - f.stream(p - ex)) / (2 * h)
    psy = (f.stream(p + ey) - f.stream(p - ey)) / (2 * h)
    scale = max(math.hypot(phx, phy), 1e-3 * u)
    assert abs(phx - psy) < 1e-6 * scale
    assert abs(phy + psx) < 1e-6 * scale
    g, gs = f.grad_potential(p), f.grad_stream(p)
    assert abs(g @ gs) <= 1e-6 * max(g @ g, 1e-12)


@settings(max_examples=150, deadline=None)
@given(st.floats(0.5, 50.0), st.floats(-math.pi, math.pi), st.lists(ELEMENT, max_size=4), st.floats(-30, 30), st.floats(-30, 30))
def test_harmonic(u, theta, parts, x, y):
    f = _compose(u, theta, parts)
    p = np.array([x, y])
    assume(f.singular_distance(p) > 1.0)
    h = 1e-3
    stencil = [p + d for d in (np.array([h, 0]), np.array([-h, 0]), np.array([0, h]), np.array([0, -h]))]
    vals = [f.potential(q) for q in stencil]
    lap = (sum(vals) - 4 * f.potential(p)) / h**2
    scale = max(abs(v) for v in vals + [f.potential(p)])
    assert abs(lap) < 1e-4 * scale / h**2
    # tighter: the analytic Hessian is trace-free
    H = f.hessian_potential(p)
    assert abs(np.trace(H)) <= 1e-10 * max(np.abs(H).max(), 1e-12)
