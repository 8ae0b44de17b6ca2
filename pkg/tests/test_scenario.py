from __future__ import annotations

import numpy as np
import pytest

from helpers import scenario, uniform_field, vc_field
from uasflow.airspace import AirspaceGeometry, UnplannedRegion
from uasflow.config import ClusterSpec, SpeedClassSpec, config_hash, parse_config
from uasflow.errors import ConfigurationError
from uasflow.flowfield import FlowField
from uasflow.scenario import (
    assign_speed_class,
    build_fields,
    build_geometry,
    inflow_point,
    integrate_reference,
    run_macro_analytic,
    run_macro_fd,
    run_micro,
    run_scenario,
)

BASE = """
name: small
geometry: {outer_min: [-10, -10], outer_max: [10, 10]}
floors:
  - index: 1
    uniform: {u_inf: 1, theta0: 0}
integration: {dt: 0.05, horizon: 30}
"""


class TestReference:
    def test_uniform_exit_time(self):
        ref = integrate_reference(uniform_field(), (-40.0, 5.0), 0.0, 0.01)
        assert ref.t_exit == pytest.approx(80.0 / 40.0, abs=1e-9)
        np.testing.assert_allclose(ref.r_exit, [40.0, 5.0, 0.0], atol=1e-9)
        np.testing.assert_allclose(ref.positions[:, 1], 5.0)

    def test_vc_channel_keeps_level_and_surface(self):
        f = vc_field()
        entry = inflow_point(f, 375.0)
        ref = integrate_reference(f, entry, 0.0, 0.1)
        psi = np.array([f.stream(p[:2]) for p in ref.positions])
        assert np.abs(psi - 375.0).max() < 1e-4
        surf = f.floor.surface
        z = np.array([surf(x, y) for x, y, _ in ref.positions])
        np.testing.assert_array_equal(ref.positions[:, 2], z)
        assert ref.t_exit is not None

    def test_halving_dt_changes_exit_little(self):
        f = vc_field()
        entry = inflow_point(f, 375.0)
        a = integrate_reference(f, entry, 0.0, 0.1)
        b = integrate_reference(f, entry, 0.0, 0.05)
        assert abs(a.t_exit - b.t_exit) < 1e-6
        assert np.linalg.norm(a.r_exit - b.r_exit) < 1e-6

    def test_horizon_cuts_short(self):
        ref = integrate_reference(uniform_field(), (-40.0, 5.0), 3.0, 0.01, horizon=1.0)
        assert ref.t_exit is None
        assert ref.times[0] == 3.0 and ref.times[-1] == pytest.approx(4.0)

    def test_entry_must_be_on_border(self):
        with pytest.raises(ConfigurationError, match="sector border"):
            integrate_reference(uniform_field(), (0.0, 5.0), 0.0, 0.01)

    def test_entry_in_unplanned(self):
        geo = AirspaceGeometry((-40, -40), (40, 40), unplanned=(UnplannedRegion("o", "circle", (-38.0, 0.0), radius=5.0),))
        f = FlowField.from_geometry(geo, 1, 40.0)
        with pytest.raises(ConfigurationError, match="unplanned"):
            integrate_reference(f, (-40.0, 1.0), 0.0, 0.1)


def va_clusters(*speeds_and_times):
    return [ClusterSpec(id=f"K{i}", speed=s, entry_time=t) for i, (s, t) in enumerate(speeds_and_times)]


class TestSpeedClasses:
    def setup_method(self):
        cfg = scenario("va_heterogeneous")
        self.cfg = cfg
        self.field = build_fields(cfg, build_geometry(cfg))[1]

    def test_single_cluster(self):
        (a,) = assign_speed_class(va_clusters((18, 0.0)), self.cfg.speed_classes, self.field)
        assert a.speed_class == "S3" and a.band == (-300.0, 0.0) and a.psi_seed == -150.0
        assert self.field.stream(a.seed) == pytest.approx(-150.0, abs=1e-8)
        # the scaled speed at the seed equals the class speed
        assert np.linalg.norm(self.field.grad_potential(a.seed)) / a.K == pytest.approx(18.0, rel=1e-12)

    def test_six_classes_bijective(self):
        out = assign_speed_class(va_clusters(*[(s, 0.0) for s in (10, 14, 18, 22, 26, 30)]), self.cfg.speed_classes, self.field)
        assert sorted(a.speed_class for a in out) == ["S1", "S2", "S3", "S4", "S5", "S6"]

    def test_shared_class_splits_band_by_entry_order(self):
        out = assign_speed_class(va_clusters((22, 5.0), (22, 1.0)), self.cfg.speed_classes, self.field)
        assert out[1].band == (0.0, 150.0) and out[0].band == (150.0, 300.0)

    def test_no_match(self):
        with pytest.raises(ConfigurationError, match="matches no speed class"):
            assign_speed_class(va_clusters((12, 0.0)), self.cfg.speed_classes, self.field)

    def test_needs_speed(self):
        with pytest.raises(ConfigurationError, match="nominal speed is required"):
            assign_speed_class([ClusterSpec(id="x")], self.cfg.speed_classes, self.field)


class TestRuns:
    def test_fields_only_without_clusters(self):
        res = run_macro_analytic(parse_config(BASE + "outputs: {channel_levels: [0, 2]}\n"))
        assert set(res.tables) == {"channels.csv", "velocity_field.csv"}
        ys = res.tables["channels.csv"].column("y_m")
        assert set(np.round(ys, 9)) == {0.0, 2.0}

    def test_va_fd_flux_and_structure(self):
        res = run_macro_fd(scenario("va_heterogeneous"))
        m = res.metrics
        assert m["flux_relative"] < 1e-8
        assert m["spectral_abscissa"] < 0 and m["rho_D"] < 1
        assert m["m"] == m["m_cb"] + m["m_ci"] + m["m_u"]
        assert m["max_error_vs_analytic"] < 5.0

    def test_va_trajectories_in_planned_set(self):
        res = run_macro_analytic(scenario("va_heterogeneous"))
        assert res.metrics["trajectories_in_planned_set"] is True
        assert res.metrics["psi0_circle_max_deviation_m"] < 1e-3
        assert len(res.tables["speed_classes.csv"].rows) == 6

    def test_single_agent_follows_reference_on_straight_path(self):
        cfg = parse_config(BASE + "clusters:\n  - {id: solo, entry: [-10, 2]}\n")
        res = run_micro(cfg)
        dev = res.tables["trajectories.csv"].column("deviation_m")
        assert dev.max() < 1e-10
        assert res.metrics["solo.t_exit_s"] == pytest.approx(20.0, abs=1e-9)

    def test_admission_delays_entry_during_recovery(self):
        text = BASE.replace("dt: 0.05, horizon: 30", "dt: 0.1, horizon: 30") + (
            "grid: {spacing: 1.0}\n"
            "events:\n  - time: 0\n    region: {name: f, kind: rectangle, center: [0, 0], half_extents: [1.5, 1.0]}\n"
            "clusters:\n  - {id: late, entry: [-10, 3], entry_time: 0.5}\n  - {id: after, entry: [-10, -3], entry_time: 29}\n"
        )
        res = run_scenario(parse_config(text))
        t_rec = res.metrics["resilient.event0.recovered_at_s"]
        assert 0.5 < t_rec < 29
        rows = {r[0]: r for r in res.tables["admission.csv"].rows}
        assert rows["late"][2] == pytest.approx(t_rec)
        assert rows["after"][2] == 29.0
        traj = res.tables["macro_analytic/reference_trajectories.csv"]
        late_t = traj.column("t_s")[traj.column("cluster") == "late"]
        assert late_t.min() == pytest.approx(t_rec)


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match=r":3: geometry.outer_maxx: Extra inputs"):
            parse_config(BASE.replace("outer_max", "outer_maxx"), "s.yaml")

    def test_cross_field_location(self):
        with pytest.raises(ConfigurationError, match=r"outputs.snapshot_times.1: snapshot time 99.0"):
            parse_config(BASE + "outputs: {snapshot_times: [1, 99]}\n")

    def test_overlapping_bands(self):
        text = BASE + "speed_classes:\n  - {name: a, speed: 1, band: [0, 2]}\n  - {name: b, speed: 2, band: [1, 3]}\n"
        with pytest.raises(ConfigurationError, match="overlap"):
            parse_config(text)

    def test_same_speed_may_share_range(self):
        text = BASE + "speed_classes:\n  - {name: a, speed: 1, band: [0, 2]}\n  - {name: b, speed: 1, band: [1, 3]}\n"
        parse_config(text)

    def test_band_order(self):
        with pytest.raises(ConfigurationError, match="psi_lo < psi_hi"):
            parse_config(BASE + "speed_classes:\n  - {name: a, speed: 1, band: [2, 1]}\n")
        with pytest.raises(ValueError):
            SpeedClassSpec(name="a", speed=1.0, band=(2.0, 1.0))

    def test_hash_ignores_formatting(self):
        a = parse_config(BASE)
        b = parse_config(BASE.replace("u_inf: 1,", "u_inf: 1.0,").replace("\n", "\n\n"))
        assert config_hash(a) == config_hash(b)
        c = parse_config(BASE.replace("horizon: 30", "horizon: 31"))
        assert config_hash(a) != config_hash(c)

    def test_bundled_scenarios_load(self):
        for name in ("va_heterogeneous", "vb_resilient", "vc_micro"):
            cfg = scenario(name)
            assert cfg.name == name and len(config_hash(cfg)) == 64

    def test_not_a_mapping(self):
        with pytest.raises(ConfigurationError, match="must be a mapping"):
            parse_config("- 1\n- 2\n")
