"""End-to-end experiments: analytic channels, grid solves, pop-up recovery and
cluster tracking, all driven by a validated :class:`ScenarioConfig`."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from uasflow import boundary_control as bc
from uasflow import fdsolver as fd
from uasflow.airspace import (
    AirspaceGeometry,
    FlatSurface,
    FloorDefinition,
    ParaboloidSurface,
    UnplannedRegion,
    contains_planned,
)
from uasflow.config import ClusterSpec, RegionSpec, ScenarioConfig
from uasflow.errors import ConfigurationError, DomainError, UasflowError
from uasflow.flowfield import (
    FlowElement,
    FlowField,
    surface_acceleration,
    surface_velocity,
    trace_streamline,
)
from uasflow.integrate import rk4_step
from uasflow.microscopic import (
    Cluster,
    ClusterState,
    VrbPoseRate,
    check_material_consistency,
    consistent_material,
    follower_deviation,
    global_desired_positions,
    global_desired_velocities,
    pose_rate_from_motion,
    step_agents,
    ten_agent_cluster,
    vrb_pose_from_velocity,
)
from uasflow.output import ScenarioResult, Table

log = logging.getLogger("uasflow")

ENTRY_TOL = 1e-6  # m


# -- construction ---------------------------------------------------------------
def _region(spec: RegionSpec, cfg: ScenarioConfig) -> UnplannedRegion:
    u_inf, theta0 = None, 0.0
    if spec.kind == "oval":
        for f in cfg.floors:
            if (spec.floors is None or f.index in spec.floors) and f.uniform is not None:
                u_inf, theta0 = f.uniform.u_inf, f.uniform.theta0
                break
        if u_inf is None:
            raise ConfigurationError(f"oval region {spec.name!r} needs a floor with a 'uniform' stream")
    return UnplannedRegion(
        name=spec.name,
        kind=spec.kind,
        center=tuple(spec.center),
        radius=spec.radius,
        half_extents=tuple(spec.half_extents) if spec.half_extents else None,
        delta=spec.delta,
        half_separation=spec.half_separation,
        u_inf=u_inf,
        theta0=theta0,
        floors=frozenset(spec.floors) if spec.floors is not None else None,
    )


def build_geometry(cfg: ScenarioConfig) -> AirspaceGeometry:
    floors = []
    for f in cfg.floors:
        s = f.surface
        surface = FlatSurface(s.z0) if s.kind == "flat" else ParaboloidSurface(s.z0, s.curvature, tuple(s.center))
        floors.append(FloorDefinition(f.index, surface, dict(f.gamma), f.xi))
    regions = tuple(_region(r, cfg) for r in cfg.geometry.regions)
    return AirspaceGeometry(tuple(cfg.geometry.outer_min), tuple(cfg.geometry.outer_max), tuple(floors), regions)


def build_fields(cfg: ScenarioConfig, geometry: AirspaceGeometry) -> dict[int, FlowField]:
    fields = {}
    for f in cfg.floors:
        if f.elements is not None:
            elements = tuple(
                FlowElement(e.kind, e.strength, e.theta0, tuple(e.center) if e.center else None, e.region)
                for e in f.elements
            )
            fields[f.index] = FlowField(geometry.floor(f.index), elements, f.cost, geometry)
        else:
            fields[f.index] = FlowField.from_geometry(
                geometry, f.index, f.uniform.u_inf, f.uniform.theta0, f.cost
            )
    return fields


def _field_on(fields: dict[int, FlowField], floor: int) -> FlowField:
    if floor not in fields:
        raise DomainError(f"invalid floor index {floor}")
    return fields[floor]


# -- reference trajectories -------------------------------------------------------
@dataclass(frozen=True)
class ReferenceTrajectory:
    times: np.ndarray  # regular samples t0 + k dt
    positions: np.ndarray  # (N, 3)
    velocities: np.ndarray  # (N, 3)
    accelerations: np.ndarray  # (N, 3)
    t_exit: float | None
    r_exit: np.ndarray | None


def _excess(geo: AirspaceGeometry, p: np.ndarray) -> float:
    lo, hi = np.asarray(geo.outer_min), np.asarray(geo.outer_max)
    return float(max(np.max(lo - p), np.max(p - hi)))


def integrate_reference(
    field: FlowField,
    entry: Sequence[float],
    t0: float,
    dt: float,
    horizon: float | None = None,
    max_steps: int = 10_000_000,
) -> ReferenceTrajectory:
    """RK4 integration of dr/dt = V(r) from an entry point on the sector border.

    Stops when the next step would leave the sector (the exit instant is the
    RK4 sub-step that lands exactly on the border) or at ``horizon``.
    """
    geo = field.geometry
    p = np.asarray(entry, dtype=float)[:2].copy()
    if geo is None:
        raise ConfigurationError("reference integration needs a field with geometry")
    if not geo.on_outer_boundary(p, tol=ENTRY_TOL):
        raise ConfigurationError(f"entry point {tuple(p)} does not lie on the sector border")
    if not contains_planned(geo, p, field.floor.index):
        raise ConfigurationError(f"entry point {tuple(p)} lies in the unplanned set")
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    rhs = lambda t, y: field.velocity(y, t)
    surf = field.floor.surface
    pts, k = [p], 0
    t_exit, r_exit = None, None
    n_max = max_steps if horizon is None else int(math.floor(horizon / dt + 1e-9))
    while k < n_max:
        t = t0 + k * dt
        q = rk4_step(rhs, t, p, dt)
        if _excess(geo, q) > 0:
            g = lambda s: _excess(geo, rk4_step(rhs, t, p, s))
            s = brentq(g, 0.0, dt, xtol=1e-14, rtol=4 * np.finfo(float).eps) if g(0.0) < 0 else 0.0
            t_exit = t + s
            r2 = rk4_step(rhs, t, p, s)
            r_exit = np.array([r2[0], r2[1], surf(r2[0], r2[1])])
            break
        p = q
        pts.append(p)
        k += 1
    xy = np.array(pts)
    times = t0 + dt * np.arange(len(pts))
    pos = np.column_stack([xy, [surf(x, y) for x, y in xy]])
    vel = np.array([surface_velocity(field, q, t) for q, t in zip(xy, times)])
    acc = np.array([surface_acceleration(field, q, t) for q, t in zip(xy, times)])
    return ReferenceTrajectory(times, pos, vel, acc, t_exit, r_exit)


def inflow_edge(field: FlowField) -> tuple[int, float]:
    """(axis, coordinate) of the sector edge facing the uniform stream."""
    n = field.uniform.n
    geo = field.geometry
    axis = 0 if abs(n[0]) >= abs(n[1]) else 1
    coord = geo.outer_min[axis] if n[axis] > 0 else geo.outer_max[axis]
    return axis, coord


def inflow_point(field: FlowField, level: float) -> np.ndarray:
    """Point on the inflow edge where the stream function equals ``level``."""
    axis, coord = inflow_edge(field)
    geo = field.geometry
    lo, hi = geo.outer_min[1 - axis], geo.outer_max[1 - axis]

    def at(s):
        p = np.empty(2)
        p[axis], p[1 - axis] = coord, s
        return p

    f = lambda s: field.stream(at(s)) - level
    flo, fhi = f(lo), f(hi)
    if flo == 0:
        return at(lo)
    if fhi == 0:
        return at(hi)
    if flo * fhi > 0:
        raise ConfigurationError(f"stream level {level} is not reached on the inflow edge")
    return at(brentq(f, lo, hi, xtol=1e-13, rtol=4 * np.finfo(float).eps))


# -- speed classes ----------------------------------------------------------------
@dataclass(frozen=True)
class Assignment:
    cluster: str
    speed_class: str
    speed: float
    band: tuple[float, float]
    psi_seed: float
    seed: np.ndarray
    K: float


def assign_speed_class(clusters: Sequence[ClusterSpec], classes, field: FlowField) -> list[Assignment]:
    """Give each cluster a stream band of its speed class.

    Clusters sharing a class split its band into equal sub-bands in entry
    order. K is set so the speed at the band's seed point equals the class
    speed (K is then constant along the channel)."""
    members: dict[str, list[ClusterSpec]] = {}
    for c in clusters:
        if c.speed is None:
            raise ConfigurationError(f"cluster {c.id}: nominal speed is required for speed-class assignment")
        match = [sc for sc in classes if abs(sc.speed - c.speed) <= 1e-9 * sc.speed]
        if not match:
            raise ConfigurationError(f"cluster {c.id}: nominal speed {c.speed} matches no speed class")
        if len(match) > 1:
            raise ConfigurationError(f"cluster {c.id}: nominal speed {c.speed} matches several speed classes")
        members.setdefault(match[0].name, []).append(c)
    out = {}
    for sc in classes:
        group = sorted(members.get(sc.name, []), key=lambda c: (c.entry_time, c.id))
        lo, hi = sc.band
        for k, c in enumerate(group):
            a = lo + (hi - lo) * k / len(group)
            b = lo + (hi - lo) * (k + 1) / len(group)
            psi = 0.5 * (a + b)
            seed = inflow_point(field, psi)
            K = float(np.linalg.norm(field.grad_potential(seed))) / sc.speed
            out[c.id] = Assignment(c.id, sc.name, sc.speed, (a, b), psi, seed, K)
    return [out[c.id] for c in clusters]


# -- clusters -----------------------------------------------------------------------
def build_cluster(cs: ClusterSpec) -> Cluster:
    if cs.table == "ten_agent":
        return ten_agent_cluster(cs.leaders, True, cs.beta1, cs.beta2, cs.id)
    n, d = cs.agents, cs.dimension
    nbs = {int(k): tuple(v) for k, v in cs.neighbors.items()}
    ws = {int(k): tuple(v) for k, v in cs.weights.items()}
    if cs.material is not None:
        c = Cluster(cs.id, d, n, nbs, ws, np.array(cs.material), cs.beta1, cs.beta2)
        check_material_consistency(c)
        return c
    if n == 1:
        return Cluster(cs.id, d, n, nbs, ws, np.zeros((1, 3)), cs.beta1, cs.beta2)
    if cs.leaders is None or len(cs.leaders) != d + 1:
        raise ConfigurationError(f"cluster {cs.id}: give 'material' or d+1 = {d + 1} 'leaders' positions")
    provisional = np.zeros((n, 3))
    provisional[: d + 1] = cs.leaders
    c = Cluster(cs.id, d, n, nbs, ws, provisional, cs.beta1, cs.beta2)
    return replace(c, material=consistent_material(c))


def _entry_for(cs: ClusterSpec, field: FlowField, assignment: Assignment | None) -> np.ndarray:
    if cs.entry is not None:
        return np.asarray(cs.entry, dtype=float)
    if cs.entry_psi is not None:
        return inflow_point(field, cs.entry_psi)
    if assignment is not None:
        return assignment.seed
    raise ConfigurationError(f"cluster {cs.id}: needs 'entry', 'entry_psi' or a speed class")


def _prepare_clusters(cfg: ScenarioConfig, fields: dict[int, FlowField]):
    """Per cluster: (spec, field with its K, entry point, assignment)."""
    assignments: dict[str, Assignment] = {}
    if cfg.speed_classes:
        by_floor: dict[int, list[ClusterSpec]] = {}
        for c in cfg.clusters:
            by_floor.setdefault(c.floor, []).append(c)
        for floor, group in by_floor.items():
            for a in assign_speed_class(group, cfg.speed_classes, _field_on(fields, floor)):
                assignments[a.cluster] = a
    prepared = []
    for c in cfg.clusters:
        base = _field_on(fields, c.floor)
        a = assignments.get(c.id)
        field = replace(base, cost=a.K) if a is not None else base
        prepared.append((c, field, _entry_for(c, base, a), a))
    return prepared


# -- subcommands --------------------------------------------------------------------
def _annotate(exc: UasflowError, t: float) -> UasflowError:
    return type(exc)(f"t={t:g} s: {exc}")


def run_macro_analytic(cfg: ScenarioConfig, admission: dict[str, float] | None = None) -> ScenarioResult:
    """Channels, velocity samples, speed classes and reference trajectories."""
    geo = build_geometry(cfg)
    fields = build_fields(cfg, geo)
    res = ScenarioResult()
    prepared = _prepare_clusters(cfg, fields)

    levels_by_floor: dict[int, list[float]] = {}
    for idx in fields:
        lv = set(cfg.outputs.channel_levels)
        for sc in cfg.speed_classes:
            lv.update(sc.band)
        if not lv:
            lv = {0.0}
        levels_by_floor[idx] = sorted(lv)

    channels = Table(["floor", "level_psi", "vertex", "x_m", "y_m"])
    deviation = 0.0
    for idx, field in sorted(fields.items()):
        for level in levels_by_floor[idx]:
            try:
                seed = inflow_point(field, level)
            except ConfigurationError:
                log.warning("floor %d: channel level %g not reached on the inflow edge", idx, level)
                continue
            span = max(geo.width, geo.height)
            line = trace_streamline(field, seed, 0.0, cfg.outputs.channel_arc_step, 10.0 * span)
            for k, (x, y) in enumerate(line.polyline):
                channels.add(idx, level, k, x, y)
            if level == 0.0:
                for r in geo.regions_on(idx):
                    if r.kind != "circle":
                        continue
                    c = np.asarray(r.center)
                    for p in line.polyline:
                        d = np.linalg.norm(p - c)
                        if d < 1.5 * r.radius and abs(p[1] - c[1]) > 1e-6:
                            deviation = max(deviation, abs(d - r.radius))
    res.tables["channels.csv"] = channels
    res.metrics["psi0_circle_max_deviation_m"] = deviation

    vel = Table(["floor", "x_m", "y_m", "u_m_s", "v_m_s", "speed_m_s"])
    nx, ny = cfg.outputs.velocity_samples
    for idx, field in sorted(fields.items()):
        for y in np.linspace(geo.outer_min[1], geo.outer_max[1], ny):
            for x in np.linspace(geo.outer_min[0], geo.outer_max[0], nx):
                p = np.array([x, y])
                if not contains_planned(geo, p, idx) or field.singular_distance(p) <= 1e-6:
                    continue
                v = field.velocity(p)
                vel.add(idx, x, y, v[0], v[1], float(np.hypot(*v)))
    res.tables["velocity_field.csv"] = vel

    if cfg.speed_classes:
        sct = Table(["cluster", "speed_class", "speed_m_s", "psi_lo", "psi_hi", "psi_seed", "seed_x_m", "seed_y_m", "K"])
        for c, _, _, a in prepared:
            if a is not None:
                sct.add(c.id, a.speed_class, a.speed, a.band[0], a.band[1], a.psi_seed, a.seed[0], a.seed[1], a.K)
        res.tables["speed_classes.csv"] = sct

    if prepared:
        traj = Table(["t_s", "cluster", "x_m", "y_m", "z_m", "speed_m_s"])
        snap = Table(["t_s", "cluster", "x_m", "y_m", "z_m"])
        in_planned = True
        for c, field, entry, _ in prepared:
            t0 = max(c.entry_time, (admission or {}).get(c.id, c.entry_time))
            if t0 > cfg.integration.horizon:
                log.info("cluster %s not admitted before the horizon", c.id)
                continue
            ref = integrate_reference(field, entry, t0, cfg.integration.dt, cfg.integration.horizon - t0)
            for t, p, v in zip(ref.times, ref.positions, ref.velocities):
                traj.add(t, c.id, p[0], p[1], p[2], float(np.linalg.norm(v)))
                in_planned &= contains_planned(geo, p, c.floor)
            for ts in cfg.outputs.snapshot_times:
                k = int(round((ts - t0) / cfg.integration.dt))
                if 0 <= k < ref.times.size and abs(ref.times[k] - ts) < 1e-9 * max(1.0, ts):
                    p = ref.positions[k]
                    snap.add(ts, c.id, p[0], p[1], p[2])
        res.tables["reference_trajectories.csv"] = traj
        res.tables["cluster_positions.csv"] = snap
        res.metrics["trajectories_in_planned_set"] = bool(in_planned)
    return res


def _grid_setup(cfg: ScenarioConfig):
    if cfg.grid is None:
        raise ConfigurationError("this run needs a 'grid' section")
    geo = build_geometry(cfg)
    fields = build_fields(cfg, geo)
    field = _field_on(fields, cfg.grid.floor)
    grid = fd.build_grid(geo, cfg.grid.spacing, cfg.grid.floor)
    pl = fd.assemble_partitioned(grid, cfg.grid.treatment)
    fn = field.stream if cfg.grid.boundary == "stream" else field.potential
    bvals = fd.boundary_values_from(pl, lambda x, y: fn((x, y)))
    return geo, field, grid, pl, bvals


def _nodal_table(sol_full: np.ndarray, grid: fd.Grid, name: str = "phi") -> Table:
    t = Table(["x_m", "y_m", "label", name])
    for k in range(grid.m):
        t.add(grid.coords[k, 0], grid.coords[k, 1], fd.LABEL_NAMES[int(grid.labels[k])], sol_full[k])
    return t


def run_macro_fd(cfg: ScenarioConfig) -> ScenarioResult:
    """Steady grid solution, stability structure and flux diagnostic."""
    geo, field, grid, pl, bvals = _grid_setup(cfg)
    sol = fd.solve_steady(pl, bvals)
    res = ScenarioResult()
    res.tables["nodal_potential.csv"] = _nodal_table(sol.full(), grid)
    flux = fd.boundary_flux(sol)
    split = fd.appendix_decomposition(pl)
    m = res.metrics
    m.update(
        m=grid.m,
        m_cb=grid.m_cb,
        m_ci=grid.m_ci,
        m_u=grid.m_u,
        spectral_abscissa=fd.spectral_abscissa(pl),
        rho_D=split.spectral_radius,
        flux_outer=flux.outer,
        flux_obstacle=flux.obstacle,
        flux_total=flux.total,
        flux_relative=flux.relative,
    )
    if cfg.grid.boundary == "stream" and all(r.kind in ("circle", "oval") for r in geo.regions_on(grid.floor)):
        ci = grid.nodes(fd.CI)
        exact = np.array([field.stream(p) for p in grid.coords[ci]])
        m["max_error_vs_analytic"] = float(np.max(np.abs(sol.full()[ci] - exact), initial=0.0))
    return res


def _event_region(ev, cfg: ScenarioConfig) -> UnplannedRegion:
    return _region(ev.region, cfg)


def _event_windows(cfg: ScenarioConfig):
    events = sorted(cfg.events, key=lambda e: e.time)
    for i, ev in enumerate(events):
        end = events[i + 1].time if i + 1 < len(events) else cfg.integration.horizon
        yield ev, end - ev.time


def run_resilient(cfg: ScenarioConfig, mode: str = "lqr") -> ScenarioResult:
    """Recovery after each pop-up event by LQR or stream boundary feedback."""
    if not cfg.events:
        raise ConfigurationError("resilient run needs at least one pop-up event")
    if mode not in ("lqr", "analytic"):
        raise ConfigurationError(f"unknown resilient mode {mode!r}")
    geo, field, grid, pl, bvals = _grid_setup(cfg)
    dt = cfg.integration.dt
    ctl = cfg.control
    res = ScenarioResult()
    m = res.metrics
    snaps = sorted(cfg.outputs.snapshot_times)
    if mode == "lqr":
        series = Table(["t_s", "error_norm", "lyapunov", "error_norm_open_loop"])
    else:
        series = Table(["t_s", "error_inf", "error_norm", "lyapunov", "lyapunov_rate", "weighted_mean"])
    recovery = []
    for i, (ev, window) in enumerate(_event_windows(cfg)):
        try:
            region = _event_region(ev, cfg)
            grid_new = fd.reclassify(grid, region)
            pl_new = fd.assemble_partitioned(grid_new, cfg.grid.treatment)
            ref_new = fd.solve_steady(pl_new, bvals)
            if window <= 0:
                grid, pl = grid_new, pl_new
                continue
            local = [t - ev.time for t in snaps if ev.time <= t <= ev.time + window + 1e-12]
            if mode == "lqr":
                problem = bc.LqrProblem.from_partitioned(pl_new, ctl.we, ctl.wu)
                sol = bc.solve_riccati(problem)
                closed = bc.simulate_lqr_recovery(pl, pl_new, bvals, sol, dt, window, local)
                opened = bc.simulate_lqr_recovery(pl, pl_new, bvals, None, dt, window)
                for k, t in enumerate(closed.times):
                    series.add(ev.time + t, closed.error_norm[k], closed.lyapunov[k], opened.error_norm[k])
                nodes = pl_new.state_nodes
                for ts, E in closed.snapshots.items():
                    full = ref_new.full()
                    full[nodes] += E
                    res.tables[f"snapshot_t{_tlabel(ev.time + ts)}.csv"] = _nodal_table(full, grid_new)
                norms, times = closed.error_norm, closed.times
                m[f"event{i}.riccati_iterations"] = sol.iterations
                m[f"event{i}.riccati_residual"] = sol.residual
                m[f"event{i}.settling_time_closed_s"] = closed.settling_time()
                m[f"event{i}.settling_time_open_s"] = opened.settling_time()
                m[f"event{i}.lyapunov_max_increase"] = float(np.max(np.diff(closed.lyapunov), initial=0.0))
            else:
                ref_old = fd.solve_steady(pl, bvals)
                ctl_s = bc.StreamBoundaryController(grid_new, ctl.k_p, ctl.k_u)
                psi_ref = ref_new.full()
                E = ctl_s.restrict(ref_old.full() - psi_ref)
                steps = int(round(window / dt))
                want = {int(round(t / dt)): t for t in local}
                norms = np.empty(steps + 1)
                times = dt * np.arange(steps + 1)
                energies = np.empty(steps + 1)
                for k in range(steps + 1):
                    if k:
                        E = ctl_s.step(E, dt)
                    norms[k] = np.linalg.norm(E)
                    energies[k] = ctl_s.energy(E)
                    series.add(
                        ev.time + times[k],
                        float(np.max(np.abs(E), initial=0.0)),
                        norms[k],
                        energies[k],
                        ctl_s.energy_rate(E),
                        ctl_s.conserved_mean(E),
                    )
                    if k in want:
                        full = psi_ref.copy()
                        full[ctl_s.nodes] += E
                        res.tables[f"snapshot_t{_tlabel(ev.time + want[k])}.csv"] = _nodal_table(full, grid_new, "psi")
                m[f"event{i}.lyapunov_max_increase"] = float(np.max(np.diff(energies), initial=0.0))
                m[f"event{i}.weighted_mean"] = ctl_s.conserved_mean(E)
            m[f"event{i}.initial_error_norm"] = float(norms[0])
            m[f"event{i}.final_error_ratio"] = float(norms[-1] / norms[0]) if norms[0] > 0 else 0.0
            below = np.flatnonzero(norms <= ctl.recovery_threshold * norms[0])
            t_rec = ev.time + (float(times[below[0]]) if below.size else math.inf)
            recovery.append((ev.time, t_rec, region))
            m[f"event{i}.recovered_at_s"] = t_rec
        except UasflowError as exc:
            raise _annotate(exc, ev.time) from exc
        grid, pl = grid_new, pl_new
    res.tables["error_series.csv"] = series
    res.metrics["_recovery"] = recovery
    return res


def _tlabel(t: float) -> str:
    return f"{t:g}".replace(".", "p").replace("-", "m")


class _PathSampler:
    """Reference state at any path time, by an RK4 sub-step from the nearest sample."""

    def __init__(self, field: FlowField, ref: ReferenceTrajectory, dt: float):
        self.field, self.ref, self.dt = field, ref, dt
        self.rhs = lambda t, y: field.velocity(y, t)

    def __call__(self, s: float):
        ref, dt = self.ref, self.dt
        k = min(int(math.floor((s - ref.times[0]) / dt + 1e-9)), ref.times.size - 1)
        h = s - ref.times[k]
        if h <= 1e-12:
            return ref.positions[k], ref.velocities[k], ref.accelerations[k]
        xy = rk4_step(self.rhs, ref.times[k], ref.positions[k, :2], h)
        surf = self.field.floor.surface
        p = np.array([xy[0], xy[1], surf(xy[0], xy[1])])
        return p, surface_velocity(self.field, xy, s), surface_acceleration(self.field, xy, s)


def _warp(t: float, t_brake: float, brake: float) -> tuple[float, float]:
    """Path time and its rate: identity until ``t_brake``, then a cosine speed
    ramp to rest over ``brake`` seconds (consuming brake/2 of path time)."""
    if t <= t_brake or brake <= 0:
        return t, 1.0
    tau = min(t - t_brake, brake)
    w = math.pi / brake
    return t_brake + 0.5 * tau + 0.5 * math.sin(w * tau) / w, 0.5 * (1.0 + math.cos(w * tau))


def run_micro(cfg: ScenarioConfig, seed: int | None = None, admission: dict[str, float] | None = None) -> ScenarioResult:
    """Cluster tracking of the reference trajectories on the floor surfaces.

    With ``integration.hold > 0`` the virtual rigid body brakes along its path
    during the first half of the hold, reaching rest at the last reference
    sample, and stays frozen for the second half."""
    if not cfg.clusters:
        raise ConfigurationError("micro run needs at least one cluster")
    geo = build_geometry(cfg)
    fields = build_fields(cfg, geo)
    prepared = _prepare_clusters(cfg, fields)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dt = cfg.integration.dt
    horizon = cfg.integration.horizon
    hold = cfg.integration.hold
    res = ScenarioResult()
    traj = Table(["t_s", "cluster", "agent", "x_m", "y_m", "z_m", "deviation_m"])
    poses = Table(["t_s", "cluster", "rx_m", "ry_m", "rz_m", "theta1_rad", "theta2_rad", "psi_ref", "orthogonality_err"])
    snaps = {ts: Table(["cluster", "agent", "x_m", "y_m", "z_m", "x_rb_m", "y_rb_m", "z_rb_m"]) for ts in cfg.outputs.snapshot_times}
    m = res.metrics
    for cs, field, entry, _ in prepared:
        t0 = max(cs.entry_time, (admission or {}).get(cs.id, cs.entry_time))
        if t0 > horizon:
            log.info("cluster %s not admitted before the horizon", cs.id)
            continue
        try:
            cluster = build_cluster(cs)
            ref = integrate_reference(field, entry, t0, dt, horizon - t0)
        except UasflowError as exc:
            raise _annotate(exc, t0) from exc
        sample = _PathSampler(field, ref, dt)
        t_path_end = float(ref.times[-1])
        brake = min(0.5 * hold, 2.0 * (t_path_end - t0))
        t_brake = t_path_end - 0.5 * brake
        n_total = int(round((t_path_end - t0 + hold) / dt)) + 1
        psi_ref = field.stream(ref.positions[0])
        pose = None
        state = None
        dev_hist, dev_frozen, psi_drift, orth = [], [], 0.0, 0.0
        for k in range(n_total):
            t = t0 + k * dt
            s, sigma = _warp(t, t_brake, brake)
            r, v, a = sample(min(s, t_path_end))
            pose = vrb_pose_from_velocity(r, v, pose)
            base = pose_rate_from_motion(pose, v, a)
            rate = VrbPoseRate(sigma * base.r_dot, sigma * base.Q_dot, sigma * base.theta1_dot, sigma * base.theta2_dot)
            if state is None:
                P = global_desired_positions(cluster, pose) + cs.initial_offset * rng.standard_normal((cluster.n, 3))
                state = ClusterState(P, global_desired_velocities(cluster, rate))
            psi_drift = max(psi_drift, abs(field.stream(r) - psi_ref))
            e_orth = float(np.abs(pose.Q @ pose.Q.T - np.eye(3)).max())
            orth = max(orth, e_orth)
            dev = follower_deviation(cluster, state, pose)
            (dev_frozen if sigma == 0.0 else dev_hist).append(dev)
            rb = global_desired_positions(cluster, pose)
            for j in range(cluster.n):
                p = state.positions[j]
                traj.add(t, cs.id, j + 1, p[0], p[1], p[2], dev[j])
            poses.add(t, cs.id, r[0], r[1], r[2], pose.theta1, pose.theta2, field.stream(r), e_orth)
            for ts, tab in snaps.items():
                if abs(t - ts) < 0.5 * dt:
                    for j in range(cluster.n):
                        tab.add(cs.id, j + 1, *state.positions[j], *rb[j])
            if k + 1 < n_total:
                state = step_agents(cluster, state, pose, rate, dt)
        D = np.array(dev_hist)
        F = np.array(dev_frozen) if dev_frozen else np.zeros((0, cluster.n))
        mat = cluster.material
        dists = [np.linalg.norm(mat[a] - mat[b]) for a in range(cluster.n) for b in range(a + 1, cluster.n)]
        m[f"{cs.id}.psi_ref"] = psi_ref
        m[f"{cs.id}.psi_max_drift"] = psi_drift
        m[f"{cs.id}.q_orthogonality_max_err"] = orth
        m[f"{cs.id}.t_exit_s"] = ref.t_exit if ref.t_exit is not None else math.inf
        m[f"{cs.id}.min_material_distance_m"] = float(min(dists)) if dists else 0.0
        for j in cluster.followers:
            m[f"{cs.id}.follower{j}.max_deviation_moving_m"] = float(D[:, j - 1].max())
            if F.shape[0]:
                m[f"{cs.id}.follower{j}.max_deviation_frozen_m"] = float(F[:, j - 1].max())
                m[f"{cs.id}.follower{j}.final_deviation_m"] = float(F[-1, j - 1])
    res.tables["trajectories.csv"] = traj
    res.tables["pose.csv"] = poses
    for ts, tab in snaps.items():
        res.tables[f"formation_t{_tlabel(ts)}.csv"] = tab
    return res


def affected_bands(cfg: ScenarioConfig, fields: dict[int, FlowField], region: UnplannedRegion, floor: int):
    """Speed-class names whose band overlaps the stream range spanned by ``region``."""
    field = _field_on(fields, floor)
    pts = bc._boundary_samples(region, 64)
    vals = [field.stream(p) for p in pts if field.singular_distance(p) > 1e-6]
    lo, hi = min(vals), max(vals)
    return [sc.name for sc in cfg.speed_classes if sc.band[0] <= hi and lo <= sc.band[1]]


def run_scenario(cfg: ScenarioConfig, seed: int | None = None) -> ScenarioResult:
    """Every stage the scenario supports, with the pop-up admission rule."""
    res = ScenarioResult()
    admission: dict[str, float] = {}
    if cfg.grid is not None:
        res.merge(run_macro_fd(cfg), "macro_fd")
    if cfg.events and cfg.grid is not None:
        rs = run_resilient(cfg, "lqr")
        recovery = rs.metrics.pop("_recovery")
        res.merge(rs, "resilient")
        geo = build_geometry(cfg)
        fields = build_fields(cfg, geo)
        prepared = _prepare_clusters(cfg, fields)
        table = Table(["cluster", "requested_entry_s", "admitted_entry_s"])
        for ev_t, t_rec, region in recovery:
            for c, _, _, a in prepared:
                if a is None and cfg.speed_classes:
                    continue
                names = affected_bands(cfg, fields, region, cfg.grid.floor) if cfg.speed_classes else None
                hit = a is None or a.speed_class in names
                if hit and ev_t <= c.entry_time < t_rec:
                    admission[c.id] = max(admission.get(c.id, c.entry_time), t_rec)
        for c in cfg.clusters:
            table.add(c.id, c.entry_time, admission.get(c.id, c.entry_time))
        res.tables["admission.csv"] = table
    res.merge(run_macro_analytic(cfg, admission), "macro_analytic")
    if cfg.clusters:
        res.merge(run_micro(cfg, seed, admission), "micro")
    return res
