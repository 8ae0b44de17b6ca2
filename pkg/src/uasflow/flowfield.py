"""Analytic macroscopic coordination with 2-D ideal-flow elements.

Each floor carries one uniform stream plus doublets (circular exclusions) and
source/sink pairs (Rankine-oval exclusions). Potential and stream functions
are harmonic conjugates, so ``grad(phi) = (dpsi/dy, -dpsi/dx)`` holds exactly
and the nominal velocity is ``grad(phi) / K``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence, Union

import numpy as np
from scipy.optimize import brentq

from uasflow.airspace import AirspaceGeometry, FloorDefinition, contains_planned
from uasflow.errors import ConfigurationError, DomainError, SingularityError

SINGULAR_TOL = 1e-9  # m

ElementKind = Literal["uniform", "source", "sink", "doublet"]
CostFn = Union[float, Callable[[np.ndarray, float], float]]


def _xy(p) -> np.ndarray:
    return np.asarray(p, dtype=float).reshape(-1)[:2]


def _wrap(angle: float) -> float:
    return math.atan2(math.sin(angle), math.cos(angle))


@dataclass(frozen=True)
class FlowElement:
    """One ideal-flow pattern.

    ``strength`` is u_inf (m/s) for a uniform stream and Delta (m^2/s) for the
    other kinds. ``theta0`` is the stream direction for uniform/doublet
    elements; for sources and sinks it orients the branch cut of the stream
    function (the cut runs along ``-n``). ``region`` names the unplanned
    region an element excludes, which makes it subject to the floor's
    gamma/xi gating.
    """

    kind: ElementKind
    strength: float
    theta0: float = 0.0
    center: tuple[float, float] | None = None
    region: str | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "source", "sink", "doublet"):
            raise ConfigurationError(f"unknown flow element kind {self.kind!r}")
        if not self.strength > 0:
            raise ConfigurationError(f"{self.kind} strength must be > 0, got {self.strength}")
        if self.kind != "uniform" and self.center is None:
            raise ConfigurationError(f"{self.kind} element requires a center")

    @property
    def n(self) -> np.ndarray:
        return np.array([math.cos(self.theta0), math.sin(self.theta0)])

    def _d(self, p: np.ndarray) -> tuple[np.ndarray, float]:
        d = p - np.asarray(self.center, dtype=float)
        return d, float(d @ d)

    def potential(self, p: np.ndarray) -> float:
        s = self.strength
        if self.kind == "uniform":
            return s * float(self.n @ p)
        d, r2 = self._d(p)
        if self.kind == "doublet":
            return s * float(d @ self.n) / r2
        sign = 1.0 if self.kind == "source" else -1.0
        return sign * s * 0.5 * math.log(r2)

    def stream(self, p: np.ndarray) -> float:
        s, n = self.strength, self.n
        if self.kind == "uniform":
            return s * (p[1] * n[0] - p[0] * n[1])
        d, r2 = self._d(p)
        cross = n[0] * d[1] - n[1] * d[0]
        if self.kind == "doublet":
            return -s * cross / r2
        sign = 1.0 if self.kind == "source" else -1.0
        return sign * s * math.atan2(cross, float(n @ d))

    def gradient(self, p: np.ndarray) -> np.ndarray:
        s = self.strength
        if self.kind == "uniform":
            return s * self.n
        d, r2 = self._d(p)
        if self.kind == "doublet":
            n = self.n
            return s * (n / r2 - 2.0 * float(d @ n) * d / (r2 * r2))
        sign = 1.0 if self.kind == "source" else -1.0
        return sign * s * d / r2

    def hessian(self, p: np.ndarray) -> np.ndarray:
        s = self.strength
        if self.kind == "uniform":
            return np.zeros((2, 2))
        d, r2 = self._d(p)
        if self.kind == "doublet":
            n = self.n
            dn = float(d @ n)
            r4 = r2 * r2
            return s * (
                -2.0 * (np.outer(n, d) + np.outer(d, n)) / r4
                - 2.0 * dn * np.eye(2) / r4
                + 8.0 * dn * np.outer(d, d) / (r4 * r2)
            )
        sign = 1.0 if self.kind == "source" else -1.0
        return sign * s * (r2 * np.eye(2) - 2.0 * np.outer(d, d)) / (r2 * r2)


@dataclass(frozen=True)
class Streamline:
    level: float
    polyline: np.ndarray  # (N, 2)
    floor: int


@dataclass(frozen=True)
class FlowField:
    """Composed potential/stream field of one floor.

    ``cost`` is the positive cost K(r, t): a constant or a callable of
    ``(point2d, t)``. ``geometry`` (optional) enables planned-set checks and
    stopping at the outer boundary.
    """

    floor: FloorDefinition
    elements: tuple[FlowElement, ...]
    cost: CostFn = 1.0
    geometry: AirspaceGeometry | None = None
    _weights: tuple[float, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        uniforms = [e for e in self.elements if e.kind == "uniform"]
        if len(uniforms) != 1:
            raise ConfigurationError("one Uniform element required per floor")
        if not callable(self.cost) and not float(self.cost) > 0:
            raise ConfigurationError("cost K must be positive")
        object.__setattr__(self, "_weights", tuple(self._gate(e) for e in self.elements))

    def _gate(self, e: FlowElement) -> float:
        if e.kind == "uniform" or e.region is None:
            return 1.0
        xi = self.floor.xi
        gamma = self.floor.gamma.get(e.region, 1 if e.kind == "doublet" else 0)
        return float(xi * gamma) if e.kind == "doublet" else float(xi * (1 - gamma))

    @classmethod
    def from_geometry(
        cls,
        geometry: AirspaceGeometry,
        floor: int,
        u_inf: float,
        theta0: float = 0.0,
        cost: CostFn = 1.0,
    ) -> "FlowField":
        """Uniform stream plus one exclusion per circle/oval region on ``floor``.

        Circles get a doublet of strength ``u_inf * R**2``; ovals get a
        source upstream and a sink downstream of the characteristic point.
        Rectangles are left to the grid solver.
        """
        fl = geometry.floor(floor)
        elements = [FlowElement("uniform", u_inf, theta0)]
        gamma = dict(fl.gamma)
        n = np.array([math.cos(theta0), math.sin(theta0)])
        for r in geometry.regions_on(floor):
            c = np.asarray(r.center, dtype=float)
            if r.kind == "circle":
                elements.append(FlowElement("doublet", u_inf * r.radius**2, theta0, tuple(c), r.name))
                gamma.setdefault(r.name, 1)
            elif r.kind == "oval":
                a = r.half_separation
                elements.append(FlowElement("source", r.delta, theta0, tuple(c - a * n), r.name))
                elements.append(FlowElement("sink", r.delta, theta0, tuple(c + a * n), r.name))
                gamma.setdefault(r.name, 0)
        fl = FloorDefinition(fl.index, fl.surface, gamma, fl.xi)
        return cls(fl, tuple(elements), cost, geometry)

    # -- elementary evaluations -----------------------------------------
    @property
    def uniform(self) -> FlowElement:
        return next(e for e in self.elements if e.kind == "uniform")

    def active(self):
        for e, w in zip(self.elements, self._weights):
            if w != 0.0:
                yield e, w

    def singular_distance(self, point) -> float:
        p = _xy(point)
        ds = [np.linalg.norm(p - np.asarray(e.center)) for e, _ in self.active() if e.kind != "uniform"]
        return float(min(ds)) if ds else math.inf

    def _check(self, point) -> np.ndarray:
        p = _xy(point)
        if self.singular_distance(p) <= SINGULAR_TOL:
            raise SingularityError(f"point {tuple(p)} coincides with a flow element center")
        return p

    def K(self, point, time: float = 0.0) -> float:
        k = self.cost(_xy(point), time) if callable(self.cost) else float(self.cost)
        if not k > 0:
            raise DomainError(f"cost K must be positive, got {k} at {tuple(_xy(point))}")
        return float(k)

    def potential(self, point, time: float = 0.0) -> float:
        p = self._check(point)
        return float(sum(w * e.potential(p) for e, w in self.active()))

    def stream(self, point, time: float = 0.0) -> float:
        p = self._check(point)
        return float(sum(w * e.stream(p) for e, w in self.active()))

    def grad_potential(self, point, time: float = 0.0) -> np.ndarray:
        p = self._check(point)
        return sum((w * e.gradient(p) for e, w in self.active()), np.zeros(2))

    def grad_stream(self, point, time: float = 0.0) -> np.ndarray:
        g = self.grad_potential(point, time)
        return np.array([-g[1], g[0]])

    def hessian_potential(self, point, time: float = 0.0) -> np.ndarray:
        p = self._check(point)
        return sum((w * e.hessian(p) for e, w in self.active()), np.zeros((2, 2)))

    def in_unplanned(self, point) -> bool:
        """Strictly inside an active unplanned region (outer bounds ignored)."""
        if self.geometry is None:
            return False
        return any(r.contains(point) for r in self.geometry.regions_on(self.floor.index))

    def in_planned(self, point) -> bool:
        if self.geometry is None:
            return True
        return contains_planned(self.geometry, _xy(point), self.floor.index)

    def velocity(self, point, time: float = 0.0) -> np.ndarray:
        if self.in_unplanned(point):
            raise DomainError(f"point {tuple(_xy(point))} is inside the unplanned set")
        return self.grad_potential(point, time) / self.K(point, time)

    def velocity_gradient(self, point, time: float = 0.0, fd_step: float = 1e-6) -> np.ndarray:
        """Jacobian dV/dr of the planar velocity field."""
        if not callable(self.cost):
            return self.hessian_potential(point, time) / self.K(point, time)
        p = _xy(point)
        J = np.empty((2, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = fd_step
            J[:, k] = (self.velocity(p + e, time) - self.velocity(p - e, time)) / (2 * fd_step)
        return J


def potential_at(field: FlowField, point: Sequence[float], time: float = 0.0) -> float:
    """Composed potential of ``field`` at ``point``."""
    return field.potential(point, time)


def stream_at(field: FlowField, point: Sequence[float], time: float = 0.0) -> float:
    """Composed stream function of ``field`` at ``point``."""
    return field.stream(point, time)


def velocity_at(field: FlowField, point: Sequence[float], time: float = 0.0) -> np.ndarray:
    """Nominal planar velocity grad(phi) / K; raises inside the unplanned set."""
    return field.velocity(point, time)


def obstacle_radius(u_inf: float, delta: float) -> float:
    """Radius of the circle excluded by a doublet of strength ``delta``."""
    if not (u_inf > 0 and delta > 0):
        raise DomainError("u_inf and delta must be positive")
    return math.sqrt(delta / u_inf)


def lift_to_floor(floor: FloorDefinition, point2d: Sequence[float]) -> np.ndarray:
    x, y = _xy(point2d)
    return np.array([x, y, floor.surface(x, y)])


def surface_velocity(field: FlowField, point2d, time: float = 0.0) -> np.ndarray:
    """3-D velocity of a point riding the floor surface with the planar field."""
    v = field.velocity(point2d, time)
    x, y = _xy(point2d)
    return np.array([v[0], v[1], float(field.floor.surface.gradient(x, y) @ v)])


def surface_acceleration(field: FlowField, point2d, time: float = 0.0) -> np.ndarray:
    """Convective acceleration (V . grad) V along the floor surface."""
    x, y = _xy(point2d)
    v = field.velocity(point2d, time)
    a = field.velocity_gradient(point2d, time) @ v
    surf = field.floor.surface
    az = float(v @ surf.hessian(x, y) @ v + surf.gradient(x, y) @ a)
    return np.array([a[0], a[1], az])


def stream_point_on_segment(field: FlowField, level: float, start, end) -> np.ndarray:
    """Point on the straight segment start-end where the stream equals ``level``."""
    a, b = _xy(start), _xy(end)
    f = lambda t: field.stream(a + t * (b - a)) - level
    fa, fb = f(0.0), f(1.0)
    if fa == 0:
        return a
    if fa * fb > 0:
        raise DomainError(f"stream level {level} is not crossed on segment {tuple(a)}-{tuple(b)}")
    t = brentq(f, 0.0, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    return a + t * (b - a)


# -- streamline tracing ----------------------------------------------------
def _tangent(field: FlowField, p: np.ndarray) -> np.ndarray | None:
    g = field.grad_potential(p)
    norm = np.linalg.norm(g)
    if norm < 1e-9 * field.uniform.strength:
        return None
    return g / norm


def _usable(field: FlowField, p: np.ndarray) -> bool:
    return field.singular_distance(p) > 1e-6 and not field.in_unplanned(p)


def _rk4_arc(field: FlowField, p: np.ndarray, h: float) -> np.ndarray | None:
    k1 = _tangent(field, p)
    if k1 is None:
        return None
    stages = [k1]
    for c, prev in ((0.5, 0), (0.5, 1), (1.0, 2)):
        q = p + c * h * stages[prev]
        if not _usable(field, q):
            return None
        k = _tangent(field, q)
        # a reversal inside one step means we straddle a stagnation point
        if k is None or k @ k1 < 0.5:
            return None
        stages.append(k)
    k1, k2, k3, k4 = stages
    return p + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _branch_step(field: FlowField, p: np.ndarray, h: float, level: float, incoming) -> np.ndarray | None:
    """Continue through a stagnation point: pick the downstream level-set branch
    at distance ``h`` with the smallest turn (ties turn left)."""
    m = 720
    phis = np.linspace(-math.pi, math.pi, m + 1)
    ring = lambda phi: p + h * np.array([math.cos(phi), math.sin(phi)])

    def g(phi):
        q = ring(phi)
        if field.singular_distance(q) <= 1e-6:
            return math.nan
        return field.stream(q) - level

    vals = [g(phi) for phi in phis]
    ref = incoming if incoming is not None else _tangent(field, p)
    best, best_key = None, None
    for k in range(m):
        a, b = vals[k], vals[k + 1]
        if not (np.isfinite(a) and np.isfinite(b)) or a * b > 0:
            continue
        phi = phis[k] if a == 0 else brentq(g, phis[k], phis[k + 1], xtol=1e-15)
        q = ring(phi)
        if not _usable(field, q):
            continue
        direction = (q - p) / h
        t = _tangent(field, q)
        if t is None or t @ direction <= 0:
            continue
        if ref is None:
            key = (0.0, 0.0)
        else:
            cross = ref[0] * direction[1] - ref[1] * direction[0]
            key = (round(abs(math.atan2(cross, ref @ direction)), 9), -cross)
        if best_key is None or key < best_key:
            best, best_key = q, key
    return best


def _newton(field: FlowField, q: np.ndarray, level: float) -> np.ndarray:
    g = field.grad_stream(q)
    g2 = g @ g
    if g2 == 0:
        return q
    return q - (field.stream(q) - level) * g / g2


def _edge_hit(field: FlowField, p: np.ndarray, q: np.ndarray, level: float) -> np.ndarray | None:
    """Boundary point between inside ``p`` and outside ``q`` on the level set."""
    geo = field.geometry
    lo, hi = np.asarray(geo.outer_min), np.asarray(geo.outer_max)
    d = q - p
    ts = []
    for ax in range(2):
        if d[ax] > 0:
            ts.append(((hi[ax] - p[ax]) / d[ax], ax, hi[ax]))
        elif d[ax] < 0:
            ts.append(((lo[ax] - p[ax]) / d[ax], ax, lo[ax]))
    t, ax, val = min(ts)
    b = p + t * d
    b[ax] = val
    e = np.zeros(2)
    e[1 - ax] = 1.0
    for _ in range(8):
        res = field.stream(b) - level
        slope = field.grad_stream(b) @ e
        if slope == 0:
            break
        b = b - res / slope * e
        if abs(res) < 1e-13 * max(1.0, abs(level)):
            break
    b[1 - ax] = min(max(b[1 - ax], lo[1 - ax]), hi[1 - ax])
    if abs(field.stream(b) - level) > 1e-6 * max(1.0, abs(level)):
        return None
    return b


def trace_streamline(
    field: FlowField,
    seed: Sequence[float],
    time: float = 0.0,
    arc_step: float = 0.5,
    max_arc: float = 1000.0,
) -> Streamline:
    """Follow the level curve of the stream function through ``seed``.

    Fixed-step RK4 in arc length along the unit velocity direction, with one
    Newton projection back onto the level after every step. Stops at the
    outer boundary, after ``max_arc``, or near an element singularity.
    Stagnation points are crossed by :func:`_branch_step`.
    """
    if arc_step <= 0:
        raise DomainError("arc_step must be positive")
    p = _xy(seed).copy()
    if not field.in_planned(p):
        raise DomainError(f"seed {tuple(p)} is inside the unplanned set")
    level = field.stream(p)
    pts = [p.copy()]
    arc, incoming = 0.0, None
    while arc < max_arc - 1e-12:
        h = min(arc_step, max_arc - arc)
        q = _rk4_arc(field, p, h)
        if q is None:
            for radius in (h, 1.5 * h, 2.0 * h, 3.0 * h):
                q = _branch_step(field, p, radius, level, incoming)
                if q is not None:
                    break
            if q is None:
                break
        q = _newton(field, q, level)
        if field.geometry is not None and not field.geometry.inside_outer(q, tol=0.0):
            b = _edge_hit(field, p, q, level)
            if b is not None and np.linalg.norm(b - p) > 1e-12:
                pts.append(b)
            break
        if field.singular_distance(q) <= 1e-6 or field.in_unplanned(q):
            break
        step = q - p
        incoming = step / np.linalg.norm(step)
        arc += float(np.linalg.norm(step))
        pts.append(q.copy())
        p = q
    return Streamline(level, np.array(pts), field.floor.index)
