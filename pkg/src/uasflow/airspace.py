"""Finite airspace sector: outer rectangle, unplanned regions and floors.

The planned set is the closed outer rectangle minus the (open) unplanned
regions active on a floor, so points exactly on an obstacle boundary count as
planned. Grid rasterization in :mod:`uasflow.fdsolver` uses the closed
obstacle instead (see :meth:`UnplannedRegion.covers`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Literal, Mapping, Sequence

import numpy as np
from scipy.optimize import brentq

from uasflow.errors import ConfigurationError, DomainError, NotOnBoundaryError

BOUNDARY_TOL = 1e-9  # m

RegionKind = Literal["circle", "rectangle", "oval"]


def _vec2(p) -> np.ndarray:
    a = np.asarray(p, dtype=float).reshape(-1)
    if a.size < 2:
        raise DomainError(f"expected a 2- or 3-vector, got {p!r}")
    return a[:2]


@dataclass(frozen=True)
class FlatSurface:
    """Horizontal floor z = z0."""

    z0: float = 0.0

    def __call__(self, x: float, y: float) -> float:
        return float(self.z0)

    def gradient(self, x: float, y: float) -> np.ndarray:
        return np.zeros(2)

    def hessian(self, x: float, y: float) -> np.ndarray:
        return np.zeros((2, 2))


@dataclass(frozen=True)
class ParaboloidSurface:
    """Floor z = z0 + curvature * ((x - cx)^2 + (y - cy)^2)."""

    z0: float
    curvature: float
    center: tuple[float, float] = (0.0, 0.0)

    def __call__(self, x: float, y: float) -> float:
        dx, dy = x - self.center[0], y - self.center[1]
        return float(self.z0 + self.curvature * (dx * dx + dy * dy))

    def gradient(self, x: float, y: float) -> np.ndarray:
        return 2.0 * self.curvature * np.array([x - self.center[0], y - self.center[1]])

    def hessian(self, x: float, y: float) -> np.ndarray:
        return 2.0 * self.curvature * np.eye(2)


@dataclass(frozen=True)
class FloorDefinition:
    """One motion surface of the sector.

    ``gamma`` maps region names to 1 (excluded by a doublet) or 0 (excluded by
    a source/sink pair). ``xi = 0`` switches every exclusion off on this floor.
    """

    index: int
    surface: FlatSurface | ParaboloidSurface = field(default_factory=FlatSurface)
    gamma: Mapping[str, int] = field(default_factory=dict)
    xi: int = 1

    def __post_init__(self):
        if self.index < 1:
            raise ConfigurationError(f"floor index must be >= 1, got {self.index}")
        if self.xi not in (0, 1):
            raise ConfigurationError(f"floor {self.index}: xi must be 0 or 1")
        for name, g in self.gamma.items():
            if g not in (0, 1):
                raise ConfigurationError(f"floor {self.index}: gamma[{name!r}] must be 0 or 1")

    def gamma_for(self, region: str, default: int = 1) -> int:
        return int(self.gamma.get(region, default))


@dataclass(frozen=True)
class UnplannedRegion:
    """An excluded (no-fly) zone with a characteristic point ``center``.

    Kind-specific parameters:

    - circle: ``radius``
    - rectangle: ``half_extents`` (axis aligned)
    - oval: ``delta``, ``half_separation``, ``u_inf``, ``theta0``; the Rankine
      oval carved by a source/sink pair of strength ``delta`` at
      ``center -/+ half_separation * n`` in a uniform stream ``u_inf`` along
      direction ``theta0``.

    ``floors`` limits the region to some floor indices (``None`` = all).
    """

    name: str
    kind: RegionKind
    center: tuple[float, float]
    radius: float | None = None
    half_extents: tuple[float, float] | None = None
    delta: float | None = None
    half_separation: float | None = None
    u_inf: float | None = None
    theta0: float = 0.0
    floors: frozenset[int] | None = None

    def __post_init__(self):
        if self.kind == "circle":
            if self.radius is None or not self.radius > 0:
                raise ConfigurationError(f"region {self.name!r}: radius must be > 0")
        elif self.kind == "rectangle":
            he = self.half_extents
            if he is None or len(he) != 2 or min(he) <= 0:
                raise ConfigurationError(f"region {self.name!r}: half_extents must be > 0")
        elif self.kind == "oval":
            for attr in ("delta", "half_separation", "u_inf"):
                v = getattr(self, attr)
                if v is None or not v > 0:
                    raise ConfigurationError(f"region {self.name!r}: {attr} must be > 0")
        else:
            raise ConfigurationError(f"region {self.name!r}: unknown kind {self.kind!r}")

    # -- geometry helpers -------------------------------------------------
    def active_on(self, floor: int) -> bool:
        return self.floors is None or floor in self.floors

    @property
    def direction(self) -> np.ndarray:
        return np.array([math.cos(self.theta0), math.sin(self.theta0)])

    @property
    def oval_half_length(self) -> float:
        """Distance from the center to the two stagnation points."""
        a = self.half_separation
        return math.sqrt(a * a + 2.0 * a * self.delta / self.u_inf)

    def _oval_frame(self, p: np.ndarray) -> tuple[float, float]:
        d = p - np.asarray(self.center)
        n = self.direction
        return float(n @ d), float(n[0] * d[1] - n[1] * d[0])

    def _oval_stream(self, xp: float, yp: float) -> float:
        # stream function of the pair in the region frame, with |y'|
        a, delta, u = self.half_separation, self.delta, self.u_inf
        y = abs(yp)
        return u * y + delta * (math.atan2(y, xp + a) - math.atan2(y, xp - a))

    def _oval_radius(self, phi: float) -> float:
        length = self.oval_half_length
        s, c = abs(math.sin(phi)), math.cos(phi)
        if s < 1e-12:
            return length
        f = lambda rho: self._oval_stream(rho * c, rho * s)
        hi = 2.0 * length + self.half_separation
        return brentq(f, 1e-12 * length, hi, xtol=1e-14 * length, rtol=4 * np.finfo(float).eps)

    def level(self, point) -> float:
        """Signed boundary function: < 0 inside, 0 on the boundary, > 0 outside.

        Exact signed distance for circles and rectangles; radial distance to
        the boundary for ovals.
        """
        p = _vec2(point)
        d = p - np.asarray(self.center)
        if self.kind == "circle":
            return float(math.hypot(d[0], d[1]) - self.radius)
        if self.kind == "rectangle":
            q = np.abs(d) - np.asarray(self.half_extents)
            outside = math.hypot(max(q[0], 0.0), max(q[1], 0.0))
            return float(outside + min(max(q[0], q[1]), 0.0))
        xp, yp = self._oval_frame(p)
        return float(math.hypot(xp, yp) - self._oval_radius(math.atan2(yp, xp)))

    def contains(self, point) -> bool:
        """Strict interior membership (boundary excluded)."""
        return self.level(point) < -BOUNDARY_TOL

    def covers(self, point) -> bool:
        """Closed membership (boundary included within tolerance)."""
        return self.level(point) <= BOUNDARY_TOL

    def on_boundary(self, point, tol: float = BOUNDARY_TOL) -> bool:
        return abs(self.level(point)) <= tol

    def outward_normal(self, point) -> np.ndarray:
        """Unit normal at a boundary point, pointing out of the region."""
        p = _vec2(point)
        d = p - np.asarray(self.center)
        if self.kind == "circle":
            return d / np.linalg.norm(d)
        if self.kind == "rectangle":
            he = np.asarray(self.half_extents)
            n = np.zeros(2)
            for ax in range(2):
                if abs(abs(d[ax]) - he[ax]) <= BOUNDARY_TOL:
                    n[ax] = math.copysign(1.0, d[ax])
            return n / np.linalg.norm(n)
        xp, yp = self._oval_frame(p)
        a, delta, u = self.half_separation, self.delta, self.u_inf
        if abs(yp) <= BOUNDARY_TOL:
            local = np.array([math.copysign(1.0, xp), 0.0])
        else:
            y = abs(yp)
            r1 = (xp + a) ** 2 + y * y
            r2 = (xp - a) ** 2 + y * y
            gx = delta * (-y / r1 + y / r2)
            gy = u + delta * ((xp + a) / r1 - (xp - a) / r2)
            local = np.array([gx, math.copysign(gy, yp)])
            local /= np.linalg.norm(local)
        n = self.direction
        world = local[0] * n + local[1] * np.array([-n[1], n[0]])
        return world / np.linalg.norm(world)

    def line_crossing(self, inside, outside) -> float:
        """Fraction t in (0, 1] along outside->inside where the boundary lies."""
        p0, p1 = _vec2(outside), _vec2(inside)
        lo, hi = 0.0, 1.0
        f = lambda t: self.level(p0 + t * (p1 - p0))
        if f(hi) > 0:
            raise DomainError(f"region {self.name!r}: segment end is not covered")
        if self.kind in ("circle", "rectangle"):
            # closed form for the sign change along an axis-aligned grid line
            if self.kind == "circle":
                c = np.asarray(self.center)
                dv = p1 - p0
                w = p0 - c
                A, B, C = dv @ dv, 2 * (w @ dv), w @ w - self.radius**2
                disc = max(B * B - 4 * A * C, 0.0)
                roots = sorted([(-B - math.sqrt(disc)) / (2 * A), (-B + math.sqrt(disc)) / (2 * A)])
                t = next((r for r in roots if -1e-12 <= r <= 1 + 1e-12), None)
                if t is not None:
                    return float(min(max(t, 0.0), 1.0))
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if f(mid) > 0:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-15:
                break
        return hi


@dataclass(frozen=True)
class AirspaceGeometry:
    """Outer rectangle, floors and unplanned regions of one sector."""

    outer_min: tuple[float, float]
    outer_max: tuple[float, float]
    floors: tuple[FloorDefinition, ...] = (FloorDefinition(1),)
    unplanned: tuple[UnplannedRegion, ...] = ()

    def __post_init__(self):
        lo, hi = np.asarray(self.outer_min, float), np.asarray(self.outer_max, float)
        if lo.shape != (2,) or hi.shape != (2,) or not np.all(lo < hi):
            raise ConfigurationError("outer_min must be component-wise smaller than outer_max")
        names = [r.name for r in self.unplanned]
        if len(set(names)) != len(names):
            raise ConfigurationError("unplanned region names must be unique")
        for r in self.unplanned:
            c = np.asarray(r.center, float)
            if not (np.all(c > lo) and np.all(c < hi)):
                raise ConfigurationError(
                    f"region {r.name!r}: characteristic point must lie strictly inside the outer rectangle"
                )
        idx = [f.index for f in self.floors]
        if len(set(idx)) != len(idx) or not idx:
            raise ConfigurationError("floor indices must be unique and non-empty")

    @property
    def width(self) -> float:
        return self.outer_max[0] - self.outer_min[0]

    @property
    def height(self) -> float:
        return self.outer_max[1] - self.outer_min[1]

    def floor(self, index: int) -> FloorDefinition:
        for f in self.floors:
            if f.index == index:
                return f
        raise DomainError(f"invalid floor index {index}")

    def regions_on(self, floor: int) -> list[UnplannedRegion]:
        self.floor(floor)
        return [r for r in self.unplanned if r.active_on(floor)]

    def region(self, name: str) -> UnplannedRegion:
        for r in self.unplanned:
            if r.name == name:
                return r
        raise KeyError(name)

    def with_region(self, region: UnplannedRegion) -> "AirspaceGeometry":
        """Copy with one more unplanned region (e.g. a pop-up no-fly zone)."""
        return replace(self, unplanned=self.unplanned + (region,))

    def inside_outer(self, point, tol: float = BOUNDARY_TOL) -> bool:
        p = _vec2(point)
        return bool(
            np.all(p >= np.asarray(self.outer_min) - tol) and np.all(p <= np.asarray(self.outer_max) + tol)
        )

    def on_outer_boundary(self, point, tol: float = BOUNDARY_TOL) -> bool:
        p = _vec2(point)
        if not self.inside_outer(p, tol):
            return False
        lo, hi = np.asarray(self.outer_min), np.asarray(self.outer_max)
        return bool(np.any(np.abs(p - lo) <= tol) or np.any(np.abs(p - hi) <= tol))


def contains_planned(geometry: AirspaceGeometry, point: Sequence[float], floor: int) -> bool:
    """True iff ``point`` (x, y[, z]) is in the planned set of ``floor``."""
    regions = geometry.regions_on(floor)
    if not geometry.inside_outer(point):
        return False
    return not any(r.contains(point) for r in regions)


def outward_normal(geometry: AirspaceGeometry, point: Sequence[float]) -> np.ndarray:
    """Outward unit normal on the outer boundary or on an unplanned boundary.

    On the outer rectangle this is the face normal and points out of the
    sector; on an obstacle it points out of the obstacle. Corners get the
    renormalized average of the two face normals.
    """
    p = _vec2(point)
    if geometry.on_outer_boundary(p):
        lo, hi = np.asarray(geometry.outer_min), np.asarray(geometry.outer_max)
        n = np.zeros(2)
        for ax in range(2):
            if abs(p[ax] - hi[ax]) <= BOUNDARY_TOL:
                n[ax] += 1.0
            elif abs(p[ax] - lo[ax]) <= BOUNDARY_TOL:
                n[ax] -= 1.0
        return n / np.linalg.norm(n)
    for r in geometry.unplanned:
        if r.on_boundary(p):
            return r.outward_normal(p)
    raise NotOnBoundaryError(f"point {tuple(p)} lies on no boundary")


def tangent(normal: Sequence[float]) -> np.ndarray:
    """Unit tangent: the normal rotated by +90 degrees."""
    n = np.asarray(normal, dtype=float)
    return np.array([-n[1], n[0]])
