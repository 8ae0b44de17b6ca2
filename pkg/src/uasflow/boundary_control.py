"""Resilient macroscopic coordination after a pop-up obstacle.

Two recovery schemes:

* LQR boundary control of the discretized error dynamics
  ``dE/dt = A_c E + B_c U`` with ``U = -K_e E``; the gain comes from the
  continuous algebraic Riccati equation, solved by Newton-Kleinman.
* Stream-function boundary feedback: the interior error diffuses while the
  boundary nodes are driven by ``-k * dE/dn``. On the lattice this is
  ``M dE/dt = -L_G E`` with ``M = diag(h^2 interior, h / k boundary)`` and
  ``L_G`` the graph Laplacian of the planned lattice, so
  ``V = 1/2 E^T L_G E`` (the discrete Dirichlet energy) is a Lyapunov
  function. Crank-Nicolson stepping keeps its decrease exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from uasflow.errors import ConfigurationError, NumericalError
from uasflow.fdsolver import CB, CI, U, Grid, PartitionedLaplacian, solve_steady
from uasflow.flowfield import FlowField


# -- LQR --------------------------------------------------------------------
def _dense(M) -> np.ndarray:
    return M.toarray() if sp.issparse(M) else np.atleast_2d(np.asarray(M, dtype=float))


@dataclass(frozen=True)
class LqrProblem:
    A: np.ndarray
    B: np.ndarray
    We: np.ndarray
    Wu: np.ndarray

    def __post_init__(self):
        A, B, We, Wu = (_dense(M) for M in (self.A, self.B, self.We, self.Wu))
        n, m = B.shape
        if A.shape != (n, n) or We.shape != (n, n) or Wu.shape != (m, m):
            raise ConfigurationError(f"inconsistent LQR shapes A{A.shape} B{B.shape} We{We.shape} Wu{Wu.shape}")
        for name, M in (("We", We), ("Wu", Wu)):
            if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max(initial=0))):
                raise ConfigurationError(f"{name} must be symmetric")
        if np.linalg.eigvalsh(We).min(initial=0.0) < -1e-12:
            raise ConfigurationError("We must be positive semi-definite")
        if np.linalg.eigvalsh(Wu).min() <= 1e-12:
            raise ConfigurationError("Wu must be positive definite")
        for name, M in (("A", A), ("B", B), ("We", We), ("Wu", Wu)):
            object.__setattr__(self, name, M)

    @classmethod
    def from_partitioned(cls, pl: PartitionedLaplacian, we: float = 1.0, wu: float = 1.0) -> "LqrProblem":
        """Scalar-weighted problem We = we*I, Wu = wu*I on the assembled blocks."""
        n, m = pl.B_c.shape
        return cls(pl.A_c.toarray(), pl.B_c.toarray(), we * np.eye(n), wu * np.eye(m))


@dataclass(frozen=True)
class LqrSolution:
    P: np.ndarray
    K: np.ndarray
    residual: float
    iterations: int


def riccati_residual(problem: LqrProblem, P: np.ndarray) -> float:
    A, B = problem.A, problem.B
    BWB = B @ np.linalg.solve(problem.Wu, B.T)
    R = A.T @ P + P @ A - P @ BWB @ P + problem.We
    return float(np.abs(R).sum(axis=1).max())


def _certify_hurwitz(Acl: np.ndarray, P: np.ndarray, Q: np.ndarray) -> bool:
    # Lyapunov certificate: Acl^T P + P Acl = -Q with P, Q positive definite
    try:
        np.linalg.cholesky(P)
        np.linalg.cholesky(Q)
        return True
    except np.linalg.LinAlgError:
        return bool(np.linalg.eigvals(Acl).real.max() < 0)


def solve_riccati(problem: LqrProblem, tol: float = 1e-8, max_iter: int = 200) -> LqrSolution:
    """Newton-Kleinman iteration from P = 0 (valid because A is Hurwitz)."""
    A, B, We, Wu = problem.A, problem.B, problem.We, problem.Wu
    n = A.shape[0]
    scale = float(np.abs(We).sum(axis=1).max())
    P = np.zeros((n, n))
    K = np.zeros((B.shape[1], n))
    res = riccati_residual(problem, P)
    it = 0
    while res > tol * scale:
        if it >= max_iter:
            raise NumericalError(f"Newton-Kleinman did not converge in {max_iter} iterations (residual {res:.3e})")
        Acl = A - B @ K
        P = sla.solve_continuous_lyapunov(Acl.T, -(We + K.T @ Wu @ K))
        P = 0.5 * (P + P.T)
        K = np.linalg.solve(Wu, B.T @ P)
        res = riccati_residual(problem, P)
        it += 1
        if not np.isfinite(res):
            raise NumericalError("Newton-Kleinman diverged")
    if it:
        # one polishing step; quadratic convergence makes it nearly free
        P2 = sla.solve_continuous_lyapunov((A - B @ K).T, -(We + K.T @ Wu @ K))
        P2 = 0.5 * (P2 + P2.T)
        res2 = riccati_residual(problem, P2)
        if res2 < res:
            P, K, res = P2, np.linalg.solve(Wu, B.T @ P2), res2
    Acl = A - B @ K
    if scale > 0 and not _certify_hurwitz(Acl, P, We + K.T @ Wu @ K):
        raise NumericalError("closed loop A - B K is not Hurwitz")
    return LqrSolution(P, K, res, it)


@dataclass(frozen=True)
class RecoveryResult:
    times: np.ndarray
    error_norm: np.ndarray  # ||E(t)||_2
    lyapunov: np.ndarray  # E^T P E
    snapshots: dict = field(default_factory=dict)  # time -> E(t)
    initial_error: np.ndarray | None = None

    def settling_time(self, fraction: float = 0.02) -> float:
        return settling_time(self.times, self.error_norm, fraction)


def settling_time(times: np.ndarray, norms: np.ndarray, fraction: float = 0.02) -> float:
    """First time after which the norm stays within ``fraction`` of its initial value."""
    if norms[0] == 0:
        return float(times[0])
    outside = np.flatnonzero(norms > fraction * norms[0])
    if outside.size == 0:
        return float(times[0])
    last = outside[-1]
    return float(times[last + 1]) if last + 1 < times.size else math.inf


def initial_recovery_error(pl_old: PartitionedLaplacian, pl_new: PartitionedLaplacian, boundary_values) -> np.ndarray:
    """E(0) = Phi*_old - Phi*_new on the new state ordering.

    Nodes that just turned unplanned are reset to zero at the event, so
    their error entry starts at zero."""
    g_old, g_new = pl_old.grid, pl_new.grid
    if g_old.m != g_new.m or g_old.m_cb != g_new.m_cb or not np.array_equal(pl_old.cb_nodes, pl_new.cb_nodes):
        raise ConfigurationError("old and new partitions must share the lattice and boundary nodes")
    old = solve_steady(pl_old, boundary_values).full()
    new = solve_steady(pl_new, boundary_values).full()
    nodes = pl_new.state_nodes
    E0 = old[nodes] - new[nodes]
    E0[g_new.labels[nodes] == U] = 0.0
    return E0


def simulate_lqr_recovery(
    pl_old: PartitionedLaplacian,
    pl_new: PartitionedLaplacian,
    boundary_values,
    sol: LqrSolution | None,
    dt: float,
    horizon: float,
    snapshot_times: Sequence[float] = (),
) -> RecoveryResult:
    """Integrate dE/dt = (A_c - B_c K_e) E by Crank-Nicolson.

    ``sol=None`` runs the open loop (K = 0). The Lyapunov column uses the
    solution's P when given."""
    b = np.asarray(boundary_values, dtype=float)
    if b.shape != (pl_new.m_cb,):
        raise ConfigurationError(f"expected {pl_new.m_cb} boundary values, got {b.shape}")
    if not (dt > 0 and horizon > 0):
        raise ConfigurationError("dt and horizon must be positive")
    E = initial_recovery_error(pl_old, pl_new, b)
    n = E.size
    A = pl_new.A_c.toarray()
    if sol is not None:
        if sol.K.shape != (pl_new.m_cb, n):
            raise ConfigurationError(f"gain shape {sol.K.shape} does not match ({pl_new.m_cb}, {n})")
        A = A - pl_new.B_c.toarray() @ sol.K
        P = sol.P
    else:
        P = np.eye(n)
    steps = int(round(horizon / dt))
    lu = sla.lu_factor(np.eye(n) - 0.5 * dt * A)
    R = np.eye(n) + 0.5 * dt * A
    times = dt * np.arange(steps + 1)
    norms = np.empty(steps + 1)
    lyap = np.empty(steps + 1)
    want = {int(round(t / dt)): float(t) for t in snapshot_times}
    snaps = {}
    E0 = E.copy()
    for k in range(steps + 1):
        if k:
            E = sla.lu_solve(lu, R @ E)
        norms[k] = np.linalg.norm(E)
        lyap[k] = float(E @ P @ E)
        if k in want:
            snaps[want[k]] = E.copy()
    return RecoveryResult(times, norms, lyap, snaps, E0)


# -- stream-function boundary feedback --------------------------------------
@dataclass(frozen=True)
class StreamErrorField:
    """Actual and reference stream values on every lattice node."""

    psi_actual: np.ndarray
    psi_ref: np.ndarray
    k_p: float
    k_u: float | Mapping[str, float] = 1.0

    def __post_init__(self):
        gains = [self.k_p] + (list(self.k_u.values()) if isinstance(self.k_u, Mapping) else [self.k_u])
        if any(not g > 0 for g in gains):
            raise ConfigurationError("boundary control gains must be strictly positive")
        if np.shape(self.psi_actual) != np.shape(self.psi_ref):
            raise ConfigurationError("actual and reference stream arrays differ in shape")

    @property
    def error(self) -> np.ndarray:
        return np.asarray(self.psi_actual) - np.asarray(self.psi_ref)


class StreamBoundaryController:
    """Lattice realization of the stream boundary feedback on one grid.

    Active nodes are the interior nodes plus every boundary node (outer or
    unplanned) that shares a lattice edge with one. Only edges touching an
    interior node enter ``L_G``, so a boundary row is ``h`` times the
    one-sided outward normal derivative.
    """

    def __init__(self, grid: Grid, k_p: float, k_u: float | Mapping[str, float] = 1.0):
        if not k_p > 0:
            raise ConfigurationError("k_p must be positive")
        self.grid = grid
        h = grid.spacing
        regions = grid.geometry.regions_on(grid.floor)
        nodes_ci = grid.nodes(CI)
        edges = set()
        for k in nodes_ci:
            for _, nb in grid.neighbors(k):
                edges.add((min(k, nb), max(k, nb)))
        active = sorted({k for e in edges for k in e})
        self.nodes = np.array(active, dtype=int)
        pos = {k: i for i, k in enumerate(active)}
        n = len(active)
        rows, cols, vals = [], [], []
        for a, b in sorted(edges):
            i, j = pos[a], pos[b]
            rows += [i, j, i, j]
            cols += [i, j, j, i]
            vals += [1.0, 1.0, -1.0, -1.0]
        self.L = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        m = np.empty(n)
        self.boundary = np.zeros(n, dtype=bool)
        for i, k in enumerate(active):
            lab = grid.labels[k]
            if lab == CI:
                m[i] = h * h
                continue
            self.boundary[i] = True
            if lab == CB:
                gain = k_p
            else:
                name = regions[grid.owner[k]].name if grid.owner[k] >= 0 else None
                gain = k_u.get(name, 1.0) if isinstance(k_u, Mapping) else k_u
                if not gain > 0:
                    raise ConfigurationError(f"k_u for region {name!r} must be positive")
            m[i] = h / gain
        self.mass = m
        self._minv = sp.diags(1.0 / m)
        self._cn: dict[float, tuple] = {}

    def restrict(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=float)[self.nodes]

    def rate(self, E: np.ndarray) -> np.ndarray:
        return -(self._minv @ (self.L @ E))

    def energy(self, E: np.ndarray) -> float:
        """V = 1/2 sum over edges of (E_i - E_j)^2."""
        return 0.5 * float(E @ (self.L @ E))

    def energy_rate(self, E: np.ndarray) -> float:
        """dV/dt = -(L E)^T M^-1 (L E): interior and boundary terms, both <= 0."""
        LE = self.L @ E
        return -float(LE @ (LE / self.mass))

    def conserved_mean(self, E: np.ndarray) -> float:
        """Mass-weighted mean of E, invariant under the closed loop."""
        return float(self.mass @ E / self.mass.sum())

    def step(self, E: np.ndarray, dt: float) -> np.ndarray:
        if not dt > 0:
            raise ConfigurationError("dt must be positive")
        if dt not in self._cn:
            n = self.nodes.size
            eye = sp.identity(n, format="csc")
            G = (self._minv @ self.L).tocsc()
            self._cn[dt] = (spla.splu((eye + 0.5 * dt * G).tocsc()), (eye - 0.5 * dt * G).tocsr())
        lu, rhs = self._cn[dt]
        return lu.solve(rhs @ E)


_CONTROLLERS: dict = {}


def _controller_for(grid: Grid, k_p: float, k_u) -> StreamBoundaryController:
    ku_key = tuple(sorted(k_u.items())) if isinstance(k_u, Mapping) else k_u
    key = (id(grid), k_p, ku_key)
    ctl = _CONTROLLERS.get(key)
    if ctl is None or ctl.grid is not grid:
        if len(_CONTROLLERS) > 16:
            _CONTROLLERS.clear()
        ctl = _CONTROLLERS[key] = StreamBoundaryController(grid, k_p, k_u)
    return ctl


def step_stream_control(field: StreamErrorField, grid: Grid, dt: float) -> StreamErrorField:
    """Advance the actual stream values one step toward the reference."""
    ctl = _controller_for(grid, field.k_p, field.k_u)
    E = ctl.restrict(field.error)
    E_next = ctl.step(E, dt)
    psi = np.array(field.psi_actual, dtype=float)
    psi[ctl.nodes] = np.asarray(field.psi_ref, dtype=float)[ctl.nodes] + E_next
    return replace(field, psi_actual=psi)


# -- Boundary level-set check--------------------------------------------------
def _boundary_samples(region, samples: int) -> np.ndarray:
    c = np.asarray(region.center, dtype=float)
    if region.kind == "circle":
        a = 2 * np.pi * np.arange(samples) / samples
        return c + region.radius * np.column_stack([np.cos(a), np.sin(a)])
    if region.kind == "oval":
        a = 2 * np.pi * np.arange(samples) / samples
        n = region.direction
        t = np.array([-n[1], n[0]])
        out = []
        for phi in a:
            rho = region._oval_radius(phi)
            out.append(c + rho * (math.cos(phi) * n + math.sin(phi) * t))
        return np.array(out)
    hx, hy = region.half_extents
    perim = 4 * (hx + hy)
    out = []
    for s in perim * np.arange(samples) / samples:
        if s < 2 * hx:
            out.append((-hx + s, -hy))
        elif s < 2 * hx + 2 * hy:
            out.append((hx, -hy + s - 2 * hx))
        elif s < 4 * hx + 2 * hy:
            out.append((hx - (s - 2 * hx - 2 * hy), hy))
        else:
            out.append((-hx, hy - (s - 4 * hx - 2 * hy)))
    return c + np.array(out)


def check_proposition1(field: FlowField, samples: int = 360) -> bool:
    """True iff the stream function is constant on every unplanned boundary."""
    if field.geometry is None or samples <= 1:
        return True
    for region in field.geometry.regions_on(field.floor.index):
        vals = np.array([field.stream(p) for p in _boundary_samples(region, samples)])
        if vals.max() - vals.min() >= 1e-8 * (1.0 + abs(vals.mean())):
            return False
    return True
