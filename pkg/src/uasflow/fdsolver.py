"""Finite-difference macroscopic coordination on a regular lattice.

Nodes are labeled boundary-control (on the outer rectangle), interior
(planned) or unplanned (covered by an obstacle). The 5-point Laplacian is
permuted into (cb, ci, u) order, giving the interior dynamics

    dPhi_I/dt = A_c Phi_I + B_c Phi_cb,

with the unplanned block decoupled as ``-I`` so ``Phi_u`` stays at zero.
Interior nodes next to a curved obstacle use Shortley-Weller arms that cut
at the true boundary; the arm coefficient is booked on the unplanned
neighbor's column, which is harmless because that column holds zero.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from uasflow.airspace import AirspaceGeometry, UnplannedRegion
from uasflow.errors import ConfigurationError, ConnectivityError, NumericalError, StepSizeError

CB, CI, U = 0, 1, 2
LABEL_NAMES = {CB: "cb", CI: "ci", U: "u"}
THETA_MIN = 1e-6  # smallest Shortley-Weller arm fraction
DENSE_EIG_LIMIT = 600

Treatment = Literal["shortley-weller", "staircase"]


@dataclass(frozen=True)
class Grid:
    """Regular lattice over the outer rectangle; node index = j * nx + i."""

    geometry: AirspaceGeometry
    floor: int
    spacing: float
    nx: int
    ny: int
    coords: np.ndarray  # (m, 2)
    labels: np.ndarray  # (m,) int8 in {CB, CI, U}
    owner: np.ndarray  # (m,) index of the covering region, -1 if none

    @property
    def m(self) -> int:
        return self.nx * self.ny

    @property
    def m_cb(self) -> int:
        return int(np.count_nonzero(self.labels == CB))

    @property
    def m_ci(self) -> int:
        return int(np.count_nonzero(self.labels == CI))

    @property
    def m_u(self) -> int:
        return int(np.count_nonzero(self.labels == U))

    def index(self, i: int, j: int) -> int:
        return j * self.nx + i

    def neighbors(self, k: int):
        """Lattice neighbors of node k with the direction index 0..3 (E, W, N, S)."""
        i, j = k % self.nx, k // self.nx
        if i + 1 < self.nx:
            yield 0, k + 1
        if i > 0:
            yield 1, k - 1
        if j + 1 < self.ny:
            yield 2, k + self.nx
        if j > 0:
            yield 3, k - self.nx

    def nodes(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


def _lattice_count(extent: float, h: float) -> int:
    n = extent / h
    k = round(n)
    if k < 2 or abs(n - k) > 1e-9 * max(1.0, n):
        raise ConfigurationError(f"spacing {h} must divide the sector extent {extent} into >= 2 cells")
    return int(k) + 1


def build_grid(geometry: AirspaceGeometry, spacing: float, floor: int = 1) -> Grid:
    """Lattice with nodes labeled cb (on the outer border), u (covered by an
    active region, boundary included) or ci (everything else)."""
    if not spacing > 0:
        raise ConfigurationError("grid spacing must be positive")
    nx = _lattice_count(geometry.width, spacing)
    ny = _lattice_count(geometry.height, spacing)
    x0, y0 = geometry.outer_min
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny))
    coords = np.column_stack([x0 + spacing * ii.ravel(), y0 + spacing * jj.ravel()])
    border = (ii.ravel() == 0) | (ii.ravel() == nx - 1) | (jj.ravel() == 0) | (jj.ravel() == ny - 1)
    labels = np.where(border, CB, CI).astype(np.int8)
    owner = np.full(nx * ny, -1, dtype=int)
    regions = geometry.regions_on(floor)
    for r_idx, region in enumerate(regions):
        hit = 0
        for k in np.flatnonzero(~border):
            if region.covers(coords[k]):
                labels[k] = U
                if owner[k] < 0:
                    owner[k] = r_idx
                hit += 1
        if hit == 0:
            raise ConfigurationError(
                f"region {region.name!r} contains no grid node; spacing {spacing} is too coarse"
            )
    return Grid(geometry, floor, float(spacing), nx, ny, coords, labels, owner)


def reclassify(grid: Grid, region: UnplannedRegion) -> Grid:
    """Rebuild the grid after a pop-up region appears (full reassembly)."""
    return build_grid(grid.geometry.with_region(region), grid.spacing, grid.floor)


def _check_connected(grid: Grid) -> None:
    seen = np.zeros(grid.m, dtype=bool)
    queue = deque(grid.nodes(CB).tolist())
    seen[list(queue)] = True
    while queue:
        k = queue.popleft()
        for _, nb in grid.neighbors(k):
            if not seen[nb] and grid.labels[nb] == CI:
                seen[nb] = True
                queue.append(nb)
    stranded = np.flatnonzero((grid.labels == CI) & ~seen)
    if stranded.size:
        x, y = grid.coords[stranded[0]]
        raise ConnectivityError(
            f"{stranded.size} interior node(s) cannot reach the outer boundary, e.g. ({x:g}, {y:g})"
        )


@dataclass(frozen=True)
class PartitionedLaplacian:
    grid: Grid
    L: sp.csr_matrix  # positive 5-point Laplacian (1/h^2 scaled), node order
    S: sp.csr_matrix  # permutation, rows in (cb, ci, u) order
    order: np.ndarray  # node index per permuted position
    A_c: sp.csc_matrix
    B_c: sp.csc_matrix
    Lhat_cb: sp.dia_matrix
    arms: dict = field(repr=False)  # (ci node, direction) -> Shortley-Weller fraction
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def m_cb(self) -> int:
        return self.grid.m_cb

    @property
    def n_state(self) -> int:
        return self.A_c.shape[0]

    @property
    def state_nodes(self) -> np.ndarray:
        return self.order[self.m_cb :]

    @property
    def cb_nodes(self) -> np.ndarray:
        return self.order[: self.m_cb]

    def system_matrix(self) -> sp.csr_matrix:
        """Block matrix [[-Lhat_cb, 0], [B_c, A_c]] in permuted order."""
        z = sp.csr_matrix((self.m_cb, self.n_state))
        return sp.bmat([[-self.Lhat_cb, z], [self.B_c, self.A_c]], format="csr")

    def lu(self):
        if "lu" not in self._cache:
            self._cache["lu"] = spla.splu(self.A_c.tocsc())
        return self._cache["lu"]


def assemble_partitioned(grid: Grid, treatment: Treatment = "shortley-weller") -> PartitionedLaplacian:
    """Build L, the (cb, ci, u) permutation S and the blocks A_c, B_c."""
    if treatment not in ("shortley-weller", "staircase"):
        raise ConfigurationError(f"unknown boundary treatment {treatment!r}")
    _check_connected(grid)
    h2 = grid.spacing**2
    regions = grid.geometry.regions_on(grid.floor)
    rows, cols, vals = [], [], []
    arms: dict[tuple[int, int], float] = {}
    degree = np.zeros(grid.m)
    for k in range(grid.m):
        nbs = list(grid.neighbors(k))
        degree[k] = len(nbs)
        if grid.labels[k] != CI:
            continue
        theta = {d: 1.0 for d, _ in nbs}
        if treatment == "shortley-weller":
            for d, nb in nbs:
                if grid.labels[nb] == U and grid.owner[nb] >= 0:
                    t = regions[grid.owner[nb]].line_crossing(grid.coords[nb], grid.coords[k])
                    theta[d] = max(t, THETA_MIN)
                    arms[(k, nb)] = theta[d]
        diag = 0.0
        for axis in ((0, 1), (2, 3)):
            tp, tm = theta[axis[0]], theta[axis[1]]
            ws = {axis[0]: 2.0 / (tp * (tp + tm)), axis[1]: 2.0 / (tm * (tp + tm))}
            diag += 2.0 / (tp * tm)
            for d, nb in nbs:
                if d in ws:
                    rows.append(k)
                    cols.append(nb)
                    vals.append(-ws[d] / h2)
        rows.append(k)
        cols.append(k)
        vals.append(diag / h2)
    for k in range(grid.m):
        if grid.labels[k] == CI:
            continue
        # boundary and unplanned rows keep the plain graph-Laplacian stencil
        for _, nb in grid.neighbors(k):
            rows.append(k)
            cols.append(nb)
            vals.append(-1.0 / h2)
        rows.append(k)
        cols.append(k)
        vals.append(degree[k] / h2)
    L = sp.csr_matrix((vals, (rows, cols)), shape=(grid.m, grid.m))

    cb, ci, u = grid.nodes(CB), grid.nodes(CI), grid.nodes(U)
    order = np.concatenate([cb, ci, u])
    m = grid.m
    S = sp.csr_matrix((np.ones(m), (np.arange(m), order)), shape=(m, m))
    m_cb, m_ci, m_u = cb.size, ci.size, u.size
    Lp = (S @ L @ S.T).tocsr()
    I_ = slice(m_cb, m_cb + m_ci)
    L_ci_ci = Lp[I_, m_cb : m_cb + m_ci]
    L_ci_u = Lp[I_, m_cb + m_ci :]
    L_ci_cb = Lp[I_, :m_cb]
    A_c = -sp.bmat(
        [[L_ci_ci, L_ci_u], [sp.csr_matrix((m_u, m_ci)), sp.identity(m_u, format="csr")]],
        format="csc",
    )
    B_c = -sp.bmat([[L_ci_cb], [sp.csr_matrix((m_u, m_cb))]], format="csc")
    Lhat = sp.diags(degree[cb] / h2)
    return PartitionedLaplacian(grid, L, S, order, A_c, B_c, Lhat, arms)


# -- stability structure ------------------------------------------------------
def _abscissa(M: sp.spmatrix) -> float:
    """Spectral abscissa of a Metzler matrix with negative spectrum.

    For such matrices the rightmost eigenvalue is real and also the one of
    smallest modulus, so shift-invert about 0 finds it. The start vector is
    fixed (the Perron vector is positive) so repeated runs agree bitwise."""
    n = M.shape[0]
    if n <= DENSE_EIG_LIMIT:
        return float(np.max(np.linalg.eigvals(M.toarray()).real))
    vals = spla.eigs(M.tocsc(), k=1, sigma=0.0, which="LM", return_eigenvectors=False, tol=1e-10, v0=np.ones(n))
    return float(vals.real.max())


def spectral_abscissa(pl: PartitionedLaplacian) -> float:
    """max Re(eig(A_c)); negative means Hurwitz."""
    if "abscissa" not in pl._cache:
        pl._cache["abscissa"] = _abscissa(pl.A_c)
    return pl._cache["abscissa"]


def is_hurwitz(pl: PartitionedLaplacian) -> bool:
    return spectral_abscissa(pl) < 0


@dataclass(frozen=True)
class JacobiSplitting:
    G: sp.dia_matrix  # positive diagonal
    D: sp.csr_matrix  # non-negative, G^-1 A_c = -I + D
    spectral_radius: float


def appendix_decomposition(pl: PartitionedLaplacian) -> JacobiSplitting:
    """Split G^-1 A_c = -I + D with G = -diag(A_c) and report rho(D).

    D is non-negative, so its Perron root is 1 + the spectral abscissa of
    G^-1 A_c."""
    g = -pl.A_c.diagonal()
    if np.any(g <= 0):
        raise NumericalError("A_c has a non-negative diagonal entry")
    Ginv = sp.diags(1.0 / g)
    Ahat = (Ginv @ pl.A_c).tocsr()
    D = (Ahat + sp.identity(Ahat.shape[0])).tocsr()
    D.eliminate_zeros()
    if Ahat.shape[0] <= DENSE_EIG_LIMIT:
        rho = float(np.max(np.abs(np.linalg.eigvals(D.toarray()))))
    else:
        rho = 1.0 + _abscissa(Ahat)
    return JacobiSplitting(sp.diags(g), D, rho)


# -- solves ---------------------------------------------------------------------
@dataclass(frozen=True)
class NodalPotential:
    pl: PartitionedLaplacian
    boundary_values: np.ndarray  # (m_cb,)
    phi_I: np.ndarray  # (m - m_cb,); unplanned entries exactly 0

    def full(self) -> np.ndarray:
        """Nodal values in lattice order."""
        out = np.zeros(self.pl.grid.m)
        out[self.pl.order] = np.concatenate([self.boundary_values, self.phi_I])
        return out


def boundary_values_from(pl: PartitionedLaplacian, fn) -> np.ndarray:
    """Sample ``fn(x, y)`` at the cb nodes in permuted order."""
    xy = pl.grid.coords[pl.cb_nodes]
    return np.array([fn(x, y) for x, y in xy], dtype=float)


def solve_steady(pl: PartitionedLaplacian, boundary_values) -> NodalPotential:
    """Direct sparse solve of A_c Phi_I + B_c Phi_cb = 0."""
    b = np.asarray(boundary_values, dtype=float)
    if b.shape != (pl.m_cb,):
        raise ConfigurationError(f"expected {pl.m_cb} boundary values, got {b.shape}")
    rhs = -(pl.B_c @ b)
    try:
        lu = pl.lu()
    except RuntimeError as exc:
        raise NumericalError(f"steady solve failed: {exc}") from exc
    x = lu.solve(rhs)
    x = x + lu.solve(rhs - pl.A_c @ x)  # one refinement sweep
    m_ci = pl.grid.m_ci
    x[m_ci:] = 0.0
    res = np.max(np.abs(pl.A_c @ x - rhs), initial=0.0)
    scale = np.max(np.abs(rhs), initial=0.0)
    if not np.all(np.isfinite(x)) or res > 1e-10 * scale:
        raise NumericalError(f"steady residual {res:.3e} exceeds 1e-10 * {scale:.3e}")
    return NodalPotential(pl, b.copy(), x)


def max_step_explicit(pl: PartitionedLaplacian) -> float:
    """Forward-Euler stability limit 2 / |lambda|_max of A_c."""
    if "lam_max" not in pl._cache:
        n = pl.n_state
        if n <= DENSE_EIG_LIMIT:
            lam = np.max(np.abs(np.linalg.eigvals(pl.A_c.toarray())))
        else:
            # seeded start: the top mode is a checkerboard, orthogonal to constants on symmetric grids
            v0 = np.random.default_rng(0).standard_normal(n)
            lam = np.max(np.abs(spla.eigs(pl.A_c, k=1, which="LM", return_eigenvectors=False, tol=1e-8, v0=v0)))
        pl._cache["lam_max"] = float(lam)
    return 2.0 / pl._cache["lam_max"]


def step_dynamic(
    pl: PartitionedLaplacian,
    phi_I,
    boundary_values,
    dt: float,
    method: Literal["trapezoidal", "explicit"] = "trapezoidal",
) -> np.ndarray:
    """Advance dPhi_I/dt = A_c Phi_I + B_c Phi_cb by one step."""
    if not dt > 0:
        raise StepSizeError("dt must be positive")
    x = np.asarray(phi_I, dtype=float)
    forcing = pl.B_c @ np.asarray(boundary_values, dtype=float)
    if method == "explicit":
        limit = max_step_explicit(pl)
        if dt >= limit:
            raise StepSizeError(f"explicit step dt={dt} violates stability limit {limit:.6g}")
        return x + dt * (pl.A_c @ x + forcing)
    if method != "trapezoidal":
        raise ConfigurationError(f"unknown stepping method {method!r}")
    key = ("cn", float(dt))
    if key not in pl._cache:
        n = pl.n_state
        eye = sp.identity(n, format="csc")
        pl._cache[key] = (spla.splu((eye - 0.5 * dt * pl.A_c).tocsc()), (eye + 0.5 * dt * pl.A_c).tocsr())
    lu, rhs_op = pl._cache[key]
    return lu.solve(rhs_op @ x + dt * forcing)


# -- diagnostics ---------------------------------------------------------------
@dataclass(frozen=True)
class FluxReport:
    outer: float
    obstacle: float
    total: float
    scale: float

    @property
    def relative(self) -> float:
        return abs(self.total) / self.scale if self.scale > 0 else 0.0


def boundary_flux(sol: NodalPotential) -> FluxReport:
    """Discrete outward flux of grad(Phi) through the outer and obstacle boundaries.

    Exact (zero net) for harmonic discrete solutions when every interior
    arm is symmetric; Shortley-Weller rows break the telescoping, so the
    total is then only O(h^2) small."""
    pl, grid = sol.pl, sol.pl.grid
    phi = sol.full()
    outer, obstacle, scale = 0.0, 0.0, 0.0
    for k in grid.nodes(CI):
        for _, nb in grid.neighbors(k):
            lab = grid.labels[nb]
            if lab == CB:
                term = phi[nb] - phi[k]
                outer += term
            elif lab == U:
                term = (0.0 - phi[k]) / pl.arms.get((k, nb), 1.0)
                obstacle += term
            else:
                continue
            scale += abs(term)
    return FluxReport(outer, obstacle, outer + obstacle, scale)


def nodal_table(sol: NodalPotential) -> list[tuple[float, float, str, float]]:
    """Rows (x, y, label, phi) in lattice order for column-text export."""
    grid = sol.pl.grid
    phi = sol.full()
    return [
        (float(grid.coords[k, 0]), float(grid.coords[k, 1]), LABEL_NAMES[int(grid.labels[k])], float(phi[k]))
        for k in range(grid.m)
    ]
