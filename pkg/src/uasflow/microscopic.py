"""Leader-follower cluster coordination as a virtual rigid body.

Agents are double integrators tracking local desired positions: leaders
follow the rigid-body image of their material positions, followers a convex
combination of in-neighbors. Agent numbering is 1-based throughout, as in
communication tables; arrays are 0-based.
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.optimize import linprog

from uasflow.errors import ClusterValidationError, NumericalError

ZERO_SPEED = 1e-9  # m/s
ROW_SUM_TOL = 1e-9

#: Follower communication weights as tabulated: follower -> (in-neighbors, weights).
#: Row 7 as listed sums to 1.1; see :func:`ten_agent_cluster`.
TEN_AGENT_RAW: dict[int, tuple[tuple[int, int, int], tuple[float, float, float]]] = {
    4: ((1, 7, 10), (0.50, 0.25, 0.25)),
    5: ((2, 8, 9), (0.50, 0.25, 0.25)),
    6: ((3, 9, 10), (0.50, 0.25, 0.25)),
    7: ((4, 8, 10), (0.40, 0.30, 0.40)),
    8: ((5, 7, 9), (0.29, 0.35, 0.36)),
    9: ((5, 6, 8), (0.31, 0.40, 0.29)),
    10: ((4, 6, 7), (0.45, 0.25, 0.30)),
}

#: Default leader triangle (body frame, m) for the 10-agent cluster.
TEN_AGENT_LEADERS = np.array([[8.0, 0.0, 0.0], [-4.0, 6.0, 0.0], [-4.0, -6.0, 0.0]])


@dataclass(frozen=True)
class Cluster:
    """A d-dimensional cluster of n agents; leaders are agents 1..d+1."""

    id: str
    d: int
    n: int
    neighbors: Mapping[int, tuple[int, ...]]
    weights: Mapping[int, tuple[float, ...]]
    material: np.ndarray  # (n, 3) body-frame positions
    beta1: float = 4.0
    beta2: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "material", np.asarray(self.material, dtype=float).reshape(self.n, 3))
        object.__setattr__(self, "neighbors", {int(k): tuple(int(h) for h in v) for k, v in self.neighbors.items()})
        object.__setattr__(self, "weights", {int(k): tuple(float(w) for w in v) for k, v in self.weights.items()})
        _validate(self)

    @property
    def leaders(self) -> range:
        return range(1, self.d + 2)

    @property
    def followers(self) -> range:
        return range(self.d + 2, self.n + 1)

    def is_leader(self, j: int) -> bool:
        return 1 <= j <= self.d + 1


def _validate(c: Cluster) -> None:
    if c.d not in (0, 1, 2, 3):
        raise ClusterValidationError(f"cluster {c.id}: dimension must be 0..3, got {c.d}")
    if c.n < c.d + 1:
        raise ClusterValidationError(f"cluster {c.id}: needs at least d+1 = {c.d + 1} agents")
    if not (c.beta1 > 0 and c.beta2 > 0):
        raise ClusterValidationError(f"cluster {c.id}: gains beta1, beta2 must be positive")
    extra = set(c.neighbors) - set(c.followers)
    if extra:
        raise ClusterValidationError(f"cluster {c.id}: agents {sorted(extra)} are not followers")
    for j in c.followers:
        nbs, ws = c.neighbors.get(j), c.weights.get(j)
        if not nbs:
            raise ClusterValidationError(f"cluster {c.id}: follower {j} has no in-neighbors")
        if ws is None or len(ws) != len(nbs):
            raise ClusterValidationError(f"cluster {c.id}: follower {j} needs one weight per in-neighbor")
        if any(h < 1 or h > c.n or h == j for h in nbs) or len(set(nbs)) != len(nbs):
            raise ClusterValidationError(f"cluster {c.id}: follower {j} has invalid in-neighbors {nbs}")
        if any(not w > 0 for w in ws):
            raise ClusterValidationError(f"cluster {c.id}: follower {j} has a non-positive weight")
        if abs(sum(ws) - 1.0) > ROW_SUM_TOL:
            raise ClusterValidationError(
                f"cluster {c.id}: weights of follower {j} sum to {sum(ws):.12g}, expected 1"
            )
    # every follower must be reachable from the leader set
    out: dict[int, list[int]] = {}
    for j, nbs in c.neighbors.items():
        for h in nbs:
            out.setdefault(h, []).append(j)
    seen = set(c.leaders)
    queue = deque(c.leaders)
    while queue:
        h = queue.popleft()
        for j in out.get(h, []):
            if j not in seen:
                seen.add(j)
                queue.append(j)
    missing = [j for j in c.followers if j not in seen]
    if missing:
        raise ClusterValidationError(f"cluster {c.id}: follower {missing[0]} is not reachable from the leaders")
    if c.d > 0:
        lead = c.material[: c.d + 1]
        rank = np.linalg.matrix_rank(lead[1:] - lead[0], tol=1e-9 * max(1.0, np.abs(lead).max()))
        if rank != c.d:
            raise ClusterValidationError(f"cluster {c.id}: leader material positions span rank {rank}, expected {c.d}")


@dataclass(frozen=True)
class WeightMatrix:
    W: np.ndarray
    Omega: np.ndarray
    L: np.ndarray


def _weight_matrix(c: Cluster) -> np.ndarray:
    W = -np.eye(c.n)
    for j in c.followers:
        for h, w in zip(c.neighbors[j], c.weights[j]):
            W[j - 1, h - 1] = w
    return W


def build_weight_matrix(cluster: Cluster) -> WeightMatrix:
    """W = [[-I, 0], [Omega, L]]; raises if L or W is not Hurwitz."""
    W = _weight_matrix(cluster)
    k = cluster.d + 1
    Omega, L = W[k:, :k], W[k:, k:]
    for name, M in (("L", L), ("W", W)):
        if M.size and np.linalg.eigvals(M).real.max() >= 0:
            raise ClusterValidationError(f"cluster {cluster.id}: {name} is not Hurwitz")
    return WeightMatrix(W, Omega, L)


def containment_fixed_point(wm: WeightMatrix, leader_positions: np.ndarray) -> np.ndarray:
    """Follower positions -L^-1 Omega p_L (one column per axis)."""
    return -np.linalg.solve(wm.L, wm.Omega @ np.asarray(leader_positions, dtype=float))


def consistent_material(cluster: Cluster, leaders: np.ndarray | None = None) -> np.ndarray:
    """Material positions whose followers sit at the containment fixed point."""
    wm = build_weight_matrix(cluster)
    lead = cluster.material[: cluster.d + 1] if leaders is None else np.asarray(leaders, dtype=float)
    return np.vstack([lead, containment_fixed_point(wm, lead)]) if wm.L.size else lead.copy()


def check_material_consistency(cluster: Cluster, tol: float = 1e-9) -> list[int]:
    """Followers whose material position is not the weighted combination of
    their in-neighbors'; a warning is emitted for each."""
    bad = []
    for j in cluster.followers:
        combo = sum(w * cluster.material[h - 1] for h, w in zip(cluster.neighbors[j], cluster.weights[j]))
        if np.linalg.norm(combo - cluster.material[j - 1]) > tol * max(1.0, np.abs(cluster.material).max()):
            bad.append(j)
    if bad:
        warnings.warn(
            f"cluster {cluster.id}: followers {bad} will settle at the containment point, not their rigid-body image",
            stacklevel=2,
        )
    return bad


def ten_agent_cluster(
    leaders: np.ndarray | None = None,
    normalize: bool = True,
    beta1: float = 4.0,
    beta2: float = 4.0,
    cluster_id: str = "C1",
) -> Cluster:
    """The 10-agent, 2-D cluster with the tabulated follower weights.

    With ``normalize`` each row is scaled to unit sum (only row 7 changes).
    Followers are placed at the containment point of the leader triangle.
    """
    nbs = {j: v[0] for j, v in TEN_AGENT_RAW.items()}
    ws = {}
    for j, (_, w) in TEN_AGENT_RAW.items():
        s = sum(w)
        ws[j] = tuple(x / s for x in w) if normalize else w
    lead = TEN_AGENT_LEADERS if leaders is None else np.asarray(leaders, dtype=float)
    W = -np.eye(10)
    for j in nbs:
        for h, w in zip(nbs[j], ws[j]):
            W[j - 1, h - 1] = w
    followers = -np.linalg.solve(W[3:, 3:], W[3:, :3] @ lead)
    return Cluster(cluster_id, 2, 10, nbs, ws, np.vstack([lead, followers]), beta1, beta2)


# -- virtual rigid body -----------------------------------------------------
def rotation_matrix(theta1: float, theta2: float) -> np.ndarray:
    """Q(theta1, theta2); its rows are the body axes in ground coordinates."""
    c1, s1, c2, s2 = math.cos(theta1), math.sin(theta1), math.cos(theta2), math.sin(theta2)
    return np.array([[c1 * c2, c1 * s2, -s1], [-s2, c2, 0.0], [s1 * c2, s1 * s2, c1]])


def _rotation_partials(theta1: float, theta2: float) -> tuple[np.ndarray, np.ndarray]:
    c1, s1, c2, s2 = math.cos(theta1), math.sin(theta1), math.cos(theta2), math.sin(theta2)
    d1 = np.array([[-s1 * c2, -s1 * s2, -c1], [0.0, 0.0, 0.0], [c1 * c2, c1 * s2, -s1]])
    d2 = np.array([[-c1 * s2, c1 * c2, 0.0], [-c2, -s2, 0.0], [-s1 * s2, s1 * c2, 0.0]])
    return d1, d2


@dataclass(frozen=True)
class VrbPose:
    r: np.ndarray
    Q: np.ndarray
    theta1: float
    theta2: float


@dataclass(frozen=True)
class VrbPoseRate:
    r_dot: np.ndarray
    Q_dot: np.ndarray
    theta1_dot: float = 0.0
    theta2_dot: float = 0.0

    @classmethod
    def zero(cls) -> "VrbPoseRate":
        return cls(np.zeros(3), np.zeros((3, 3)))


def vrb_pose_from_velocity(r, v, previous: VrbPose | None = None) -> VrbPose:
    """Pose whose first body axis is along ``v``.

    Below ``ZERO_SPEED`` the previous orientation is held (identity if none)."""
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    speed = float(np.linalg.norm(v))
    if speed <= ZERO_SPEED:
        if previous is None:
            return VrbPose(r, np.eye(3), 0.0, 0.0)
        return VrbPose(r, previous.Q, previous.theta1, previous.theta2)
    s = max(-1.0, min(1.0, v[2] / speed))
    theta1 = -math.asin(s)
    theta2 = math.atan2(v[1], v[0])
    return VrbPose(r, rotation_matrix(theta1, theta2), theta1, theta2)


def pose_rate_from_motion(pose: VrbPose, v, a) -> VrbPoseRate:
    """Analytic pose rate from reference velocity ``v`` and acceleration ``a``."""
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    speed = float(np.linalg.norm(v))
    if speed <= ZERO_SPEED:
        return VrbPoseRate(v.copy(), np.zeros((3, 3)))
    rho2 = v[0] ** 2 + v[1] ** 2
    t2dot = (v[0] * a[1] - v[1] * a[0]) / rho2 if rho2 > 0 else 0.0
    s = v[2] / speed
    sdot = a[2] / speed - v[2] * float(v @ a) / speed**3
    t1dot = -sdot / math.sqrt(max(1.0 - s * s, 1e-300))
    d1, d2 = _rotation_partials(pose.theta1, pose.theta2)
    return VrbPoseRate(v.copy(), d1 * t1dot + d2 * t2dot, t1dot, t2dot)


def pose_rate_finite_difference(previous: VrbPose, current: VrbPose, dt: float) -> VrbPoseRate:
    dtheta2 = math.atan2(math.sin(current.theta2 - previous.theta2), math.cos(current.theta2 - previous.theta2))
    return VrbPoseRate(
        (current.r - previous.r) / dt,
        (current.Q - previous.Q) / dt,
        (current.theta1 - previous.theta1) / dt,
        dtheta2 / dt,
    )


def global_desired_positions(cluster: Cluster, pose: VrbPose) -> np.ndarray:
    """Rigid-body image r + (material position in body axes), one row per agent."""
    return cluster.material @ pose.Q + pose.r


def global_desired_velocities(cluster: Cluster, rate: VrbPoseRate) -> np.ndarray:
    return cluster.material @ rate.Q_dot + rate.r_dot


@dataclass(frozen=True)
class ClusterState:
    positions: np.ndarray  # (n, 3)
    velocities: np.ndarray  # (n, 3)

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=float)
        v = np.asarray(self.velocities, dtype=float)
        if p.shape != v.shape or p.ndim != 2 or p.shape[1] != 3:
            raise ClusterValidationError(f"state arrays must both be (n, 3), got {p.shape} and {v.shape}")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "velocities", v)


def _follower_combo(cluster: Cluster, X: np.ndarray) -> np.ndarray:
    out = X.copy()
    for j in cluster.followers:
        out[j - 1] = sum(w * X[h - 1] for h, w in zip(cluster.neighbors[j], cluster.weights[j]))
    return out


def local_desired_position(cluster: Cluster, state: ClusterState, j: int, pose: VrbPose) -> np.ndarray:
    """Leaders: rigid-body image; followers: weighted in-neighbor positions."""
    if not 1 <= j <= cluster.n:
        raise ClusterValidationError(f"cluster {cluster.id}: agent {j} out of range")
    if cluster.is_leader(j):
        return global_desired_positions(cluster, pose)[j - 1]
    return sum(w * state.positions[h - 1] for h, w in zip(cluster.neighbors[j], cluster.weights[j]))


def _accel(cluster: Cluster, P: np.ndarray, V: np.ndarray, lead_p: np.ndarray, lead_v: np.ndarray) -> np.ndarray:
    Pd = _follower_combo(cluster, P)
    Vd = _follower_combo(cluster, V)
    k = cluster.d + 1
    Pd[:k] = lead_p
    Vd[:k] = lead_v
    return cluster.beta1 * (Vd - V) + cluster.beta2 * (Pd - P)


def step_agents(
    cluster: Cluster,
    state: ClusterState,
    pose: VrbPose,
    pose_rate: VrbPoseRate,
    dt: float,
    pose_accel: VrbPoseRate | None = None,
) -> ClusterState:
    """One RK4 step of the double-integrator tracking dynamics.

    Leader targets are extrapolated over the step from the pose and its rate
    (and second derivative, when ``pose_accel`` is given)."""
    if not dt > 0:
        raise ClusterValidationError("dt must be positive")
    k = cluster.d + 1
    p0 = cluster.material[:k]
    r, Q = pose.r, pose.Q
    rd, Qd = pose_rate.r_dot, pose_rate.Q_dot
    rdd = pose_accel.r_dot if pose_accel is not None else np.zeros(3)
    Qdd = pose_accel.Q_dot if pose_accel is not None else np.zeros((3, 3))

    def leaders(s: float):
        Qs = Q + s * Qd + 0.5 * s * s * Qdd
        rs = r + s * rd + 0.5 * s * s * rdd
        return p0 @ Qs + rs, p0 @ (Qd + s * Qdd) + rd + s * rdd

    P, V = state.positions, state.velocities
    lp, lv = leaders(0.0)
    k1p, k1v = V, _accel(cluster, P, V, lp, lv)
    lp, lv = leaders(0.5 * dt)
    k2p = V + 0.5 * dt * k1v
    k2v = _accel(cluster, P + 0.5 * dt * k1p, k2p, lp, lv)
    k3p = V + 0.5 * dt * k2v
    k3v = _accel(cluster, P + 0.5 * dt * k2p, k3p, lp, lv)
    lp, lv = leaders(dt)
    k4p = V + dt * k3v
    k4v = _accel(cluster, P + dt * k3p, k4p, lp, lv)
    Pn = P + dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
    Vn = V + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    if not (np.all(np.isfinite(Pn)) and np.all(np.isfinite(Vn))):
        raise NumericalError(f"cluster {cluster.id}: non-finite agent state")
    return ClusterState(Pn, Vn)


def collective_matrices(cluster: Cluster) -> tuple[np.ndarray, np.ndarray]:
    """(A_SYS, B_SYS) for the state [x-positions, x-velocities, y..., z...].

    The input is beta1 * leader rigid-body velocities + beta2 * leader
    rigid-body positions, axis by axis."""
    wm = build_weight_matrix(cluster)
    n, k = cluster.n, cluster.d + 1
    block = np.block([[np.zeros((n, n)), np.eye(n)], [cluster.beta2 * wm.W, cluster.beta1 * wm.W]])
    Bax = np.zeros((2 * n, k))
    Bax[n : n + k, :] = np.eye(k)
    A = np.kron(np.eye(3), block)
    B = np.kron(np.eye(3), Bax)
    if np.linalg.eigvals(A).real.max() >= 0:
        raise ClusterValidationError(f"cluster {cluster.id}: A_SYS is not Hurwitz")
    return A, B


def in_convex_hull(point, vertices) -> bool:
    """Barycentric feasibility: point = sum(l_k v_k), l >= 0, sum(l) = 1."""
    V = np.atleast_2d(np.asarray(vertices, dtype=float))
    p = np.asarray(point, dtype=float)
    A_eq = np.vstack([V.T, np.ones(V.shape[0])])
    b_eq = np.append(p, 1.0)
    res = linprog(np.zeros(V.shape[0]), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    return bool(res.status == 0)


def follower_deviation(cluster: Cluster, state: ClusterState, pose: VrbPose) -> np.ndarray:
    """||p_j - p_RB,j|| per agent."""
    return np.linalg.norm(state.positions - global_desired_positions(cluster, pose), axis=1)
