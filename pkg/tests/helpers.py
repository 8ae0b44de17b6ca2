"""Shared builders for the test modules."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from uasflow.airspace import AirspaceGeometry, FloorDefinition, ParaboloidSurface, UnplannedRegion
from uasflow.config import load_config
from uasflow.boundary_control import LqrProblem
from uasflow.flowfield import FlowElement, FlowField
from uasflow.microscopic import Cluster, consistent_material

SCENARIOS = Path(__file__).resolve().parents[1] / "src" / "uasflow" / "scenarios"


def scenario(name: str):
    return load_config(SCENARIOS / f"{name}.yaml")


def circle_field(u: float = 40.0, R: float = 10.0, half: float = 40.0, center=(0.0, 0.0), **kw) -> FlowField:
    """Uniform stream plus a doublet carving a radius-R circle, in a square sector."""
    geo = AirspaceGeometry(
        (center[0] - half, center[1] - half),
        (center[0] + half, center[1] + half),
        unplanned=(UnplannedRegion("obstacle", "circle", center, radius=R),),
    )
    return FlowField.from_geometry(geo, 1, u, **kw)


def uniform_field(u: float = 40.0, theta0: float = 0.0, half: float = 40.0) -> FlowField:
    geo = AirspaceGeometry((-half, -half), (half, half))
    return FlowField(FloorDefinition(1), (FlowElement("uniform", u, theta0),), 1.0, geo)


def vc_field() -> FlowField:
    surf = ParaboloidSurface(1000.0, -5e-3, (25.0, 0.0))
    geo = AirspaceGeometry(
        (-25.0, -100.0),
        (75.0, 100.0),
        floors=(FloorDefinition(1, surf),),
        unplanned=(UnplannedRegion("obstacle", "circle", (25.0, 0.0), radius=40.0),),
    )
    return FlowField.from_geometry(geo, 1, 5.0, cost=10.0)


def angles(n: int, offset: float = 0.0) -> np.ndarray:
    return 2.0 * math.pi * (np.arange(n) + offset) / n


LEADERS_2D = np.array([[0.0, 0.0, 0.0], [4.0, 0.0, 0.0], [0.0, 4.0, 0.0]])


def random_cluster(rng, n_followers, extra_edges=True):
    """Planar cluster whose followers listen to an earlier agent, so all are reachable."""
    n = 3 + n_followers
    nbs, ws = {}, {}
    for j in range(4, n + 1):
        pool = [h for h in range(1, n + 1) if h != j]
        first = int(rng.integers(1, j))
        others = [h for h in pool if h != first] if extra_edges else []
        k = int(rng.integers(0, min(3, len(others)) + 1))
        chosen = [first] + list(rng.choice(others, size=k, replace=False)) if k else [first]
        w = rng.uniform(0.1, 1.0, size=len(chosen))
        nbs[j] = tuple(int(h) for h in chosen)
        ws[j] = tuple(w / w.sum())
    leaders = LEADERS_2D + rng.normal(scale=0.5, size=(3, 3)) * np.array([1, 1, 0])
    material = np.vstack([leaders, np.zeros((n_followers, 3))])
    c = Cluster("r", 2, n, nbs, ws, material)
    return Cluster("r", 2, n, nbs, ws, consistent_material(c))


def random_stable(rng, n, m):
    A = rng.normal(size=(n, n))
    A -= (np.linalg.eigvals(A).real.max() + rng.uniform(0.1, 1.0)) * np.eye(n)
    B = rng.normal(size=(n, m))
    C = rng.normal(size=(n, n))
    R = rng.normal(size=(m, m))
    return LqrProblem(A, B, C @ C.T / n + 0.1 * np.eye(n), R @ R.T + np.eye(m))
