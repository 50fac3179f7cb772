"""Point-to-point ICP: the rigid-only scene-flow baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry
from .flow_model import ego_motion_flow
from .geometry import RigidTransform
from .nn_index import NeighborIndex
from .scene import FlowField, as_cloud


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    convergence_tol: float = 1e-8
    max_correspondence_distance: float = math.inf

    def __post_init__(self):
        if self.max_iterations < 1 or not self.convergence_tol > 0 or not self.max_correspondence_distance > 0:
            raise ValueError(f"invalid ICP configuration {self}")


def best_fit_transform(src, dst) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` rows onto ``dst`` rows (Kabsch)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape[0] < 3:
        raise DegenerateGeometry("need at least 3 correspondences")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, S, Vt = np.linalg.svd(H)
    if S[0] <= 0 or S[1] <= 1e-12 * S[0]:
        raise DegenerateGeometry(f"cross-covariance is rank deficient (singular values {S})")
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0  # reflection correction
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cd - R @ cs)


def _rms(d):
    return float(np.sqrt(np.mean(d * d)))


def icp_register(p1, p2, config: IcpConfig | None = None, init: RigidTransform | None = None,
                 index2: NeighborIndex | None = None):
    """Register ``p1`` onto ``p2``.

    Returns ``(transform, residual_history)``. ``residual_history[0]`` is the
    RMS nearest-neighbour distance before the first update and each later
    entry follows one accepted update. A step that would raise the residual is
    rejected and ends the iteration.
    """
    cfg = config or IcpConfig()
    P = as_cloud(p1, "p1")
    Q = as_cloud(p2, "p2")
    index2 = index2 or NeighborIndex(Q)
    T = init or RigidTransform.identity()
    gate = cfg.max_correspondence_distance

    idx, dist = index2.query(T.apply(P))
    history = [_rms(dist)]
    for _ in range(cfg.max_iterations):
        keep = dist <= gate
        if keep.sum() < 3:
            raise DegenerateGeometry("fewer than 3 correspondences inside the gating distance")
        T_new = best_fit_transform(P[keep], Q[idx[keep]])
        idx_new, dist_new = index2.query(T_new.apply(P))
        r = _rms(dist_new)
        if r > history[-1] + 1e-12:
            break
        T, idx, dist = T_new, idx_new, dist_new
        history.append(r)
        if abs(history[-2] - r) < cfg.convergence_tol:
            break
    return T, history


def icp_flow(p1, p2, config: IcpConfig | None = None) -> FlowField:
    """Scene flow of the best rigid fit; the non-rigid part is zero by construction."""
    T, _ = icp_register(p1, p2, config)
    return FlowField(ego_motion_flow(p1, T).vectors, "total")
