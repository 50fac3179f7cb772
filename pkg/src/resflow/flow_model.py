"""Scene-flow motion model: ego-motion flow, composition, warping, rigid augmentation."""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch
from .geometry import RigidTransform
from .scene import FlowField, ScenePair, as_cloud, flow_vectors


def ego_motion_flow(points, T_rel: RigidTransform) -> FlowField:
    """Flow induced by the camera motion alone: ``(R - I) x + t`` per point.

    Evaluated as ``T x - x`` so that ``warp(P, ego_motion_flow(P, T))``
    reproduces ``T.apply(P)`` up to a single rounding.
    """
    P = as_cloud(points)
    return FlowField(T_rel.apply(P) - P, "ego_motion")


def compose_total_flow(d_nr, points, R_hat, t_hat) -> FlowField:
    P = as_cloud(points)
    nr = np.asarray(flow_vectors(d_nr, "non_rigid"), dtype=np.float64)
    if nr.shape != P.shape:
        raise DimensionMismatch(f"non-rigid flow {nr.shape} does not match cloud {P.shape}")
    em = ego_motion_flow(P, RigidTransform(R_hat, t_hat)).vectors
    return FlowField(nr + em, "total")


def warp(points, flow) -> np.ndarray:
    P = as_cloud(points)
    d = np.asarray(flow_vectors(flow), dtype=np.float64)
    if d.shape != P.shape:
        raise DimensionMismatch(f"flow {d.shape} does not match cloud {P.shape}")
    return P + d


def augment_pair(sample: ScenePair, G: RigidTransform) -> ScenePair:
    """Apply a rigid transform ``G`` consistently to both clouds and all ground truth.

    Clouds move as ``G x``; flow vectors rotate with ``R_G``; the relative
    pose is conjugated to ``G T G^-1`` so the motion model still holds in
    the new frame.
    """
    p1 = G.apply(sample.p1)
    p2 = G.apply(sample.p2)
    gt_total = None if sample.gt_total is None else G.rotate(sample.gt_total)
    gt_nonrigid = None if sample.gt_nonrigid is None else G.rotate(sample.gt_nonrigid)
    gt_relative = None
    if sample.gt_relative is not None:
        gt_relative = G.compose(sample.gt_relative).compose(G.inverse())
    return ScenePair(
        p1=p1,
        p2=p2,
        gt_total=gt_total,
        gt_nonrigid=gt_nonrigid,
        gt_relative=gt_relative,
        intrinsics=sample.intrinsics,
        scene_id=sample.scene_id,
        time_delta=sample.time_delta,
        metadata=dict(sample.metadata),
    )
