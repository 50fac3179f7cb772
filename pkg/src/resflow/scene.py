"""Point clouds, flow fields and the scene-pair sample type."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, FlowKindMismatch
from .geometry import CameraIntrinsics, RigidTransform

FLOW_KINDS = ("total", "non_rigid", "ego_motion")


def as_cloud(points, name: str = "cloud") -> np.ndarray:
    """Validate and return an ``(N, 3)`` float64 array with ``N >= 1``."""
    P = np.asarray(points, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != 3:
        raise DimensionMismatch(f"{name} must have shape (N, 3), got {P.shape}")
    if P.shape[0] < 1:
        raise DimensionMismatch(f"{name} must contain at least one point")
    if not np.all(np.isfinite(P)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return P


@dataclass(frozen=True)
class FlowField:
    """Per-point displacement vectors tagged with the motion component they describe."""

    vectors: np.ndarray
    kind: str = "total"

    def __post_init__(self):
        if self.kind not in FLOW_KINDS:
            raise ValueError(f"unknown flow kind {self.kind!r}")
        V = np.asarray(self.vectors, dtype=np.float64)
        if V.ndim != 2 or V.shape[1] != 3:
            raise DimensionMismatch(f"flow vectors must have shape (N, 3), got {V.shape}")
        object.__setattr__(self, "vectors", V)

    def __len__(self):
        return self.vectors.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.vectors if dtype is None else self.vectors.astype(dtype)


def flow_vectors(flow, kind: Optional[str] = None):
    """Unwrap a :class:`FlowField`, checking its kind; arrays and tensors pass through."""
    if isinstance(flow, FlowField):
        if kind is not None and flow.kind != kind:
            raise FlowKindMismatch(f"expected a {kind} flow, got {flow.kind}")
        return flow.vectors
    return flow


@dataclass
class ScenePair:
    """One training/evaluation sample: two clouds plus optional ground truth."""

    p1: np.ndarray
    p2: np.ndarray
    gt_total: Optional[np.ndarray] = None
    gt_nonrigid: Optional[np.ndarray] = None
    gt_relative: Optional[RigidTransform] = None
    intrinsics: Optional[CameraIntrinsics] = None
    scene_id: str = ""
    time_delta: float = 0.1
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.p1 = as_cloud(self.p1, "p1")
        self.p2 = as_cloud(self.p2, "p2")
        n = self.p1.shape[0]
        for name in ("gt_total", "gt_nonrigid"):
            v = self.__dict__[name]
            if v is not None:
                v = np.asarray(v, dtype=np.float64)
                if v.shape != (n, 3):
                    raise DimensionMismatch(f"{name} has shape {v.shape}, expected {(n, 3)}")
                self.__dict__[name] = v

    @property
    def n(self) -> int:
        return self.p1.shape[0]

    @property
    def m(self) -> int:
        return self.p2.shape[0]

    @property
    def has_ground_truth(self) -> bool:
        return (
            self.gt_total is not None
            and self.gt_nonrigid is not None
            and self.gt_relative is not None
        )

    def without_ground_truth(self) -> "ScenePair":
        """Copy holding only the inputs; never reads the ground-truth fields."""
        return ScenePair(
            p1=self.p1,
            p2=self.p2,
            intrinsics=self.intrinsics,
            scene_id=self.scene_id,
            time_delta=self.time_delta,
            metadata=dict(self.metadata),
        )

    def replace(self, **changes) -> "ScenePair":
        return replace(self, **changes)
