"""Training objectives: supervised flow and pose losses, cycle and nearest-neighbour losses.

Every loss accepts either numpy arrays, returning a float, or
:class:`~resflow.autodiff.Tensor` inputs, returning a scalar tensor on the
same graph. The two paths share one definition.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch, MissingGroundTruth
from .geometry import rotation_to_euler
from .nn_index import NeighborIndex
from .scene import ScenePair, flow_vectors

W_ROT_DEFAULT = 10.0
TERMS = ("epe3d", "nr", "r", "fb", "nn")


@dataclass(frozen=True)
class LossWeights:
    w_epe3d: float = 1.0
    w_nr: float = 1.0
    w_r: float = 1.0
    w_rot: float = W_ROT_DEFAULT
    w_fb: float = 1.0
    w_nn: float = 1.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not v >= 0:
                raise ValueError(f"loss weight {k} must be nonnegative, got {v}")

    @classmethod
    def preset(cls, mode: str, **overrides) -> "LossWeights":
        """Weights for ``full``, ``hybrid`` or ``self_supervised`` training."""
        base = {
            "full": dict(w_epe3d=1.0, w_nr=1.0, w_r=1.0, w_fb=0.0, w_nn=0.0),
            "hybrid": dict(w_epe3d=1.0, w_nr=1.0, w_r=1.0, w_fb=1.0, w_nn=1.0),
            "self_supervised": dict(w_epe3d=0.0, w_nr=0.0, w_r=0.0, w_fb=1.0, w_nn=1.0),
        }
        if mode not in base:
            raise ValueError(f"unknown training mode {mode!r}")
        kw = base[mode]
        kw.update(overrides)
        return cls(**kw)

    def weight(self, term: str) -> float:
        return getattr(self, "w_" + term)


@dataclass
class CycleArtifacts:
    forward_warp: Any
    nn_match: np.ndarray
    anchor: Any
    reverse_flow: Any
    cycle_end: Any
    nn_index: Optional[np.ndarray] = None


def _is_tensor(*xs):
    return any(isinstance(x, ad.Tensor) for x in xs)


def _check_rows(a, b, what):
    sa, sb = np.shape(ad.values(a)), np.shape(ad.values(b))
    if sa != sb:
        raise DimensionMismatch(f"{what}: shapes {sa} and {sb} differ")
    if len(sa) != 2 or sa[0] < 1:
        raise DimensionMismatch(f"{what}: expected (N, 3) arrays with N >= 1, got {sa}")


def mean_point_distance(a, b):
    """``mean_i ||a_i - b_i||_2``."""
    _check_rows(a, b, "mean_point_distance")
    if _is_tensor(a, b):
        return ad.mean(ad.row_norm(ad.as_tensor(a) - b))
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.sqrt((diff * diff).sum(axis=1)).mean())


def _vec_distance(a, b):
    if _is_tensor(a, b):
        return ad.norm(ad.as_tensor(a) - b)
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.sqrt(d @ d))


def epe3d_loss(d_hat, d_gt):
    return mean_point_distance(flow_vectors(d_hat, "total"), flow_vectors(d_gt, "total"))


def nonrigid_loss(d_nr_hat, d_nr_gt):
    return mean_point_distance(flow_vectors(d_nr_hat, "non_rigid"), flow_vectors(d_nr_gt, "non_rigid"))


def rigid_loss(r_hat, t_hat, r_gt, t_gt, w_rot: float = W_ROT_DEFAULT):
    """``w_rot * ||r - r_hat|| + ||t - t_hat||`` for Euler angles ``r`` and translations ``t``."""
    return w_rot * _vec_distance(r_hat, r_gt) + _vec_distance(t_hat, t_gt)


def cycle_artifacts(p1, p2, d_hat, reverse_predictor: Callable, index2: NeighborIndex | None = None,
                    matcher=None) -> CycleArtifacts:
    """Forward-warp, anchor on the nearest target point, predict the reverse flow.

    ``reverse_predictor(anchor, p1)`` must return the total flow carrying the
    anchored points back towards ``p1``. The nearest-neighbour match is a
    constant; gradients reach the anchor only through the forward warp.
    """
    d_hat = flow_vectors(d_hat, "total")
    _check_rows(p1, d_hat, "cycle_artifacts")
    p2 = np.asarray(p2, dtype=np.float64)
    x2 = p1 + d_hat
    index2 = index2 or NeighborIndex(p2)
    if matcher is None:
        idx = index2.query(ad.values(x2))[0]
    else:
        idx = matcher(index2, ad.values(x2))
    x_nn = p2[idx]
    anchor = (x2 + x_nn) * 0.5
    d_rev = reverse_predictor(anchor, p1)
    return CycleArtifacts(x2, x_nn, anchor, d_rev, anchor + d_rev, idx)


def fb_loss(p1, artifacts: CycleArtifacts):
    """Mean distance between each source point and where the forward-backward cycle returns it."""
    return mean_point_distance(p1, artifacts.cycle_end)


def nn_loss(p1, d_hat, p2, index2: NeighborIndex | None = None, matcher=None, artifacts=None):
    """Mean distance from each forward-warped point to its nearest target point.

    When ``artifacts`` from :func:`cycle_artifacts` are given their match is reused.
    """
    d_hat = flow_vectors(d_hat, "total")
    if artifacts is not None:
        return mean_point_distance(artifacts.forward_warp, artifacts.nn_match)
    _check_rows(p1, d_hat, "nn_loss")
    x2 = p1 + d_hat
    p2 = np.asarray(p2, dtype=np.float64)
    index2 = index2 or NeighborIndex(p2)
    if matcher is None:
        idx = index2.query(ad.values(x2))[0]
    else:
        idx = matcher(index2, ad.values(x2))
    return mean_point_distance(x2, p2[idx])


@dataclass
class PredictionBundle:
    """What :func:`loss_terms` needs from a forward pass (arrays or tensors)."""

    total: Any
    nonrigid: Any = None
    angles: Any = None
    translation: Any = None
    cycle: Optional[CycleArtifacts] = None


def _require(sample, name, term):
    value = getattr(sample, name)
    if value is None:
        raise MissingGroundTruth(f"weight for {term} is positive but the sample has no {name}")
    return value


def loss_terms(sample: ScenePair, pred, weights: LossWeights, index2: NeighborIndex | None = None,
               matcher=None) -> dict:
    """Unweighted loss terms whose weight is positive.

    Ground-truth fields of ``sample`` are read only for terms that need them.
    """
    terms = {}
    if weights.w_epe3d > 0:
        terms["epe3d"] = epe3d_loss(pred.total, _require(sample, "gt_total", "epe3d"))
    if weights.w_nr > 0:
        gt = _require(sample, "gt_nonrigid", "nr")
        if pred.nonrigid is None:
            raise MissingGroundTruth("non-rigid loss requested but the prediction has no non-rigid flow")
        terms["nr"] = nonrigid_loss(pred.nonrigid, gt)
    if weights.w_r > 0:
        T = _require(sample, "gt_relative", "r")
        if pred.angles is None:
            raise MissingGroundTruth("rigid loss requested but the prediction has no pose")
        terms["r"] = rigid_loss(pred.angles, pred.translation, rotation_to_euler(T.rotation),
                                T.translation, weights.w_rot)
    if weights.w_fb > 0:
        if pred.cycle is None:
            raise ValueError("forward-backward loss needs cycle artifacts")
        terms["fb"] = fb_loss(sample.p1, pred.cycle)
    if weights.w_nn > 0:
        terms["nn"] = nn_loss(sample.p1, pred.total, sample.p2, index2=index2, matcher=matcher,
                              artifacts=pred.cycle)
    return terms


def combine(terms: dict, weights: LossWeights):
    """Weighted total ``w_epe3d L_epe3d + w_nr L_nr + w_r L_r + w_fb L_fb + w_nn L_nn``."""
    total = 0.0
    for name in TERMS:
        if name in terms:
            total = total + weights.weight(name) * terms[name]
    return total


def total_loss(sample: ScenePair, pred, weights: LossWeights, index2=None, matcher=None):
    return combine(loss_terms(sample, pred, weights, index2=index2, matcher=matcher), weights)
