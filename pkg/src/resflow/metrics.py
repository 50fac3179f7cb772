"""Scene-flow and relative-pose evaluation metrics, error histogram, CSV reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyInput, NonPositiveDepth
from .geometry import CameraIntrinsics, RigidTransform, rotation_error_deg, translation_error
from .scene import flow_vectors

STRICT_ABS, STRICT_REL = 0.05, 0.05
RELAXED_ABS, RELAXED_REL = 0.1, 0.1
OUTLIER_ABS, OUTLIER_REL = 0.3, 0.1
ACC2D_ABS, ACC2D_REL = 3.0, 0.05
REL_GUARD = 1e-12

CSV_COLUMNS = ("scene_id", "n", "epe3d", "acc3d_005", "acc3d_01", "outliers3d",
               "epe2d", "acc2d", "rle_m", "roe_deg")


@dataclass
class MetricsReport:
    epe3d: float
    acc3d_strict: float
    acc3d_relaxed: float
    outliers3d: float
    epe2d: Optional[float] = None
    acc2d: Optional[float] = None
    rle: Optional[float] = None
    roe: Optional[float] = None
    point_count: int = 0
    scene_id: str = ""

    def row(self) -> list:
        def fmt(v):
            return "-" if v is None else repr(float(v))
        return [self.scene_id, str(self.point_count), fmt(self.epe3d), fmt(self.acc3d_strict),
                fmt(self.acc3d_relaxed), fmt(self.outliers3d), fmt(self.epe2d), fmt(self.acc2d),
                fmt(self.rle), fmt(self.roe)]


@dataclass
class ErrorHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _pair(d_hat, d_gt):
    a = np.asarray(flow_vectors(d_hat), dtype=np.float64)
    b = np.asarray(flow_vectors(d_gt), dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise DimensionMismatch(f"flow shapes {a.shape} and {b.shape} differ")
    if a.shape[0] < 1:
        raise DimensionMismatch("need at least one point")
    return a, b


def point_errors_3d(d_hat, d_gt):
    """Per-point ``(abs_error, rel_error)``; ``rel`` is NaN where the true flow vanishes."""
    a, b = _pair(d_hat, d_gt)
    err = np.sqrt(((b - a) ** 2).sum(axis=1))
    mag = np.sqrt((b ** 2).sum(axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(mag >= REL_GUARD, err / np.where(mag >= REL_GUARD, mag, 1.0), np.nan)
    return err, rel


def _below(err, rel, abs_thr, rel_thr):
    rel_ok = np.where(np.isnan(rel), False, rel < rel_thr)
    return (err < abs_thr) | rel_ok


def _above(err, rel, abs_thr, rel_thr):
    rel_bad = np.where(np.isnan(rel), False, rel > rel_thr)
    return (err > abs_thr) | rel_bad


def counts_3d(d_hat, d_gt):
    """Sums for pooling across scenes: ``(n, sum_err, n_strict, n_relaxed, n_outliers)``."""
    err, rel = point_errors_3d(d_hat, d_gt)
    return (
        err.size,
        float(err.sum()),
        int(_below(err, rel, STRICT_ABS, STRICT_REL).sum()),
        int(_below(err, rel, RELAXED_ABS, RELAXED_REL).sum()),
        int(_above(err, rel, OUTLIER_ABS, OUTLIER_REL).sum()),
    )


def evaluate_3d(d_hat, d_gt):
    """``(epe3d, acc3d_strict, acc3d_relaxed, outliers3d)`` for one flow field."""
    n, s, strict, relaxed, out = counts_3d(d_hat, d_gt)
    return s / n, strict / n, relaxed / n, out / n


def _project(P, K):
    z = P[:, 2]
    return np.stack([K.fx * P[:, 0] / z + K.cx, K.fy * P[:, 1] / z + K.cy], axis=1)


def point_errors_2d(p1, d_hat, d_gt, K: CameraIntrinsics):
    P = np.asarray(p1, dtype=np.float64)
    a, b = _pair(d_hat, d_gt)
    if P.shape != a.shape:
        raise DimensionMismatch(f"cloud {P.shape} does not match flow {a.shape}")
    depth_ok = (P[:, 2] > 1e-9) & ((P + a)[:, 2] > 1e-9) & ((P + b)[:, 2] > 1e-9)
    bad = np.flatnonzero(~depth_ok)
    if bad.size:
        raise NonPositiveDepth(bad)
    x0 = _project(P, K)
    o = _project(P + b, K) - x0
    o_hat = _project(P + a, K) - x0
    err = np.sqrt(((o - o_hat) ** 2).sum(axis=1))
    mag = np.sqrt((o ** 2).sum(axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(mag >= REL_GUARD, err / np.where(mag >= REL_GUARD, mag, 1.0), np.nan)
    return err, rel


def counts_2d(p1, d_hat, d_gt, K):
    err, rel = point_errors_2d(p1, d_hat, d_gt, K)
    return err.size, float(err.sum()), int(_below(err, rel, ACC2D_ABS, ACC2D_REL).sum())


def evaluate_2d(p1, d_hat, d_gt, K: CameraIntrinsics):
    """``(epe2d, acc2d)``: errors of the flows projected into the image."""
    n, s, acc = counts_2d(p1, d_hat, d_gt, K)
    return s / n, acc / n


def evaluate_pose(T_hat: RigidTransform, T_gt: RigidTransform):
    """``(rle, roe)``: translation error in metres and rotation error in degrees."""
    return (translation_error(T_hat.translation, T_gt.translation),
            rotation_error_deg(T_hat.rotation, T_gt.rotation))


def histogram(per_point_epe3d: Sequence[float], bins: int = 50) -> ErrorHistogram:
    """Equal-width histogram over ``[0, max]``.

    Bins are right-open except the last, which is closed. When every value
    is zero the range ``[0, 1]`` is used so the edges stay increasing.
    """
    v = np.asarray(per_point_epe3d, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyInput("histogram of an empty error list")
    if not np.all(np.isfinite(v)) or np.any(v < 0):
        raise ValueError("errors must be finite and nonnegative")
    hi = float(v.max())
    if hi == 0.0:
        hi = 1.0
    counts, edges = np.histogram(v, bins=bins, range=(0.0, hi))
    return ErrorHistogram(edges, counts.astype(np.int64))


def evaluate_scene(d_hat, d_gt, p1=None, K: CameraIntrinsics | None = None,
                   T_hat: RigidTransform | None = None, T_gt: RigidTransform | None = None,
                   scene_id: str = "") -> MetricsReport:
    epe, strict, relaxed, out = evaluate_3d(d_hat, d_gt)
    epe2d = acc2d = None
    if K is not None and p1 is not None:
        epe2d, acc2d = evaluate_2d(p1, d_hat, d_gt, K)
    rle = roe = None
    if T_hat is not None and T_gt is not None:
        rle, roe = evaluate_pose(T_hat, T_gt)
    return MetricsReport(epe, strict, relaxed, out, epe2d, acc2d, rle, roe,
                         point_count=len(np.asarray(flow_vectors(d_gt))), scene_id=scene_id)


def reports_csv(reports: Sequence[MetricsReport], aggregate: MetricsReport | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow(r.row())
    if aggregate is not None:
        w.writerow(aggregate.row())
    return buf.getvalue()


def histogram_csv(h: ErrorHistogram) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("bin", "lo", "hi", "count"))
    for i, c in enumerate(h.counts):
        w.writerow((i, repr(float(h.bin_edges[i])), repr(float(h.bin_edges[i + 1])), int(c)))
    return buf.getvalue()


def nanmean_or_none(values):
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return sum(vals) / len(vals) if vals else None
