"""Synthetic dynamic scenes with exact ground truth, ground removal, scene files.

Scenes live in the frame-1 camera frame with ``+y`` up and the ground plane
at ``y = ground_height``. Objects are boxes sampled on their surfaces; the
non-rigid motion is a sum of Gaussian radial-basis displacements centred on
object points, and the camera motion is a random rigid transform.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import EmptyResult, InvalidConfig, ParseError, ValidationError, VersionMismatch
from .flow_model import ego_motion_flow
from .geometry import CameraIntrinsics, RigidTransform
from .scene import ScenePair

SCENE_MAGIC = "RFSP"
SCENE_VERSION = 1
DECOMPOSITION_TOL = 1e-9
GROUND_HEIGHT = 0.3


@dataclass(frozen=True)
class SceneGenConfig:
    n: int = 512
    m: Optional[int] = None  # defaults to the number of surviving points
    max_rotation_deg: float = 5.0
    max_translation: float = 0.5
    num_objects: int = 5
    object_size: tuple = (0.5, 1.5)
    extent_x: float = 3.0
    extent_z: tuple = (3.0, 8.0)
    num_blobs: int = 3
    blob_width: float = 0.6
    blob_amplitude: float = 0.2
    noise: float = 0.0
    dropout: float = 0.0
    ground: bool = False
    ground_height: float = 0.0
    ground_fraction: float = 0.25
    delta: float = 0.1
    fx: float = 1000.0
    fy: float = 1000.0
    cx: float = 0.0
    cy: float = 0.0
    seed: int = 0

    def validate(self) -> "SceneGenConfig":
        problems = []
        if self.n < 1:
            problems.append("n must be >= 1")
        if self.m is not None and self.m < 1:
            problems.append("m must be >= 1")
        for name in ("max_rotation_deg", "max_translation", "blob_width", "blob_amplitude", "noise",
                     "extent_x"):
            if not getattr(self, name) >= 0:
                problems.append(f"{name} must be nonnegative")
        if not 0 <= self.dropout < 1:
            problems.append("dropout must lie in [0, 1)")
        if not 0 <= self.ground_fraction < 1:
            problems.append("ground_fraction must lie in [0, 1)")
        if self.num_objects < 1 or self.num_blobs < 0:
            problems.append("need at least one object and a nonnegative blob count")
        lo, hi = self.object_size
        if not 0 < lo <= hi:
            problems.append("object_size must be an increasing positive range")
        z0, z1 = self.extent_z
        if not 0 < z0 <= z1:
            problems.append("extent_z must be an increasing positive range")
        if self.blob_amplitude > 0 and self.num_blobs > 0 and not self.blob_width > 0:
            problems.append("blob_width must be positive when blobs move")
        if problems:
            raise InvalidConfig("; ".join(problems))
        return self

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy)

    def with_seed(self, seed: int) -> "SceneGenConfig":
        return replace(self, seed=int(seed))


def scene_seed(base_seed: int, index: int) -> int:
    """Independent, reproducible seed for scene ``index`` of a dataset."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1, np.uint64)[0])


def _box_surface(rng, count, centre, size):
    """Points uniformly spread over the six faces of an axis-aligned box."""
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=count, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(count, 3)) * size
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    u[np.arange(count), axis] = sign * np.asarray(size)[axis]
    return u + centre


class _SceneLayout:
    """Frozen random scene content that can be resampled for extra points."""

    def __init__(self, cfg: SceneGenConfig, rng):
        self.cfg = cfg
        lo, hi = cfg.object_size
        self.sizes = rng.uniform(lo, hi, size=(cfg.num_objects, 3))
        z0, z1 = cfg.extent_z
        xs = rng.uniform(-cfg.extent_x, cfg.extent_x, size=cfg.num_objects)
        zs = rng.uniform(z0, z1, size=cfg.num_objects)
        # boxes rest on (or float slightly above) the ground plane
        ys = cfg.ground_height + self.sizes[:, 1] / 2 + rng.uniform(0.0, 0.5, size=cfg.num_objects)
        self.centres = np.stack([xs, ys, zs], axis=1)
        areas = 2 * (self.sizes[:, 0] * self.sizes[:, 1] + self.sizes[:, 1] * self.sizes[:, 2]
                     + self.sizes[:, 0] * self.sizes[:, 2])
        self.obj_p = areas / areas.sum()

    def sample(self, rng, count):
        """``(points, is_ground)`` for ``count`` fresh surface samples."""
        cfg = self.cfg
        n_ground = int(round(count * cfg.ground_fraction)) if cfg.ground else 0
        n_obj = count - n_ground
        which = rng.choice(len(self.sizes), size=n_obj, p=self.obj_p)
        pts = np.empty((count, 3))
        for k in range(len(self.sizes)):
            sel = np.flatnonzero(which == k)
            if sel.size:
                pts[sel] = _box_surface(rng, sel.size, self.centres[k], self.sizes[k])
        if n_ground:
            z0, z1 = cfg.extent_z
            g = np.empty((n_ground, 3))
            g[:, 0] = rng.uniform(-cfg.extent_x - 1.0, cfg.extent_x + 1.0, size=n_ground)
            g[:, 1] = cfg.ground_height
            g[:, 2] = rng.uniform(z0, z1 + 1.0, size=n_ground)
            pts[n_obj:] = g
        is_ground = np.zeros(count, dtype=bool)
        is_ground[n_obj:] = True
        order = rng.permutation(count)
        return pts[order], is_ground[order]


def rbf_field(points, centres, widths, amplitudes):
    """``sum_k a_k exp(-|x - c_k|^2 / (2 w_k^2))`` evaluated per point."""
    P = np.asarray(points, dtype=np.float64)
    out = np.zeros_like(P)
    for c, w, a in zip(centres, widths, amplitudes):
        r2 = ((P - c) ** 2).sum(axis=1)
        out += np.exp(-r2 / (2.0 * w * w))[:, None] * a
    return out


def generate_scene(config: SceneGenConfig, scene_id: str = "") -> ScenePair:
    cfg = config.validate()
    rng = np.random.default_rng(cfg.seed)
    layout = _SceneLayout(cfg, rng)
    p1, ground1 = layout.sample(rng, cfg.n)

    lim = math.radians(cfg.max_rotation_deg)
    angles = rng.uniform(-lim, lim, size=3)
    trans = rng.uniform(-cfg.max_translation, cfg.max_translation, size=3)
    T_rel = RigidTransform.from_euler(angles, trans)

    nb = cfg.num_blobs if cfg.blob_amplitude > 0 else 0
    obj_pts = p1[~ground1] if (~ground1).any() else p1
    centres = obj_pts[rng.integers(0, len(obj_pts), size=nb)] if nb else np.zeros((0, 3))
    dirs = rng.normal(size=(nb, 3))
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    amps = dirs * rng.uniform(0.5, 1.0, size=(nb, 1)) * cfg.blob_amplitude
    widths = np.full(nb, cfg.blob_width)

    def motion(points, is_ground):
        d_nr = rbf_field(points, centres, widths, amps)
        d_nr[is_ground] = 0.0  # the ground is static
        d_total = d_nr + ego_motion_flow(points, T_rel).vectors
        return d_nr, d_total

    gt_nonrigid, gt_total = motion(p1, ground1)

    keep_count = int(round(cfg.n * (1.0 - cfg.dropout)))
    keep_count = max(keep_count, 1)
    m = cfg.m if cfg.m is not None else keep_count
    kept = np.sort(rng.choice(cfg.n, size=min(keep_count, m), replace=False))
    p2 = p1[kept] + gt_total[kept]
    extra = m - len(kept)
    if extra > 0:
        q, qg = layout.sample(rng, extra)
        _, q_total = motion(q, qg)
        p2 = np.concatenate([p2, q + q_total])
    if cfg.noise > 0:
        p2 = p2 + rng.normal(scale=cfg.noise, size=p2.shape)
    p2 = p2[rng.permutation(len(p2))]

    return ScenePair(
        p1=p1,
        p2=p2,
        gt_total=gt_total,
        gt_nonrigid=gt_nonrigid,
        gt_relative=T_rel,
        intrinsics=cfg.intrinsics(),
        scene_id=scene_id,
        time_delta=cfg.delta,
        metadata={
            "seed": cfg.seed,
            "up_axis": "+y",
            "dropout": cfg.dropout,
            "kept_in_p2": len(kept),
            "extra_in_p2": max(extra, 0),
            "noise": cfg.noise,
            "ground_mask": ground1,
        },
    )


def generate_dataset(config: SceneGenConfig, count: int, start: int = 0) -> list:
    return [
        generate_scene(config.with_seed(scene_seed(config.seed, i)), scene_id=f"scene_{i:05d}")
        for i in range(start, start + count)
    ]


def decomposition_error(sample: ScenePair) -> float:
    """Max per-point norm of ``gt_total - (gt_nonrigid + ego_motion_flow)``."""
    em = ego_motion_flow(sample.p1, sample.gt_relative).vectors
    r = sample.gt_total - (sample.gt_nonrigid + em)
    return float(np.sqrt((r * r).sum(axis=1)).max())


# preprocessing ---------------------------------------------------------------
def remove_ground(points, height: float = GROUND_HEIGHT, up_axis: int = 1):
    """Drop points below ``height`` along the up axis. Returns ``(kept_points, kept_indices)``."""
    P = np.asarray(points, dtype=np.float64)
    kept = np.flatnonzero(P[:, up_axis] >= height)
    if kept.size == 0:
        raise EmptyResult(f"every point lies below {height}")
    return P[kept], kept


def remove_ground_pair(sample: ScenePair, height: float = GROUND_HEIGHT) -> ScenePair:
    """Ground removal on both clouds with the ground truth filtered alongside ``p1``."""
    p1, k1 = remove_ground(sample.p1, height)
    p2, _ = remove_ground(sample.p2, height)
    meta = dict(sample.metadata)
    meta["kept_indices"] = k1
    meta.pop("ground_mask", None)
    return ScenePair(
        p1=p1,
        p2=p2,
        gt_total=None if sample.gt_total is None else sample.gt_total[k1],
        gt_nonrigid=None if sample.gt_nonrigid is None else sample.gt_nonrigid[k1],
        gt_relative=sample.gt_relative,
        intrinsics=sample.intrinsics,
        scene_id=sample.scene_id,
        time_delta=sample.time_delta,
        metadata=meta,
    )


# scene files -------------------------------------------------------------------
def _f(x) -> str:
    return format(float(x), ".17g")


def scene_to_text(sample: ScenePair) -> str:
    """Serialise to the ``RFSP 1`` text format.

    Samples without ground truth omit the ``pose`` line and write ``p1``
    lines with coordinates only.
    """
    lines = [f"{SCENE_MAGIC} {SCENE_VERSION}",
             f"n {sample.n} m {sample.m} delta {_f(sample.time_delta)}"]
    labelled = sample.has_ground_truth
    if labelled:
        T = sample.gt_relative
        vals = list(T.rotation.ravel()) + list(T.translation)
        lines.append("pose " + " ".join(_f(v) for v in vals))
    if sample.intrinsics is not None:
        lines.append("intrinsics " + " ".join(_f(v) for v in sample.intrinsics.as_tuple()))
    for i in range(sample.n):
        row = list(sample.p1[i])
        if labelled:
            row += list(sample.gt_total[i]) + list(sample.gt_nonrigid[i])
        lines.append("p1 " + " ".join(_f(v) for v in row))
    for q in sample.p2:
        lines.append("p2 " + " ".join(_f(v) for v in q))
    return "\n".join(lines) + "\n"


def _floats(tokens, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(f"bad number: {exc}", line=lineno) from None


def scene_from_text(text: str, scene_id: str = "", validate: bool = True) -> ScenePair:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    else:
        raise ParseError("file must end with a newline (truncated?)", line=len(lines))
    if not lines:
        raise ParseError("empty scene file", line=1)
    head = lines[0].split()
    if len(head) != 2 or head[0] != SCENE_MAGIC:
        raise ParseError(f"expected '{SCENE_MAGIC} <version>' header", line=1)
    if head[1] != str(SCENE_VERSION):
        raise VersionMismatch(f"scene format version {head[1]}, expected {SCENE_VERSION}")
    if len(lines) < 2:
        raise ParseError("missing size line", line=2)
    sz = lines[1].split()
    if len(sz) != 6 or sz[0] != "n" or sz[2] != "m" or sz[4] != "delta":
        raise ParseError("expected 'n <n> m <m> delta <delta>'", line=2)
    try:
        n, m = int(sz[1]), int(sz[3])
    except ValueError:
        raise ParseError("point counts must be integers", line=2) from None
    (delta,) = _floats(sz[5:6], 2)
    pos = 2
    T = None
    K = None
    if pos < len(lines) and lines[pos].startswith("pose "):
        v = _floats(lines[pos].split()[1:], pos + 1)
        if len(v) != 12:
            raise ParseError("pose needs 12 values", line=pos + 1)
        T = RigidTransform(np.array(v[:9]).reshape(3, 3), np.array(v[9:]))
        pos += 1
    if pos < len(lines) and lines[pos].startswith("intrinsics "):
        v = _floats(lines[pos].split()[1:], pos + 1)
        if len(v) != 4:
            raise ParseError("intrinsics needs 4 values", line=pos + 1)
        try:
            K = CameraIntrinsics(*v)
        except ValueError as exc:
            raise ParseError(str(exc), line=pos + 1) from None
        pos += 1
    if len(lines) - pos != n + m:
        raise ParseError(f"expected {n} p1 and {m} p2 lines, found {len(lines) - pos} point lines",
                         line=len(lines))
    width = 9 if T is not None else 3
    p1 = np.empty((n, width))
    for i in range(n):
        tok = lines[pos + i].split()
        if not tok or tok[0] != "p1" or len(tok) != width + 1:
            raise ParseError(f"expected 'p1' with {width} values", line=pos + i + 1)
        p1[i] = _floats(tok[1:], pos + i + 1)
    pos += n
    p2 = np.empty((m, 3))
    for i in range(m):
        tok = lines[pos + i].split()
        if not tok or tok[0] != "p2" or len(tok) != 4:
            raise ParseError("expected 'p2 x y z'", line=pos + i + 1)
        p2[i] = _floats(tok[1:], pos + i + 1)
    if not (np.all(np.isfinite(p1)) and np.all(np.isfinite(p2))):
        raise ValidationError("scene holds non-finite values")
    sample = ScenePair(
        p1=p1[:, :3].copy(),
        p2=p2,
        gt_total=p1[:, 3:6].copy() if T is not None else None,
        gt_nonrigid=p1[:, 6:9].copy() if T is not None else None,
        gt_relative=T,
        intrinsics=K,
        scene_id=scene_id,
        time_delta=delta,
    )
    if validate and T is not None:
        if not T.is_valid(1e-9):
            raise ValidationError("pose rotation is not orthonormal")
        err = decomposition_error(sample)
        if err > DECOMPOSITION_TOL:
            raise ValidationError(f"total flow violates the decomposition by {err:.3g} m")
    return sample


def write_scene(path, sample: ScenePair) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(scene_to_text(sample))


def read_scene(path, validate: bool = True) -> ScenePair:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        return scene_from_text(fh.read(), scene_id=path.stem, validate=validate)


def strip_labels(sample: ScenePair) -> ScenePair:
    return sample.without_ground_truth()


def load_dataset(directory) -> list:
    """All ``*.rfsp`` files in a directory, in sorted filename order."""
    d = Path(directory)
    files = sorted(d.glob("*.rfsp"))
    if not files:
        raise InvalidConfig(f"no .rfsp scene files in {d}")
    return [read_scene(f) for f in files]


def config_fields() -> Iterable[str]:
    return [f.name for f in fields(SceneGenConfig)]


def config_dict(cfg: SceneGenConfig) -> dict:
    return asdict(cfg)
