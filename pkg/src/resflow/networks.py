"""Relative-pose regressor with iterative refinement, non-rigid flow network, full pipeline.

Both networks are small point MLPs:

* pose regressor: a shared per-point encoder runs on each cloud (Siamese),
  each cloud centred on its own centroid; features are mean-pooled,
  combined into a correlation vector ``[g1, g2, g1 - g2, g1 * g2]`` and
  passed through two hidden fully connected layers to a 6-vector
  ``(angles, translation)``. The translation adds ``s * (c2 - R c1)`` to the
  regressed residual, with ``c1, c2`` the centroids and ``s`` a learned gain
  that starts at zero;
* non-rigid flow network: per point of the pose-aligned source cloud the
  input is ``[x, x_nn - x, pooled(P1*), pooled(P2)]`` where ``x_nn`` is the
  exact nearest neighbour in the target cloud; a shared MLP maps it to a
  3-vector.

Output layers start at zero, so an untrained pipeline predicts the identity
pose and zero non-rigid flow.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParseError, VersionMismatch
from .geometry import RigidTransform
from .nn_index import NeighborIndex

CHECKPOINT_MAGIC = b"RFNW"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    pose_width: int = 64
    head_width: int = 128
    flow_width: int = 64
    flow_global: int = 32
    activation: str = "relu"

    @classmethod
    def paper_head(cls) -> "NetConfig":
        """Preset with the 2048-unit fully connected pose head."""
        return cls(head_width=2048)


@dataclass(frozen=True)
class RefineConfig:
    """Pose refinement iterations during training and at inference."""

    k_train: int = 1
    k_infer: int = 1

    def __post_init__(self):
        if self.k_train < 1 or self.k_infer < 1:
            raise ValueError("refinement iterations must be >= 1")


@dataclass
class NetworkParams:
    tensors: dict
    seed: int = 0
    config: NetConfig = field(default_factory=NetConfig)

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def groups(self, prefix: str = ""):
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.tensors.items()}

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            {k: ad.tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()},
            seed=self.seed,
            config=self.config,
        )


def _dense(rng, fan_in, fan_out, zero=False):
    if zero:
        return np.zeros((fan_in, fan_out)), np.zeros(fan_out)
    lim = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)), rng.uniform(-lim, lim, size=fan_out)


def init_params(seed: int = 0, config: NetConfig | None = None, zero_output: bool = True) -> NetworkParams:
    """Fan-in scaled uniform initialisation; output layers zero unless ``zero_output=False``."""
    cfg = config or NetConfig()
    rng = np.random.default_rng(seed)
    h, H, f, fg = cfg.pose_width, cfg.head_width, cfg.flow_width, cfg.flow_global
    layers = [
        ("pose.enc1", 3, h, False),
        ("pose.enc2", h, h, False),
        ("pose.fc1", 4 * h, H, False),
        ("pose.fc2", H, H, False),
        ("pose.out", H, 6, zero_output),
        ("flow.glob1", 3, fg, False),
        ("flow.glob2", fg, fg, False),
        ("flow.mlp1", 6 + 2 * fg, f, False),
        ("flow.mlp2", f, f, False),
        ("flow.out", f, 3, zero_output),
    ]
    tensors = {}
    for name, fi, fo, zero in layers:
        W, b = _dense(rng, fi, fo, zero)
        tensors[name + ".w"] = ad.tensor(W, requires_grad=True, name=name + ".w")
        tensors[name + ".b"] = ad.tensor(b, requires_grad=True, name=name + ".b")
    tensors["pose.centre_gain"] = ad.tensor(np.zeros(1), requires_grad=True, name="pose.centre_gain")
    if not zero_output:
        # small outputs keep randomly initialised pipelines in a sensible regime
        for name in ("pose.out", "flow.out"):
            tensors[name + ".w"].data *= 0.05
            tensors[name + ".b"].data *= 0.05
    return NetworkParams(tensors, seed=seed, config=cfg)


class Matcher:
    """Nearest-neighbour lookups with optional record/replay.

    In ``"record"`` mode every query's indices are stored in call order; in
    ``"replay"`` mode they are returned instead of searching. Replaying
    freezes the discrete correspondences, which finite-difference gradient
    checks need.
    """

    def __init__(self, mode: str = "live"):
        if mode not in ("live", "record", "replay"):
            raise ValueError(mode)
        self.mode = mode
        self.log: list = []
        self._cursor = 0

    def replay(self) -> "Matcher":
        m = Matcher("replay")
        m.log = self.log
        return m

    def __call__(self, index: NeighborIndex, queries) -> np.ndarray:
        if self.mode == "replay":
            idx = self.log[self._cursor]
            self._cursor += 1
            return idx
        idx, _ = index.query(queries)
        if self.mode == "record":
            self.log.append(idx)
        return idx


def _live(index, queries):
    return index.query(queries)[0]


def _mlp_layer(x, params, name, act):
    y = ad.matmul(x, params[name + ".w"]) + params[name + ".b"]
    return act(y) if act is not None else y


def encode_cloud(points, params, prefix, act) -> Tensor:
    h = _mlp_layer(points, params, prefix + "1", act)
    h = _mlp_layer(h, params, prefix + "2", act)
    return ad.pool_mean(h)


def pose_forward(p1, p2, params: NetworkParams) -> Tensor:
    """6-vector ``(angles, translation)`` registering ``p1`` onto ``p2``."""
    act = ad.activation(params.config.activation)
    p1 = ad.as_tensor(p1)
    c1 = ad.pool_mean(p1)
    c2 = ad.pool_mean(p2)
    g1 = encode_cloud(p1 - c1, params, "pose.enc", act)
    g2 = encode_cloud(ad.as_tensor(p2) - c2, params, "pose.enc", act)
    corr = ad.concat([g1, g2, g1 - g2, g1 * g2])
    h = _mlp_layer(corr, params, "pose.fc1", act)
    h = _mlp_layer(h, params, "pose.fc2", act)
    v = _mlp_layer(h, params, "pose.out", None)
    angles = v[:3]
    offset = c2 - ad.matmul(ad.euler_to_rotation(angles), c1)
    return ad.concat([angles, v[3:] + params["pose.centre_gain"] * offset])


@dataclass
class PoseStep:
    rotation: Tensor
    translation: Tensor
    vector: Tensor


def transform_points(points, rotation, translation):
    return ad.matmul(points, ad.transpose(rotation)) + translation


def refine_pose(p1, p2, params, k: int, pose_fn: Callable | None = None):
    """Iterative refinement: ``T = dT_k ∘ ... ∘ dT_1``.

    Step ``i`` regresses ``dT_i`` from the source transformed by the pose
    accumulated so far and the unchanged target. Returns
    ``(rotation, translation, steps, p1_star)`` as tensors on one graph.
    """
    if k < 1:
        raise ValueError("refinement needs k >= 1")
    pose_fn = pose_fn or pose_forward
    R = None
    t = None
    current = p1
    steps = []
    for _ in range(k):
        v = pose_fn(current, p2, params)
        dR = ad.euler_to_rotation(v[:3])
        dt = v[3:]
        steps.append(PoseStep(dR, dt, v))
        if R is None:
            R, t = dR, dt
        else:
            R = ad.matmul(dR, R)
            t = ad.matmul(dR, t) + dt
        current = transform_points(p1, R, t)
    return R, t, steps, current


def flow_forward(p1_star, p2, params, index2: NeighborIndex | None = None, matcher=None) -> Tensor:
    """Per-point non-rigid flow for the aligned source cloud."""
    act = ad.activation(params.config.activation)
    p2v = ad.values(p2)
    index2 = index2 or NeighborIndex(p2v)
    nn_idx = (matcher or _live)(index2, ad.values(p1_star))
    x_nn = p2v[nn_idx]
    x = ad.as_tensor(p1_star)
    n = x.shape[0]
    g1 = encode_cloud(x, params, "flow.glob", act)
    g2 = encode_cloud(p2, params, "flow.glob", act)
    glob = ad.stack_rows(ad.concat([g1, g2]), n)
    feats = ad.concat([x, x_nn - x, glob], axis=1)
    h = _mlp_layer(feats, params, "flow.mlp1", act)
    h = _mlp_layer(h, params, "flow.mlp2", act)
    return _mlp_layer(h, params, "flow.out", None)


@dataclass
class Predictions:
    """Outputs of one pipeline pass. Pose fields are ``None`` when ego-motion is disabled."""

    total: Tensor
    nonrigid: Tensor
    ego: Optional[Tensor] = None
    rotation: Optional[Tensor] = None
    translation: Optional[Tensor] = None
    angles: Optional[Tensor] = None
    steps: list = field(default_factory=list)
    p1_star: Optional[Tensor] = None

    def transform(self) -> Optional[RigidTransform]:
        if self.rotation is None:
            return None
        return RigidTransform(self.rotation.data, self.translation.data)


def pipeline_forward(
    p1,
    p2,
    params: NetworkParams,
    k: int = 1,
    ego: bool = True,
    index2: NeighborIndex | None = None,
    matcher=None,
    pose_fn: Callable | None = None,
    flow_fn: Callable | None = None,
) -> Predictions:
    """Full pass: refine the pose, align the source, predict the residual, sum flows.

    With ``ego=False`` the decomposition is switched off and the flow
    network predicts the total flow from the raw source cloud.
    """
    p2v = ad.values(p2)
    index2 = index2 or NeighborIndex(p2v)
    flow_fn = flow_fn or flow_forward
    if not ego:
        d_nr = flow_fn(p1, p2v, params, index2=index2, matcher=matcher)
        return Predictions(total=d_nr, nonrigid=d_nr)
    R, t, steps, p1_star = refine_pose(p1, p2v, params, k, pose_fn=pose_fn)
    d_nr = flow_fn(p1_star, p2v, params, index2=index2, matcher=matcher)
    d_em = p1_star - p1  # equals (R - I) x + t
    angles = steps[0].vector[:3] if k == 1 else ad.rotation_to_euler(R)
    return Predictions(
        total=d_nr + d_em,
        nonrigid=d_nr,
        ego=d_em,
        rotation=R,
        translation=t,
        angles=angles,
        steps=steps,
        p1_star=p1_star,
    )


# checkpoints -----------------------------------------------------------------
def save_checkpoint(path, params: NetworkParams, extra: dict | None = None) -> None:
    """Write ``params`` (and optional extra named arrays) in the RFNW binary format.

    Layout: magic ``RFNW``, u32 version, u64 seed, then one record per group:
    u32 name length, UTF-8 name, u32 ndim, ndim x u32 dims, little-endian f64
    values. All integers little-endian.
    """
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, extra))


def checkpoint_bytes(params: NetworkParams, extra: dict | None = None) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, int(params.seed) & (2**64 - 1))]
    groups = dict(params.arrays())
    cfg = params.config
    groups["config.activation_tanh"] = np.array([1.0 if cfg.activation == "tanh" else 0.0])
    for k, v in (extra or {}).items():
        groups[k] = np.asarray(v, dtype=np.float64)
    for name, arr in groups.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def parse_checkpoint(blob: bytes):
    """Decode RFNW bytes into ``(seed, {name: array})``."""
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ParseError("not an RFNW checkpoint", offset=0)
    if len(blob) < 16:
        raise ParseError("truncated header", offset=len(blob))
    version, seed = struct.unpack_from("<IQ", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos = 16
    groups = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise ParseError("truncated group name", offset=pos)
            pos += nlen
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            nbytes = 8 * count
            if pos + nbytes > len(blob):
                raise ParseError(f"truncated values for group {name!r}", offset=pos)
            groups[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += nbytes
    except struct.error as exc:
        raise ParseError(f"truncated checkpoint: {exc}", offset=pos) from None
    return seed, groups


def load_checkpoint(path):
    """Returns ``(params, extra)`` where ``extra`` holds non-parameter groups."""
    with open(path, "rb") as fh:
        seed, groups = parse_checkpoint(fh.read())
    return params_from_groups(seed, groups)


def params_from_groups(seed, groups):
    tanh = groups.get("config.activation_tanh", np.array([0.0]))[0] == 1.0
    try:
        cfg = NetConfig(
            pose_width=groups["pose.enc1.w"].shape[1],
            head_width=groups["pose.fc1.w"].shape[1],
            flow_width=groups["flow.mlp1.w"].shape[1],
            flow_global=groups["flow.glob1.w"].shape[1],
            activation="tanh" if tanh else "relu",
        )
    except KeyError as exc:
        raise ParseError(f"checkpoint lacks parameter group {exc}") from None
    template = init_params(0, cfg)
    tensors = {}
    for name, t in template.tensors.items():
        if name not in groups:
            raise ParseError(f"checkpoint lacks parameter group {name!r}")
        arr = groups[name]
        if arr.shape != t.shape:
            raise ParseError(f"group {name!r} has shape {arr.shape}, expected {t.shape}")
        tensors[name] = ad.tensor(arr.copy(), requires_grad=True, name=name)
    extra = {k: v for k, v in groups.items() if k not in tensors and not k.startswith("config.")}
    return NetworkParams(tensors, seed=seed, config=cfg), extra
