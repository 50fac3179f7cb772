"""Training loop for the three supervision modes, Adam, and the evaluation driver."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import InvalidConfig, MissingGroundTruth, NonFiniteLoss, ShapeMismatch
from .flow_model import augment_pair, ego_motion_flow
from .geometry import RigidTransform, random_rotation
from .icp import IcpConfig, icp_register
from .losses import LossWeights, PredictionBundle, combine, cycle_artifacts, loss_terms
from .metrics import (ErrorHistogram, MetricsReport, counts_2d, counts_3d, evaluate_pose, histogram,
                      point_errors_3d)
from .networks import NetConfig, NetworkParams, init_params, pipeline_forward
from .nn_index import NeighborIndex
from .scene import ScenePair

log = logging.getLogger(__name__)

MODES = ("full", "hybrid", "self_supervised")
LOSS_COLUMNS = ("step", "epoch", "L_total", "L_epe3d", "L_nr", "L_r", "L_fb", "L_nn", "alpha")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "hybrid"
    epochs: int = 85
    lr: float = 1e-4
    decay: float = 0.7
    decay_every: int = 35
    batch_size: int = 1
    k_train: int = 1
    ego_motion: bool = True
    weights: Optional[LossWeights] = None
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 0
    augment: bool = False
    augment_rotation_deg: float = 5.0
    augment_translation: float = 0.2
    net: NetConfig = field(default_factory=NetConfig)

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise InvalidConfig(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.lr > 0:
            raise InvalidConfig("learning rate must be positive")
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if self.batch_size != 1:
            raise InvalidConfig("only batch size 1 is supported")
        if self.k_train < 1:
            raise InvalidConfig("k_train must be >= 1")
        if not 0 < self.decay <= 1 or self.decay_every < 1:
            raise InvalidConfig("decay must lie in (0, 1] and decay_every must be >= 1")
        return self

    def loss_weights(self) -> LossWeights:
        w = self.weights or LossWeights.preset(self.mode)
        if not self.ego_motion:
            # without decomposition there is no pose or residual to supervise
            w = replace(w, w_nr=0.0, w_r=0.0)
        return w


def learning_rate(epoch: int, base: float = 1e-4, decay: float = 0.7, every: int = 35) -> float:
    """``base * decay ** (epoch // every)`` for 0-based ``epoch``."""
    return base * decay ** (epoch // every)


# Adam ------------------------------------------------------------------------------
@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update applied in place to the arrays in ``params``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# training ---------------------------------------------------------------------------
@dataclass
class LossRecord:
    step: int
    epoch: int
    total: float
    terms: dict
    alpha: float

    def row(self):
        def fmt(v):
            return repr(float(v)) if v is not None else "nan"
        return [str(self.step), str(self.epoch), fmt(self.total)] + [
            fmt(self.terms.get(k)) for k in ("epe3d", "nr", "r", "fb", "nn")
        ] + [fmt(self.alpha)]


@dataclass
class TrainResult:
    params: NetworkParams
    loss_curve: list
    eval_reports: list
    state: AdamState
    epochs_done: int


def forward_terms(sample: ScenePair, params: NetworkParams, k: int, weights: LossWeights,
                  ego: bool = True, matcher=None):
    """Build the graph for one sample and return ``(terms, predictions)``."""
    index2 = NeighborIndex(sample.p2)
    pred = pipeline_forward(sample.p1, sample.p2, params, k=k, ego=ego, index2=index2, matcher=matcher)
    cycle = None
    if weights.w_fb > 0:
        index1 = NeighborIndex(sample.p1)

        def reverse(anchor, target):
            return pipeline_forward(anchor, target, params, k=k, ego=ego, index2=index1,
                                    matcher=matcher).total

        cycle = cycle_artifacts(sample.p1, sample.p2, pred.total, reverse, index2=index2, matcher=matcher)
    bundle = PredictionBundle(
        total=pred.total,
        nonrigid=pred.nonrigid if ego else None,
        angles=pred.angles,
        translation=pred.translation,
        cycle=cycle,
    )
    terms = loss_terms(sample, bundle, weights, index2=index2, matcher=matcher)
    return terms, pred


def _check_ground_truth(dataset, weights):
    needs = [("gt_total", weights.w_epe3d), ("gt_nonrigid", weights.w_nr), ("gt_relative", weights.w_r)]
    for s in dataset:
        for name, w in needs:
            if w > 0 and getattr(s, name) is None:
                raise MissingGroundTruth(f"scene {s.scene_id or '?'} lacks {name} required by the loss weights")


def train(
    dataset: Sequence[ScenePair],
    config: TrainConfig,
    params: NetworkParams | None = None,
    state: AdamState | None = None,
    start_epoch: int = 0,
    eval_set: Sequence[ScenePair] | None = None,
    on_checkpoint: Callable | None = None,
    on_step: Callable | None = None,
) -> TrainResult:
    """Optimise the pipeline over ``dataset`` one sample at a time.

    In self-supervised mode each sample is reduced to its two clouds before
    use, so no ground-truth field is ever read. Raises :class:`NonFiniteLoss`
    (carrying the last finite parameters) if the objective diverges.
    """
    cfg = config.validate()
    if not dataset:
        raise InvalidConfig("empty training set")
    weights = cfg.loss_weights()
    supervised = weights.w_epe3d > 0 or weights.w_nr > 0 or weights.w_r > 0
    if supervised:
        _check_ground_truth(dataset, weights)
    params = params or init_params(cfg.seed, cfg.net)
    state = state or AdamState()
    rng = np.random.default_rng([cfg.seed, 7919])
    # fast-forward the shuffling stream so resumed runs see the same order
    for _ in range(start_epoch):
        rng.permutation(len(dataset))
        if cfg.augment:
            for _ in range(len(dataset)):
                _draw_augmentation(rng, cfg)
    curve, reports = [], []
    step = state.t
    epoch = start_epoch
    for epoch in range(start_epoch, cfg.epochs):
        alpha = learning_rate(epoch, cfg.lr, cfg.decay, cfg.decay_every)
        order = rng.permutation(len(dataset))
        for i in order:
            raw = dataset[int(i)]
            sample = raw if supervised else raw.without_ground_truth()
            if cfg.augment:
                sample = augment_pair(sample, _draw_augmentation(rng, cfg))
            params.zero_grad()
            terms, _ = forward_terms(sample, params, cfg.k_train, weights, ego=cfg.ego_motion)
            loss = combine(terms, weights)
            values = {k: float(ad.values(v)) for k, v in terms.items()}
            total = float(ad.values(loss)) if terms else 0.0
            if not math.isfinite(total):
                raise NonFiniteLoss(
                    f"non-finite loss {total} at step {step} (epoch {epoch}, scene {sample.scene_id!r}): {values}",
                    step=step, epoch=epoch, terms=values, last_good=params.copy(),
                )
            if terms:
                loss.backward()
            grads = {k: t.grad for k, t in params.tensors.items() if t.grad is not None}
            adam_step(params.arrays(), grads, state, alpha)
            rec = LossRecord(step, epoch, total, values, alpha)
            curve.append(rec)
            step += 1
            if on_step is not None:
                on_step(rec)
        done = epoch + 1
        if cfg.eval_every and eval_set is not None and done % cfg.eval_every == 0:
            res = evaluate(eval_set, network_predictor(params, cfg.k_train, ego=cfg.ego_motion))
            res.report.scene_id = f"epoch_{done}"
            reports.append(res.report)
        if on_checkpoint is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            on_checkpoint(params, state, done)
    return TrainResult(params, curve, reports, state, cfg.epochs)


def _draw_augmentation(rng, cfg: TrainConfig) -> RigidTransform:
    R = random_rotation(rng, cfg.augment_rotation_deg)
    t = rng.uniform(-cfg.augment_translation, cfg.augment_translation, size=3)
    return RigidTransform(R, t)


def loss_curve_csv(curve: Sequence[LossRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_COLUMNS)
    for rec in curve:
        w.writerow(rec.row())
    return buf.getvalue()


# evaluation ------------------------------------------------------------------------
@dataclass
class Prediction:
    flow: np.ndarray
    transform: Optional[RigidTransform] = None


def network_predictor(params: NetworkParams, k_infer: int = 1, ego: bool = True):
    frozen = NetworkParams({k: ad.tensor(v.data) for k, v in params.tensors.items()},
                           seed=params.seed, config=params.config)

    def predict(sample: ScenePair) -> Prediction:
        pred = pipeline_forward(sample.p1, sample.p2, frozen, k=k_infer, ego=ego)
        return Prediction(pred.total.data, pred.transform())

    return predict


def icp_predictor(config: IcpConfig | None = None):
    def predict(sample: ScenePair) -> Prediction:
        T, _ = icp_register(sample.p1, sample.p2, config)
        return Prediction(ego_motion_flow(sample.p1, T).vectors, T)

    return predict


def oracle_predictor():
    def predict(sample: ScenePair) -> Prediction:
        return Prediction(sample.gt_total.copy(), sample.gt_relative)

    return predict


@dataclass
class EvalResult:
    report: MetricsReport
    per_scene: list
    histogram: ErrorHistogram
    per_point_epe: np.ndarray


def _scene_eval(sample: ScenePair, predict):
    if sample.gt_total is None:
        raise MissingGroundTruth(f"scene {sample.scene_id!r} has no ground-truth flow to evaluate against")
    p = predict(sample)
    c3 = counts_3d(p.flow, sample.gt_total)
    c2 = counts_2d(sample.p1, p.flow, sample.gt_total, sample.intrinsics) if sample.intrinsics else None
    pose = None
    if p.transform is not None and sample.gt_relative is not None:
        pose = evaluate_pose(p.transform, sample.gt_relative)
    err, _ = point_errors_3d(p.flow, sample.gt_total)
    return c3, c2, pose, err


def evaluate(dataset: Sequence[ScenePair], predict, threads: int | None = None) -> EvalResult:
    """Evaluate ``predict`` over scenes; fractions and EPEs pool every point.

    Scenes run on up to ``threads`` workers (default: ``RF_THREADS`` or 1);
    results merge in dataset order.
    """
    if not dataset:
        raise InvalidConfig("empty evaluation set")
    threads = threads or int(os.environ.get("RF_THREADS", "1") or 1)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: _scene_eval(s, predict), dataset))
    else:
        results = [_scene_eval(s, predict) for s in dataset]

    per_scene = []
    pooled3 = np.zeros(5)  # n, error sum, strict, relaxed, outliers
    pooled2 = np.zeros(3)  # n, error sum, accurate
    rles, roes = [], []
    for sample, (c3, c2, pose, _) in zip(dataset, results):
        rep = MetricsReport(c3[1] / c3[0], c3[2] / c3[0], c3[3] / c3[0], c3[4] / c3[0],
                            point_count=c3[0], scene_id=sample.scene_id)
        pooled3 += c3
        if c2 is not None:
            rep.epe2d, rep.acc2d = c2[1] / c2[0], c2[2] / c2[0]
            pooled2 += c2
        if pose is not None:
            rep.rle, rep.roe = pose
            rles.append(pose[0])
            roes.append(pose[1])
        per_scene.append(rep)
    n, s3, strict, relaxed, out = pooled3
    n2, s2, acc2 = pooled2
    agg = MetricsReport(
        s3 / n, strict / n, relaxed / n, out / n,
        epe2d=s2 / n2 if n2 else None,
        acc2d=acc2 / n2 if n2 else None,
        rle=float(np.mean(rles)) if rles else None,
        roe=float(np.mean(roes)) if roes else None,
        point_count=int(n),
        scene_id="all",
    )
    errs = np.concatenate([r[3] for r in results])
    return EvalResult(agg, per_scene, histogram(errs), errs)
