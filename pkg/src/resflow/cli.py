"""Command-line front end: ``resflow generate | train | eval | icp | bench``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
All outputs go under ``--out`` with fixed file names.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import statistics
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config, resolved_text
from .data import generate_scene, load_dataset, remove_ground_pair, scene_seed, write_scene
from .errors import NonFiniteLoss, ResflowError
from .metrics import histogram_csv, reports_csv
from .networks import NetworkParams, load_checkpoint, save_checkpoint
from .trainer import (AdamState, TrainResult, evaluate, icp_predictor, loss_curve_csv, network_predictor,
                      oracle_predictor, train)

log = logging.getLogger("resflow")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
ABLATIONS = ("none", "no-ego", "no-refine")


class UsageError(ResflowError):
    pass


def _out_dir(path) -> Path:
    out = Path(path).resolve()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8", newline="\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else ExperimentConfig()


def _args_text(pairs) -> str:
    return "".join(f"# {k} = {v}\n" for k, v in pairs)


def _load_data(directory, remove_ground=None):
    scenes = load_dataset(directory)
    if remove_ground is not None:
        scenes = [remove_ground_pair(s, remove_ground) for s in scenes]
    return scenes


# generate ----------------------------------------------------------------------
def cmd_generate(args) -> int:
    cfg = _config(args)
    gen = cfg.gen if args.seed is None else replace(cfg.gen, seed=args.seed)
    out = _out_dir(args.out or cfg.out_dir or ".")
    rows = ["scene_id,file,seed,sha256"]
    for i in range(args.count):
        seed = scene_seed(gen.seed, i)
        sid = f"scene_{i:05d}"
        sample = generate_scene(replace(gen, seed=seed), scene_id=sid)
        if args.strip_labels:
            sample = sample.without_ground_truth()
        path = out / f"{sid}.rfsp"
        write_scene(path, sample)
        rows.append(f"{sid},{path.name},{seed},{_sha256(path)}")
    _write(out / "manifest.csv", "\n".join(rows) + "\n")
    _write(out / "config.resolved", resolved_text(replace(cfg, gen=gen), {
        "command": "generate", "count": args.count, "strip_labels": args.strip_labels}))
    log.info("wrote %d scenes to %s", args.count, out)
    return EXIT_OK


# train -------------------------------------------------------------------------
def _state_groups(state: AdamState, epoch: int) -> dict:
    g = {"train.epoch": np.array([float(epoch)]), "train.adam_t": np.array([float(state.t)])}
    for k in state.m:
        g["adam.m." + k] = state.m[k]
        g["adam.v." + k] = state.v[k]
    return g


def _state_from_groups(extra: dict):
    if "train.epoch" not in extra:
        raise UsageError("checkpoint carries no training state to resume from")
    state = AdamState(t=int(extra["train.adam_t"][0]))
    for k, v in extra.items():
        if k.startswith("adam.m."):
            state.m[k[7:]] = v.copy()
        elif k.startswith("adam.v."):
            state.v[k[7:]] = v.copy()
    return state, int(extra["train.epoch"][0])


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out or cfg.out_dir or ".")
    tcfg = cfg.train_config()
    _write(out / "config.resolved", resolved_text(cfg, {
        "command": "train", "data": Path(args.data).resolve(),
        "eval_data": Path(args.eval_data).resolve() if args.eval_data else None,
        "resume": Path(args.resume).resolve() if args.resume else None}))
    dataset = _load_data(args.data)
    eval_set = _load_data(args.eval_data) if args.eval_data else None

    params = state = None
    start = 0
    if args.resume:
        params, extra = load_checkpoint(args.resume)
        state, start = _state_from_groups(extra)
        if params.config != tcfg.net:
            raise UsageError(f"checkpoint network {params.config} does not match config {tcfg.net}")
        log.info("resuming at epoch %d (step %d)", start, state.t)
    ckpt = out / "checkpoint.rfnw"

    def on_checkpoint(p: NetworkParams, st: AdamState, epoch: int):
        save_checkpoint(ckpt, p, _state_groups(st, epoch))

    curve_path = out / "loss.csv"
    try:
        result: TrainResult = train(dataset, tcfg, params=params, state=state, start_epoch=start,
                                    eval_set=eval_set, on_checkpoint=on_checkpoint)
    except NonFiniteLoss as exc:
        if exc.last_good is not None:
            save_checkpoint(ckpt, exc.last_good)
        log.error("%s; last finite parameters kept in %s", exc, ckpt)
        return EXIT_NUMERIC
    save_checkpoint(ckpt, result.params, _state_groups(result.state, result.epochs_done))
    _write(curve_path, loss_curve_csv(result.loss_curve))
    reports = list(result.eval_reports)
    if eval_set is not None and not reports:
        res = evaluate(eval_set, network_predictor(result.params, cfg.refine.k_infer, ego=tcfg.ego_motion))
        res.report.scene_id = f"epoch_{result.epochs_done}"
        reports.append(res.report)
    _write(out / "metrics.csv", reports_csv(reports))
    log.info("trained %d steps; checkpoint %s", len(result.loss_curve), ckpt)
    return EXIT_OK


# eval / icp ----------------------------------------------------------------------
def _emit_eval(out: Path, res):
    _write(out / "metrics.csv", reports_csv(res.per_scene, res.report))
    _write(out / "hist.csv", histogram_csv(res.histogram))
    r = res.report
    print(f"EPE3D {r.epe3d:.4f}  Acc3DS {r.acc3d_strict:.4f}  Acc3DR {r.acc3d_relaxed:.4f}  "
          f"Outliers3D {r.outliers3d:.4f}  ROE {'-' if r.roe is None else f'{r.roe:.4f}'}  "
          f"RLE {'-' if r.rle is None else f'{r.rle:.4f}'}")


def cmd_eval(args) -> int:
    out = _out_dir(args.out)
    data = _load_data(args.data, args.remove_ground)
    if args.oracle:
        predict = oracle_predictor()
        source = "oracle"
    else:
        try:
            params, _ = load_checkpoint(args.checkpoint)
        except OSError as exc:
            raise UsageError(f"cannot read checkpoint: {exc}") from None
        k = 1 if args.ablation == "no-refine" else args.k_infer
        predict = network_predictor(params, k, ego=args.ablation != "no-ego")
        source = str(Path(args.checkpoint).resolve())
    _write(out / "config.resolved", _args_text([
        ("command", "eval"), ("checkpoint", source), ("data", Path(args.data).resolve()),
        ("k_infer", args.k_infer), ("ablation", args.ablation), ("remove_ground", args.remove_ground)]))
    _emit_eval(out, evaluate(data, predict))
    return EXIT_OK


def cmd_icp(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out or cfg.out_dir or ".")
    data = _load_data(args.data, args.remove_ground)
    _write(out / "config.resolved", resolved_text(cfg, {
        "command": "icp", "data": Path(args.data).resolve(), "remove_ground": args.remove_ground}))
    _emit_eval(out, evaluate(data, icp_predictor(cfg.icp)))
    return EXIT_OK


# bench ---------------------------------------------------------------------------
def cmd_bench(args) -> int:
    out = _out_dir(args.out)
    try:
        params, _ = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint: {exc}") from None
    sample = load_dataset(args.data)[0]
    ks = [int(k) for k in args.k_infer.split(",") if k.strip()]
    if not ks or min(ks) < 1:
        raise UsageError("--k-infer needs a comma-separated list of integers >= 1")
    if args.runs < 20:
        raise UsageError("--runs must be at least 20")
    frozen = network_predictor(params, 1)  # warms imports and the index code path
    frozen(sample)
    rows = ["k_infer,runs,mean_s,stdev_s,min_s"]
    for k in ks:
        predict = network_predictor(params, k)
        predict(sample)
        times = []
        for _ in range(args.runs):
            t0 = time.perf_counter()
            predict(sample)
            times.append(time.perf_counter() - t0)
        rows.append(f"{k},{args.runs},{statistics.fmean(times)!r},{statistics.stdev(times)!r},{min(times)!r}")
        print(f"k_infer={k}: {statistics.fmean(times) * 1e3:.2f} ms +- {statistics.stdev(times) * 1e3:.2f}")
    _write(out / "timing.csv", "\n".join(rows) + "\n")
    _write(out / "config.resolved", _args_text([
        ("command", "bench"), ("checkpoint", Path(args.checkpoint).resolve()),
        ("data", Path(args.data).resolve()), ("scene", sample.scene_id), ("k_infer", args.k_infer),
        ("runs", args.runs)]))
    return EXIT_OK


# entry point ---------------------------------------------------------------------
def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def _count(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {text}")
    return v


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="resflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write synthetic scene files and a manifest")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--count", type=_count, required=True)
    g.add_argument("--seed", type=int, help="override gen.seed")
    g.add_argument("--strip-labels", action="store_true", help="omit all ground truth from the files")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the pipeline")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out")
    t.add_argument("--eval-data", help="labelled scenes evaluated after training or every train.eval_every epochs")
    t.add_argument("--resume", help="checkpoint with training state to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--oracle", action="store_true", help="score the ground truth itself")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--k-infer", type=_positive_int, default=1)
    e.add_argument("--ablation", choices=ABLATIONS, default="none")
    e.add_argument("--remove-ground", type=float, metavar="HEIGHT")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("icp", help="evaluate the rigid ICP baseline")
    i.add_argument("--config")
    i.add_argument("--data", required=True)
    i.add_argument("--out")
    i.add_argument("--remove-ground", type=float, metavar="HEIGHT")
    i.set_defaults(func=cmd_icp)

    b = sub.add_parser("bench", help="time inference for several refinement depths")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--k-infer", default="1,5", help="comma-separated list")
    b.add_argument("--runs", type=_positive_int, default=20)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        print(f"resflow: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"resflow: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ResflowError, ValueError, OSError) as exc:
        print(f"resflow: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
