"""``pamba`` command line: curves, training, evaluation, ERF probes and gradchecks.

Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import curve3d
from .cloud import LocalityReport, locality_stats, read_cloud, write_cloud
from .curve3d import CurvePattern
from .errors import DomainError, NumericError

log = logging.getLogger("pamba")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _ints(text: str, count: Optional[int] = None) -> list:
    try:
        vals = [int(v) for v in text.replace(" ", "").split(",") if v != ""]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None
    if count is not None and len(vals) != count:
        raise UsageError(f"expected {count} integers, got {text!r}")
    return vals


def _writer(path: Optional[str]):
    if path is None or path == "-":
        return sys.stdout, False
    return open(path, "w", newline=""), True


# -- curve ---------------------------------------------------------------------------------

def random_cloud(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).random((n, 3))


def cmd_curve(args) -> int:
    if args.action == "encode":
        pattern = CurvePattern.parse(args.pattern)
        if args.coord is None:
            raise UsageError("curve encode needs --coord x,y,z")
        print(curve3d.encode(pattern, tuple(_ints(args.coord, 3)), args.bits))
        return EXIT_OK
    if args.action == "decode":
        pattern = CurvePattern.parse(args.pattern)
        if args.key is None:
            raise UsageError("curve decode needs --key K")
        print(",".join(str(v) for v in curve3d.decode(pattern, args.key, args.bits)))
        return EXIT_OK

    # stats: the cloud is uniform in the unit cube, voxelized at 2**-bits
    if args.random is None or args.random < 2:
        raise UsageError("curve stats needs --random N with N >= 2")
    pos = random_cloud(args.random, args.seed)
    if args.compare:
        patterns = list(CurvePattern)
    else:
        patterns = [CurvePattern.parse(args.pattern)]
    out, close = _writer(args.out)
    try:
        w = csv.DictWriter(out, fieldnames=LocalityReport.CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for p in patterns:
            w.writerow(locality_stats(pos, p, grid_size=2.0 ** -args.bits).row())
    finally:
        if close:
            out.close()
    return EXIT_OK


# -- train / eval --------------------------------------------------------------------------

def load_run_config(path: Optional[str]):
    from .train import RunConfig

    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    try:
        return RunConfig.from_dict(doc)
    except TypeError as exc:
        raise UsageError(f"bad config: {exc}") from None


def apply_overrides(cfg, args):
    from .train import ABLATIONS

    if args.steps is not None:
        cfg.steps = args.steps
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.model.seed = args.seed
    if args.ablate is not None:
        cfg.model.mamba = ABLATIONS[args.ablate]
    if args.data:
        cfg.data = list(args.data)
    cfg.__post_init__()
    cfg.model.__post_init__()
    return cfg


def cmd_train(args) -> int:
    from .train import Trainer

    cfg = apply_overrides(load_run_config(args.config), args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.csv"
    ckpt = out / "checkpoint.pmb"
    if args.resume:
        trainer = Trainer.resume(args.resume, cfg if args.config else None, threads=args.threads)
        if args.steps is not None:
            trainer.cfg.steps = args.steps
        append = metrics.exists()
    else:
        trainer = Trainer(cfg, threads=args.threads)
        append = False
    (out / "config.json").write_text(json.dumps(trainer.cfg.to_dict(), indent=2, sort_keys=True))
    res = trainer.run(metrics, append=append)
    trainer.save(ckpt)
    print(f"step {trainer.step_count} train mIoU {res.miou:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .network import load_checkpoint
    from .objective import LossConfig
    from .train import evaluate
    from .synthdata import CLASSES

    if not args.clouds:
        raise UsageError("eval needs at least one cloud file")
    model, _, _ = load_checkpoint(args.checkpoint)
    scenes = [read_cloud(p) for p in args.clouds]
    for s in scenes:
        if s.labels is None:
            raise UsageError("eval clouds need labels")
        s.validate(model.config.num_classes)
    res = evaluate(model, scenes, LossConfig())
    out, close = _writer(args.out)
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["class", "name", "iou"])
        for k, v in enumerate(res.iou):
            name = CLASSES[k] if k < len(CLASSES) else f"class{k}"
            w.writerow([k, name, "nan" if np.isnan(v) else f"{v:.6f}"])
        w.writerow(["mean", "miou", f"{res.miou:.6f}"])
    finally:
        if close:
            out.close()
    return EXIT_OK


def cmd_erf(args) -> int:
    from .network import erf_probe, load_checkpoint

    model, _, _ = load_checkpoint(args.checkpoint, dtype=np.float64)
    cloud = read_cloud(args.cloud)
    sal = erf_probe(model, cloud, args.index)
    out, close = _writer(args.out)
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["x", "y", "z", "saliency"])
        for p, s in zip(cloud.positions, sal):
            w.writerow([f"{p[0]:.6f}", f"{p[1]:.6f}", f"{p[2]:.6f}", f"{s:.9e}"])
    finally:
        if close:
            out.close()
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import autodiff
    from .gradcheck import run_suite

    if args.corrupt:
        autodiff.set_adjoint_hook(args.corrupt, lambda g: g * 1.01)
    try:
        reports = run_suite(args.seed, args.op or None)
    finally:
        if args.corrupt:
            autodiff.set_adjoint_hook(args.corrupt, None)
    if not reports:
        raise UsageError(f"no gradcheck case matches {args.op}")
    for r in reports:
        print(r.line())
    bad = [r.name for r in reports if not r.passed]
    if bad:
        print("failed: " + ", ".join(bad), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_gen(args) -> int:
    from .synthdata import SceneSpec, generate

    cloud = generate(SceneSpec(num_points=args.points, seed=args.seed,
                               noise_sigma=args.noise))
    write_cloud(cloud, args.path)
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pamba", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    c = sub.add_parser("curve", help="encode, decode and compare space-filling curves")
    c.add_argument("action", choices=("encode", "decode", "stats"))
    c.add_argument("--pattern", default="hz")
    c.add_argument("--bits", type=int, default=10)
    c.add_argument("--coord")
    c.add_argument("--key", type=int)
    c.add_argument("--random", type=int)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--compare", action="store_true")
    c.add_argument("--out")
    c.set_defaults(func=cmd_curve)

    t = sub.add_parser("train", help="train on synthetic or provided scenes")
    t.add_argument("config", nargs="?")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--ablate", choices=("no-mamba", "uni", "bi"))
    t.add_argument("--data", nargs="*")
    t.add_argument("--out", default="run")
    t.add_argument("--resume")
    t.add_argument("--threads", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class IoU of a checkpoint on labeled clouds")
    e.add_argument("checkpoint")
    e.add_argument("clouds", nargs="*")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("erf", help="gradient saliency of one point's logits")
    r.add_argument("checkpoint")
    r.add_argument("cloud")
    r.add_argument("--index", type=int, required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_erf)

    g = sub.add_parser("gradcheck", help="central-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--op", action="append")
    g.add_argument("--corrupt", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("gen", help="write a synthetic labeled scene (.csv or .pcb)")
    s.add_argument("path")
    s.add_argument("--points", type=int, default=4096)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.005)
    s.set_defaults(func=cmd_gen)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "threads", None) is not None and args.threads < 1:
        ap.error("--threads must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        ap.error(str(exc))
    except NumericError as exc:
        print(f"pamba: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DomainError, OSError, ValueError) as exc:
        print(f"pamba: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
