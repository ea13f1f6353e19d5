"""Acceptance criteria, one test each, at their stated tolerances.

Each test records a ``criterion N: PASS|FAIL ...`` line that pytest prints in
its terminal summary.  ``python tests/test_acceptance.py`` runs them directly.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record
from oracles import ce_oracle, dense_oracle, lovasz_level_set_oracle, softmax, z_oracle
from pamba.autodiff import Tensor
from pamba.cloud import PointCloud, locality_stats
from pamba.cli import main as cli_main
from pamba.curve3d import CurvePattern, decode, encode, full_cube, hz_split
from pamba.gradcheck import run_suite
from pamba.network import ModelConfig, SegmentationNet, build_hierarchy, erf_probe, receptive_radius
from pamba.objective import cross_entropy, lovasz_softmax, total_loss
from pamba.sparseconv import ConvKernel, SparseTensor, submanifold_conv
from pamba.ssm import (SelectiveProjections, SsmParams, bidirectional, lti_scan, scan_kernel,
                       scan_parallel, scan_sequential)
from pamba.synthdata import SceneSpec, generate
from pamba.train import RunConfig, Trainer, ablation_study, write_ablation_report

REPORT_DIR = Path(__file__).resolve().parent.parent / "reports"


def check(n: int, ok: bool, detail: str) -> None:
    record(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def test_criterion_01_curve_correctness():
    t0 = time.perf_counter()
    ok = True
    for pattern in CurvePattern:
        for bits in (1, 2, 3, 4):
            cube = full_cube(bits)
            keys = encode(pattern, cube, bits)
            ok &= np.array_equal(np.sort(keys), np.arange(len(cube)))
            ok &= np.array_equal(decode(pattern, keys, bits), cube)
    for pattern in ("hilbert", "hilbert-swap"):
        for bits in (1, 2, 3, 4):
            walk = decode(pattern, np.arange(1 << (3 * bits)), bits)
            ok &= bool(np.all(np.abs(np.diff(walk, axis=0)).sum(axis=1) == 1))
    dt = time.perf_counter() - t0
    check(1, bool(ok) and dt < 10, f"bijective + adjacent, {dt:.2f}s (< 10s)")


def test_criterion_02_hz_structure():
    t0 = time.perf_counter()
    ok = True
    for bits in (2, 3, 4):
        b_h, b_l = hz_split(bits)
        per = 1 << (3 * b_l)
        walk = decode("hz", np.arange(1 << (3 * bits)), bits)
        blocks = (walk >> b_l).reshape(-1, per, 3)
        ok &= bool(np.all(blocks == blocks[:, :1, :]))
        ok &= np.array_equal(blocks[:, 0, :], decode("hilbert", np.arange(len(blocks)), b_h))
        fine = (walk & ((1 << b_l) - 1)).reshape(-1, per, 3)
        ranks = np.array([[z_oracle(*f, b_l) for f in blk] for blk in fine])
        ok &= bool(np.all(ranks == np.arange(per)))
    dt = time.perf_counter() - t0
    check(2, bool(ok) and dt < 10, f"coarse Hilbert order, contiguous z-ordered cells, {dt:.2f}s")


def test_criterion_03_locality_ordering():
    wins, gaps = 0, []
    for seed in range(10):
        pos = np.random.default_rng(seed).random((4096, 3))
        h = locality_stats(pos, "hilbert").mean_rank_gap
        z = locality_stats(pos, "z").mean_rank_gap
        gaps.append((h, z))
        wins += h < z
    mean_h = np.mean([g[0] for g in gaps])
    mean_z = np.mean([g[1] for g in gaps])
    check(3, wins >= 9, f"Hilbert < Z mean NN rank gap in {wins}/10 trials "
                        f"(avg {mean_h:.1f} vs {mean_z:.1f}; need >= 9)")


def _instance(rng, length, d=3, s=4):
    return (rng.normal(size=(length, d)), SsmParams.default(d, s),
            SelectiveProjections.random(d, s, rng))


def test_criterion_04_scan_equivalences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_scan = 0.0
    for _ in range(50):
        x, p, q = _instance(rng, int(rng.integers(1, 257)))
        seq = scan_sequential(x, p, q)
        par = scan_parallel(x, p, q)
        worst_scan = max(worst_scan, np.abs(par - seq).max() / max(np.abs(seq).max(), 1e-300))
    worst_kernel = 0.0
    for _ in range(50):
        length = int(rng.integers(1, 65))
        s = int(rng.integers(1, 6))
        a, b, c = rng.uniform(0.05, 0.99, s), rng.normal(size=s), rng.normal(size=s)
        x = rng.normal(size=length)
        rec = lti_scan(x, a, b, c)
        ker = scan_kernel(x, a, b, c, length)
        worst_kernel = max(worst_kernel, np.abs(ker - rec).max() / max(np.abs(rec).max(), 1e-300))
    dt = time.perf_counter() - t0
    check(4, worst_scan < 1e-12 and worst_kernel < 1e-10 and dt < 30,
          f"parallel/sequential {worst_scan:.1e} (< 1e-12), kernel/recurrence "
          f"{worst_kernel:.1e} (< 1e-10), {dt:.2f}s")


def test_criterion_05_bidirectional_reversal():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(20):
        x, p, q = _instance(rng, int(rng.integers(1, 129)))
        worst = max(worst, np.abs(bidirectional(x[::-1], p, q) - bidirectional(x, p, q)[::-1]).max())
    check(5, worst < 1e-10, f"max deviation {worst:.1e} (< 1e-10)")


def test_criterion_06_sparse_conv_oracle():
    rng = np.random.default_rng(2)
    side = np.stack(np.meshgrid(*[np.arange(6)] * 3, indexing="ij"), -1).reshape(-1, 3)
    worst = 0.0
    for _ in range(20):
        keep = rng.random(len(side)) < rng.uniform(0.1, 0.9)
        keep[0] = True
        coords = side[keep][rng.permutation(keep.sum())]
        c_in, c_out = rng.integers(1, 5, size=2)
        f = rng.normal(size=(len(coords), c_in))
        w, b = rng.normal(size=(3, 3, 3, c_in, c_out)), rng.normal(size=c_out)
        got = submanifold_conv(SparseTensor(coords, f), ConvKernel(Tensor(w), Tensor(b))).feats.data
        worst = max(worst, np.abs(got - dense_oracle(coords, f, w, b, 6)).max())
    check(6, worst < 1e-12, f"max deviation from dense masked conv {worst:.1e} (< 1e-12)")


def test_criterion_07_gradient_suite():
    t0 = time.perf_counter()
    failed, worst, count = [], 0.0, 0
    for seed in (0, 1, 2):
        for r in run_suite(seed, h=1e-5):
            count += 1
            worst = max(worst, r.max_rel_error)
            if not (r.passed and r.max_rel_error < 1e-4):
                failed.append(f"{r.name}@{seed}")
    dt = time.perf_counter() - t0
    check(7, not failed and dt < 120,
          f"{count} checks, worst rel err {worst:.1e} (< 1e-4), {dt:.1f}s (< 120s)"
          + (f", failed: {failed}" if failed else ""))


def test_criterion_08_loss_correctness():
    ce = float(cross_entropy(np.zeros((5, 4)), np.array([0, 1, 2, 3, 1])).data)
    lov = float(lovasz_softmax(np.array([[0.6, 0.4]]), np.array([0])).data)
    rng = np.random.default_rng(3)
    z = rng.normal(size=(40, 4))
    y = rng.integers(0, 4, 40)
    total = float(total_loss(z, y).data)
    oracle = 0.5 * ce_oracle(z, y) + 0.5 * lovasz_level_set_oracle(softmax(z), y)
    ok = (abs(ce - math.log(4)) <= 4 * np.finfo(float).eps and abs(lov - 0.4) < 1e-15
          and abs(total - oracle) < 1e-12)
    check(8, ok, f"CE uniform {ce!r} vs ln4, Lovasz {lov!r}, total err {abs(total - oracle):.1e}")


# -- training-based criteria share runs ---------------------------------------------------

_CACHE: dict = {}


def _default_run():
    if "default" not in _CACHE:
        cfg = RunConfig()
        t0 = time.perf_counter()
        trainer = Trainer(cfg, threads=1)
        res = trainer.run()
        _CACHE["default"] = (trainer, res, time.perf_counter() - t0)
    return _CACHE["default"]


def test_criterion_09_toy_training():
    trainer, res, dt = _default_run()
    n = trainer.model.num_parameters()
    check(9, res.miou >= 0.80 and dt < 600,
          f"train mIoU {res.miou:.4f} (>= 0.80) after {trainer.step_count} steps, "
          f"{n} params, {dt:.0f}s (< 600s)")


def test_criterion_10_ablation_direction():
    base = RunConfig()
    rows = []
    trainer, res, _ = _default_run()
    for variant in ("none", "uni", "bi"):
        for seed in (0, 1, 2):
            if variant == "bi" and seed == base.seed:
                rows.append((variant, seed, res.miou))
            else:
                rows.extend(ablation_study(base, [seed], [variant]))
    REPORT_DIR.mkdir(exist_ok=True)
    path = REPORT_DIR / "ablation.csv"
    means, ordered = write_ablation_report(path, rows)
    check(10, ordered, "mean mIoU conv-only {none:.4f} <= uni {uni:.4f} <= bi {bi:.4f}; "
                       "report {path}".format(path=path.name, **means))


def test_criterion_11_erf_reach():
    scene = generate(SceneSpec(num_points=1024, seed=11))
    conv_cfg = ModelConfig(mamba="none")
    conv = SegmentationNet(conv_cfg).astype(np.float64)
    radius = receptive_radius(conv_cfg)
    hier = build_hierarchy(scene.positions, conv_cfg.grid_size, conv_cfg.stages)
    outside_max, bounded = 0.0, True
    for idx in (0, 100, 500):
        sal = erf_probe(conv, scene, idx)
        dist = np.abs(hier.point_coords - hier.point_coords[idx]).max(axis=1)
        outside = sal[dist > radius]
        outside_max = max(outside_max, float(outside.max()) if len(outside) else 0.0)
        bounded &= bool(np.all(outside == 0))
    full = SegmentationNet(ModelConfig()).astype(np.float64)
    cover = float(np.mean(erf_probe(full, scene, 0) > 0))
    check(11, bounded and cover >= 0.5,
          f"conv-only max saliency beyond radius {radius} = {outside_max:.1e} (== 0), "
          f"full-model support {cover:.1%} (>= 50%)")


def test_criterion_12_determinism(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        try:
            code = cli_main(["train", "--steps", "20", "--seed", "3", "--threads", "1",
                             "--out", str(out)])
        except SystemExit as exc:
            code = exc.code
        assert code == 0
        outs.append(out)
    same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
               for f in ("metrics.csv", "checkpoint.pmb"))
    check(12, same, "two seeded sequential train runs: metrics.csv and checkpoint.pmb "
                    + ("byte-identical" if same else "differ"))


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))
