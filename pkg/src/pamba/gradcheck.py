"""Central-difference checks of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

DEFAULT_TOLERANCE = 1e-4
DEFAULT_STEP = 1e-5
DENOMINATOR_FLOOR = 1e-8


@dataclass
class GradcheckReport:
    name: str
    max_rel_error: float
    per_input: dict
    tolerance: float = DEFAULT_TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.0e})"


def _scalarize(out: Tensor, cotangent: Optional[np.ndarray]) -> Tensor:
    if cotangent is None:
        return out
    return ad.tsum(ad.mul(out, cotangent))


def gradcheck(fn: Callable[..., Tensor], inputs: dict, *, name: str = "op", seed: int = 0,
              h: float = DEFAULT_STEP, tolerance: float = DEFAULT_TOLERANCE,
              max_checks: Optional[int] = None) -> GradcheckReport:
    """Compare tape gradients of ``fn(**inputs)`` with central differences.

    ``inputs`` maps names to arrays or to existing tensors (e.g. module
    parameters, perturbed in place).  Non-scalar outputs are contracted with a
    seeded random cotangent.  The error for each input is
    ``|g_tape - g_fd| / max(|g_tape|, |g_fd|, 1e-8)`` in the Euclidean norm;
    ``max_checks`` limits how many entries per input are differenced.
    """
    rng = np.random.default_rng(seed)
    tensors = {k: (v if isinstance(v, Tensor) else Tensor(np.array(v, dtype=np.float64)))
               for k, v in inputs.items()}
    saved = {k: t.requires_grad for k, t in tensors.items()}
    for t in tensors.values():
        t.requires_grad = True
    try:
        with Tape() as tape:
            out = fn(**tensors)
        cot = None if out.data.size == 1 else rng.normal(size=out.shape)
        with tape:
            scalar = _scalarize(out, cot)
        grads = tape.backward(scalar)

        def value() -> float:
            return float(_scalarize(fn(**tensors), cot).data)

        per_input = {}
        for key, t in tensors.items():
            analytic = grads.get(t)
            if analytic is None:
                analytic = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_checks is not None and flat.size > max_checks:
                idx = np.sort(rng.choice(flat.size, max_checks, replace=False))
            numeric = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = value()
                flat[i] = orig - h
                fm = value()
                flat[i] = orig
                numeric[j] = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[idx].astype(np.float64)
            denom = max(np.linalg.norm(a), np.linalg.norm(numeric), DENOMINATOR_FLOOR)
            per_input[key] = float(np.linalg.norm(a - numeric) / denom)
    finally:
        for k, t in tensors.items():
            t.requires_grad = saved[k]
    worst = max(per_input.values()) if per_input else 0.0
    return GradcheckReport(name, worst, per_input, tolerance)


# -- the suite run by ``pamba gradcheck`` -----------------------------------------------------

def _cases(rng: np.random.Generator) -> dict:
    from . import objective
    from .cloud import SerializedOrder
    from .network import ConvMambaBlock, ModelConfig
    from .sparseconv import SparseTensor, local_aggregation, submanifold_conv, ConvKernel
    from .ssm import MambaMixer, SelectiveProjections, selective_scan

    def randomize(module, scale=0.3):
        for p in module.parameters():
            p.data = p.data + rng.normal(0, scale, p.shape)
        return module

    cases = {}
    cases["linear"] = (lambda x, w, b: ad.linear(x, w, b),
                       dict(x=rng.normal(size=(5, 4)), w=rng.normal(size=(4, 3)),
                            b=rng.normal(size=3)), 1e-10, None)
    for name, f in [("exp", ad.exp), ("softplus", ad.softplus), ("silu", ad.silu),
                    ("sigmoid", ad.sigmoid)]:
        cases[name] = (lambda x, f=f: f(x), dict(x=rng.normal(size=(4, 3))), DEFAULT_TOLERANCE, None)
    cases["exprel"] = (lambda x: ad.exprel(x),
                       dict(x=np.concatenate([rng.normal(size=6), [1e-10, -3e-9, 0.0]])),
                       DEFAULT_TOLERANCE, None)
    cases["log_sqrt"] = (lambda x: ad.add(ad.log(x), ad.sqrt(x)),
                         dict(x=rng.uniform(0.5, 2.0, size=(3, 3))), DEFAULT_TOLERANCE, None)
    cases["mul_div"] = (lambda a, b: ad.div(ad.mul(a, b), ad.add(ad.mul(b, b), 1.0)),
                        dict(a=rng.normal(size=(3, 4)), b=rng.normal(size=(1, 4))),
                        DEFAULT_TOLERANCE, None)
    cases["layer_norm"] = (lambda x, w, b: ad.layer_norm(x, w, b),
                           dict(x=rng.normal(size=(6, 5)), w=rng.normal(size=5),
                                b=rng.normal(size=5)), DEFAULT_TOLERANCE, None)
    cases["softmax"] = (lambda x: ad.softmax(x), dict(x=rng.normal(size=(4, 5))),
                        DEFAULT_TOLERANCE, None)
    cases["log_softmax"] = (lambda x: ad.log_softmax(x), dict(x=rng.normal(size=(4, 5))),
                            DEFAULT_TOLERANCE, None)
    perm = rng.permutation(7)
    cases["permute"] = (lambda x: ad.permute_rows(x, perm), dict(x=rng.normal(size=(7, 3))),
                        DEFAULT_TOLERANCE, None)
    rows = rng.integers(0, 5, size=9)
    cases["gather"] = (lambda x: ad.take_rows(x, rows), dict(x=rng.normal(size=(5, 3))),
                       DEFAULT_TOLERANCE, None)
    seg = np.concatenate([np.arange(4), rng.integers(0, 4, size=6)])
    cases["pooling"] = (lambda x: ad.segment_mean(x, seg, 4), dict(x=rng.normal(size=(10, 3))),
                        DEFAULT_TOLERANCE, None)
    cases["scan"] = (lambda a, u: ad.affine_scan(a, u),
                     dict(a=rng.uniform(0.2, 0.99, size=(13, 3, 2)), u=rng.normal(size=(13, 3, 2))),
                     DEFAULT_TOLERANCE, None)
    d_inner, d_state = 6, 4
    proj = SelectiveProjections.random(d_inner, d_state, rng)
    cases["selective_scan"] = (
        lambda x, A_log, W_B, W_C, W_delta, b_delta: selective_scan(
            x, A_log, W_B, W_C, W_delta, b_delta),
        dict(x=rng.normal(size=(16, d_inner)),
             A_log=np.log(np.tile(np.arange(1, d_state + 1.0), (d_inner, 1))),
             W_B=proj.W_B, W_C=proj.W_C, W_delta=proj.W_delta, b_delta=proj.b_delta),
        1e-6, None)
    cases["causal_conv1d"] = (lambda x, w, b: ad.causal_conv1d(x, w, b),
                              dict(x=rng.normal(size=(9, 3)), w=rng.normal(size=(4, 3)),
                                   b=rng.normal(size=3)), DEFAULT_TOLERANCE, None)
    side = np.stack(np.meshgrid(*[np.arange(4)] * 3, indexing="ij"), -1).reshape(-1, 3)
    coords = side[rng.choice(len(side), 24, replace=False)]
    cases["sparse_conv"] = (
        lambda f, w, b: submanifold_conv(SparseTensor(coords, f), ConvKernel(w, b)).feats,
        dict(f=rng.normal(size=(24, 3)), w=rng.normal(size=(3, 3, 3, 3, 2)),
             b=rng.normal(size=2)), DEFAULT_TOLERANCE, None)
    cases["local_aggregation"] = (
        lambda f, w1, b1, w2, b2: local_aggregation(
            SparseTensor(coords, f), [ConvKernel(w1, b1), ConvKernel(w2, b2)]).feats,
        dict(f=rng.normal(size=(24, 3)), w1=rng.normal(0, 0.3, size=(3, 3, 3, 3, 3)),
             b1=rng.normal(size=3), w2=rng.normal(0, 0.3, size=(3, 3, 3, 3, 3)),
             b2=rng.normal(size=3)), DEFAULT_TOLERANCE, None)
    labels = rng.integers(0, 4, size=12)
    labels[0] = -1
    cases["cross_entropy"] = (lambda z: objective.cross_entropy(z, labels),
                              dict(z=rng.normal(size=(12, 4))), DEFAULT_TOLERANCE, None)
    probs = rng.dirichlet(np.ones(4), size=12)
    cases["lovasz"] = (lambda p: objective.lovasz_softmax(p, labels),
                       dict(p=probs), 1e-6, None)
    cases["total_loss"] = (lambda z: objective.total_loss(z, labels),
                           dict(z=rng.normal(size=(12, 4))), DEFAULT_TOLERANCE, None)

    mixer = randomize(MambaMixer(8, rng, d_state=4))
    cases["mamba_mixer"] = (lambda x, **_: mixer(x),
                            dict(x=rng.normal(size=(16, 8)), **dict(mixer.named_parameters())),
                            DEFAULT_TOLERANCE, 48)

    cube = np.stack(np.meshgrid(*[np.arange(6)] * 3, indexing="ij"), -1).reshape(-1, 3)
    bcoords = cube[rng.choice(len(cube), 64, replace=False)]
    cfg = ModelConfig(stages=1, d_model=(8,), d_state=4)
    block = randomize(ConvMambaBlock(8, "hz", rng, cfg), 0.2)
    bits = int(bcoords.max()).bit_length()
    from .cloud import serialize_coords
    order = serialize_coords(bcoords, block.pattern, bits)
    cases["convmamba_block"] = (
        lambda x, **_: block(SparseTensor(bcoords, x), order).feats,
        dict(x=rng.normal(size=(64, 8)), **dict(block.named_parameters())),
        DEFAULT_TOLERANCE, 48)
    return cases


SUITE_OPS = ("linear", "exp", "softplus", "silu", "sigmoid", "exprel", "log_sqrt", "mul_div",
             "layer_norm", "softmax", "log_softmax", "permute", "gather", "pooling", "scan",
             "selective_scan", "causal_conv1d", "sparse_conv", "local_aggregation",
             "cross_entropy", "lovasz", "total_loss", "mamba_mixer", "convmamba_block")


def run_suite(seed: int = 0, ops: Optional[list] = None, h: float = DEFAULT_STEP) -> list:
    """Gradcheck every case (or those whose name contains one of ``ops``)."""
    rng = np.random.default_rng(seed)
    cases = _cases(rng)
    reports = []
    for name, (fn, inputs, tol, max_checks) in cases.items():
        if ops and not any(o == name or o in name for o in ops):
            continue
        reports.append(gradcheck(fn, inputs, name=name, seed=seed, h=h, tolerance=tol,
                                 max_checks=max_checks))
    return reports
