import numpy as np
import pytest

from pamba import autodiff as ad
from pamba.gradcheck import SUITE_OPS, gradcheck, run_suite


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_suite_passes(seed):
    reports = run_suite(seed)
    assert [r.name for r in reports] == list(SUITE_OPS)
    bad = [r.line() for r in reports if not r.passed]
    assert not bad, bad


def test_scope_filter():
    names = [r.name for r in run_suite(0, ["scan"])]
    assert names == ["scan", "selective_scan"]


def test_corrupted_adjoint_is_caught():
    ad.set_adjoint_hook("affine_scan", lambda g: g * 1.01)
    try:
        reports = run_suite(0, ["scan"])
    finally:
        ad.set_adjoint_hook("affine_scan", None)
    assert all(not r.passed for r in reports)


def test_detects_wrong_gradient_in_user_fn():
    def bad_square(x):
        # value x^2 with a recorded adjoint of x instead of 2x
        return ad._record("bad", x.data ** 2, (x,), lambda g: (g * x.data,))

    rep = gradcheck(bad_square, {"x": np.array([0.5, 1.5, -2.0])})
    assert not rep.passed and rep.max_rel_error > 0.1
    ok = gradcheck(lambda x: ad.mul(x, x), {"x": np.array([0.5, 1.5, -2.0])})
    assert ok.passed


def test_zero_gradient_uses_floor():
    rep = gradcheck(lambda x: ad.tsum(ad.mul(x, 0.0)), {"x": np.ones(3)})
    assert rep.max_rel_error == 0.0 and rep.passed
