import numpy as np
import pytest

from lowrank_mtl import gradcheck
from lowrank_mtl.gradcheck import BlockResult, GradcheckReport


def test_rel_err_definition():
    assert gradcheck.rel_err([1.0, 2.0], [1.0, 2.5]) == pytest.approx(0.2)
    assert gradcheck.rel_err([0.0], [0.0]) == 0.0
    assert gradcheck.rel_err([], []) == 0.0


def test_default_report_passes():
    report = gradcheck.default_gradcheck()
    assert report.passed
    names = [b.name for b in report.blocks]
    assert names == ["w1_smooth", "w2_smooth", "phi", "phi_relu", "nuclear", "nuclear_id", "l1"]
    assert report["phi"].max_rel_err < 1e-6
    assert report["phi_relu"].max_rel_err < 1e-5
    assert report["phi_relu"].checked > 0


def test_coarse_epsilon_fails_nuclear():
    report = gradcheck.default_gradcheck(epsilon=0.1)
    assert not report.passed
    assert not report["nuclear"].passed


def test_tolerance_override():
    assert gradcheck.default_gradcheck(epsilon=0.1, tolerance=10.0).passed


def test_report_helpers():
    r = GradcheckReport([BlockResult("a", 1e-9, 1e-6, 3), BlockResult("b", 1e-3, 1e-2, 3, 1)])
    assert r.passed and r.worst().name == "b"
    assert r["a"].line().startswith("PASS a")
    assert not BlockResult("c", 0.0, 1.0, 0).passed
    with pytest.raises(KeyError):
        r["missing"]


def test_detects_wrong_gradient(monkeypatch, tiny):
    from lowrank_mtl import optimizer

    real = optimizer.grad_w2_smooth
    monkeypatch.setattr(optimizer, "grad_w2_smooth", lambda *a, **k: 1.01 * real(*a, **k))
    params, ds = tiny
    report = gradcheck.gradcheck(params, ds, gradcheck.TINY_HYPER)
    assert not report["w2_smooth"].passed
    assert report["w1_smooth"].passed


def test_l1_skips_small_entries():
    w = np.array([[1.0, 1e-5], [-0.5, 0.0]])
    err, checked, skipped = gradcheck.check_l1(w, 1e-5)
    assert (checked, skipped) == (2, 2)
    assert err < 1e-9
