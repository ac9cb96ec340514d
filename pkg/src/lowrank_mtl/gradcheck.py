"""Finite-difference verification of every analytic (sub)gradient.

Each block reports a relative error ``max|analytic - numeric| /
max(max|analytic|, max|numeric|)`` over the coordinates it checked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lowrank_mtl import data, model, numkern, optimizer
from lowrank_mtl.objective import Hyper, consistency_sum, error_sum
from lowrank_mtl.rng import Xoshiro256

SMOOTH_TOL = 1e-6
RELU_TOL = 1e-5
NUCLEAR_TOL = 1e-4
L1_TOL = 1e-6
L1_MIN_ABS = 1e-3

TINY_CONFIG = dict(
    input_shape=(1, 32),
    channels=(2, 3, 3, 4),
    kernels=(3, 2, 2, 2),
    m=4,
)
TINY_HYPER = Hyper(c1=1.0, c2=0.5, c3=0.5, c4=0.7)


@dataclass
class BlockResult:
    name: str
    max_rel_err: float
    tolerance: float
    checked: int
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.checked > 0 and self.max_rel_err < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name:<10} max_rel_err={self.max_rel_err:.3e} "
            f"tol={self.tolerance:.1e} checked={self.checked} skipped={self.skipped}"
        )


@dataclass
class GradcheckReport:
    blocks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.blocks)

    def worst(self) -> BlockResult:
        return max(self.blocks, key=lambda b: b.max_rel_err / b.tolerance)

    def __getitem__(self, name) -> BlockResult:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)


def rel_err(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def tiny_problem(seed: int = 0, relu: bool = False, n: int = 12):
    """Small network and dataset used by the default gradient check."""
    config = model.NetworkConfig(relu=(relu,) * 4, **TINY_CONFIG)
    params = model.init_params(config, seed)
    ds = data.generate_synthetic(seed + 1, n, config.m, config.input_shape[1], latent_rank=2)
    return params, ds


def _fd_matrix(f, w, eps):
    num = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        orig = w[idx]
        w[idx] = orig + eps
        fp = f(w)
        w[idx] = orig - eps
        fm = f(w)
        w[idx] = orig
        num[idx] = (fp - fm) / (2 * eps)
    return num


def check_w1_smooth(params, dataset, hyper, eps, phis):
    w2, y = params.heads.w2, dataset.labels

    def g11(w):
        return 0.5 * hyper.c1 * error_sum(w, w2, phis, y) + 0.5 * hyper.c4 * consistency_sum(w, w2, phis)

    analytic = optimizer.grad_w1_smooth(params, dataset, hyper, phis)
    numeric = _fd_matrix(g11, params.heads.w1.copy(), eps)
    return rel_err(analytic, numeric), analytic.size


def check_w2_smooth(params, dataset, hyper, eps, phis):
    w1, y = params.heads.w1, dataset.labels

    def g21(w):
        return 0.5 * hyper.c1 * error_sum(w1, w, phis, y) + 0.5 * hyper.c4 * consistency_sum(w1, w, phis)

    analytic = optimizer.grad_w2_smooth(params, dataset, hyper, phis)
    numeric = _fd_matrix(g21, params.heads.w2.copy(), eps)
    return rel_err(analytic, numeric), analytic.size


def _pattern(trace):
    masks = [m.copy() for m in trace.masks if m is not None]
    pools = [r.argmax_index.copy() for r in trace.pools]
    return masks, pools


def _same_pattern(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a[0] + a[1], b[0] + b[1]))


def check_phi(params, dataset, hyper, eps):
    """Central differences of ``g3`` over every filter entry.

    Coordinates whose perturbation flips a rectifier mask or a pool argmax
    (a kink of the piecewise-linear stack) are skipped and counted.
    """
    config, heads, y = params.config, params.heads, dataset.labels
    base = model.forward_batch(params.extractor, dataset.inputs, config)
    base_pattern = _pattern(base)
    analytic = optimizer.grad_phi(params, dataset, hyper, base)
    filters = [f.copy() for f in params.extractor.filters]

    def g3(fs):
        t = model.forward_batch(model.FeatureExtractor(fs), dataset.inputs, config)
        return optimizer.g3_value(fs, heads, t.phi, y, hyper), t

    a_vals, n_vals = [], []
    skipped = 0
    for layer, f in enumerate(filters):
        for idx in np.ndindex(f.shape):
            orig = f[idx]
            f[idx] = orig + eps
            fp, tp = g3(filters)
            f[idx] = orig - eps
            fm, tm = g3(filters)
            f[idx] = orig
            if not (_same_pattern(base_pattern, _pattern(tp)) and _same_pattern(base_pattern, _pattern(tm))):
                skipped += 1
                continue
            a_vals.append(analytic[layer][idx])
            n_vals.append((fp - fm) / (2 * eps))
    return rel_err(a_vals, n_vals), len(a_vals), skipped


def check_nuclear(w, eps, n_dirs=10, seed=0, sigma_tol=1e-10):
    """Directional derivatives of the nuclear norm against ``<grad, D>``.

    Returns the worst relative error over random unit-Frobenius directions
    and the relative gap in ``<grad(W), W> = ||W||_*``.
    """
    rng = Xoshiro256(seed)
    g = optimizer.grad_nuclear(w, sigma_tol)
    worst = 0.0
    for _ in range(n_dirs):
        d = rng.normal_array(w.shape)
        d /= np.linalg.norm(d)
        num = (numkern.nuclear_norm(w + eps * d) - numkern.nuclear_norm(w - eps * d)) / (2 * eps)
        ana = float(np.sum(g * d))
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-300))
    nn = numkern.nuclear_norm(w)
    identity_gap = abs(float(np.sum(g * w)) - nn) / max(nn, 1e-300)
    return worst, identity_gap


def check_l1(w, eps, l1_epsilon=1e-8, min_abs=L1_MIN_ABS):
    """Central differences of ``||W||_1`` at entries with ``|w| >= min_abs``."""
    g = optimizer.grad_l1_reweighted(w, l1_epsilon)
    w = w.copy()
    a_vals, n_vals = [], []
    for idx in np.ndindex(w.shape):
        if abs(w[idx]) < min_abs:
            continue
        orig = w[idx]
        w[idx] = orig + eps
        fp = numkern.l1_norm(w)
        w[idx] = orig - eps
        fm = numkern.l1_norm(w)
        w[idx] = orig
        a_vals.append(g[idx])
        n_vals.append((fp - fm) / (2 * eps))
    return rel_err(a_vals, n_vals), len(a_vals), w.size - len(a_vals)


def gradcheck(params, dataset, hyper: Hyper, epsilon: float = 1e-5, tolerance=None,
              relu_params=None) -> GradcheckReport:
    """Check all gradient blocks of ``params`` on ``dataset``.

    ``relu_params``, if given, is a rectified variant of the network checked
    as an extra ``phi_relu`` block with kink filtering. ``tolerance``
    overrides every per-block default.
    """

    def tol(default):
        return default if tolerance is None else float(tolerance)

    report = GradcheckReport()
    phis = model.forward_batch(params.extractor, dataset.inputs, params.config).phi
    err, k = check_w1_smooth(params, dataset, hyper, epsilon, phis)
    report.blocks.append(BlockResult("w1_smooth", err, tol(SMOOTH_TOL), k))
    err, k = check_w2_smooth(params, dataset, hyper, epsilon, phis)
    report.blocks.append(BlockResult("w2_smooth", err, tol(SMOOTH_TOL), k))
    rectified = any(params.config.relu)
    err, k, s = check_phi(params, dataset, hyper, epsilon)
    report.blocks.append(BlockResult("phi", err, tol(RELU_TOL if rectified else SMOOTH_TOL), k, s))
    if relu_params is not None:
        err, k, s = check_phi(relu_params, dataset, hyper, epsilon)
        report.blocks.append(BlockResult("phi_relu", err, tol(RELU_TOL), k, s))
    err, gap = check_nuclear(params.heads.w1, epsilon, sigma_tol=hyper.svd_sigma_tol)
    report.blocks.append(BlockResult("nuclear", err, tol(NUCLEAR_TOL), 10))
    report.blocks.append(BlockResult("nuclear_id", gap, tol(1e-8), 1))
    err, k, s = check_l1(params.heads.w2, epsilon, hyper.l1_epsilon)
    report.blocks.append(BlockResult("l1", err, tol(L1_TOL), k, s))
    return report


def default_gradcheck(epsilon: float = 1e-5, tolerance=None, seed: int = 0) -> GradcheckReport:
    """Gradient check on the built-in tiny problem (rectifiers off and on)."""
    params, ds = tiny_problem(seed, relu=False)
    relu_params, _ = tiny_problem(seed, relu=True)
    return gradcheck(params, ds, TINY_HYPER, epsilon, tolerance, relu_params=relu_params)
