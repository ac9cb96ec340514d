"""Alternating minimization: W1 (nuclear-norm subgradient), W2 (reweighted
l1 subgradient), then the filters by backpropagation, once each per outer
iteration with the other blocks held fixed.

Each block update is a plain gradient step. With backtracking on, the step
starts at ``hyper.step_size`` every outer iteration and is halved until the
block's own sub-objective does not increase:

* W1: ``g1 = C1/2 err + C2 ||W1||_* + C4/2 cons``
* W2: ``g2 = C1/2 err + C3/2 sum sqrt(w^2 + eps^2) + C4/2 cons``
* Phi: ``g3 = 1/2 ||Phi||^2 + C1/2 err + C4/2 cons``
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from lowrank_mtl import model, numkern
from lowrank_mtl.errors import ConfigError, DimensionError, NumericError
from lowrank_mtl.objective import (
    TERM_NAMES,
    Hyper,
    ObjectiveBreakdown,
    consistency_sum,
    error_sum,
    objective_total,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StopRule:
    max_outer_iters: int = 100
    rel_tol: float = 0.0

    def __post_init__(self):
        if int(self.max_outer_iters) < 1:
            raise ConfigError(f"max_outer_iters must be >= 1, got {self.max_outer_iters}")
        if not self.rel_tol >= 0:
            raise ConfigError(f"rel_tol must be >= 0, got {self.rel_tol}")


@dataclass
class StepRecord:
    """One block update: sub-objective before/after and the step taken."""

    iter: int
    block: str
    step: float
    before: float
    after: float
    accepted: bool

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class TrainState:
    params: model.Params
    hyper: Hyper
    seed: int = 0
    iter: int = 0
    history: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Gradients


def _check_labels(params, dataset):
    if dataset.m != params.config.m:
        raise DimensionError(f"dataset has m={dataset.m} labels, model has m={params.config.m}")


def _residuals(heads, phis, labels):
    f1 = phis @ heads.w1.T
    f2 = phis @ heads.w2.T
    return labels - (f1 + f2), f1 - f2


def grad_w1_smooth(params, dataset, hyper: Hyper, phis=None) -> np.ndarray:
    """Gradient in W1 of the quadratic part ``C1/2 err + C4/2 cons``."""
    _check_labels(params, dataset)
    if phis is None:
        phis = model.forward_batch(params.extractor, dataset.inputs, params.config).phi
    r, d = _residuals(params.heads, phis, dataset.labels)
    return -hyper.c1 * (r.T @ phis) + hyper.c4 * (d.T @ phis)


def grad_w2_smooth(params, dataset, hyper: Hyper, phis=None) -> np.ndarray:
    """Gradient in W2 of the quadratic part; the consistency sign flips."""
    _check_labels(params, dataset)
    if phis is None:
        phis = model.forward_batch(params.extractor, dataset.inputs, params.config).phi
    r, d = _residuals(params.heads, phis, dataset.labels)
    return -hyper.c1 * (r.T @ phis) - hyper.c4 * (d.T @ phis)


def grad_nuclear(w1, sigma_tol: float = 1e-10) -> np.ndarray:
    """Subgradient ``U_k V_k^T`` of the nuclear norm.

    Only singular triples with ``sigma > sigma_tol * sigma_max`` are kept,
    so the zero matrix maps to the zero subgradient.
    """
    res = numkern.svd(w1)
    if res.sigma.size == 0 or res.sigma[0] == 0.0:
        return np.zeros_like(np.asarray(w1, dtype=np.float64))
    keep = res.sigma > sigma_tol * res.sigma[0]
    return res.u[:, keep] @ res.vt[keep, :]


def grad_l1_reweighted(w2, l1_epsilon: float = 1e-8) -> np.ndarray:
    # w * diag(|w|)^-1 per row, with an epsilon floor on the diagonal.
    w2 = np.asarray(w2, dtype=np.float64)
    return w2 / np.maximum(np.abs(w2), l1_epsilon)


def smoothed_l1(w2, l1_epsilon: float) -> float:
    return float(np.sum(np.sqrt(w2 * w2 + l1_epsilon * l1_epsilon)))


def phi_upstream(heads, phis, labels, hyper: Hyper) -> np.ndarray:
    """Per-sample derivative of the data terms with respect to ``phi_i`` (rows)."""
    r, d = _residuals(heads, phis, labels)
    return -hyper.c1 * (r @ (heads.w1 + heads.w2)) + hyper.c4 * (d @ (heads.w1 - heads.w2))


def grad_phi(params, dataset, hyper: Hyper, trace=None) -> list:
    """Filter gradients of ``g3``: ridge term plus backpropagated data terms.

    ``trace`` must come from a forward pass of the current filters over
    ``dataset.inputs``; a stale trace raises :class:`NumericError`.
    """
    _check_labels(params, dataset)
    filters = params.extractor.filters
    if trace is None:
        trace = model.forward_batch(params.extractor, dataset.inputs, params.config)
    elif trace.x.shape != dataset.inputs.shape or any(
        not np.array_equal(a, b) for a, b in zip(trace.filters, filters)
    ):
        raise NumericError("stale forward trace: filters or inputs changed since the forward pass")
    up = phi_upstream(params.heads, trace.phi, dataset.labels, hyper)
    grads = model.backward_features(params.extractor, trace, params.config, up)
    return [f + g for f, g in zip(filters, grads)]


# ---------------------------------------------------------------------------
# Sub-objectives


def g1_value(w1, w2, phis, labels, hyper: Hyper) -> float:
    return (
        0.5 * hyper.c1 * error_sum(w1, w2, phis, labels)
        + hyper.c2 * numkern.nuclear_norm(w1)
        + 0.5 * hyper.c4 * consistency_sum(w1, w2, phis)
    )


def g2_value(w1, w2, phis, labels, hyper: Hyper) -> float:
    return (
        0.5 * hyper.c1 * error_sum(w1, w2, phis, labels)
        + 0.5 * hyper.c3 * smoothed_l1(w2, hyper.l1_epsilon)
        + 0.5 * hyper.c4 * consistency_sum(w1, w2, phis)
    )


def g3_value(filters, heads, phis, labels, hyper: Hyper) -> float:
    return (
        0.5 * sum(numkern.frobenius_sq(f) for f in filters)
        + 0.5 * hyper.c1 * error_sum(heads.w1, heads.w2, phis, labels)
        + 0.5 * hyper.c4 * consistency_sum(heads.w1, heads.w2, phis)
    )


def _backtrack(state, block, evaluate, x0, direction, step):
    """Shared step-halving loop.

    ``evaluate(candidate)`` returns ``(value, aux)``; ``x0`` and ``direction``
    are lists of arrays. Returns ``(candidate, aux)`` or ``(None, None)``
    when the step is rejected.
    """
    hyper = state.hyper
    f0, _ = evaluate(x0)
    halvings = hyper.max_halvings if hyper.backtracking else 0
    for _ in range(halvings + 1):
        cand = [x - step * g for x, g in zip(x0, direction)]
        f1, aux = evaluate(cand)
        if not hyper.backtracking or f1 <= f0:
            state.steps.append(StepRecord(state.iter + 1, block, step, f0, f1, True))
            return cand, aux
        step *= 0.5
    state.steps.append(StepRecord(state.iter + 1, block, 0.0, f0, f0, False))
    msg = f"iteration {state.iter + 1}: {block} step rejected after {halvings} halvings"
    state.warnings.append(msg)
    log.warning(msg)
    return None, None


def update_w1(state: TrainState, dataset, phis, step=None) -> np.ndarray:
    """One gradient step on W1 with ``phis`` held fixed; returns the new W1."""
    p, h = state.params, state.hyper
    w2, labels = p.heads.w2, dataset.labels
    grad = grad_w1_smooth(p, dataset, h, phis) + h.c2 * grad_nuclear(p.heads.w1, h.svd_sigma_tol)
    step = h.step_size if step is None else step

    def evaluate(c):
        return g1_value(c[0], w2, phis, labels, h), None

    cand, _ = _backtrack(state, "w1", evaluate, [p.heads.w1], [grad], step)
    if cand is not None:
        p.heads.w1 = cand[0]
    return p.heads.w1


def update_w2(state: TrainState, dataset, phis, step=None) -> np.ndarray:
    p, h = state.params, state.hyper
    w1, labels = p.heads.w1, dataset.labels
    grad = grad_w2_smooth(p, dataset, h, phis) + 0.5 * h.c3 * grad_l1_reweighted(
        p.heads.w2, h.l1_epsilon
    )
    step = h.step_size if step is None else step

    def evaluate(c):
        return g2_value(w1, c[0], phis, labels, h), None

    cand, _ = _backtrack(state, "w2", evaluate, [p.heads.w2], [grad], step)
    if cand is not None:
        p.heads.w2 = cand[0]
    return p.heads.w2


def update_phi(state: TrainState, dataset, trace, step=None):
    """Backpropagation step on the filters.

    Returns the forward trace for the filters in force afterwards (the
    accepted candidate's trace, or ``trace`` itself if the step was rejected).
    """
    p, h = state.params, state.hyper
    config, heads, labels = p.config, p.heads, dataset.labels
    grads = grad_phi(p, dataset, h, trace)
    step = h.step_size if step is None else step

    def evaluate(filters):
        if filters is p.extractor.filters:
            t = trace
        else:
            t = model.forward_batch(model.FeatureExtractor(filters), dataset.inputs, config)
        return g3_value(filters, heads, t.phi, labels, h), t

    cand, new_trace = _backtrack(state, "phi", evaluate, p.extractor.filters, grads, step)
    if cand is None:
        return trace
    p.extractor.filters = cand
    return new_trace


# ---------------------------------------------------------------------------
# Training loop


def _check_finite(bd: ObjectiveBreakdown, it: int):
    for name in TERM_NAMES:
        if not np.isfinite(getattr(bd, name)):
            raise NumericError(f"non-finite objective at iteration {it}: term '{name}' is {getattr(bd, name)}")


def train(state: TrainState, dataset, stop: StopRule, callback=None) -> TrainState:
    """Run outer iterations (W1, W2, then Phi) until ``stop`` fires.

    ``state`` is updated in place and returned. ``state.history`` gains one
    breakdown per iteration, with the initial objective at index 0.
    ``callback(state, trace)`` runs after every logged evaluation, including
    iteration 0 when the history starts empty.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    _check_labels(state.params, dataset)
    p = state.params
    trace = model.forward_batch(p.extractor, dataset.inputs, p.config)
    if not state.history:
        bd = objective_total(p, dataset, state.hyper, trace.phi)
        _check_finite(bd, state.iter)
        state.history.append(bd)
        if callback is not None:
            callback(state, trace)
    while state.iter < stop.max_outer_iters:
        update_w1(state, dataset, trace.phi)
        update_w2(state, dataset, trace.phi)
        trace = update_phi(state, dataset, trace)
        state.iter += 1
        bd = objective_total(p, dataset, state.hyper, trace.phi)
        _check_finite(bd, state.iter)
        prev = state.history[-1].total
        state.history.append(bd)
        if callback is not None:
            callback(state, trace)
        if abs(prev - bd.total) < stop.rel_tol * max(abs(prev), np.finfo(float).tiny):
            break
    return state
