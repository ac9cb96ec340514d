"""Objective terms and their weighted total.

    total = 1/2 ||Phi||^2
          + C1/2 sum_i ||y_i - (W1 + W2) phi_i||^2
          + C2 ||W1||_*
          + C3/2 ||W2||_1
          + C4/2 sum_i ||(W1 - W2) phi_i||^2

Every term accepts precomputed features ``phis`` (``n x p``) so a caller
can share one forward pass across terms.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from lowrank_mtl import model, numkern
from lowrank_mtl.errors import ConfigError, DimensionError

TERM_NAMES = ("complexity", "error", "nuclear", "sparsity", "consistency")


@dataclass(frozen=True)
class Hyper:
    """Term weights and step-control settings for training."""

    c1: float = 1.0
    c2: float = 1.0
    c3: float = 1.0
    c4: float = 1.0
    step_size: float = 0.01
    l1_epsilon: float = 1e-8
    svd_sigma_tol: float = 1e-10
    backtracking: bool = True
    max_halvings: int = 30

    def __post_init__(self):
        for name in ("c1", "c2", "c3", "c4"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be a finite nonnegative number, got {v}")
        if not (np.isfinite(self.step_size) and self.step_size > 0):
            raise ConfigError(f"step_size must be positive, got {self.step_size}")
        if not self.l1_epsilon > 0:
            raise ConfigError(f"l1_epsilon must be positive, got {self.l1_epsilon}")
        if not self.svd_sigma_tol > 0:
            raise ConfigError(f"svd_sigma_tol must be positive, got {self.svd_sigma_tol}")
        if self.max_halvings < 0:
            raise ConfigError(f"max_halvings must be >= 0, got {self.max_halvings}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyper":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameter keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ObjectiveBreakdown:
    complexity: float
    error: float
    nuclear: float
    sparsity: float
    consistency: float

    @property
    def total(self) -> float:
        return self.complexity + self.error + self.nuclear + self.sparsity + self.consistency

    def as_row(self) -> dict:
        row = {"total": self.total}
        row.update({k: getattr(self, k) for k in TERM_NAMES})
        return row

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in TERM_NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveBreakdown":
        return cls(**{k: float(d[k]) for k in TERM_NAMES})


def features(params: model.Params, dataset) -> np.ndarray:
    """Feature matrix ``(n, p)`` of the whole dataset."""
    return model.forward_batch(params.extractor, dataset.inputs, params.config).phi


def _phis(params, dataset, phis):
    if dataset.m != params.config.m:
        raise DimensionError(f"dataset has m={dataset.m} labels, model has m={params.config.m}")
    return features(params, dataset) if phis is None else phis


def error_sum(w1, w2, phis, labels) -> float:
    """Unweighted ``sum_i ||y_i - (W1 + W2) phi_i||^2``."""
    r = labels - phis @ (w1 + w2).T
    return float(np.sum(r * r))


def consistency_sum(w1, w2, phis) -> float:
    """Unweighted ``sum_i ||(W1 - W2) phi_i||^2``."""
    d = phis @ w1.T - phis @ w2.T
    return float(np.sum(d * d))


def term_error(params, dataset, c1, phis=None) -> float:
    phis = _phis(params, dataset, phis)
    return 0.5 * c1 * error_sum(params.heads.w1, params.heads.w2, phis, dataset.labels)


def term_nuclear(w1, c2) -> float:
    return c2 * numkern.nuclear_norm(w1)


def term_sparsity(w2, c3) -> float:
    return 0.5 * c3 * numkern.l1_norm(w2)


def term_consistency(params, dataset, c4, phis=None) -> float:
    phis = _phis(params, dataset, phis)
    return 0.5 * c4 * consistency_sum(params.heads.w1, params.heads.w2, phis)


def term_complexity(filters) -> float:
    return 0.5 * sum(numkern.frobenius_sq(f) for f in filters)


def objective_total(params, dataset, hyper: Hyper, phis=None) -> ObjectiveBreakdown:
    """All five terms from a single forward pass over ``dataset``."""
    phis = _phis(params, dataset, phis)
    w1, w2 = params.heads.w1, params.heads.w2
    return ObjectiveBreakdown(
        complexity=term_complexity(params.extractor.filters),
        error=term_error(params, dataset, hyper.c1, phis),
        nuclear=term_nuclear(w1, hyper.c2),
        sparsity=term_sparsity(w2, hyper.c3),
        consistency=term_consistency(params, dataset, hyper.c4, phis),
    )
