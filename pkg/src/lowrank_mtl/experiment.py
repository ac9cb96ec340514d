"""Run configuration and the train-and-record loop shared by the CLI
subcommands and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from lowrank_mtl import data, model, numkern, optimizer
from lowrank_mtl.errors import ConfigError, DimensionError
from lowrank_mtl.objective import Hyper, objective_total

RANK_REL_TOL = 1e-3
SPARSE_ABS_TOL = 1e-4


@dataclass(frozen=True)
class RunConfig:
    network: model.NetworkConfig = field(default_factory=model.NetworkConfig)
    hyper: Hyper = field(default_factory=Hyper)
    stop: optimizer.StopRule = field(default_factory=optimizer.StopRule)
    split: data.SplitSpec = field(default_factory=data.SplitSpec)
    seed: int = 0
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "hyper": self.hyper.to_dict(),
            "stop": {"max_outer_iters": self.stop.max_outer_iters, "rel_tol": self.stop.rel_tol},
            "split": {"seed": self.split.seed, "fraction": self.split.fraction},
            "seed": self.seed,
            "paths": dict(self.paths),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"network", "hyper", "stop", "split", "seed", "paths"}
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        base = cls()
        try:
            return cls(
                network=model.NetworkConfig.from_dict({**base.network.to_dict(), **d.get("network", {})}),
                hyper=Hyper.from_dict({**base.hyper.to_dict(), **d.get("hyper", {})}),
                stop=optimizer.StopRule(**d.get("stop", {})),
                split=data.SplitSpec(**d.get("split", {})),
                seed=int(d.get("seed", 0)),
                paths=dict(d.get("paths", {})),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def with_hyper(self, **kw) -> "RunConfig":
        return replace(self, hyper=replace(self.hyper, **kw))


def numerical_rank(w, rel_tol: float = RANK_REL_TOL) -> int:
    """Count of singular values above ``rel_tol * sigma_max``."""
    s = numkern.svd(w).sigma
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))


def sparsity_fraction(w, abs_tol: float = SPARSE_ABS_TOL) -> float:
    return float(np.mean(np.abs(w) < abs_tol))


def head_disagreement(params, dataset) -> float:
    """Mean over samples of ``||f1(x) - f2(x)||^2``."""
    phis = model.forward_batch(params.extractor, dataset.inputs, params.config).phi
    f1, f2, _ = model.forward_heads(params.heads, phis)
    return float(np.mean(np.sum((f1 - f2) ** 2, axis=1)))


def network_for(dataset, network: model.NetworkConfig) -> model.NetworkConfig:
    """Adopt the dataset's input shape and task count into ``network``."""
    d = network.to_dict()
    d["input_shape"] = list(dataset.input_shape)
    d["m"] = dataset.m
    try:
        return model.NetworkConfig.from_dict(d)
    except ConfigError as exc:
        raise ConfigError(f"network does not fit input shape {dataset.input_shape}: {exc}") from None


@dataclass
class RunResult:
    state: optimizer.TrainState
    train: data.Dataset
    test: data.Dataset
    rows: list


def run_training(run: RunConfig, dataset: data.Dataset, state=None) -> RunResult:
    """Split ``dataset``, train on the first part, log metrics every iteration.

    Pass ``state`` (e.g. from a checkpoint) to resume; its metrics rows for
    earlier iterations are not regenerated.
    """
    train_set, test_set = data.split(dataset, run.split)
    if state is None:
        config = network_for(dataset, run.network)
        state = optimizer.TrainState(model.init_params(config, run.seed), run.hyper, seed=run.seed)
    elif state.params.config.m != dataset.m or state.params.config.input_shape != dataset.input_shape:
        raise DimensionError("checkpoint network does not match the dataset")
    rows = []

    def record(st, trace):
        cfg = st.params.config
        _, _, g = model.forward_heads(st.params.heads, trace.phi)
        _, train_acc = data.accuracy(model.predict_labels(g), train_set.labels)
        _, test_acc = data.evaluate(st.params, cfg, test_set)
        row = {"iter": st.iter, **st.history[-1].as_row()}
        row.update(train_accuracy=train_acc, test_accuracy=test_acc)
        rows.append(row)

    optimizer.train(state, train_set, run.stop, callback=record)
    return RunResult(state, train_set, test_set, rows)


def eval_report(params, dataset, hyper: Hyper) -> dict:
    if dataset.m != params.config.m or dataset.input_shape != params.config.input_shape:
        raise DimensionError(
            f"dataset (m={dataset.m}, input_shape={list(dataset.input_shape)}) does not match "
            f"model (m={params.config.m}, input_shape={list(params.config.input_shape)})"
        )
    per_task, avg = data.evaluate(params, params.config, dataset)
    bd = objective_total(params, dataset, hyper)
    return {
        "n": len(dataset),
        "per_task_accuracy": [float(v) for v in per_task],
        "average_accuracy": avg,
        "objective": bd.as_row(),
        "numerical_rank_w1": numerical_rank(params.heads.w1),
        "sparsity_w2": sparsity_fraction(params.heads.w2),
    }
