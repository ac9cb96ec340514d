"""Datasets: JSON-lines I/O, synthetic planted low-rank generator, the
seeded equal split, and accuracy metrics.

File format (JSON lines)::

    {"m": 8, "input_shape": [1, 64]}                 <- header, required
    {"input": [[...64 numbers...]], "labels": [1, -1, ...]}
    ...
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lowrank_mtl import model
from lowrank_mtl.errors import ConfigError, DataError, DimensionError
from lowrank_mtl.rng import Xoshiro256

REFERENCE_POOL = 16


@dataclass(frozen=True)
class LabeledSample:
    input: np.ndarray
    labels: np.ndarray


class Dataset:
    """Homogeneous collection of labeled samples.

    Stored column-wise: ``inputs`` is ``(n, *input_shape)`` float64 and
    ``labels`` is ``(n, m)`` int64 with entries in {-1, +1}.
    """

    def __init__(self, inputs, labels, input_shape=None, m=None):
        inputs = np.asarray(inputs, dtype=np.float64)
        labels = np.asarray(labels)
        if input_shape is None:
            input_shape = inputs.shape[1:]
        input_shape = tuple(int(s) for s in input_shape)
        if m is None:
            m = labels.shape[1] if labels.ndim == 2 else 0
        n = inputs.shape[0] if inputs.ndim else 0
        if inputs.shape[1:] != input_shape and n > 0:
            raise DataError(f"inputs have shape {inputs.shape[1:]}, expected {input_shape}")
        if n == 0:
            inputs = inputs.reshape((0,) + input_shape)
            labels = np.asarray(labels).reshape(0, m)
        if labels.shape != (n, m):
            raise DataError(f"labels have shape {labels.shape}, expected {(n, m)}")
        if labels.size and not np.all(np.isin(labels, (-1, 1))):
            raise DataError("labels must be exactly -1 or +1")
        if not np.all(np.isfinite(inputs)):
            raise DataError("inputs contain non-finite values")
        self.inputs = inputs
        self.labels = labels.astype(np.int64)
        self.input_shape = input_shape
        self.m = int(m)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def __getitem__(self, i) -> LabeledSample:
        return LabeledSample(self.inputs[i], self.labels[i])

    @property
    def samples(self) -> list[LabeledSample]:
        return [self[i] for i in range(len(self))]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.input_shape, self.m)


# ---------------------------------------------------------------------------
# I/O


def save_dataset(dataset: Dataset, path) -> None:
    lines = [json.dumps({"m": dataset.m, "input_shape": list(dataset.input_shape)})]
    for x, y in zip(dataset.inputs, dataset.labels):
        lines.append(json.dumps({"input": x.tolist(), "labels": [int(v) for v in y]}))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    """Parse a JSON-lines dataset file.

    Raises
    ------
    DataError
        Empty file, malformed JSON (with line number), labels outside
        {-1, +1}, or records whose shapes disagree with the header.
    """
    text = Path(path).read_text()
    lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines()) if ln.strip()]
    if not lines:
        raise DataError("empty dataset")

    def parse(lineno, raw):
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {lineno}: malformed JSON ({exc.msg})") from None

    header = parse(*lines[0])
    if not isinstance(header, dict) or "m" not in header or "input_shape" not in header:
        raise DataError("line 1: header must be {\"m\": int, \"input_shape\": [ints]}")
    m = int(header["m"])
    shape = tuple(int(s) for s in header["input_shape"])
    if m <= 0 or not shape or min(shape) <= 0:
        raise DataError(f"line 1: invalid header {header}")
    inputs, labels = [], []
    for lineno, raw in lines[1:]:
        rec = parse(lineno, raw)
        if not isinstance(rec, dict) or "input" not in rec or "labels" not in rec:
            raise DataError(f"line {lineno}: record needs 'input' and 'labels'")
        try:
            x = np.array(rec["input"], dtype=np.float64)
        except (TypeError, ValueError):
            raise DataError(f"line {lineno}: input is not a rectangular numeric array") from None
        if x.shape != shape:
            raise DataError(f"line {lineno}: input shape {x.shape} does not match header {shape}")
        y = rec["labels"]
        if len(y) != m or any(v not in (-1, 1) or isinstance(v, bool) for v in y):
            raise DataError(f"line {lineno}: labels must be {m} values in {{-1, +1}}")
        inputs.append(x)
        labels.append(y)
    if not inputs:
        raise DataError("empty dataset")
    return Dataset(np.stack(inputs), np.array(labels, dtype=np.int64), shape, m)


# ---------------------------------------------------------------------------
# Synthetic data


def reference_features(inputs: np.ndarray, window: int = REFERENCE_POOL) -> np.ndarray:
    """Non-overlapping average pooling of the raw input, flattened per sample.

    ``inputs`` is ``(n, channels, length)``; a trailing remainder shorter than
    ``window`` is dropped.
    """
    n, c, length = inputs.shape
    q = length // window
    trimmed = inputs[:, :, : q * window].reshape(n, c, q, window)
    return trimmed.mean(axis=-1).reshape(n, c * q)


@dataclass(frozen=True)
class SyntheticTruth:
    a: np.ndarray
    b: np.ndarray

    @property
    def w_star(self) -> np.ndarray:
        return self.a @ self.b


def generate_synthetic(
    gen_seed: int,
    n: int,
    m: int,
    input_len: int,
    latent_rank: int = 2,
    noise_std: float = 0.1,
    return_truth: bool = False,
):
    """Multi-task data whose label map has rank at most ``latent_rank``.

    Draw order from ``Xoshiro256(gen_seed)``: ``A`` (m x r), ``B`` (r x q),
    the inputs (n x 1 x input_len), then one noise draw per label, all
    standard normal and row-major. Labels are
    ``sign(A @ B @ reference_features(x) + noise_std * noise)`` with 0 -> +1.
    """
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if m < 1 or input_len < 1:
        raise ConfigError(f"m and input_len must be >= 1, got m={m}, input_len={input_len}")
    if latent_rank < 1 or latent_rank > m:
        raise ConfigError(f"latent rank must satisfy 1 <= rank <= m, got rank={latent_rank}, m={m}")
    if noise_std < 0:
        raise ConfigError(f"noise_std must be >= 0, got {noise_std}")
    window = min(REFERENCE_POOL, input_len)
    q = input_len // window
    rng = Xoshiro256(gen_seed)
    a = rng.normal_array((m, latent_rank))
    b = rng.normal_array((latent_rank, q))
    inputs = rng.normal_array((n, 1, input_len))
    noise = rng.normal_array((n, m))
    scores = reference_features(inputs, window) @ (a @ b).T + noise_std * noise
    labels = np.where(scores >= 0.0, 1, -1)
    ds = Dataset(inputs, labels, (1, input_len), m)
    if return_truth:
        return ds, SyntheticTruth(a, b)
    return ds


# ---------------------------------------------------------------------------
# Protocol


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.fraction < 1.0:
            raise ConfigError(f"split fraction must be in (0, 1), got {self.fraction}")


def split(dataset: Dataset, spec: SplitSpec = SplitSpec()):
    """Seeded shuffle, then the first ``floor(n * fraction)`` samples train."""
    n = len(dataset)
    if n < 2:
        raise DataError(f"need at least 2 samples to split, got {n}")
    perm = Xoshiro256(spec.seed).permutation(n)
    k = int(np.floor(n * spec.fraction))
    return dataset.subset(perm[:k]), dataset.subset(perm[k:])


def accuracy(predicted, labels):
    """Per-task accuracy and its mean for label matrices ``(n, m)``."""
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    if predicted.shape != labels.shape:
        raise DimensionError(f"predictions {predicted.shape} vs labels {labels.shape}")
    per_task = np.mean(predicted == labels, axis=0)
    return per_task, float(np.mean(per_task))


def evaluate(params, config, dataset: Dataset):
    """Per-task and average accuracy of ``sign(g(x))`` on ``dataset``."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    if dataset.m != config.m:
        raise DimensionError(f"dataset has m={dataset.m}, model has m={config.m}")
    trace = model.forward_batch(params.extractor, dataset.inputs, config)
    _, _, g = model.forward_heads(params.heads, trace.phi)
    return accuracy(model.predict_labels(g), dataset.labels)


def majority_baseline(train: Dataset, test: Dataset) -> float:
    """Average test accuracy of predicting each task's training-set majority label."""
    majority = np.where(train.labels.sum(axis=0) >= 0, 1, -1)
    return float(np.mean(test.labels == majority[None, :]))
