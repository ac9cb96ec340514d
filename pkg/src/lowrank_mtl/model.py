"""The two-headed network: config, parameter containers, forward and
backward passes through the shared convolutional feature extractor.

Layer order is fixed: conv, pool, conv, pool, conv, pool, conv. The
flattened output of the last conv layer (after its optional rectifier) is
the feature vector of length ``p`` read by both linear heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lowrank_mtl import numkern
from lowrank_mtl.errors import ConfigError, DimensionError
from lowrank_mtl.rng import Xoshiro256

N_CONV = 4
N_POOL = 3


def _expand(value, d):
    if isinstance(value, (int, np.integer)):
        return (int(value),) * d
    value = tuple(int(v) for v in value)
    if len(value) == 1 and d > 1:
        value = value * d
    return value


@dataclass(frozen=True)
class NetworkConfig:
    """Layer hyperparameters for the fixed conv/pool stack.

    ``input_shape`` is ``(channels, *spatial)`` with one or two spatial axes.
    Per-layer extents may be given as an int (same on every spatial axis)
    or a tuple with one entry per axis; they are normalized to tuples.
    """

    input_shape: tuple = (1, 64)
    channels: tuple = (4, 8, 8, 8)
    kernels: tuple = (5, 3, 3, 3)
    conv_strides: tuple = (1, 1, 1, 1)
    pool_windows: tuple = (2, 2, 2)
    pool_strides: tuple = (2, 2, 2)
    relu: tuple = (True, True, True, True)
    m: int = 8

    def __post_init__(self):
        shape = tuple(int(s) for s in self.input_shape)
        if len(shape) not in (2, 3) or any(s <= 0 for s in shape):
            raise ConfigError(
                f"input_shape must be (channels, *spatial) with 1 or 2 positive "
                f"spatial extents, got {self.input_shape}"
            )
        d = len(shape) - 1
        object.__setattr__(self, "input_shape", shape)
        for name, count in (
            ("channels", N_CONV),
            ("kernels", N_CONV),
            ("conv_strides", N_CONV),
            ("pool_windows", N_POOL),
            ("pool_strides", N_POOL),
            ("relu", N_CONV),
        ):
            value = tuple(getattr(self, name))
            if len(value) != count:
                raise ConfigError(f"{name} needs {count} entries, got {len(value)}")
            if name == "relu":
                value = tuple(bool(v) for v in value)
            elif name == "channels":
                value = tuple(int(v) for v in value)
                if any(v <= 0 for v in value):
                    raise ConfigError(f"channels must be positive, got {value}")
            else:
                value = tuple(_expand(v, d) for v in value)
                if any(len(v) != d or min(v) <= 0 for v in value):
                    raise ConfigError(f"{name} entries need {d} positive extents, got {value}")
            object.__setattr__(self, name, value)
        if int(self.m) <= 0:
            raise ConfigError(f"task count m must be positive, got {self.m}")
        object.__setattr__(self, "m", int(self.m))
        self.layer_shapes()  # raises on underflow

    @property
    def spatial_ndim(self) -> int:
        return len(self.input_shape) - 1

    def filter_shapes(self) -> list[tuple]:
        shapes = []
        c_in = self.input_shape[0]
        for c_out, k in zip(self.channels, self.kernels):
            shapes.append((c_out, c_in) + k)
            c_in = c_out
        return shapes

    def layer_shapes(self) -> list[tuple]:
        """Output shape of each of the 7 layers, for a single sample."""
        shapes = []
        extent = self.input_shape[1:]
        for i in range(N_CONV):
            k, s = self.kernels[i], self.conv_strides[i]
            if any(kk > e for kk, e in zip(k, extent)):
                raise ConfigError(f"conv layer {i + 1}: kernel {k} exceeds input extent {extent}")
            extent = numkern.conv_output_extent(extent, k, s)
            shapes.append((self.channels[i],) + extent)
            if i < N_POOL:
                w, s = self.pool_windows[i], self.pool_strides[i]
                if any(ww > e for ww, e in zip(w, extent)):
                    raise ConfigError(f"pool layer {i + 1}: window {w} exceeds input extent {extent}")
                extent = numkern.conv_output_extent(extent, w, s)
                shapes.append((self.channels[i],) + extent)
        return shapes

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.layer_shapes()[-1]))

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "channels": list(self.channels),
            "kernels": [list(k) for k in self.kernels],
            "conv_strides": [list(s) for s in self.conv_strides],
            "pool_windows": [list(w) for w in self.pool_windows],
            "pool_strides": [list(s) for s in self.pool_strides],
            "relu": list(self.relu),
            "m": self.m,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FeatureExtractor:
    filters: list


@dataclass
class Heads:
    w1: np.ndarray
    w2: np.ndarray


@dataclass
class Params:
    config: NetworkConfig
    extractor: FeatureExtractor
    heads: Heads

    def copy(self) -> "Params":
        return Params(
            self.config,
            FeatureExtractor([f.copy() for f in self.extractor.filters]),
            Heads(self.heads.w1.copy(), self.heads.w2.copy()),
        )


@dataclass
class ForwardTrace:
    """Cached activations of one forward pass (single sample or batch).

    ``conv_inputs[i]`` is what conv layer ``i`` consumed, ``pre_activations[i]``
    its raw output, ``masks[i]`` the rectifier mask (``None`` when the
    rectifier is off), ``pools[i]`` the record of pool layer ``i`` and
    ``pool_inputs[i]`` that layer's input shape. ``filters`` snapshots the
    filters used, so stale traces can be detected.
    """

    x: np.ndarray
    conv_inputs: list = field(default_factory=list)
    pre_activations: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    pools: list = field(default_factory=list)
    pool_inputs: list = field(default_factory=list)
    phi: np.ndarray | None = None
    filters: list = field(default_factory=list)


def check_params(config: NetworkConfig, extractor: FeatureExtractor, heads: Heads) -> None:
    shapes = config.filter_shapes()
    if len(extractor.filters) != N_CONV:
        raise DimensionError(f"expected {N_CONV} filter tensors, got {len(extractor.filters)}")
    for i, (f, s) in enumerate(zip(extractor.filters, shapes)):
        if f.shape != s:
            raise DimensionError(f"conv layer {i + 1}: filter shape {f.shape}, config expects {s}")
    mp = (config.m, config.feature_dim)
    for name, w in (("w1", heads.w1), ("w2", heads.w2)):
        if w.shape != mp:
            raise DimensionError(f"{name} has shape {w.shape}, expected {mp}")


def init_params(config: NetworkConfig, seed: int) -> Params:
    """Glorot-uniform initialization from the portable generator.

    Draw order: the four filter tensors, then ``w1``, then ``w2``, each in
    row-major order, every entry uniform in ``[-a, a]`` with
    ``a = sqrt(6 / (fan_in + fan_out))``.
    """
    rng = Xoshiro256(seed)
    filters = []
    for shape in config.filter_shapes():
        recept = int(np.prod(shape[2:]))
        a = np.sqrt(6.0 / (shape[1] * recept + shape[0] * recept))
        filters.append(rng.uniform_array(shape, -a, a))
    p, m = config.feature_dim, config.m
    a = np.sqrt(6.0 / (p + m))
    w1 = rng.uniform_array((m, p), -a, a)
    w2 = rng.uniform_array((m, p), -a, a)
    return Params(config, FeatureExtractor(filters), Heads(w1, w2))


def glorot_bound(shape) -> float:
    """Uniform init bound for a filter ``(out, in, *k)`` or head ``(m, p)``."""
    if len(shape) == 2:
        return float(np.sqrt(6.0 / (shape[0] + shape[1])))
    recept = int(np.prod(shape[2:]))
    return float(np.sqrt(6.0 / ((shape[0] + shape[1]) * recept)))


def _forward(extractor: FeatureExtractor, x: np.ndarray, config: NetworkConfig, batched: bool):
    d = config.spatial_ndim
    trace = ForwardTrace(x=x, filters=[f.copy() for f in extractor.filters])
    h = x
    for i in range(N_CONV):
        trace.conv_inputs.append(h)
        try:
            z = numkern.conv_forward(h, extractor.filters[i], config.conv_strides[i])
        except DimensionError as exc:
            raise DimensionError(f"conv layer {i + 1}: {exc}") from None
        trace.pre_activations.append(z)
        if config.relu[i]:
            mask = z > 0.0
            trace.masks.append(mask)
            h = np.where(mask, z, 0.0)
        else:
            trace.masks.append(None)
            h = z
        if i < N_POOL:
            trace.pool_inputs.append(h.shape)
            rec = numkern.maxpool_forward(h, config.pool_windows[i], config.pool_strides[i], d)
            trace.pools.append(rec)
            h = rec.output
    trace.phi = h.reshape(h.shape[0], -1) if batched else h.ravel()
    return trace


def forward_features(extractor: FeatureExtractor, x, config: NetworkConfig) -> ForwardTrace:
    """Run one sample ``(channels, *spatial)`` through the 7-layer stack."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != config.input_shape:
        raise DimensionError(f"input shape {x.shape} does not match config {config.input_shape}")
    return _forward(extractor, x, config, batched=False)


def forward_batch(extractor: FeatureExtractor, xs, config: NetworkConfig) -> ForwardTrace:
    """Batched :func:`forward_features`; ``trace.phi`` has shape ``(n, p)``."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.shape[1:] != config.input_shape:
        raise DimensionError(
            f"batch sample shape {xs.shape[1:]} does not match config {config.input_shape}"
        )
    return _forward(extractor, xs, config, batched=True)


def backward_features(
    extractor: FeatureExtractor, trace: ForwardTrace, config: NetworkConfig, upstream
) -> list:
    """Backpropagate ``d loss / d phi`` through the stack.

    ``upstream`` has the shape of ``trace.phi``. Returns filter gradients
    summed over the batch, in layer order.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != trace.phi.shape:
        raise DimensionError(f"upstream {upstream.shape} does not match phi {trace.phi.shape}")
    grads = [None] * N_CONV
    g = upstream.reshape(trace.pre_activations[-1].shape)
    for i in reversed(range(N_CONV)):
        if i < N_POOL:
            g = numkern.maxpool_backward(trace.pools[i], g, trace.pool_inputs[i])
        if trace.masks[i] is not None:
            g = np.where(trace.masks[i], g, 0.0)
        g_in, grads[i] = numkern.conv_backward(
            trace.conv_inputs[i], extractor.filters[i], g, config.conv_strides[i]
        )
        g = g_in
    return grads


def forward_heads(heads: Heads, phi_vec):
    """Scores of both heads and their sum for one feature vector or a batch.

    Accepts ``phi_vec`` of shape ``(p,)`` or ``(n, p)``.
    """
    phi_vec = np.asarray(phi_vec, dtype=np.float64)
    p = heads.w1.shape[1]
    if phi_vec.shape[-1] != p or phi_vec.ndim not in (1, 2):
        raise DimensionError(f"feature vector shape {phi_vec.shape} does not match p={p}")
    if phi_vec.ndim == 1:
        f1 = heads.w1 @ phi_vec
        f2 = heads.w2 @ phi_vec
    else:
        f1 = phi_vec @ heads.w1.T
        f2 = phi_vec @ heads.w2.T
    return f1, f2, f1 + f2


def predict_labels(g) -> np.ndarray:
    """Elementwise sign with 0 mapped to +1."""
    return np.where(np.asarray(g) >= 0.0, 1, -1).astype(np.int64)


# ---------------------------------------------------------------------------
# Serialization


def _tensor_doc(t: np.ndarray) -> dict:
    return {"shape": list(t.shape), "values": [float(v) for v in t.ravel()]}


def _tensor_from_doc(doc: dict) -> np.ndarray:
    return numkern.as_tensor(doc["values"], doc["shape"])


def params_to_dict(params: Params) -> dict:
    return {
        "config": params.config.to_dict(),
        "filters": [_tensor_doc(f) for f in params.extractor.filters],
        "w1": _tensor_doc(params.heads.w1),
        "w2": _tensor_doc(params.heads.w2),
    }


def params_from_dict(doc: dict) -> Params:
    config = NetworkConfig.from_dict(doc["config"])
    extractor = FeatureExtractor([_tensor_from_doc(f) for f in doc["filters"]])
    heads = Heads(_tensor_from_doc(doc["w1"]), _tensor_from_doc(doc["w2"]))
    check_params(config, extractor, heads)
    return Params(config, extractor, heads)
