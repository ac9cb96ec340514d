"""Dense numeric kernels: matrix algebra, one-sided Jacobi SVD, and
convolution / max-pooling with exact backward (adjoint) passes.

Arrays are plain float64 ``numpy.ndarray`` objects. Convolution and pooling
work on any number of spatial axes; the leading axes are channels (and
optionally a batch axis in front of the channels).

Conventions
-----------
* Convolution is cross-correlation over valid positions only (no padding,
  no kernel flip). Filters have shape ``(out_channels, in_channels, *kernel)``.
* Inputs to :func:`conv_forward` are ``(in_channels, *spatial)`` or
  ``(batch, in_channels, *spatial)``.
* Max-pool ties go to the lowest flat input index.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from lowrank_mtl.errors import DimensionError, NumericError

SVD_MAX_SWEEPS = 100
SVD_TOL = 1e-12


def as_tensor(values, shape=None) -> np.ndarray:
    """Build a float64 tensor, rejecting NaN/Inf and size mismatches."""
    arr = np.array(values, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise DimensionError(f"shape extents must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise DimensionError(
                f"shape {shape} needs {int(np.prod(shape))} values, got {arr.size}"
            )
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains non-finite values")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


# ---------------------------------------------------------------------------
# SVD


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``w = u @ diag(sigma) @ vt`` with ``r = min(m, p)``."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray


def _complete_orthonormal(q: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of ``q`` not flagged in ``keep`` with an orthonormal
    completion of the kept ones (modified Gram-Schmidt over the unit basis)."""
    q = q.copy()
    m = q.shape[0]
    basis = [q[:, j] for j in range(q.shape[1]) if keep[j]]
    candidates = iter(np.eye(m))
    for j in range(q.shape[1]):
        if keep[j]:
            continue
        while True:
            v = next(candidates).copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                break
        v /= nv
        q[:, j] = v
        basis.append(v)
    return q


def _jacobi_tall(a: np.ndarray) -> SvdResult:
    # One-sided (Hestenes) Jacobi on the columns of a tall matrix.
    a = a.copy()
    n = a.shape[1]
    v = np.eye(n)
    # columns this far below the Frobenius norm are numerically zero
    floor = 1e-15 * np.sqrt(np.sum(a * a))
    off = 0.0
    for _ in range(SVD_MAX_SWEEPS):
        off = 0.0
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ai = a[:, i]
                aj = a[:, j]
                ni = np.sqrt(ai @ ai)
                nj = np.sqrt(aj @ aj)
                if ni <= floor or nj <= floor:
                    continue
                gamma = ai @ aj
                c_rel = abs(gamma) / ni / nj
                off = max(off, c_rel)
                if c_rel <= SVD_TOL:
                    continue
                rotated = True
                zeta = (nj - ni) * (nj + ni) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.hypot(1.0, zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                a[:, i], a[:, j] = c * ai - s * aj, s * ai + c * aj
                vi = v[:, i].copy()
                v[:, i], v[:, j] = c * vi - s * v[:, j], s * vi + c * v[:, j]
        if not rotated:
            break
    else:
        raise NumericError(
            f"Jacobi SVD did not converge in {SVD_MAX_SWEEPS} sweeps "
            f"(max off-diagonal residual {off:.3e})"
        )
    sigma = np.sqrt(np.einsum("ij,ij->j", a, a))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    a = a[:, order]
    v = v[:, order]
    keep = sigma > floor
    u = np.zeros_like(a)
    u[:, keep] = a[:, keep] / sigma[keep]
    sigma = np.where(keep, sigma, 0.0)
    if not np.all(keep):
        u = _complete_orthonormal(u, keep)
    return SvdResult(u=u, sigma=sigma, vt=v.T.copy())


def svd(w: np.ndarray) -> SvdResult:
    """Thin singular value decomposition by one-sided Jacobi rotations.

    Singular values come back non-increasing. Raises :class:`NumericError`
    if the off-diagonal residual is still above tolerance after
    ``SVD_MAX_SWEEPS`` sweeps.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or min(w.shape) < 1:
        raise DimensionError(f"svd needs a non-empty matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise NumericError("svd input contains non-finite values")
    scale = float(np.max(np.abs(w)))
    if scale == 0.0:
        scale = 1.0
    if w.shape[0] >= w.shape[1]:
        res = _jacobi_tall(w / scale)
        return SvdResult(u=res.u, sigma=res.sigma * scale, vt=res.vt)
    res = _jacobi_tall(w.T / scale)
    return SvdResult(u=res.vt.T.copy(), sigma=res.sigma * scale, vt=res.u.T.copy())


# ---------------------------------------------------------------------------
# Norms


def frobenius_sq(t) -> float:
    t = np.asarray(t, dtype=np.float64)
    return float(np.sum(t * t))


def l1_norm(t) -> float:
    return float(np.sum(np.abs(np.asarray(t, dtype=np.float64))))


def nuclear_norm(w) -> float:
    return float(np.sum(svd(w).sigma))


# ---------------------------------------------------------------------------
# Convolution


def _per_axis(value, d: int, name: str) -> tuple[int, ...]:
    if np.isscalar(value):
        value = (int(value),) * d
    value = tuple(int(v) for v in value)
    if len(value) != d:
        raise DimensionError(f"{name} needs {d} entries, got {value}")
    if any(v <= 0 for v in value):
        raise DimensionError(f"{name} must be positive, got {value}")
    return value


def conv_output_extent(in_extent, kernel, stride) -> tuple[int, ...]:
    return tuple((i - k) // s + 1 for i, k, s in zip(in_extent, kernel, stride))


def _conv_prepare(x, filters, stride):
    x = np.asarray(x, dtype=np.float64)
    filters = np.asarray(filters, dtype=np.float64)
    d = filters.ndim - 2
    if d < 1:
        raise DimensionError(f"filters must be (out, in, *kernel), got {filters.shape}")
    if x.ndim == d + 1:
        batched = False
        x = x[None]
    elif x.ndim == d + 2:
        batched = True
    else:
        raise DimensionError(
            f"input {x.shape} does not match {d}-D filters {filters.shape}"
        )
    if x.shape[1] != filters.shape[1]:
        raise DimensionError(
            f"input has {x.shape[1]} channels, filters {filters.shape} expect {filters.shape[1]}"
        )
    kernel = filters.shape[2:]
    if any(k > i for k, i in zip(kernel, x.shape[2:])):
        raise DimensionError(f"kernel {kernel} larger than input extent {x.shape[2:]}")
    stride = _per_axis(stride, d, "stride")
    return x, filters, d, kernel, stride, batched


def _windows(x, window, stride, d):
    axes = tuple(range(x.ndim - d, x.ndim))
    win = sliding_window_view(x, window, axis=axes)
    sl = (Ellipsis,) + tuple(slice(None, None, s) for s in stride) + (slice(None),) * d
    return win[sl]


def conv_forward(x, filters, stride=1) -> np.ndarray:
    """Valid multi-channel cross-correlation.

    Output extent per spatial axis is ``(in - kernel) // stride + 1``.
    """
    x, filters, d, kernel, stride, batched = _conv_prepare(x, filters, stride)
    win = _windows(x, kernel, stride, d)  # (N, C, *S', *K)
    win_axes = [1] + list(range(2 + d, 2 + 2 * d))
    out = np.tensordot(win, filters, axes=(win_axes, [1] + list(range(2, 2 + d))))
    out = np.moveaxis(out, -1, 1)
    return np.ascontiguousarray(out if batched else out[0])


def conv_backward(x, filters, upstream, stride=1):
    """Adjoint of :func:`conv_forward`.

    Returns
    -------
    grad_input, grad_filters : ndarray
        Gradients of ``<conv_forward(x, filters), upstream>`` with respect to
        ``x`` and ``filters``; same shapes as those arguments.
    """
    x, filters, d, kernel, stride, batched = _conv_prepare(x, filters, stride)
    upstream = np.asarray(upstream, dtype=np.float64)
    if not batched:
        upstream = upstream[None]
    out_extent = conv_output_extent(x.shape[2:], kernel, stride)
    expected = (x.shape[0], filters.shape[0]) + out_extent
    if upstream.shape != expected:
        raise DimensionError(
            f"upstream shape {upstream.shape[int(not batched):]} does not match "
            f"conv output {expected[int(not batched):]}"
        )
    win = _windows(x, kernel, stride, d)
    spatial = list(range(2, 2 + d))
    grad_filters = np.tensordot(upstream, win, axes=([0] + spatial, [0] + spatial))

    grad_input = np.zeros_like(x)
    for offset in itertools.product(*(range(k) for k in kernel)):
        sl = tuple(
            slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_extent)
        )
        w = filters[(slice(None), slice(None)) + offset]  # (O, C)
        contrib = np.tensordot(upstream, w, axes=([1], [0]))  # (N, *S', C)
        grad_input[(slice(None), slice(None)) + sl] += np.moveaxis(contrib, -1, 1)
    if not batched:
        grad_input = grad_input[0]
    return grad_input, np.ascontiguousarray(grad_filters)


# ---------------------------------------------------------------------------
# Max pooling


@dataclass(frozen=True)
class PoolRecord:
    """Pooled values plus, for each output entry, the flat index into the
    pooled input array of the element that won the max."""

    output: np.ndarray
    argmax_index: np.ndarray


def maxpool_forward(x, window, stride, spatial_ndim: int | None = None) -> PoolRecord:
    """Max-pool the trailing ``spatial_ndim`` axes (default: all but the first).

    Windows are taken at valid positions only.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.ndim - 1 if spatial_ndim is None else int(spatial_ndim)
    if d < 1 or d > x.ndim:
        raise DimensionError(f"cannot pool {d} spatial axes of a {x.ndim}-D input")
    window = _per_axis(window, d, "window")
    stride = _per_axis(stride, d, "stride")
    extent = x.shape[x.ndim - d:]
    if any(w > e for w, e in zip(window, extent)):
        raise DimensionError(f"pool window {window} larger than input extent {extent}")
    win = _windows(x, window, stride, d)
    lead = win.shape[: win.ndim - d]
    flat_vals = win.reshape(lead + (-1,))
    local = np.argmax(flat_vals, axis=-1)[..., None]
    idx = np.arange(x.size, dtype=np.int64).reshape(x.shape)
    flat_idx = _windows(idx, window, stride, d).reshape(lead + (-1,))
    output = np.take_along_axis(flat_vals, local, axis=-1)[..., 0]
    argmax = np.take_along_axis(flat_idx, local, axis=-1)[..., 0]
    return PoolRecord(output=np.ascontiguousarray(output), argmax_index=argmax)


def maxpool_backward(record: PoolRecord, upstream, input_shape) -> np.ndarray:
    """Route ``upstream`` back to the argmax positions recorded by the forward pass."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != record.output.shape:
        raise DimensionError(
            f"upstream shape {upstream.shape} does not match pool output {record.output.shape}"
        )
    input_shape = tuple(int(s) for s in input_shape)
    grad = np.zeros(int(np.prod(input_shape)), dtype=np.float64)
    np.add.at(grad, record.argmax_index.ravel(), upstream.ravel())
    return grad.reshape(input_shape)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)
