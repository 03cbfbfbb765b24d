"""Differentiable kernels.

The named primitives (``PRIMITIVES`` / ``apply_primitive``) are the public
layer vocabulary; the remaining kernels (mul, exp, log, gathers, ...) exist
because the composite losses built on top need them. Every kernel here is
covered by the finite-difference suite.

Convolutions operate on single images laid out channel-first ``(C, H, W)``
with "same" zero padding, so spatial extent is preserved.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, make_result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        values = a.values + b.values
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(out: Tensor) -> None:
        a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        b.accumulate_grad(_unbroadcast(out.grad, b.shape))

    return make_result(values, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        values = a.values - b.values
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(out: Tensor) -> None:
        a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        b.accumulate_grad(-_unbroadcast(out.grad, b.shape))

    return make_result(values, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        values = a.values * b.values
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(out: Tensor) -> None:
        a.accumulate_grad(_unbroadcast(out.grad * b.values, a.shape))
        b.accumulate_grad(_unbroadcast(out.grad * a.values, b.shape))

    return make_result(values, (a, b), bwd)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def bwd(out: Tensor) -> None:
        x.accumulate_grad(out.grad * factor)

    return make_result(x.values * factor, (x,), bwd)


def shift(x: Tensor, offset) -> Tensor:
    """Add a constant (scalar or array); gradient passes through unchanged."""
    offset = np.asarray(offset, dtype=np.float64)

    def bwd(out: Tensor) -> None:
        x.accumulate_grad(_unbroadcast(out.grad, x.shape))

    return make_result(x.values + offset, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0.0

    def bwd(out: Tensor) -> None:
        x.accumulate_grad(out.grad * mask)

    return make_result(np.where(mask, x.values, 0.0), (x,), bwd)


def exp(x: Tensor) -> Tensor:
    values = np.exp(x.values)

    def bwd(out: Tensor) -> None:
        x.accumulate_grad(out.grad * values)

    return make_result(values, (x,), bwd)


def log(x: Tensor) -> Tensor:
    def bwd(out: Tensor) -> None:
        x.accumulate_grad(out.grad / x.values)

    return make_result(np.log(x.values), (x,), bwd)


def square(x: Tensor) -> Tensor:
    def bwd(out: Tensor) -> None:
        x.accumulate_grad(out.grad * 2.0 * x.values)

    return make_result(x.values * x.values, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions and reshaping


def reduce_mean(x: Tensor) -> Tensor:
    n = x.values.size

    def bwd(out: Tensor) -> None:
        x.accumulate_grad(np.full_like(x.values, float(out.grad) / n))

    return make_result(np.asarray(x.values.mean()), (x,), bwd)


def reduce_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    values = x.values.sum(axis=axis, keepdims=keepdims)

    def bwd(out: Tensor) -> None:
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate_grad(np.broadcast_to(g, x.shape).copy())

    return make_result(np.asarray(values), (x,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    values = x.values.reshape(shape)

    def bwd(out: Tensor) -> None:
        x.accumulate_grad(out.grad.reshape(x.shape))

    return make_result(values, (x,), bwd)


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")

    def bwd(out: Tensor) -> None:
        x.accumulate_grad(out.grad.T)

    return make_result(x.values.T.copy(), (x,), bwd)


def squared_error(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences, reduced to a scalar."""
    if a.shape != b.shape:
        raise ShapeError(f"squared_error: shapes {a.shape} and {b.shape} differ")
    diff = a.values - b.values

    def bwd(out: Tensor) -> None:
        g = 2.0 * float(out.grad) * diff
        a.accumulate_grad(g)
        b.accumulate_grad(-g)

    return make_result(np.asarray((diff * diff).sum()), (a, b), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim not in (1, 2) or b.values.ndim not in (1, 2):
        raise ShapeError(
            f"matmul: expected 1-D or 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner extents differ, {a.shape} vs {b.shape}")
    values = a.values @ b.values

    def bwd(out: Tensor) -> None:
        g = out.grad
        if a.values.ndim == 1 and b.values.ndim == 1:
            a.accumulate_grad(float(g) * b.values)
            b.accumulate_grad(float(g) * a.values)
        elif a.values.ndim == 1:
            a.accumulate_grad(b.values @ g)
            b.accumulate_grad(np.outer(a.values, g))
        elif b.values.ndim == 1:
            a.accumulate_grad(np.outer(g, b.values))
            b.accumulate_grad(a.values.T @ g)
        else:
            a.accumulate_grad(g @ b.values.T)
            b.accumulate_grad(a.values.T @ g)

    return make_result(np.asarray(values), (a, b), bwd)


# ---------------------------------------------------------------------------
# softmax family (stable, last-axis)


def softmax(x: Tensor) -> Tensor:
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    values = e / e.sum(axis=-1, keepdims=True)

    def bwd(out: Tensor) -> None:
        inner = (out.grad * values).sum(axis=-1, keepdims=True)
        x.accumulate_grad(values * (out.grad - inner))

    return make_result(values, (x,), bwd)


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    values = shifted - lse
    probs = np.exp(values)

    def bwd(out: Tensor) -> None:
        x.accumulate_grad(out.grad - probs * out.grad.sum(axis=-1, keepdims=True))

    return make_result(values, (x,), bwd)


def logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis."""
    m = x.values.max(axis=-1, keepdims=True)
    e = np.exp(x.values - m)
    s = e.sum(axis=-1, keepdims=True)
    values = (m + np.log(s)).squeeze(-1)
    probs = e / s

    def bwd(out: Tensor) -> None:
        x.accumulate_grad(np.expand_dims(out.grad, -1) * probs)

    return make_result(np.asarray(values), (x,), bwd)


# ---------------------------------------------------------------------------
# gathers


def take(x: Tensor, indices) -> Tensor:
    """Select rows (axis 0); gradient scatter-adds back."""
    idx = np.asarray(indices, dtype=np.intp)
    values = x.values[idx]

    def bwd(out: Tensor) -> None:
        g = np.zeros_like(x.values)
        np.add.at(g, idx, out.grad)
        x.accumulate_grad(g)

    return make_result(values, (x,), bwd)


def take_per_row(x: Tensor, column_indices) -> Tensor:
    """out[i] = x[i, column_indices[i]] for a 2-D input."""
    if x.values.ndim != 2:
        raise ShapeError(f"take_per_row: expected a matrix, got shape {x.shape}")
    idx = np.asarray(column_indices, dtype=np.intp)
    if idx.shape != (x.shape[0],):
        raise ShapeError(
            f"take_per_row: need {x.shape[0]} indices, got shape {idx.shape}")
    rows = np.arange(x.shape[0])
    values = x.values[rows, idx]

    def bwd(out: Tensor) -> None:
        g = np.zeros_like(x.values)
        np.add.at(g, (rows, idx), out.grad)
        x.accumulate_grad(g)

    return make_result(values, (x,), bwd)


def gather_rows_by_index(x: Tensor, indices: np.ndarray) -> Tensor:
    """out[b, j] = x[b, indices[b, j]] for a matrix and per-row index rows."""
    if x.values.ndim != 2:
        raise ShapeError(
            f"gather_rows_by_index: expected a matrix, got shape {x.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape[0] != x.shape[0]:
        raise ShapeError(
            f"gather_rows_by_index: {x.shape[0]} rows but index shape {idx.shape}")
    values = np.take_along_axis(x.values, idx, axis=1)

    def bwd(out: Tensor) -> None:
        g = np.zeros_like(x.values)
        rows = np.repeat(np.arange(idx.shape[0]), idx.shape[1])
        np.add.at(g, (rows, idx.ravel()), out.grad.ravel())
        x.accumulate_grad(g)

    return make_result(values, (x,), bwd)


def sequential_choice_log_probs(ordered_logits: Tensor) -> Tensor:
    """Row-wise log-probability of picking columns left to right.

    Row b of the input holds the logits already arranged in pick order; the
    result is sum_k [x[b,k] - log sum_{j >= k} exp(x[b,j])], the chance of
    drawing that exact sequence by repeated softmax without replacement.
    """
    if ordered_logits.values.ndim != 2:
        raise ShapeError(
            f"sequential_choice_log_probs: expected a matrix, got shape "
            f"{ordered_logits.shape}")
    x = ordered_logits.values
    # stable suffix log-sum-exp per row, right to left
    suffix = np.logaddexp.accumulate(x[:, ::-1], axis=1)[:, ::-1]
    values = (x - suffix).sum(axis=1)
    # d/dx[b,k] = 1 - exp(x[b,k]) * sum_{m <= k} exp(-suffix[b,m]), computed
    # in log space: every summand x[b,k] - suffix[b,m] is <= 0 for m <= k
    prefix = np.logaddexp.accumulate(-suffix, axis=1)
    jacobian = 1.0 - np.exp(x + prefix)

    def bwd(out: Tensor) -> None:
        ordered_logits.accumulate_grad(out.grad[:, None] * jacobian)

    return make_result(values, (ordered_logits,), bwd)


# ---------------------------------------------------------------------------
# channel ops on (C, H, W) maps


def _check_image(x: Tensor, op: str) -> None:
    if x.values.ndim not in (3, 4):
        raise ShapeError(
            f"{op}: expected a (C, H, W) image or a batch of them, "
            f"got shape {x.shape}")


def _check_groups(channels: int, groups: int, op: str) -> None:
    if groups < 1 or channels % groups != 0:
        raise ShapeError(
            f"{op}: groups={groups} does not divide channels={channels}")


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Destination index per source channel: c -> (c mod G)*(C/G) + c//G."""
    c = np.arange(channels)
    return (c % groups) * (channels // groups) + c // groups


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    _check_image(x, "channel_shuffle")
    channels = x.shape[-3]
    _check_groups(channels, groups, "channel_shuffle")
    perm = shuffle_permutation(channels, groups)
    values = np.take(x.values, np.argsort(perm), axis=-3)

    def bwd(out: Tensor) -> None:
        x.accumulate_grad(np.take(out.grad, perm, axis=-3))

    return make_result(values, (x,), bwd)


def channel_group_max(x: Tensor, groups: int) -> Tensor:
    """Per-group max over channels; ties route gradient to the lowest index."""
    _check_image(x, "channel_group_max")
    lead, (channels, height, width) = x.shape[:-3], x.shape[-3:]
    _check_groups(channels, groups, "channel_group_max")
    per_group = channels // groups
    grouped = x.values.reshape(*lead, groups, per_group, height, width)
    winners = np.expand_dims(grouped.argmax(axis=-3), -3)
    values = np.take_along_axis(grouped, winners, axis=-3).squeeze(-3)

    def bwd(out: Tensor) -> None:
        g = np.zeros_like(grouped)
        np.put_along_axis(g, winners, np.expand_dims(out.grad, -3), axis=-3)
        x.accumulate_grad(g.reshape(x.shape))

    return make_result(values, (x,), bwd)


def channel_group_avg(x: Tensor, groups: int) -> Tensor:
    _check_image(x, "channel_group_avg")
    lead, (channels, height, width) = x.shape[:-3], x.shape[-3:]
    _check_groups(channels, groups, "channel_group_avg")
    per_group = channels // groups
    grouped = x.values.reshape(*lead, groups, per_group, height, width)
    values = grouped.mean(axis=-3)

    def bwd(out: Tensor) -> None:
        g = np.repeat(np.expand_dims(out.grad, -3) / per_group, per_group,
                      axis=-3)
        x.accumulate_grad(g.reshape(x.shape))

    return make_result(values, (x,), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_image(a, "concat_channels")
    if a.values.ndim != b.values.ndim or a.shape[:-3] != b.shape[:-3] \
            or a.shape[-2:] != b.shape[-2:]:
        raise ShapeError(
            f"concat_channels: extents differ, {a.shape} vs {b.shape}")
    boundary = a.shape[-3]

    def bwd(out: Tensor) -> None:
        lead = (slice(None),) * (out.grad.ndim - 3)
        a.accumulate_grad(out.grad[lead + (slice(None, boundary),)])
        b.accumulate_grad(out.grad[lead + (slice(boundary, None),)])

    return make_result(np.concatenate([a.values, b.values], axis=-3),
                       (a, b), bwd)


# ---------------------------------------------------------------------------
# convolutions ("same" zero padding)


def _reduce_axes(ndim: int) -> tuple[int, ...]:
    """Every axis except the channel axis (-3): batch lead plus spatial."""
    return tuple(range(ndim - 3)) + (ndim - 2, ndim - 1)


def conv2d_1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    _check_image(x, "conv2d_1x1")
    if weight.values.ndim != 2 or weight.shape[1] != x.shape[-3]:
        raise ShapeError(
            f"conv2d_1x1: weight {weight.shape} does not map input channels "
            f"{x.shape[-3]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"conv2d_1x1: bias {bias.shape} does not match out channels "
            f"{weight.shape[0]}")
    values = np.einsum("oi,...ihw->...ohw", weight.values, x.values)
    values += bias.values[:, None, None]

    def bwd(out: Tensor) -> None:
        spec = "bohw,bihw->oi" if out.grad.ndim == 4 else "ohw,ihw->oi"
        x.accumulate_grad(np.einsum("oi,...ohw->...ihw", weight.values,
                                    out.grad))
        weight.accumulate_grad(np.einsum(spec, out.grad, x.values))
        bias.accumulate_grad(out.grad.sum(axis=_reduce_axes(out.grad.ndim)))

    return make_result(values, (x, weight, bias), bwd)


def conv2d_3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return _conv2d_full(x, weight, bias, kernel=3, op="conv2d_3x3")


def _pad_spatial(values: np.ndarray, pad: int) -> np.ndarray:
    width = [(0, 0)] * (values.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(values, width)


def _conv2d_full(x: Tensor, weight: Tensor, bias: Tensor, kernel: int,
                 op: str) -> Tensor:
    _check_image(x, op)
    if weight.values.ndim != 4 or weight.shape[1] != x.shape[-3] \
            or weight.shape[2:] != (kernel, kernel):
        raise ShapeError(
            f"{op}: weight {weight.shape} does not match input channels "
            f"{x.shape[-3]} and kernel {kernel}x{kernel}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"{op}: bias {bias.shape} does not match out channels {weight.shape[0]}")
    pad = kernel // 2
    height, width = x.shape[-2:]
    xpad = _pad_spatial(x.values, pad)
    values = np.zeros(x.shape[:-3] + (weight.shape[0], height, width))
    for di in range(kernel):
        for dj in range(kernel):
            values += np.einsum("oi,...ihw->...ohw",
                                weight.values[:, :, di, dj],
                                xpad[..., di:di + height, dj:dj + width])
    values += bias.values[:, None, None]

    def bwd(out: Tensor) -> None:
        gx = np.zeros_like(xpad)
        gw = np.zeros_like(weight.values)
        spec = "bohw,bihw->oi" if out.grad.ndim == 4 else "ohw,ihw->oi"
        for di in range(kernel):
            for dj in range(kernel):
                patch = xpad[..., di:di + height, dj:dj + width]
                gw[:, :, di, dj] = np.einsum(spec, out.grad, patch)
                gx[..., di:di + height, dj:dj + width] += np.einsum(
                    "oi,...ohw->...ihw", weight.values[:, :, di, dj], out.grad)
        x.accumulate_grad(gx[..., pad:pad + height, pad:pad + width])
        weight.accumulate_grad(gw)
        bias.accumulate_grad(out.grad.sum(axis=_reduce_axes(out.grad.ndim)))

    return make_result(values, (x, weight, bias), bwd)


def depthwise_conv2d_5x5(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    _check_image(x, "depthwise_conv2d_5x5")
    channels = x.shape[-3]
    if weight.shape != (channels, 5, 5):
        raise ShapeError(
            f"depthwise_conv2d_5x5: weight {weight.shape} does not match "
            f"(channels={channels}, 5, 5)")
    if bias.shape != (channels,):
        raise ShapeError(
            f"depthwise_conv2d_5x5: bias {bias.shape} does not match channels "
            f"{channels}")
    pad = 2
    height, width = x.shape[-2:]
    xpad = _pad_spatial(x.values, pad)
    values = np.zeros_like(x.values)
    for di in range(5):
        for dj in range(5):
            values += weight.values[:, di, dj][:, None, None] \
                * xpad[..., di:di + height, dj:dj + width]
    values += bias.values[:, None, None]

    def bwd(out: Tensor) -> None:
        gx = np.zeros_like(xpad)
        gw = np.zeros_like(weight.values)
        reduce_axes = _reduce_axes(out.grad.ndim)
        for di in range(5):
            for dj in range(5):
                patch = xpad[..., di:di + height, dj:dj + width]
                gw[:, di, dj] = (out.grad * patch).sum(axis=reduce_axes)
                gx[..., di:di + height, dj:dj + width] += \
                    weight.values[:, di, dj][:, None, None] * out.grad
        x.accumulate_grad(gx[..., pad:pad + height, pad:pad + width])
        weight.accumulate_grad(gw)
        bias.accumulate_grad(out.grad.sum(axis=reduce_axes))

    return make_result(values, (x, weight, bias), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """weight @ x + bias for a vector input, the dense-layer staple."""
    return add(matmul(weight, x), bias)


# ---------------------------------------------------------------------------
# named-primitive dispatch

PRIMITIVES = (
    "matmul", "conv2d_1x1", "conv2d_3x3", "depthwise_conv2d_5x5", "relu",
    "softmax", "log_softmax", "channel_shuffle", "channel_group_max",
    "channel_group_avg", "concat_channels", "add", "scale", "reduce_mean",
    "squared_error",
)


def apply_primitive(kind: str, inputs: list[Tensor], *, groups: int | None = None,
                    factor: float | None = None) -> Tensor:
    """Dispatch a named primitive; shape errors name the op and extents."""
    def need(n: int) -> None:
        if len(inputs) != n:
            raise ShapeError(f"{kind}: expected {n} inputs, got {len(inputs)}")

    if kind == "matmul":
        need(2)
        return matmul(inputs[0], inputs[1])
    if kind == "conv2d_1x1":
        need(3)
        return conv2d_1x1(*inputs)
    if kind == "conv2d_3x3":
        need(3)
        return conv2d_3x3(*inputs)
    if kind == "depthwise_conv2d_5x5":
        need(3)
        return depthwise_conv2d_5x5(*inputs)
    if kind == "relu":
        need(1)
        return relu(inputs[0])
    if kind == "softmax":
        need(1)
        return softmax(inputs[0])
    if kind == "log_softmax":
        need(1)
        return log_softmax(inputs[0])
    if kind in ("channel_shuffle", "channel_group_max", "channel_group_avg"):
        need(1)
        if groups is None:
            raise ShapeError(f"{kind}: groups not given")
        fn = {"channel_shuffle": channel_shuffle,
              "channel_group_max": channel_group_max,
              "channel_group_avg": channel_group_avg}[kind]
        return fn(inputs[0], groups)
    if kind == "concat_channels":
        need(2)
        return concat_channels(inputs[0], inputs[1])
    if kind == "add":
        need(2)
        return add(inputs[0], inputs[1])
    if kind == "scale":
        need(1)
        if factor is None:
            raise ShapeError("scale: factor not given")
        return scale(inputs[0], factor)
    if kind == "reduce_mean":
        need(1)
        return reduce_mean(inputs[0])
    if kind == "squared_error":
        need(2)
        return squared_error(inputs[0], inputs[1])
    raise ShapeError(f"unknown primitive {kind!r}")
