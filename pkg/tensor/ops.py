"""
Differentiable tensor operations.
Each op computes its forward result with numpy and registers a VJP via emit().
"""

from enum import Enum
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

import settings
from errors import ConfigError, ShapeError
from tensor.core import Tensor, emit

Scalar = Union[int, float]
Operand = Union[Tensor, Scalar, np.ndarray]
Pair = Union[int, Tuple[int, int]]


class Mode(str, Enum):
    """Forward mode; only batch normalization behaves differently."""
    TRAIN = "train"
    INFER = "infer"


class NormKind(str, Enum):
    BATCH = "batch"
    LAYER = "layer"


# ==================== HELPERS ====================

def as_tensor(value: Operand, like: Optional[Tensor] = None) -> Tensor:
    """Lift constants to tensors, matching the dtype of a reference tensor."""
    if isinstance(value, Tensor):
        return value
    if like is not None:
        return Tensor.wrap(np.asarray(value, dtype=like.dtype))
    return Tensor(value)


def _binary(a: Operand, b: Operand) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def unbroadcast(grad: np.ndarray, dims: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's dims."""
    while grad.ndim > len(dims):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(dims):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(value: Pair) -> Tuple[int, int]:
    if isinstance(value, (tuple, list)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form stays finite for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ==================== ELEMENTWISE ====================

def add(a: Operand, b: Operand) -> Tensor:
    a, b = _binary(a, b)
    return emit("add", a.data + b.data, (a, b),
                lambda g: (unbroadcast(g, a.dims), unbroadcast(g, b.dims)))


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _binary(a, b)
    return emit("sub", a.data - b.data, (a, b),
                lambda g: (unbroadcast(g, a.dims), unbroadcast(-g, b.dims)))


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _binary(a, b)
    return emit("mul", a.data * b.data, (a, b),
                lambda g: (unbroadcast(g * b.data, a.dims), unbroadcast(g * a.data, b.dims)))


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _binary(a, b)
    out = a.data / b.data
    return emit("div", out, (a, b),
                lambda g: (unbroadcast(g / b.data, a.dims),
                           unbroadcast(-g * out / b.data, b.dims)))


def neg(x: Tensor) -> Tensor:
    return emit("neg", -x.data, (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return emit("sqrt", out, (x,), lambda g: (g / (2.0 * out),))


def atan(x: Tensor) -> Tensor:
    return emit("atan", np.arctan(x.data), (x,), lambda g: (g / (1.0 + x.data ** 2),))


def power(x: Tensor, exponent: float) -> Tensor:
    return emit("power", x.data ** exponent, (x,),
                lambda g: (g * exponent * x.data ** (exponent - 1),))


def maximum(a: Operand, b: Operand) -> Tensor:
    """Elementwise max; ties route the gradient to a."""
    a, b = _binary(a, b)
    take_a = a.data >= b.data
    return emit("maximum", np.where(take_a, a.data, b.data), (a, b),
                lambda g: (unbroadcast(g * take_a, a.dims), unbroadcast(g * ~take_a, b.dims)))


def minimum(a: Operand, b: Operand) -> Tensor:
    """Elementwise min; ties route the gradient to a."""
    a, b = _binary(a, b)
    take_a = a.data <= b.data
    return emit("minimum", np.where(take_a, a.data, b.data), (a, b),
                lambda g: (unbroadcast(g * take_a, a.dims), unbroadcast(g * ~take_a, b.dims)))


def activation(x: Tensor, kind: str) -> Tensor:
    """
    Elementwise nonlinearity.

    Args:
        x: Input tensor
        kind: One of "silu", "relu", "sigmoid"

    Returns:
        Tensor of the same dims
    """
    if kind == "silu":
        s = _sigmoid(x.data)
        return emit("silu", x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))
    if kind == "relu":
        mask = x.data > 0
        return emit("relu", x.data * mask, (x,), lambda g: (g * mask,))
    if kind == "sigmoid":
        s = _sigmoid(x.data)
        return emit("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))
    raise ConfigError(f"unknown activation kind '{kind}'")


def silu(x: Tensor) -> Tensor:
    return activation(x, "silu")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


# ==================== REDUCTIONS & SHAPE ====================

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.dims).copy(),)

    return emit("sum", np.asarray(out), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.dims[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


def reshape(x: Tensor, dims: Sequence[int]) -> Tensor:
    return emit("reshape", x.data.reshape(dims), (x,), lambda g: (g.reshape(x.dims),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return emit("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along one axis (channels by default)."""
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    sizes = [t.dims[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum(sizes)[:-1]
    return emit("concat", out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)))


def pad(x: Tensor, widths: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero-pad; widths holds a (before, after) pair per axis."""
    widths = [tuple(w) for w in widths]
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.dims))
    return emit("pad", np.pad(x.data, widths), (x,), lambda g: (g[crop],))


def index(x: Tensor, idx) -> Tensor:
    """Basic or fancy indexing; gradients scatter-add back into the source."""
    out = np.asarray(x.data[idx])

    def vjp(g):
        grad = np.zeros(x.dims, dtype=g.dtype)
        np.add.at(grad, idx, g)
        return (grad,)

    return emit("index", out, (x,), vjp)


# ==================== LINEAR ALGEBRA ====================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes; leading axes broadcast.

    Raises:
        ShapeError: If either operand has rank < 2 or the inner extents differ
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got dims {a.dims} and {b.dims}")
    if a.dims[-1] != b.dims[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.dims} @ {b.dims}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.dims), unbroadcast(gb, b.dims)

    return emit("matmul", out, (a, b), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return emit("softmax", out, (x,),
                lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against fixed targets."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return emit("bce", out, (logits,), lambda g: (g * (_sigmoid(z) - t),))


# ==================== CONVOLUTION & POOLING ====================

def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
    input: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: Pair = 1,
    pad: Pair = 0,
    groups: int = 1,
    algo: Optional[str] = None,
) -> Tensor:
    """
    Grouped 2-D cross-correlation with zero padding.

    Args:
        input: (N, Cin, H, W)
        weight: (Cout, Cin/groups, Kh, Kw)
        bias: Optional (Cout,)
        stride: Step per spatial axis
        pad: Zero rows/columns added on each side per spatial axis
        groups: Channel groups (Cin for depthwise)
        algo: "im2col" (patch matrix) or "direct" (per-tap loops); defaults
            to settings.CONV_ALGO. Both paths share one backward.

    Returns:
        (N, Cout, Ho, Wo) with Ho = (H + 2ph - Kh) // sh + 1

    Raises:
        ShapeError: On rank, channel or group mismatch, or a non-positive output extent
    """
    (sh, sw), (ph, pw) = _pair(stride), _pair(pad)
    if input.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and weight, got {input.dims} and {weight.dims}")
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ShapeError(f"conv2d stride must be >= 1 and pad >= 0, got stride={stride} pad={pad}")
    n, cin, h, w = input.dims
    cout, cg, kh, kw = weight.dims
    if groups < 1 or cin % groups or cout % groups or cg * groups != cin:
        raise ShapeError(f"conv2d channels {cin} do not fit weight {weight.dims} with groups={groups}")
    if bias is not None and bias.dims != (cout,):
        raise ShapeError(f"conv2d bias dims {bias.dims} != ({cout},)")
    ho, wo = conv_output_extent(h, kh, sh, ph), conv_output_extent(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent ({ho}, {wo}) is not positive for input {input.dims}")

    og = cout // groups
    xp = np.pad(input.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    xg = xp.reshape(n, groups, cg, h + 2 * ph, w + 2 * pw)
    wg = weight.data.reshape(groups, og, cg, kh, kw)

    def tap(i: int, j: int):
        return (Ellipsis, slice(i, i + sh * (ho - 1) + 1, sh), slice(j, j + sw * (wo - 1) + 1, sw))

    if (algo or settings.CONV_ALGO) == "direct":
        out = np.zeros((n, groups, og, ho, wo), dtype=np.result_type(xg, wg))
        for i in range(kh):
            for j in range(kw):
                out += np.einsum("ngchw,goc->ngohw", xg[tap(i, j)], wg[..., i, j])
    else:
        windows = sliding_window_view(xg, (kh, kw), axis=(3, 4))[:, :, :, ::sh, ::sw]
        cols = windows.transpose(0, 1, 3, 4, 2, 5, 6).reshape(n, groups, ho * wo, cg * kh * kw)
        wmat = wg.reshape(groups, og, cg * kh * kw).transpose(0, 2, 1)
        out = np.matmul(cols, wmat[None]).transpose(0, 1, 3, 2).reshape(n, groups, og, ho, wo)
    out = out.reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def vjp(g):
        g5 = g.reshape(n, groups, og, ho, wo)
        gx = np.zeros_like(xg, dtype=g.dtype)
        gw = np.zeros_like(wg, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                sl = tap(i, j)
                gw[..., i, j] = np.einsum("ngohw,ngchw->goc", g5, xg[sl])
                gx[sl] += np.einsum("ngohw,goc->ngchw", g5, wg[..., i, j])
        gx = gx.reshape(xp.shape)[:, :, ph:ph + h, pw:pw + w]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw.reshape(weight.dims), gb

    return emit("conv2d", out, (input, weight, bias), vjp)


def unfold(x: Tensor, kernel: int, padding: int) -> Tensor:
    """
    Stride-1 patch extraction.

    Returns:
        (N, C, K*K, Ho, Wo); entry [n, c, i*K + j, y, x] reads the zero-padded
        input at (y + i, x + j)
    """
    n, c, h, w = x.dims
    ho = conv_output_extent(h, kernel, 1, padding)
    wo = conv_output_extent(w, kernel, 1, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"unfold window {kernel} does not fit input {x.dims}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    out = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c, kernel * kernel, ho, wo)

    def vjp(g):
        gx = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i:i + ho, j:j + wo] += g[:, :, i * kernel + j]
        return (gx[:, :, padding:padding + h, padding:padding + w],)

    return emit("unfold", out, (x,), vjp)


def max_pool2d(input: Tensor, k: Pair = 2, stride: Optional[Pair] = None) -> Tensor:
    """
    Max pooling without padding.
    Backward routes each window's gradient to its first maximum in scan order.

    Raises:
        ShapeError: If the window is larger than the input or k/stride < 1
    """
    (kh, kw) = _pair(k)
    (sh, sw) = _pair(stride if stride is not None else k)
    if kh < 1 or kw < 1 or sh < 1 or sw < 1:
        raise ShapeError(f"max_pool2d needs k >= 1 and stride >= 1, got k={k} stride={stride}")
    n, c, h, w = input.dims
    if kh > h or kw > w:
        raise ShapeError(f"max_pool2d window ({kh}, {kw}) exceeds input {input.dims}")
    windows = sliding_window_view(input.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    ho, wo = windows.shape[2], windows.shape[3]
    flat = windows.reshape(n, c, ho, wo, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        nn, cc, yy, xx = np.indices(arg.shape)
        rows = yy * sh + arg // kw
        cols = xx * sw + arg % kw
        gx = np.zeros(input.dims, dtype=g.dtype)
        np.add.at(gx, (nn, cc, rows, cols), g)
        return (gx,)

    return emit("max_pool2d", out, (input,), vjp)


def global_avg_pool(input: Tensor) -> Tensor:
    """Mean over (H, W), keeping dims (N, C, 1, 1)."""
    if input.data.ndim != 4 or input.dims[2] * input.dims[3] < 1:
        raise ShapeError(f"global_avg_pool needs a non-empty spatial extent, got {input.dims}")
    area = input.dims[2] * input.dims[3]
    out = input.data.mean(axis=(2, 3), keepdims=True)
    return emit("global_avg_pool", out, (input,),
                lambda g: (np.broadcast_to(g / area, input.dims).copy(),))


# ==================== NORMALIZATION ====================

def normalize(
    input: Tensor,
    kind: Union[NormKind, str],
    scale: Tensor,
    shift: Tensor,
    eps: float = 1e-5,
    mode: Union[Mode, str] = Mode.TRAIN,
    running_mean: Optional[Tensor] = None,
    running_var: Optional[Tensor] = None,
    momentum: float = 0.03,
) -> Tensor:
    """
    Batch or layer normalization of an (N, C, H, W) tensor followed by a per-channel affine.

    Batch kind standardizes each channel over (N, H, W); in train mode it uses
    batch statistics and updates the running stats in place, in infer mode it
    uses the running stats. Layer kind standardizes each position's C-vector
    and ignores mode.

    Raises:
        ConfigError: If eps <= 0, or infer-mode batch norm has no running stats
        ShapeError: If scale/shift do not have length C
    """
    kind, mode = NormKind(kind), Mode(mode)
    if eps <= 0:
        raise ConfigError(f"normalize eps must be > 0, got {eps}")
    if input.data.ndim != 4:
        raise ShapeError(f"normalize expects (N, C, H, W), got {input.dims}")
    c = input.dims[1]
    if scale.dims != (c,) or shift.dims != (c,):
        raise ShapeError(f"normalize scale/shift dims {scale.dims}/{shift.dims} != ({c},)")

    x = input.data
    s = scale.data.reshape(1, c, 1, 1)
    b = shift.data.reshape(1, c, 1, 1)
    param_axes = (0, 2, 3)

    if kind is NormKind.BATCH and mode is Mode.INFER:
        if running_mean is None or running_var is None:
            raise ConfigError("infer-mode batch normalization needs running statistics")
        inv = 1.0 / np.sqrt(running_var.data.reshape(1, c, 1, 1) + eps)
        xhat = (x - running_mean.data.reshape(1, c, 1, 1)) * inv
        out = xhat * s + b
        return emit("normalize", out, (input, scale, shift),
                    lambda g: (g * s * inv,
                               (g * xhat).sum(axis=param_axes),
                               g.sum(axis=param_axes)))

    axes = param_axes if kind is NormKind.BATCH else (1,)
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * s + b

    if kind is NormKind.BATCH and running_mean is not None and running_var is not None:
        count = x.size // c
        unbiased = var.reshape(c) * (count / max(count - 1, 1))
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu.reshape(c)
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * unbiased

    def vjp(g):
        dxhat = g * s
        gx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        return gx, (g * xhat).sum(axis=param_axes), g.sum(axis=param_axes)

    return emit("normalize", out, (input, scale, shift), vjp)


def require_channels(x: Tensor, channels: int, what: str) -> None:
    if x.data.ndim != 4 or x.dims[1] != channels:
        raise ShapeError(f"{what} expects {channels} channels, got dims {x.dims}")
