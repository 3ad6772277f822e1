import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp as _logsumexp

from py_rce_detect.exception import NumericError, ShapeError
from py_rce_detect.tensor import Array, Tensor, record

PROBABILITY_FLOOR = 1e-12


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        msg = f"{op}: shapes {a.shape} and {b.shape} do not broadcast."
        raise ShapeError(msg) from e


# ============================================================================
# Elementwise arithmetic
# ============================================================================


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)
    return record("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)
    return record("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)
    return record(
        "mul",
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(x: Tensor) -> Tensor:
    return record("neg", Tensor(-x.data), (x,), lambda g: (-g,))


def scale(x: Tensor, factor: float) -> Tensor:
    return record("scale", Tensor(x.data * factor), (x,), lambda g: (g * factor,))


def shift(x: Tensor, offset: float) -> Tensor:
    return record("shift", Tensor(x.data + offset), (x,), lambda g: (g,))


def square(x: Tensor) -> Tensor:
    return record("square", Tensor(np.square(x.data)), (x,), lambda g: (2.0 * x.data * g,))


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))
    return record("exp", out, (x,), lambda g: (g * out.data,))


def tanh(x: Tensor) -> Tensor:
    out = Tensor(np.tanh(x.data))
    return record("tanh", out, (x,), lambda g: (g * (1.0 - np.square(out.data)),))


def log(x: Tensor, floor: float = PROBABILITY_FLOOR) -> Tensor:
    """Natural log of `max(x, floor)`; the gradient is zero where the floor is active."""
    clipped = np.maximum(x.data, floor)
    active = x.data >= floor
    return record("log", Tensor(np.log(clipped)), (x,), lambda g: (np.where(active, g / clipped, 0.0),))


def leaky_relu(x: Tensor, leak: float) -> Tensor:
    """Elementwise max(x, leak*x). The subgradient at 0 is `leak`."""
    if not 0.0 <= leak < 1.0:
        msg = f"Leak must be in [0, 1), got {leak}."
        raise ValueError(msg)
    positive = x.data > 0
    out = Tensor(np.where(positive, x.data, leak * x.data))
    return record("leaky_relu", out, (x,), lambda g: (np.where(positive, g, leak * g),))


# ============================================================================
# Shape and reductions
# ============================================================================


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis but the first."""
    return reshape(x, (x.shape[0], -1))


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(x.data.sum(axis=axis))

    def _backward(g: Array) -> tuple[Array]:
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return record("sum", out, (x,), _backward)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / count)


def take(x: Tensor, indices: npt.ArrayLike) -> Tensor:
    """Row-wise gather: out[n] = x[n, indices[n]] for a rank-2 `x`."""
    rows = np.arange(x.shape[0])
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(x.data[rows, idx])

    def _backward(g: Array) -> tuple[Array]:
        grad = np.zeros(x.shape)
        grad[rows, idx] = g
        return (grad,)

    return record("take", out, (x,), _backward)


def max_except(x: Tensor, indices: npt.ArrayLike) -> Tensor:
    """Row-wise max over all columns but `indices[n]`; ties go to the lowest column."""
    if x.data.ndim != 2 or x.shape[1] < 2:  # noqa: PLR2004
        msg = f"max_except needs a rank-2 tensor with at least two columns, got {x.shape}."
        raise ShapeError(msg)
    rows = np.arange(x.shape[0])
    idx = np.asarray(indices, dtype=np.int64)
    masked = x.data.copy()
    masked[rows, idx] = -np.inf
    best = np.argmax(masked, axis=1)
    out = Tensor(x.data[rows, best])

    def _backward(g: Array) -> tuple[Array]:
        grad = np.zeros(x.shape)
        grad[rows, best] = g
        return (grad,)

    return record("max_except", out, (x,), _backward)


# ============================================================================
# Linear algebra and convolution
# ============================================================================


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:  # noqa: PLR2004
        msg = f"matmul: incompatible shapes {a.shape} and {b.shape}."
        raise ShapeError(msg)
    out = Tensor(a.data @ b.data)
    return record("matmul", out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an N×C×H×W batch with K×C×h×w kernels and zero padding."""
    if x.data.ndim != 4 or kernels.data.ndim != 4:  # noqa: PLR2004
        msg = f"conv2d expects rank-4 input and kernels, got {x.shape} and {kernels.shape}."
        raise ShapeError(msg)
    if stride < 1 or padding < 0:
        msg = f"conv2d needs stride >= 1 and padding >= 0, got stride={stride}, padding={padding}."
        raise ValueError(msg)
    n, c, h, w = x.shape
    k, kc, kh, kw = kernels.shape
    if kc != c:
        msg = f"conv2d: input has {c} channels but kernels expect {kc}."
        raise ShapeError(msg)
    if kh > h + 2 * padding or kw > w + 2 * padding:
        msg = f"conv2d: kernel {kh}x{kw} is larger than padded input {h + 2 * padding}x{w + 2 * padding}."
        raise ShapeError(msg)

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    kmat = kernels.data.reshape(k, c * kh * kw)
    out = Tensor((cols @ kmat.T).reshape(n, oh, ow, k).transpose(0, 3, 1, 2))

    def _backward(g: Array) -> tuple[Array, Array]:
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, k)
        dkernels = (gmat.T @ cols).reshape(kernels.shape)
        dcols = (gmat @ kmat).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        dpadded = np.zeros(padded.shape)
        for i in range(kh):
            for j in range(kw):
                dpadded[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[..., i, j]
        return dpadded[:, :, padding : padding + h, padding : padding + w], dkernels

    return record("conv2d", out, (x, kernels), _backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping size×size max pooling; trailing rows/columns that do not fill a window are dropped."""
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    if oh == 0 or ow == 0:
        msg = f"max_pool2d: window {size} is larger than input {h}x{w}."
        raise ShapeError(msg)
    cropped = x.data[:, :, : oh * size, : ow * size]
    blocks = cropped.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, size * size)
    winner = np.argmax(blocks, axis=-1)[..., np.newaxis]
    out = Tensor(np.take_along_axis(blocks, winner, axis=-1)[..., 0])

    def _backward(g: Array) -> tuple[Array]:
        grad_blocks = np.zeros(blocks.shape)
        np.put_along_axis(grad_blocks, winner, g[..., np.newaxis], axis=-1)
        grad = grad_blocks.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, oh * size, ow * size
        )
        full = np.zeros(x.shape)
        full[:, :, : oh * size, : ow * size] = grad
        return (full,)

    return record("max_pool2d", out, (x,), _backward)


# ============================================================================
# Softmax family
# ============================================================================


def softmax(logits: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted so that shifting all logits leaves the output unchanged."""
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("softmax received non-finite logits.")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(probs)
    return record(
        "softmax",
        out,
        (logits,),
        lambda g: (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),),
    )


def logsumexp(x: Tensor) -> Tensor:
    """log Σ exp over the last axis."""
    value = np.asarray(_logsumexp(x.data, axis=-1), dtype=np.float64)
    weights = np.exp(x.data - value[..., np.newaxis])
    return record("logsumexp", Tensor(value), (x,), lambda g: (weights * np.asarray(g)[..., np.newaxis],))
