"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Tensors hold float32 buffers by default. Every kernel preserves the dtype of
its inputs, so the gradient-check harness can rerun an identical graph in
float64, where central finite differences are trustworthy.

Convolution is implemented as cross-correlation (no kernel flip).
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "zero_grad",
    "add",
    "mul",
    "mul_scalar",
    "sum_all",
    "mean_all",
    "reshape",
    "matmul",
    "relu",
    "tanh_act",
    "conv2d",
    "maxpool2x2",
    "batchnorm",
    "finite_diff_check",
]


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_ACTIVE_TAPE: Optional["Tape"] = None


class Tape:
    """Execution-ordered record of operations for one forward pass.

    Recording order is execution order, which is already a topological
    order, so a single reverse sweep propagates every gradient.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise UsageError("a tape is already recording")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


def _record(op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> None:
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.nodes.append(_Node(op, tuple(inputs), output, backward_fn))


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(tensor) to every tensor reached by the tape.

    Parameter gradients accumulate across calls until cleared with
    zero_grad(); intermediate gradients are reset at the start of each
    sweep.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    for node in tape.nodes:
        node.output.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        grads = node.backward_fn(out_grad)
        for tensor, grad in zip(node.inputs, grads):
            if grad is None:
                continue
            if tensor.grad is None:
                tensor.grad = grad
            else:
                tensor.grad = tensor.grad + grad


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise and shape ops


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out axes that broadcasting expanded, restoring `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    _record("add", (a, b), out, bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    _record("mul", (a, b), out, bwd)
    return out


def mul_scalar(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * a.dtype.type(s))
    _record("mul_scalar", (a,), out, lambda g: (g * a.dtype.type(s),))
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(keepdims=False).reshape(()))
    _record("sum_all", (a,), out, lambda g: (np.broadcast_to(g, a.data.shape),))
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean().reshape(()))
    _record("mean_all", (a,), out, lambda g: (np.broadcast_to(g / n, a.data.shape),))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    _record("reshape", (a,), out, lambda g: (g.reshape(a.data.shape),))
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul shapes do not chain: {a.data.shape} x {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    _record("matmul", (a, b), out, bwd)
    return out


# ---------------------------------------------------------------------------
# activations


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, a.dtype.type(0)))
    _record("relu", (a,), out, lambda g: (g * mask,))
    return out


def tanh_act(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)
    _record("tanh", (a,), out, lambda g: (g * (1 - y * y),))
    return out


# ---------------------------------------------------------------------------
# convolution / pooling


def conv2d(
    x: Tensor,
    kernels: Tensor,
    bias: Tensor,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Batched 2-D cross-correlation plus per-kernel bias.

    x: (B, C, H, W); kernels: (K, C, kh, kw); bias: (K,).
    Output spatial size is (H + 2*padding - kh)//stride + 1.
    """
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-d input and kernels, got {x.data.shape} and "
            f"{kernels.data.shape}"
        )
    B, C, H, W = x.data.shape
    K, Ck, kh, kw = kernels.data.shape
    if Ck != C:
        raise DimensionError(f"kernel channels {Ck} != input channels {C}")
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    if kh > Hp or kw > Wp or Ho < 1 or Wo < 1:
        raise ConfigurationError(
            f"kernel {kh}x{kw} does not fit padded input {Hp}x{Wp}"
        )

    xt = x.data.transpose(0, 2, 3, 1)  # NHWC, channels contiguous
    if padding:
        xt = np.pad(xt, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(xt, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # (B, Ho, Wo, C, kh, kw) -> columns ordered (kh, kw, C)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        B * Ho * Wo, kh * kw * C
    )
    wmat = kernels.data.transpose(2, 3, 1, 0).reshape(kh * kw * C, K)
    out_flat = cols @ wmat + bias.data
    out = Tensor(out_flat.reshape(B, Ho, Wo, K).transpose(0, 3, 1, 2))

    def bwd(g):
        g_flat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, K)
        dw = (cols.T @ g_flat).reshape(kh, kw, C, K).transpose(3, 2, 0, 1)
        db = g_flat.sum(axis=0)
        dxt = np.zeros((B, Hp, Wp, C), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = g_flat @ kernels.data[:, :, i, j]  # (B*Ho*Wo, C)
                dxt[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += (
                    contrib.reshape(B, Ho, Wo, C)
                )
        if padding:
            dxt = dxt[:, padding:-padding, padding:-padding]
        return dxt.transpose(0, 3, 1, 2), dw, db

    _record("conv2d", (x, kernels, bias), out, bwd)
    return out


def maxpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; ties route to the first element
    in row-major window order."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2x2 expects 4-d input, got {x.data.shape}")
    B, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ConfigurationError(f"spatial dims must be even, got {H}x{W}")
    Ho, Wo = H // 2, W // 2
    windows = np.ascontiguousarray(
        x.data.reshape(B, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(B, C, Ho, Wo, 4)
    argmax = windows.argmax(axis=-1)  # first max in row-major order
    out = Tensor(np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0])

    def bwd(g):
        gwin = np.zeros_like(windows)
        np.put_along_axis(gwin, argmax[..., None], g[..., None], axis=-1)
        return (
            gwin.reshape(B, C, Ho, Wo, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(B, C, H, W),
        )

    _record("maxpool2x2", (x,), out, bwd)
    return out


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize per feature (axis 1) over the batch, or over batch and
    spatial positions for 4-d input.

    Train mode uses batch statistics and updates the running buffers in
    place via exponential moving average; infer mode reads the running
    buffers only, making the output batch-size independent.
    """
    nd = x.data.ndim
    if nd not in (2, 4):
        raise DimensionError(f"batchnorm expects 2-d or 4-d input, got {x.data.shape}")
    axes = (0,) if nd == 2 else (0, 2, 3)
    bshape = (1, -1) if nd == 2 else (1, -1, 1, 1)
    if training:
        if x.data.shape[0] < 2:
            raise ConfigurationError("batch norm in train mode needs batch size >= 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean
        var = running_var

    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    out = Tensor(gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape))

    m = x.data.size // x.data.shape[1]  # samples per feature

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            # full chain rule through the batch mean and variance
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            dx = (inv.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv.reshape(bshape)
        return dx.astype(x.dtype, copy=False), dgamma, dbeta

    _record("batchnorm", (x, gamma, beta), out, bwd)
    return out


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-4,
    sample: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between the taped gradient of f at x and central
    finite differences.

    f must be a pure scalar function of x's buffer. The relative error
    denominator is max(|analytic|, |numeric|, 1e-8) per element. When
    `sample` is given, only that many randomly chosen coordinates are
    perturbed (the analytic gradient is still exact).
    """
    if h <= 0:
        raise UsageError(f"step size must be positive, got {h}")
    tape = Tape()
    x.grad = None
    with tape:
        y = f(x)
    if y.data.size != 1:
        raise UsageError(f"f must return a scalar, got shape {y.data.shape}")
    backward(tape, y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad

    flat = x.data.reshape(-1)
    n = flat.size
    if sample is not None and sample < n:
        rng = rng or np.random.default_rng(0)
        indices = rng.choice(n, size=sample, replace=False)
    else:
        indices = np.arange(n)

    worst = 0.0
    an_flat = analytic.reshape(-1)
    for i in indices:
        saved = flat[i]
        flat[i] = saved + h
        fp = float(f(x).data.reshape(()))
        flat[i] = saved - h
        fm = float(f(x).data.reshape(()))
        flat[i] = saved
        numeric = (fp - fm) / (2.0 * h)
        denom = max(abs(numeric), abs(float(an_flat[i])), 1e-8)
        worst = max(worst, abs(numeric - float(an_flat[i])) / denom)
    return worst
