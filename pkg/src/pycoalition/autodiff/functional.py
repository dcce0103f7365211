#!/usr/bin/env python3
#
# Differentiable operations on Tensors
#
# Non-smooth operations (abs, relu, max, max pooling) use subgradient 0 at the
# kink and route ties to the lowest index
#
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pycoalition.autodiff.tensor import Tensor, Function


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    """
    Wrap plain numbers/arrays as constant tensors (matching the dtype of `like`)
    """
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.dtype if like is not None else None)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def _axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# =====================================================================================================================
# Elementwise arithmetic (numpy broadcasting rules)
# =====================================================================================================================


class _Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(grad, self.shapes[1])


class _Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(-grad, self.shapes[1])


class _Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (
            self.unbroadcast(grad * self.b, self.a.shape),
            self.unbroadcast(grad * self.a, self.b.shape),
        )


class _Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return (
            self.unbroadcast(grad / self.b, self.a.shape),
            self.unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape),
        )


class _Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class _MatMul(Function):
    def forward(self, a, b):
        assert a.ndim == 2 and b.ndim == 2, "matmul expects 2-D operands"
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


def add(a, b) -> Tensor:
    return _Add.apply(*_pair(a, b))


def sub(a, b) -> Tensor:
    return _Sub.apply(*_pair(a, b))


def mul(a, b) -> Tensor:
    return _Mul.apply(*_pair(a, b))


def div(a, b) -> Tensor:
    return _Div.apply(*_pair(a, b))


def neg(a: Tensor) -> Tensor:
    return _Neg.apply(a)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _MatMul.apply(a, b)


# =====================================================================================================================
# Reductions (accumulated in 64-bit)
# =====================================================================================================================


class _Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _axes(axis, a.ndim)
        self.keepdims = keepdims
        return np.sum(a, axis=self.axes, dtype=np.float64, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.shape),)


class _Max(Function):
    def forward(self, a, axis=None):
        self.shape = a.shape
        self.axis = axis
        if axis is None:
            self.index = np.argmax(a)
            return np.asarray(a.reshape(-1)[self.index])
        self.index = np.expand_dims(np.argmax(a, axis=axis), axis)
        return np.take_along_axis(a, self.index, axis=axis).squeeze(axis)

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        if self.axis is None:
            out.reshape(-1)[self.index] = grad
        else:
            np.put_along_axis(out, self.index, np.expand_dims(grad, self.axis), axis=self.axis)
        return (out,)


def sum(a: Tensor, axis: int | tuple | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return _Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis: int | tuple | None = None, keepdims: bool = False) -> Tensor:
    count = int(np.prod([a.shape[i] for i in _axes(axis, a.ndim)]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def max(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    """
    Maximum along an axis (gradient goes to the first maximal entry)
    """
    return _Max.apply(a, axis=axis)


# =====================================================================================================================
# Pointwise nonlinearities
# =====================================================================================================================


class _Abs(Function):
    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, grad):
        return (grad * self.sign,)


class _ReLU(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, np.zeros_like(a))

    def backward(self, grad):
        return (grad * self.mask,)


class _Sigmoid(Function):
    def forward(self, a):
        # tanh form stays finite for large |a|
        self.out = 0.5 * (1.0 + np.tanh(0.5 * a))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


def abs(a: Tensor) -> Tensor:  # noqa: A001
    return _Abs.apply(a)


def relu(a: Tensor) -> Tensor:
    return _ReLU.apply(a)


def sigmoid(a: Tensor) -> Tensor:
    return _Sigmoid.apply(a)


# =====================================================================================================================
# Softmax family
# =====================================================================================================================


class _Softmax(Function):
    def forward(self, a, axis=-1):
        self.axis = axis
        shifted = np.exp(a - np.max(a, axis=axis, keepdims=True))
        self.out = shifted / np.sum(shifted, axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - np.sum(grad * s, axis=self.axis, keepdims=True)),)


class _LogSoftmax(Function):
    def forward(self, a, axis=-1):
        self.axis = axis
        shifted = a - np.max(a, axis=axis, keepdims=True)
        log_norm = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
        out = shifted - log_norm
        self.softmax = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.softmax * np.sum(grad, axis=self.axis, keepdims=True),)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """
    Softmax along `axis` (max-subtracted)
    """
    assert -logits.ndim <= axis < logits.ndim, f"invalid softmax axis {axis} for shape {logits.shape}"
    return _Softmax.apply(logits, axis=axis)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    assert -logits.ndim <= axis < logits.ndim, f"invalid softmax axis {axis} for shape {logits.shape}"
    return _LogSoftmax.apply(logits, axis=axis)


# =====================================================================================================================
# Shape manipulation
# =====================================================================================================================


class _Reshape(Function):
    def forward(self, a, shape=None):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class _Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, grad):
        if self.axes is None:
            return (np.transpose(grad),)
        return (np.transpose(grad, np.argsort(self.axes)),)


class _GetItem(Function):
    def forward(self, a, index=None):
        self.shape = a.shape
        self.index = index
        return a[index]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


class _Pad(Function):
    def forward(self, a, widths=None, mode="constant"):
        self.shape = a.shape
        self.widths = widths
        self.mode = mode
        return np.pad(a, widths, mode=mode)

    def backward(self, grad):
        if self.mode == "constant":
            interior = tuple(slice(lo, lo + n) for (lo, _), n in zip(self.widths, self.shape))
            return (grad[interior],)

        # Reflect: every padded position maps back to one source index per axis
        source = [np.pad(np.arange(n), w, mode=self.mode) for n, w in zip(self.shape, self.widths)]
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, np.ix_(*source), grad)
        return (out,)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _Reshape.apply(a, shape=tuple(shape))


def transpose(a: Tensor, axes: tuple | None = None) -> Tensor:
    return _Transpose.apply(a, axes=axes)


def getitem(a: Tensor, index) -> Tensor:
    return _GetItem.apply(a, index=index)


def pad(a: Tensor, widths: list[tuple[int, int]], mode: str = "constant") -> Tensor:
    """
    Pad with zeros ("constant") or mirror without repeating the edge ("reflect")
    """
    assert mode in ("constant", "reflect"), f"unsupported pad mode {mode}"
    assert len(widths) == a.ndim, "one (before, after) pair per axis"
    return _Pad.apply(a, widths=[tuple(w) for w in widths], mode=mode)


# =====================================================================================================================
# Convolutional network building blocks (NCHW)
# =====================================================================================================================


class _Conv2d(Function):
    def forward(self, x, w, b, stride=1, padding=0):
        self.x_shape = x.shape
        self.w = w
        self.stride = stride
        self.padding = padding

        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        kh, kw = w.shape[2], w.shape[3]

        # (N, C, Ho, Wo, kh, kw) strided view, no copy until tensordot
        self.windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        self.padded_shape = xp.shape

        out = np.tensordot(self.windows, w, axes=([1, 4, 5], [1, 2, 3]))
        return out.transpose(0, 3, 1, 2) + b.reshape(1, -1, 1, 1)

    def backward(self, grad):
        s, p = self.stride, self.padding
        _, _, ho, wo = grad.shape
        kh, kw = self.w.shape[2], self.w.shape[3]

        grad_w = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = grad.sum(axis=(0, 2, 3))

        grad_xp = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(grad, self.w[:, :, i, j], axes=([1], [0]))
                grad_xp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += contrib.transpose(
                    0, 3, 1, 2
                )

        h, w = self.x_shape[2], self.x_shape[3]
        return grad_xp[:, :, p : p + h, p : p + w], grad_w, grad_b


class _BatchNorm(Function):
    def forward(self, x, gamma, beta, axes=(0, 2, 3), eps=1e-5):
        self.axes = axes
        shape = [1] * x.ndim
        shape[1] = x.shape[1]
        self.param_shape = tuple(shape)

        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mean) * self.inv_std
        self.gamma = gamma.reshape(self.param_shape)
        self.count = int(np.prod([x.shape[a] for a in axes]))
        return self.gamma * self.xhat + beta.reshape(self.param_shape)

    def backward(self, grad):
        axes, m = self.axes, self.count
        grad_gamma = np.sum(grad * self.xhat, axis=axes)
        grad_beta = np.sum(grad, axis=axes)

        gxhat = grad * self.gamma
        grad_x = (self.inv_std / m) * (
            m * gxhat
            - np.sum(gxhat, axis=axes, keepdims=True)
            - self.xhat * np.sum(gxhat * self.xhat, axis=axes, keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta


class _MaxPool2d(Function):
    def forward(self, x, kernel=2, stride=2):
        self.x_shape = x.shape
        n, c, h, w = x.shape
        windows = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
        ho, wo = windows.shape[2], windows.shape[3]
        flat = windows.reshape(n, c, ho, wo, kernel * kernel)

        # First maximal entry wins
        arg = np.argmax(flat, axis=-1)
        rows = np.arange(ho).reshape(1, 1, ho, 1) * stride + arg // kernel
        cols = np.arange(wo).reshape(1, 1, 1, wo) * stride + arg % kernel
        self.index = (
            np.arange(n).reshape(n, 1, 1, 1),
            np.arange(c).reshape(1, c, 1, 1),
            rows,
            cols,
        )
        return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        out = np.zeros(self.x_shape, dtype=grad.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation, zero padding, NCHW input, (F, C, kh, kw) weight
    """
    if bias is None:
        bias = Tensor(np.zeros(weight.shape[0]), dtype=weight.dtype)
    return _Conv2d.apply(x, weight, bias, stride=int(stride), padding=int(padding))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Normalize with the statistics of `x` itself: per channel over batch and
    spatial positions for NCHW input, per feature over the batch for (N, F)
    """
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    return _BatchNorm.apply(x, gamma, beta, axes=axes, eps=float(eps))


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    return _MaxPool2d.apply(x, kernel=int(kernel), stride=int(stride or kernel))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """
    x @ weight.T + bias for (N, in) input and (out, in) weight
    """
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)
