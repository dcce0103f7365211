#!/usr/bin/env python3
#
# Dense tensor, differentiable function base, and the computation record
# (tape) that reverse-mode differentiation replays
#
import logging
import threading
import numpy as np

# Each thread has its own stack of active computation records, so distinct
# records can run concurrently on distinct threads without sharing state
_local = threading.local()


def _record_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_record() -> "ComputationRecord | None":
    """
    Innermost computation record active on the calling thread (or None)
    """
    stack = _record_stack()
    return stack[-1] if stack else None


class Tensor:
    """
    Dense N-dimensional real array with an optional gradient buffer

    Storage defaults to 32-bit floats. 64-bit data is kept as-is (reductions
    accumulate in 64-bit, and gradient checks run in 64-bit).
    """

    # numpy arrays on the left of an operator defer to our reflected operators
    __array_ufunc__ = None

    def __init__(
        self,
        data: np.ndarray | float | int | list,  # values (anything numpy can turn into an array)
        requires_grad: bool = False,  # receive an adjoint on backward()?
        dtype: type | None = None,  # storage type (None = keep float64, otherwise float32)
    ) -> None:

        arr = np.asarray(data)
        if dtype is None:
            dtype = np.float64 if arr.dtype == np.float64 else np.float32
        self.data = np.asarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    # =================================================================================================================

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        assert self.data.size == 1, f"item() on a tensor of shape {self.shape}"
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """
        Same values, cut from any gradient tracking (shares storage)
        """
        return Tensor(self.data, requires_grad=False, dtype=self.dtype)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, dtype=self.dtype)

    # =================================================================================================================
    # Operator sugar, everything is forwarded to the functional module
    # =================================================================================================================

    def __add__(self, other) -> "Tensor":
        from pycoalition.autodiff import functional as F

        return F.add(self, other)

    def __radd__(self, other) -> "Tensor":
        from pycoalition.autodiff import functional as F

        return F.add(other, self)

    def __sub__(self, other) -> "Tensor":
        from pycoalition.autodiff import functional as F

        return F.sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        from pycoalition.autodiff import functional as F

        return F.sub(other, self)

    def __mul__(self, other) -> "Tensor":
        from pycoalition.autodiff import functional as F

        return F.mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        from pycoalition.autodiff import functional as F

        return F.mul(other, self)

    def __truediv__(self, other) -> "Tensor":
        from pycoalition.autodiff import functional as F

        return F.div(self, other)

    def __neg__(self) -> "Tensor":
        from pycoalition.autodiff import functional as F

        return F.neg(self)

    def __matmul__(self, other) -> "Tensor":
        from pycoalition.autodiff import functional as F

        return F.matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        from pycoalition.autodiff import functional as F

        return F.getitem(self, index)

    def sum(self, axis: int | tuple | None = None, keepdims: bool = False) -> "Tensor":
        from pycoalition.autodiff import functional as F

        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple | None = None, keepdims: bool = False) -> "Tensor":
        from pycoalition.autodiff import functional as F

        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        from pycoalition.autodiff import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        from pycoalition.autodiff import functional as F

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes if axes else None)

    def abs(self) -> "Tensor":
        from pycoalition.autodiff import functional as F

        return F.abs(self)


# =====================================================================================================================


class Function:
    """
    Base class for differentiable operations

    forward() receives raw numpy arrays and may stash whatever backward() needs
    on self. backward() receives the adjoint of the output and returns one
    adjoint per input (None where an input gets no gradient)
    """

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        """
        Run forward on the given tensors and, if any of them requires a gradient
        and a computation record is active, append the operation to that record
        """
        fn = cls()
        out = Tensor(fn.forward(*(t.data for t in inputs), **kwargs))
        out.requires_grad = any(t.requires_grad for t in inputs)

        record = active_record()
        if out.requires_grad and record is not None:
            record.append(fn, inputs, out)

        return out

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
        """
        Sum out broadcast dimensions so an adjoint matches its input's shape
        """
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, size in enumerate(shape):
            if size == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


# =====================================================================================================================


class ComputationRecord:
    """
    Ordered list of executed operations (the tape)

    Use as a context manager; operations executed inside the block on the same
    thread are appended in execution order, so every operation's inputs are
    produced before it. A record can be replayed by backward() exactly once.
    """

    def __init__(self) -> None:
        self.entries = []
        self.consumed = False

    def __enter__(self) -> "ComputationRecord":
        _record_stack().append(self)
        return self

    def __exit__(self, exc_type, exc_value, traceback) -> None:
        stack = _record_stack()
        assert stack and stack[-1] is self, "computation records must be closed in order"
        stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, fn: Function, inputs: tuple, output: Tensor) -> None:
        assert not self.consumed, "cannot record into a replayed computation record"
        self.entries.append((fn, tuple(inputs), output))


# =====================================================================================================================


def backward(loss: Tensor, record: ComputationRecord) -> None:
    """
    Replay the record in reverse, assigning adjoints of `loss` to every tensor
    that requires a gradient. Tensors in the record that `loss` does not depend
    on get all-zero gradients.

    Replaying the same record twice raises (forward again to get a fresh record).
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if record.consumed:
        raise RuntimeError("computation record already replayed, run the forward pass again")

    # Reset gradients of everything the record touched
    for _, inputs, output in record.entries:
        for t in inputs:
            if t.requires_grad:
                t.grad = np.zeros_like(t.data)
        output.grad = None

    loss.grad = np.ones_like(loss.data)
    reached = {id(loss)}

    for fn, inputs, output in reversed(record.entries):
        if id(output) not in reached or output.grad is None:
            continue

        input_grads = fn.backward(output.grad)
        for t, g in zip(inputs, input_grads):
            if g is None or not t.requires_grad:
                continue
            t.grad += np.asarray(g).reshape(t.shape)
            reached.add(id(t))

    record.consumed = True
    logging.getLogger("pycoalition.autodiff").debug(
        f"backward replayed {len(record)} operations ({len(reached)} tensors reached)"
    )
