"""Dense tensors and a reverse-mode gradient tape.

Values are numpy arrays stored row-major, 64-bit floats by default with
32-bit selectable for speed runs.  Differentiable kernels live in
:mod:`patchbank.ops`; while a :class:`GradTape` is active in the current
thread they append one record per executed operation, and ``backward``
replays those records in exact reverse execution order, accumulating
gradients per tensor identity.
"""

from __future__ import annotations

import threading

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
DEFAULT_DTYPE = np.float64


def resolve_dtype(dtype) -> np.dtype:
    """Map a dtype spec ("f32"/"f64", numpy dtype, or None) to a numpy dtype."""
    if dtype is None:
        return np.dtype(DEFAULT_DTYPE)
    if isinstance(dtype, str) and dtype in DTYPES:
        return np.dtype(DTYPES[dtype])
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use 'f32' or 'f64'")
    return dt


class Tensor:
    """Dense N-dimensional real array, the value carrier for every kernel.

    All extents must be >= 1 (rank-0 scalars are allowed).  ``data`` is
    always a C-contiguous float32 or float64 ndarray.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(resolve_dtype(dtype), copy=False)
        elif arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.size == 0:
            raise ValueError(f"tensor extents must all be >= 1, got shape {arr.shape}")
        # ascontiguousarray would promote rank-0 scalars to rank 1.
        self.data = np.ascontiguousarray(arr) if arr.ndim else arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def __array__(self, dtype=None, copy=None):
        if dtype is not None:
            return self.data.astype(dtype)
        return self.data

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad})"


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=resolve_dtype(dtype)))


def full(shape, value, dtype=None) -> Tensor:
    return Tensor(np.full(shape, value, dtype=resolve_dtype(dtype)))


_ACTIVE = threading.local()


def active_tape():
    """The GradTape currently recording in this thread, or None."""
    return getattr(_ACTIVE, "tape", None)


class GradTape:
    """Ordered record of executed differentiable operations.

    Gradients are accumulated additively into a map keyed by tensor
    identity, so a tensor feeding several consumers receives the sum of
    the incoming gradients.  One tape serves one forward/backward cycle;
    build a fresh tape for the next step.
    """

    def __init__(self):
        self._records: list[tuple[tuple[Tensor, ...], Tensor, object]] = []
        self._grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "GradTape":
        if active_tape() is not None:
            raise RuntimeError("a GradTape is already active in this thread")
        _ACTIVE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.tape = None
        return False

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward) -> None:
        """Append one operation record.

        ``backward(g_out)`` must return a tuple of gradient arrays aligned
        with ``inputs`` (None for inputs that do not require grad), each a
        buffer the tape may keep but never mutates in place.
        """
        self._records.append((tuple(inputs), output, backward))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, output: Tensor, seed=None) -> None:
        """Propagate gradients from ``output`` back through the records."""
        self._grads.clear()
        if seed is None:
            g0 = np.ones_like(output.data)
        else:
            g0 = np.asarray(seed, dtype=output.data.dtype)
            if g0.shape != output.data.shape:
                raise ValueError(
                    f"seed gradient shape {g0.shape} != output shape {output.data.shape}"
                )
        self._grads[id(output)] = g0
        for inputs, out, backward in reversed(self._records):
            g_out = self._grads.get(id(out))
            if g_out is None:
                continue
            in_grads = backward(g_out)
            for tensor, g in zip(inputs, in_grads):
                if g is None:
                    continue
                if g.shape != tensor.data.shape:
                    raise AssertionError(
                        f"gradient shape {g.shape} != tensor shape {tensor.data.shape}"
                    )
                cur = self._grads.get(id(tensor))
                # "cur + g" allocates; never mutate a stored buffer in place.
                self._grads[id(tensor)] = g if cur is None else cur + g

    def grad(self, tensor: Tensor) -> Tensor | None:
        """Accumulated gradient of ``tensor`` from the last backward, or None."""
        g = self._grads.get(id(tensor))
        return None if g is None else Tensor(g)
