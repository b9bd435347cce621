"""Tape-based reverse-mode differentiation over dense numpy arrays.

The carriers are rank-4 (n, c, h, w) feature tensors plus the vectors and
scalars that hang off them (biases, norm parameters, losses). Forward ops are
pure; recording happens only inside an active ``Tape`` context, and gradients
accumulate additively into parameter slots when ``backward`` replays the tape
in reverse.
"""

from __future__ import annotations

import contextlib

import numpy as np


class DimensionError(ValueError):
    """Shape or axis mismatch, naming the offending axes."""


class ContractError(ValueError):
    """An operation was called outside its contract (non-binary mask, non-scalar loss, ...)."""


_DTYPES = {"single": np.float32, "double": np.float64}

_default_dtype = np.float32
_tape_stack: list["Tape"] = []

# Activation bytes allocated by op outputs while a meter is active.
_alloc_meter: "AllocationMeter | None" = None


@contextlib.contextmanager
def precision(kind):
    """Select 'single' or 'double' precision for tensors created in this context."""
    global _default_dtype
    if kind not in _DTYPES:
        raise ContractError(f"unknown precision {kind!r}, expected 'single' or 'double'")
    prev = _default_dtype
    _default_dtype = _DTYPES[kind]
    try:
        yield
    finally:
        _default_dtype = prev


def default_dtype():
    return _default_dtype


class AllocationMeter:
    """Counts bytes of op outputs allocated while active; proxy for peak activation memory.

    Recorded forward passes retain every intermediate on the tape, so the
    cumulative count within one forward call is also the peak concurrent size.
    """

    def __init__(self):
        self.bytes = 0

    def __enter__(self):
        global _alloc_meter
        self._prev = _alloc_meter
        _alloc_meter = self
        return self

    def __exit__(self, *exc):
        global _alloc_meter
        _alloc_meter = self._prev
        return False


class Tensor:
    """Dense array plus an additive gradient slot.

    ``data`` is a numpy array (rank 4 for feature maps; vectors and scalars
    also occur). Tensors are immutable by convention once produced by an op.
    """

    __slots__ = ("data", "grad", "requires_grad", "frozen", "_tracked", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=_default_dtype)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.frozen = False
        self._tracked = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = self.name or "tensor"
        return f"<{tag} {self.data.shape} {self.data.dtype}>"

    # operator sugar; the real work lives in ops.py
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)


def tensor(data, requires_grad=False, name=None):
    """Create a tensor in the current precision context."""
    arr = np.asarray(data, dtype=_default_dtype)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def as_tensor(x):
    """Wrap constants so ops can treat every operand uniformly."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


class TapeRecord:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed differentiable operations.

    Replaying backward in reverse order accumulates gradients additively; a
    tensor created outside any recording context receives no gradient.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.records)


def active_tape():
    return _tape_stack[-1] if _tape_stack else None


def needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._tracked


def record(inputs, out_data, backward, name=None) -> Tensor:
    """Finish an op: wrap the result, meter it, and record if anything upstream is live."""
    out = Tensor(out_data, name=name)
    if _alloc_meter is not None:
        _alloc_meter.bytes += out_data.nbytes
    tape = active_tape()
    if tape is not None and any(needs_grad(t) for t in inputs):
        out._tracked = True
        tape.records.append(TapeRecord(tuple(inputs), out, backward))
    return out


def backward(tape: Tape, loss: Tensor):
    """Accumulate d(loss)/d(param) into every recorded parameter's grad slot."""
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        gout = grads.get(id(rec.output))
        if gout is None:
            continue
        gins = rec.backward(gout)
        for inp, gin in zip(rec.inputs, gins):
            if gin is None:
                continue
            if inp._tracked:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gin
                else:
                    grads[key] = gin
            if inp.requires_grad:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad = inp.grad + gin.astype(inp.data.dtype, copy=False)


class ParamStore:
    """Dotted-name parameter registry with per-entry gradient slots.

    Buffers hold non-trainable state (running statistics); they serialize with
    the parameters but never receive gradients or optimizer updates.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, Tensor] = {}

    def add_param(self, name: str, data) -> Tensor:
        if name in self._params or name in self._buffers:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=_default_dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, data) -> Tensor:
        if name in self._params or name in self._buffers:
            raise ContractError(f"duplicate buffer name {name!r}")
        t = Tensor(np.asarray(data, dtype=_default_dtype), requires_grad=False, name=name)
        self._buffers[name] = t
        return t

    def param(self, name: str) -> Tensor:
        return self._params[name]

    def params(self):
        return self._params.items()

    def buffers(self):
        return self._buffers.items()

    def entries(self):
        """All named tensors, parameters then buffers."""
        yield from self._params.items()
        yield from self._buffers.items()

    def names(self):
        return list(self._params) + list(self._buffers)

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.data.size for p in self._params.values())


def kaiming_uniform(rng: np.random.Generator, shape, fan_in) -> np.ndarray:
    """Kaiming-uniform fan-in init (relu gain): U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(_default_dtype)
