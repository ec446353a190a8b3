"""Dense float tensors recorded on a define-by-run tape.

A `Tape` is opened around one forward pass; every operation whose inputs
require gradients appends a record (inputs, output, backward rule). Calling
`Tape.backward(loss)` replays the rules in reverse recording order.
"""
import contextlib
import threading
from collections import defaultdict
from typing import Callable, List, Optional, Sequence

import numpy as np

from core.libs import assertions

DEFAULT_DTYPE = np.float32

# tapes, counters, scopes and dtypes are per thread
_LOCAL = threading.local()


def _stack(name) -> list:
    stack = getattr(_LOCAL, name, None)
    if stack is None:
        stack = []
        setattr(_LOCAL, name, stack)
    return stack


def get_dtype():
    dtypes = _stack('dtypes')
    return dtypes[-1] if dtypes else DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Switch the dtype of newly built tensors (float64 for gradient checks)."""
    _stack('dtypes').append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _stack('dtypes').pop()


class Tensor:
    __slots__ = ('data', 'requires_grad', 'grad', 'name')

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=get_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def wrap(cls, array, requires_grad=False):
        out = cls.__new__(cls)
        out.data = np.asarray(array, dtype=get_dtype())
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    @classmethod
    def zeros(cls, shape, requires_grad=False, name=None):
        return cls(np.zeros(shape), requires_grad=requires_grad, name=name)

    @property
    def shape(self):
        return list(self.data.shape)

    @property
    def size(self):
        return int(self.data.size)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def freeze(self):
        """Mark as a constant: no gradient, storage becomes read-only."""
        self.requires_grad = False
        self.grad = None
        self.data.flags.writeable = False
        return self

    def detach(self):
        return Tensor.wrap(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def accumulate(self, grad):
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype).reshape(self.data.shape)
        else:
            self.grad = self.grad + grad

    def __repr__(self):
        req = ', requires_grad=True' if self.requires_grad else ''
        nm = ', name={0}'.format(self.name) if self.name else ''
        return 'Tensor(shape={0}{1}{2})'.format(self.shape, req, nm)

    # operator sugar; the rules live in core.tensor.ops
    def __add__(self, other):
        from core.tensor import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from core.tensor import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from core.tensor import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from core.tensor import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from core.tensor import ops
        return ops.matmul(self, other)


class _Record:
    __slots__ = ('inputs', 'output', 'backward')

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered operation records for one forward pass."""

    def __init__(self):
        self.records: List[_Record] = []

    def __enter__(self):
        _stack('tapes').append(self)
        return self

    def __exit__(self, *exc):
        _stack('tapes').remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable):
        self.records.append(_Record(tuple(inputs), output, backward))

    def backward(self, loss: Tensor, grad=None):
        assertions.assert_state(loss.requires_grad, 'loss does not depend on any trainable tensor')
        seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.data.dtype)
        loss.accumulate(seed)
        for rec in reversed(self.records):
            if rec.output.grad is None:
                continue
            grads = rec.backward(rec.output.grad)
            for inp, g in zip(rec.inputs, grads):
                if g is not None and inp.requires_grad:
                    inp.accumulate(g)
        for rec in self.records:
            for inp in rec.inputs:
                if inp.requires_grad and inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)


def active_tape() -> Optional[Tape]:
    tapes = _stack('tapes')
    return tapes[-1] if tapes else None


def make_result(array, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result and record it when a tape is open and any input is trainable."""
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.wrap(array, requires_grad=needs_grad)
    if needs_grad:
        tape.record(inputs, out, backward)
    return out


class FlopCounter:
    """Counts matrix-product FLOPs issued while active, per scope label."""

    def __init__(self):
        self.by_scope = defaultdict(int)

    def __enter__(self):
        _stack('counters').append(self)
        return self

    def __exit__(self, *exc):
        _stack('counters').remove(self)
        return False

    @property
    def total(self):
        return sum(self.by_scope.values())

    def as_dict(self):
        return {k: v for k, v in sorted(self.by_scope.items()) if v}


@contextlib.contextmanager
def flop_scope(label):
    _stack('scopes').append(label)
    try:
        yield
    finally:
        _stack('scopes').pop()


def record_flops(flops):
    counters = _stack('counters')
    if not counters:
        return
    scopes = _stack('scopes')
    label = scopes[-1] if scopes else 'unscoped'
    for counter in counters:
        counter.by_scope[label] += int(flops)
