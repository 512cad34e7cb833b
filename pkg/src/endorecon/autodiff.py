"""Minimal reverse-mode tape for the fixed reconstruction graph.

Every op takes and returns :class:`Var` objects holding numpy arrays. When the
owning :class:`Tape` is recording, each op appends a closure that pushes the
output gradient back onto its inputs; :meth:`Tape.backward` replays those
closures in reverse order. Ops are coarse (a whole trilinear lookup, a whole
dense layer, a whole compositing pass) so the tape stays short and vectorised.
"""

from __future__ import annotations

from typing import Callable, List, Optional

import numpy as np


class Var:
    """A value node. ``grad`` is allocated lazily on first accumulation."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True).reshape(self.value.shape)
        else:
            self.grad += g.reshape(self.value.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records backward closures in execution order."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._ops: List[Callable[[], None]] = []

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, out: Var, inputs, fn: Callable[[np.ndarray], None]) -> Var:
        """Register ``fn(grad_out)``; skipped when nothing upstream needs a gradient."""
        if self.enabled and any(v.requires_grad for v in inputs):
            out.requires_grad = True

            def step(out=out, fn=fn):
                if out.grad is not None:
                    fn(out.grad)

            self._ops.append(step)
        return out

    def record_many(self, outs, inputs, fn: Callable[..., None]):
        """Like :meth:`record` for an op with several outputs; ``fn`` gets one
        gradient per output (None where nothing flowed back)."""
        if self.enabled and any(v.requires_grad for v in inputs):
            for o in outs:
                o.requires_grad = True

            def step(outs=outs, fn=fn):
                grads = [o.grad for o in outs]
                if any(g is not None for g in grads):
                    fn(*grads)

            self._ops.append(step)
        return outs

    def backward(self, out: Var, seed: Optional[np.ndarray] = None) -> None:
        if seed is None:
            seed = np.ones_like(out.value)
        out.accumulate(np.asarray(seed, dtype=out.value.dtype))
        for step in reversed(self._ops):
            step()
        self._ops.clear()


NO_GRAD = Tape(enabled=False)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(tape: Tape, a: Var, b: Var) -> Var:
    out = Var(a.value + b.value)

    def back(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    return tape.record(out, (a, b), back)


def sub(tape: Tape, a: Var, b: Var) -> Var:
    out = Var(a.value - b.value)

    def back(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(-g, b.shape))

    return tape.record(out, (a, b), back)


def mul(tape: Tape, a: Var, b: Var) -> Var:
    out = Var(a.value * b.value)

    def back(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.value, b.shape))

    return tape.record(out, (a, b), back)


def scale(tape: Tape, a: Var, k: float) -> Var:
    out = Var(a.value * k)
    return tape.record(out, (a,), lambda g: a.accumulate(g * k))


def sigmoid(tape: Tape, a: Var) -> Var:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    out = Var(s)
    return tape.record(out, (a,), lambda g: a.accumulate(g * s * (1.0 - s)))


def softplus(tape: Tape, a: Var, shift: float = 0.0, factor: float = 1.0) -> Var:
    """``factor * log(1 + exp(a + shift))``, computed without overflow."""
    z = a.value + a.value.dtype.type(shift) if shift else a.value
    sp = np.abs(z)
    np.negative(sp, out=sp)
    np.exp(sp, out=sp)
    sp += 1
    np.log(sp, out=sp)
    sp += np.maximum(z, 0)
    out = Var(sp * a.value.dtype.type(factor) if factor != 1.0 else sp)

    def back(g):
        # sigmoid(z) = 1 - exp(-softplus(z))
        if sp.dtype == np.float32:
            sig = np.negative(sp)
            np.exp(sig, out=sig)
            np.subtract(1, sig, out=sig)
        else:
            sig = -np.expm1(-sp)
        if factor != 1.0:
            sig *= sig.dtype.type(factor)
        sig *= g
        a.accumulate(sig)

    return tape.record(out, (a,), back)


def relu(tape: Tape, a: Var) -> Var:
    mask = a.value > 0
    out = Var(np.where(mask, a.value, 0.0).astype(a.value.dtype, copy=False))
    return tape.record(out, (a,), lambda g: a.accumulate(g * mask))


def sum_all(tape: Tape, a: Var) -> Var:
    out = Var(np.asarray(a.value.sum()))
    return tape.record(out, (a,), lambda g: a.accumulate(np.broadcast_to(g, a.shape)))


def reshape(tape: Tape, a: Var, shape) -> Var:
    out = Var(a.value.reshape(shape))
    return tape.record(out, (a,), lambda g: a.accumulate(g.reshape(a.shape)))


# ---------------------------------------------------------------- dense layer


def linear(tape: Tape, x: Var, w: Var, b: Var) -> Var:
    """``x @ w + b`` with ``x`` of shape (N, fan_in) and ``w`` (fan_in, fan_out)."""
    out = Var(x.value @ w.value + b.value)

    def back(g):
        if w.requires_grad:
            w.accumulate(x.value.T @ g)
        if b.requires_grad:
            b.accumulate(g.sum(axis=0))
        if x.requires_grad:
            x.accumulate(g @ w.value.T)

    return tape.record(out, (x, w, b), back)


def matmul(tape: Tape, x: Var, w: Var) -> Var:
    out = Var(x.value @ w.value)

    def back(g):
        if w.requires_grad:
            w.accumulate(x.value.T @ g)
        if x.requires_grad:
            x.accumulate(g @ w.value.T)

    return tape.record(out, (x, w), back)
