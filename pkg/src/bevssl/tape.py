"""A small reverse-mode tape over explicit forward/VJP pairs.

Every primitive is a plain function ``f(*values, **static) -> (out, vjp)``
where ``vjp(g)`` returns one cotangent per input (``None`` for inputs that
need none). :meth:`Tape.apply` records the call; :meth:`Tape.backward`
walks the records in reverse and accumulates cotangents in a fixed order,
so gradients are reproducible bit-for-bit.
"""
from __future__ import annotations

from typing import Callable

import numpy as np


class Var:
    __slots__ = ("value", "index", "tape")

    def __init__(self, value, index, tape):
        self.value = value
        self.index = index
        self.tape = tape

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"


class Tape:
    def __init__(self):
        self._records: list[tuple[int, tuple[int, ...], Callable]] = []
        self._n = 0

    def _new(self, value) -> Var:
        v = Var(value, self._n, self)
        self._n += 1
        return v

    def leaf(self, value) -> Var:
        return self._new(np.asarray(value, dtype=np.float64))

    def apply(self, fn, *inputs: Var, **static) -> Var:
        for x in inputs:
            if not isinstance(x, Var) or x.tape is not self:
                raise TypeError(f"{fn.__name__}: inputs must be Vars of this tape")
        out, vjp = fn(*(x.value for x in inputs), **static)
        var = self._new(out)
        self._records.append((var.index, tuple(x.index for x in inputs), vjp))
        return var

    def backward(self, seeds) -> dict[int, np.ndarray]:
        """Propagate ``{var: cotangent}`` seeds; returns cotangents by var index."""
        grads: dict[int, np.ndarray] = {}
        for var, g in seeds.items() if isinstance(seeds, dict) else seeds:
            g = np.asarray(g, dtype=np.float64)
            grads[var.index] = grads[var.index] + g if var.index in grads else g
        for out_idx, in_idx, vjp in reversed(self._records):
            g = grads.pop(out_idx, None)
            if g is None:
                continue
            for i, gi in zip(in_idx, vjp(g)):
                if gi is None:
                    continue
                grads[i] = grads[i] + gi if i in grads else gi
        return grads

    def grad(self, seeds, wrt):
        g = self.backward(seeds)
        return [g.get(v.index, np.zeros_like(v.value)) for v in wrt]


# --------------------------------------------------------------------------
# primitives (forward + vjp)


def add(a, b):
    return a + b, lambda g: (g, g)


def scale(a, *, factor):
    return a * factor, lambda g: (g * factor,)


def relu(x):
    mask = x > 0
    return np.where(mask, x, 0.0), lambda g: (np.where(mask, g, 0.0),)


def concat(*xs, axis=-1):
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return np.concatenate(xs, axis=axis), vjp


def conv3x3(x, w, b):
    """Same-padded 3x3 convolution, channels last: x (H, W, Ci), w (3, 3, Ci, Co)."""
    H, W, ci = x.shape
    co = w.shape[-1]
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(b, (H * W, co)).copy()
    taps = []
    for di in range(3):
        for dj in range(3):
            tap = xp[di:di + H, dj:dj + W].reshape(H * W, ci)
            taps.append(tap)
            out += tap @ w[di, dj]

    def vjp(g):
        g2 = g.reshape(H * W, co)
        gw = np.empty_like(w)
        gxp = np.zeros_like(xp)
        k = 0
        for di in range(3):
            for dj in range(3):
                gw[di, dj] = taps[k].T @ g2
                gxp[di:di + H, dj:dj + W] += (g2 @ w[di, dj].T).reshape(H, W, ci)
                k += 1
        return gxp[1:-1, 1:-1], gw, g2.sum(axis=0)

    return out.reshape(H, W, co), vjp


def conv1x1(x, w, b):
    """Pointwise linear layer over the channel axis: x (..., Ci), w (Ci, Co)."""
    shape = x.shape
    x2 = x.reshape(-1, shape[-1])
    out = x2 @ w + b

    def vjp(g):
        g2 = g.reshape(-1, w.shape[1])
        return (g2 @ w.T).reshape(shape), x2.T @ g2, g2.sum(axis=0)

    return out.reshape(shape[:-1] + (w.shape[1],)), vjp
