"""Flat parameter vectors, reverse-mode gradients and the Adam optimizer.

Gradients come from torch autograd in float64. Objectives are written as
functions of a 1-D torch tensor; :class:`ParamVector` keeps track of which slice
of that tensor is which named quantity.
"""
from dataclasses import dataclass

import numpy as np
import torch

from .errors import NumericError, ParameterError


class ParamVector:
    """A flat float64 array partitioned into named, shaped segments."""

    def __init__(self, segments=None):
        self._names, self._shapes, self._offsets = [], [], []
        chunks = []
        size = 0
        for name, value in (segments or {}).items():
            arr = np.asarray(value, dtype=np.float64)
            self._names.append(name)
            self._shapes.append(arr.shape)
            self._offsets.append(size)
            size += arr.size
            chunks.append(arr.ravel())
        self.values = np.concatenate(chunks) if chunks else np.zeros(0)

    def __len__(self):
        return self.values.size

    @property
    def names(self):
        return list(self._names)

    def layout(self):
        """(name, offset, size, shape) for each segment, in order."""
        return [(n, o, int(np.prod(s, dtype=np.int64)), s)
                for n, o, s in zip(self._names, self._offsets, self._shapes)]

    def segment_of(self, index):
        for name, offset, size, _ in self.layout():
            if offset <= index < offset + size:
                return name
        raise IndexError(index)

    def unpack(self, flat=None):
        """Dict of segment views over ``flat`` (numpy or torch, default: own values)."""
        flat = self.values if flat is None else flat
        return {n: flat[o:o + sz].reshape(s) for n, o, sz, s in self.layout()}

    def __getitem__(self, name):
        return self.unpack()[name]

    def with_values(self, values):
        out = ParamVector.__new__(ParamVector)
        out._names, out._shapes, out._offsets = self._names, self._shapes, self._offsets
        out.values = np.asarray(values, dtype=np.float64).copy()
        if out.values.shape != self.values.shape:
            raise ParameterError("value vector length does not match the layout")
        return out

    def copy(self):
        return self.with_values(self.values)


def value_and_gradient(f, params):
    """Evaluate ``f`` on a torch view of ``params.values`` and return (value, dvalue/dparams).

    ``f`` receives a dict of named float64 tensors (segments of the vector).
    """
    flat = torch.tensor(params.values, dtype=torch.float64, requires_grad=True)
    value = f(params.unpack(flat))
    if not torch.isfinite(value):
        raise NumericError(f"objective is not finite ({float(value.detach())})")
    (grad,) = torch.autograd.grad(value, flat, allow_unused=True)
    grad = np.zeros(len(params)) if grad is None else grad.numpy().copy()
    bad = np.nonzero(~np.isfinite(grad))[0]
    if bad.size:
        raise NumericError(f"non-finite gradient in segment {params.segment_of(int(bad[0]))!r}")
    return float(value.detach()), grad


def gradient(f, params):
    return value_and_gradient(f, params)[1]


@dataclass
class AdamState:
    lr: float
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size, lr, **kwargs):
        return cls(lr, np.zeros(size), np.zeros(size), **kwargs)


def adam_step(state, grads, params):
    """One bias-corrected Adam update; returns (new params, new state).

    ``params`` may be a ParamVector or a plain array. Inputs are not modified.
    """
    values = params.values if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != values.shape or state.m.shape != values.shape:
        raise ParameterError("gradient, moment and parameter lengths differ")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_values = values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(state.lr, m, v, t, state.beta1, state.beta2, state.eps)
    if isinstance(params, ParamVector):
        return params.with_values(new_values), new_state
    return new_values, new_state
