"""Recurrent layers: the fused GRU kernel plus step-by-step compositions.

The composed GRU builds the same recurrence out of primitive ops one frame
at a time. It is slow but shares no code with the fused kernel, which makes
it a useful cross-check.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .ops import gru_layer
from .tensor import Tensor, as_tensor

__all__ = ["gru_layer", "gru_layer_composed", "lstm_layer"]


def _step_order(t_len, reverse):
    return range(t_len - 1, -1, -1) if reverse else range(t_len)


def _masked_update(new, old, m):
    return new * m + old * (1 - m)


def gru_layer_composed(x, w_ih, w_hh, b_ih, b_hh, mask=None, reverse=False) -> Tensor:
    x = as_tensor(x)
    b, t_len, _ = x.shape
    h = w_hh.shape[1]
    dtype = w_hh.dtype
    mask = np.ones((b, t_len), dtype=dtype) if mask is None else np.asarray(mask, dtype=dtype)
    state = Tensor(np.zeros((b, h), dtype=dtype))
    outs = [None] * t_len
    for t in _step_order(t_len, reverse):
        gx = ops.linear(x[:, t, :], w_ih, b_ih)
        gh = ops.linear(state, w_hh, b_hh)
        r = ops.sigmoid(gx[:, :h] + gh[:, :h])
        z = ops.sigmoid(gx[:, h : 2 * h] + gh[:, h : 2 * h])
        n = ops.tanh(gx[:, 2 * h :] + r * gh[:, 2 * h :])
        new = (1 - z) * n + z * state
        state = _masked_update(new, state, mask[:, t : t + 1])
        outs[t] = state
    return ops.stack(outs, axis=1)


def lstm_layer(x, w_ih, w_hh, b_ih, b_hh, mask=None, reverse=False) -> Tensor:
    """LSTM direction over a padded batch; gate order input/forget/cell/output."""
    x = as_tensor(x)
    b, t_len, _ = x.shape
    h = w_hh.shape[1]
    dtype = w_hh.dtype
    mask = np.ones((b, t_len), dtype=dtype) if mask is None else np.asarray(mask, dtype=dtype)
    state = Tensor(np.zeros((b, h), dtype=dtype))
    cell = Tensor(np.zeros((b, h), dtype=dtype))
    gx_all = ops.linear(x, w_ih, b_ih)
    outs = [None] * t_len
    for t in _step_order(t_len, reverse):
        gates = gx_all[:, t, :] + ops.linear(state, w_hh, b_hh)
        i = ops.sigmoid(gates[:, :h])
        f = ops.sigmoid(gates[:, h : 2 * h])
        g = ops.tanh(gates[:, 2 * h : 3 * h])
        o = ops.sigmoid(gates[:, 3 * h :])
        m = mask[:, t : t + 1]
        cell = _masked_update(f * cell + i * g, cell, m)
        state = _masked_update(o * ops.tanh(cell), state, m)
        outs[t] = state
    return ops.stack(outs, axis=1)
