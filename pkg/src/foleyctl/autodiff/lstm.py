"""Recurrent layers.

The input-to-hidden projection for all four gates is hoisted out of the time
loop as one big matmul; only the hidden-to-hidden product runs per step.
"""
from __future__ import annotations

import numpy as np

from .modules import Module, ModuleList, parameter
from .tensor import as_tensor, concat, matmul, sigmoid, stack, tanh


class LSTMLayer(Module):
    """Single-direction LSTM over (B, T, D) -> (B, T, H).

    Gate order in the fused weight is input, forget, cell, output. The
    forget-gate bias starts at 1 so early training does not flush state.
    """

    def __init__(self, input_size, hidden_size, rng, reverse=False, dtype=np.float32):
        super().__init__()
        self.hidden_size = hidden_size
        self.reverse = reverse
        scale = 1.0 / np.sqrt(hidden_size)
        self.wx = parameter(
            rng.uniform(-scale, scale, (input_size, 4 * hidden_size)).astype(dtype)
        )
        self.wh = parameter(
            rng.uniform(-scale, scale, (hidden_size, 4 * hidden_size)).astype(dtype)
        )
        bias = np.zeros(4 * hidden_size, dtype=dtype)
        bias[hidden_size : 2 * hidden_size] = 1.0
        self.b = parameter(bias)

    def forward(self, x):
        batch, steps = x.shape[0], x.shape[1]
        hid = self.hidden_size
        pre = matmul(x, self.wx) + self.b  # (B, T, 4H), one GEMM for all steps
        h = as_tensor(np.zeros((batch, hid), dtype=x.dtype))
        c = as_tensor(np.zeros((batch, hid), dtype=x.dtype))
        order = range(steps - 1, -1, -1) if self.reverse else range(steps)
        outs = []
        for t in order:
            gates = pre[:, t, :] + matmul(h, self.wh)
            i = sigmoid(gates[:, :hid])
            f = sigmoid(gates[:, hid : 2 * hid])
            g = tanh(gates[:, 2 * hid : 3 * hid])
            o = sigmoid(gates[:, 3 * hid :])
            c = f * c + i * g
            h = o * tanh(c)
            outs.append(h)
        if self.reverse:
            outs.reverse()
        return stack(outs, axis=1)


class LSTM(Module):
    """Stacked, optionally bidirectional LSTM; returns (B, T, H * directions)."""

    def __init__(self, input_size, hidden_size, rng, num_layers=1,
                 bidirectional=False, dtype=np.float32):
        super().__init__()
        self.layers = ModuleList()
        dirs = 2 if bidirectional else 1
        for layer in range(num_layers):
            in_size = input_size if layer == 0 else hidden_size * dirs
            group = ModuleList([LSTMLayer(in_size, hidden_size, rng, dtype=dtype)])
            if bidirectional:
                group.append(LSTMLayer(in_size, hidden_size, rng, reverse=True, dtype=dtype))
            self.layers.append(group)

    def forward(self, x):
        for group in self.layers:
            if len(group) == 2:
                x = concat([group[0](x), group[1](x)], axis=-1)
            else:
                x = group[0](x)
        return x
