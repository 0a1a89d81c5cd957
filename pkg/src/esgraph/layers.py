"""Shared transformer building blocks: initializers, sinusoidal positions,
multi-head attention, feed-forward sublayers, and layer-norm parameters.

Weight matrices are stored input-major, applied as ``y = x @ W``.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def sinusoidal_positions(max_len: int, d: int) -> np.ndarray:
    """Classic fixed sin/cos position table, shape (max_len, d)."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    dim = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, dim / d)
    table = np.zeros((max_len, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : (d - d // 2)])
    return table


class LayerNormParams:
    def __init__(self, d: int, name: str):
        self.gain = Parameter(np.ones(d), f"{name}.gain", decay=False)
        self.bias = Parameter(np.zeros(d), f"{name}.bias", decay=False)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias)

    def parameters(self):
        return [self.gain, self.bias]


class MultiHeadAttention:
    """Scaled dot-product attention with h heads over column slices of d.

    key_mask (length L_kv, True = attend) hides pad keys; attn_mask
    (L_q x L_kv, True = allowed) carries causal structure.
    """

    def __init__(self, d: int, n_heads: int, name: str, rng: np.random.Generator):
        if d % n_heads != 0:
            raise ValueError(f"{name}: d={d} not divisible by n_heads={n_heads}")
        self.d = d
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.w_q = Parameter(xavier_uniform(rng, (d, d)), f"{name}.w_q")
        self.w_k = Parameter(xavier_uniform(rng, (d, d)), f"{name}.w_k")
        self.w_v = Parameter(xavier_uniform(rng, (d, d)), f"{name}.w_v")
        self.w_o = Parameter(xavier_uniform(rng, (d, d)), f"{name}.w_o")
        self.b_o = Parameter(np.zeros(d), f"{name}.b_o", decay=False)

    def __call__(self, query: Tensor, kv: Tensor, key_mask: np.ndarray | None = None,
                 attn_mask: np.ndarray | None = None) -> Tensor:
        lq = query.shape[0]
        lk = kv.shape[0]
        q = ag.matmul(query, self.w_q)
        k = ag.matmul(kv, self.w_k)
        v = ag.matmul(kv, self.w_v)
        mask = np.ones((lq, lk), dtype=bool)
        if key_mask is not None:
            mask &= np.asarray(key_mask, dtype=bool)[None, :]
        if attn_mask is not None:
            mask &= attn_mask
        scale = 1.0 / np.sqrt(self.d_head)
        heads = []
        for h in range(self.n_heads):
            cols = slice(h * self.d_head, (h + 1) * self.d_head)
            qh = q[:, cols]
            kh = k[:, cols]
            vh = v[:, cols]
            scores = ag.mul(ag.matmul(qh, ag.transpose(kh)), Tensor(scale))
            weights = ag.softmax(scores, mask=mask, axis=-1)
            heads.append(ag.matmul(weights, vh))
        merged = ag.concat(heads, axis=1) if self.n_heads > 1 else heads[0]
        return ag.linear(merged, self.w_o, self.b_o)

    def parameters(self):
        return [self.w_q, self.w_k, self.w_v, self.w_o, self.b_o]


class FeedForward:
    def __init__(self, d: int, hidden: int, name: str, rng: np.random.Generator):
        self.w1 = Parameter(xavier_uniform(rng, (d, hidden)), f"{name}.w1")
        self.b1 = Parameter(np.zeros(hidden), f"{name}.b1", decay=False)
        self.w2 = Parameter(xavier_uniform(rng, (hidden, d)), f"{name}.w2")
        self.b2 = Parameter(np.zeros(d), f"{name}.b2", decay=False)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.linear(ag.relu(ag.linear(x, self.w1, self.b1)), self.w2, self.b2)

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]


def causal_mask(length: int) -> np.ndarray:
    """(L, L) boolean mask, True at or below the diagonal."""
    return np.tril(np.ones((length, length), dtype=bool))
