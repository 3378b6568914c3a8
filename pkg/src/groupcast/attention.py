"""Set-attention building blocks.

Multi-head attention plus the three set blocks used by the feature
extractor: SAB (self-attention over a set, permutation-equivariant), ISAB
(attention routed through learnable inducing points, linear in set size),
and PMA (pooling a set to fixed seeds, permutation-invariant).

All blocks accept inputs [..., n, d] with arbitrary leading batch axes and
any set size n >= 1 under one fixed weight set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, EmptySetError
from .tensor import Parameter, Tensor


@dataclass
class AttentionConfig:
    d_model: int = 64
    n_heads: int = 4
    dtype: type = np.float64

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise DimensionError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self):
        return self.d_model // self.n_heads


class Linear:
    """Affine map on the last axis."""

    def __init__(self, d_in, d_out, rng, name, dtype=np.float64):
        self.weight = Parameter(T.uniform_init(rng, d_in, d_out, (d_in, d_out), dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(d_out, dtype=dtype), f"{name}.bias")

    def __call__(self, x):
        # flatten leading axes so the weight gradient is a single GEMM
        lead = x.shape[:-1]
        if len(lead) != 1:
            x = T.reshape(x, (-1, x.shape[-1]))
        out = T.matmul(x, self.weight) + self.bias
        if len(lead) != 1:
            out = T.reshape(out, lead + (out.shape[-1],))
        return out

    def params(self):
        return [self.weight, self.bias]


class LayerNorm:
    def __init__(self, d, name, dtype=np.float64):
        self.gain = Parameter(np.ones(d, dtype=dtype), f"{name}.gain")
        self.bias = Parameter(np.zeros(d, dtype=dtype), f"{name}.bias")

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, axis=-1)

    def params(self):
        return [self.gain, self.bias]


class MultiheadAttention:
    """Scaled dot-product attention with head split/merge and output projection."""

    def __init__(self, cfg: AttentionConfig, rng, name):
        d = cfg.d_model
        self.cfg = cfg
        self.wq = Linear(d, d, rng, f"{name}.wq", cfg.dtype)
        self.wk = Linear(d, d, rng, f"{name}.wk", cfg.dtype)
        self.wv = Linear(d, d, rng, f"{name}.wv", cfg.dtype)
        self.wo = Linear(d, d, rng, f"{name}.wo", cfg.dtype)

    def _split(self, x):
        # [..., n, d] -> [..., h, n, d_head]
        h, dh = self.cfg.n_heads, self.cfg.d_head
        nd = x.ndim
        x = T.reshape(x, x.shape[:-1] + (h, dh))
        axes = tuple(range(nd - 2)) + (nd - 1, nd - 2, nd)
        return T.transpose(x, axes)

    def _merge(self, x):
        # [..., h, n, d_head] -> [..., n, d]
        nd = x.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        x = T.transpose(x, axes)
        return T.reshape(x, x.shape[:-2] + (self.cfg.d_model,))

    def __call__(self, Q, K, V):
        if K.shape[-2] == 0:
            raise EmptySetError("attention over an empty key set is undefined")
        if Q.shape[-1] != self.cfg.d_model or K.shape[-1] != self.cfg.d_model:
            raise DimensionError(
                f"expected width {self.cfg.d_model}, got Q {Q.shape} / K {K.shape}")
        q = self._split(self.wq(Q))
        k = self._split(self.wk(K))
        v = self._split(self.wv(V))
        scores = T.matmul(q, T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
        scores = scores * (1.0 / math.sqrt(self.cfg.d_head))
        weights = T.softmax(scores, axis=-1)
        out = self._merge(T.matmul(weights, v))
        return self.wo(out)

    def params(self):
        return self.wq.params() + self.wk.params() + self.wv.params() + self.wo.params()


class MAB:
    """Attention + residual + layer norm, then a position-wise feed-forward
    sublayer with its own residual and norm (post-norm placement)."""

    def __init__(self, cfg: AttentionConfig, rng, name):
        d = cfg.d_model
        self.attn = MultiheadAttention(cfg, rng, f"{name}.attn")
        self.ln1 = LayerNorm(d, f"{name}.ln1", cfg.dtype)
        self.ln2 = LayerNorm(d, f"{name}.ln2", cfg.dtype)
        self.ff1 = Linear(d, 4 * d, rng, f"{name}.ff1", cfg.dtype)
        self.ff2 = Linear(4 * d, d, rng, f"{name}.ff2", cfg.dtype)

    def __call__(self, q, kv):
        h = self.ln1(q + self.attn(q, kv, kv))
        return self.ln2(h + self.ff2(T.gelu(self.ff1(h))))

    def params(self):
        return (self.attn.params() + self.ln1.params() + self.ln2.params()
                + self.ff1.params() + self.ff2.params())


class SAB:
    """Self-attention over a set; equivariant in the n rows."""

    def __init__(self, cfg: AttentionConfig, rng, name):
        self.mab = MAB(cfg, rng, name)

    def __call__(self, x):
        if x.shape[-2] == 0:
            raise EmptySetError("SAB requires a non-empty set")
        return self.mab(x, x)

    def params(self):
        return self.mab.params()


class ISAB:
    """Inducing-point attention: pool the set onto m learned queries, then
    attend back. Cost is linear in the set size."""

    def __init__(self, cfg: AttentionConfig, rng, name, m=20):
        if m < 1:
            raise DimensionError("ISAB needs at least one inducing point")
        d = cfg.d_model
        self.m = m
        self.inducing = Parameter(
            T.uniform_init(rng, m, d, (m, d), cfg.dtype), f"{name}.inducing")
        self.mab_in = MAB(cfg, rng, f"{name}.in")
        self.mab_out = MAB(cfg, rng, f"{name}.out")

    def __call__(self, x):
        if x.shape[-2] == 0:
            raise EmptySetError("ISAB requires a non-empty set")
        ind = T.broadcast_to(self.inducing, x.shape[:-2] + self.inducing.shape)
        h = self.mab_in(ind, x)
        return self.mab_out(x, h)

    def params(self):
        return [self.inducing] + self.mab_in.params() + self.mab_out.params()


class PMA:
    """Pool a set onto k learned seed vectors; invariant in the set rows."""

    def __init__(self, cfg: AttentionConfig, rng, name, k=1):
        d = cfg.d_model
        self.k = k
        self.seeds = Parameter(T.uniform_init(rng, k, d, (k, d), cfg.dtype), f"{name}.seeds")
        self.mab = MAB(cfg, rng, name)

    def __call__(self, x):
        if x.shape[-2] == 0:
            raise EmptySetError("PMA requires a non-empty set")
        seeds = T.broadcast_to(self.seeds, x.shape[:-2] + self.seeds.shape)
        return self.mab(seeds, x)

    def params(self):
        return [self.seeds] + self.mab.params()


def multihead_attention(Q: Tensor, K: Tensor, V: Tensor, mha: MultiheadAttention) -> Tensor:
    """Functional entry point used by tests; delegates to the module."""
    return mha(Q, K, V)
