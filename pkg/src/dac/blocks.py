"""Permutation-aware attention blocks over point sets.

Every block treats a set as a [B, n, d] tensor plus a boolean live-point
mask; masked rows get an additive -1e9 attention logit so their softmax
weight underflows to exactly zero and they cannot influence live rows.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import MASK_LOGIT, Tensor


class SetBatch:
    """B padded point-sets: values [B, n, d] plus a live mask [B, n]."""

    def __init__(self, values, mask=None):
        if not isinstance(values, Tensor):
            values = Tensor(values)
        if values.ndim != 3:
            raise ContractError(f"SetBatch expects [B, n, d] values, got shape {values.shape}")
        self.values = values
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != values.shape[:2]:
                raise ContractError(f"mask shape {mask.shape} does not match values {values.shape}")
        self.mask = mask

    @property
    def shape(self):
        return self.values.shape

    def live_counts(self):
        b, n, _ = self.shape
        if self.mask is None:
            return np.full(b, n)
        return self.mask.sum(axis=1)


def glorot(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    shape = shape if shape is not None else (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)


class Linear:
    def __init__(self, d_in, d_out, rng):
        self.w = Tensor(glorot(rng, d_in, d_out), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x):
        return T.linear(x, self.w, self.b)

    def named_params(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class RowFF:
    """Feed-forward applied row-wise: affine, ReLU, affine."""

    def __init__(self, d_in, d_hidden, d_out, rng, zero_out=False):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)
        if zero_out:
            self.fc2.w.data[:] = 0.0

    def __call__(self, x):
        return self.fc2(T.relu(self.fc1(x)))

    def named_params(self, prefix):
        yield from self.fc1.named_params(f"{prefix}.fc1")
        yield from self.fc2.named_params(f"{prefix}.fc2")


class MultiheadAttention:
    """Scaled dot-product attention with per-head projections and key masking."""

    def __init__(self, d, heads, rng):
        if d % heads != 0:
            raise ContractError(f"width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)

    def __call__(self, q: SetBatch, kv: SetBatch) -> SetBatch:
        b, p, d = q.shape
        _, m, _ = kv.shape
        if d != self.d or kv.shape[2] != self.d:
            raise ContractError(f"attention width mismatch: {q.shape} vs {kv.shape} vs d={self.d}")
        if kv.mask is not None and not kv.mask.any(axis=1).all():
            raise ContractError("attention over a batch element with no live keys")
        h, dh = self.heads, self.d // self.heads

        def split(x, n):
            return T.transpose(T.reshape(x, (b, n, h, dh)), (0, 2, 1, 3))

        qh = split(self.wq(q.values), p)
        kh = split(self.wk(kv.values), m)
        vh = split(self.wv(kv.values), m)
        scores = T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        if kv.mask is not None:
            bias = np.where(kv.mask, 0.0, MASK_LOGIT)[:, None, None, :]
            scores = scores + Tensor(bias.astype(scores.dtype))
        attn = T.softmax(scores, axis=-1)
        mixed = T.matmul(attn, vh)
        out = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, p, d))
        return SetBatch(self.wo(out), q.mask)

    def named_params(self, prefix):
        for name in ("wq", "wk", "wv", "wo"):
            yield from getattr(self, name).named_params(f"{prefix}.{name}")


class MAB:
    """Attention block: H = X + rFF(MHA(X, Y)); output = H + rFF(H)."""

    def __init__(self, d, heads, rng):
        self.mha = MultiheadAttention(d, heads, rng)
        self.ff_inner = RowFF(d, d, d, rng)
        self.ff_outer = RowFF(d, d, d, rng)

    def __call__(self, x: SetBatch, y: SetBatch) -> SetBatch:
        h = x.values + self.ff_inner(self.mha(x, y).values)
        out = h + self.ff_outer(h)
        return SetBatch(out, x.mask)

    def named_params(self, prefix):
        yield from self.mha.named_params(f"{prefix}.mha")
        yield from self.ff_inner.named_params(f"{prefix}.ff_inner")
        yield from self.ff_outer.named_params(f"{prefix}.ff_outer")


class SAB:
    """Self-attention block: MAB of a set against itself."""

    def __init__(self, d, heads, rng):
        self.mab = MAB(d, heads, rng)

    def __call__(self, x: SetBatch) -> SetBatch:
        return self.mab(x, x)

    def named_params(self, prefix):
        yield from self.mab.named_params(f"{prefix}.mab")


class ISAB:
    """Induced set attention: route through m trainable inducing points.

    Cost per layer is O(n * m * d) instead of the O(n^2 d) of full
    self-attention.
    """

    def __init__(self, d, heads, n_inducing, rng):
        if n_inducing < 1:
            raise ContractError("need at least one inducing point")
        self.inducing = Tensor(rng.normal(size=(n_inducing, d)) * 0.02, requires_grad=True)
        self.mab_induce = MAB(d, heads, rng)
        self.mab_out = MAB(d, heads, rng)

    def __call__(self, x: SetBatch) -> SetBatch:
        b = x.shape[0]
        m, d = self.inducing.shape
        ind = SetBatch(T.broadcast_to(self.inducing, (b, m, d)), None)
        summary = self.mab_induce(ind, x)
        return self.mab_out(x, summary)

    def named_params(self, prefix):
        yield f"{prefix}.inducing", self.inducing
        yield from self.mab_induce.named_params(f"{prefix}.mab_induce")
        yield from self.mab_out.named_params(f"{prefix}.mab_out")


class ISABStack:
    def __init__(self, depth, d, heads, n_inducing, rng):
        if depth < 1:
            raise ContractError("stack depth must be >= 1")
        self.layers = [ISAB(d, heads, n_inducing, rng) for _ in range(depth)]

    def __call__(self, x: SetBatch) -> SetBatch:
        for layer in self.layers:
            x = layer(x)
        return x

    def named_params(self, prefix):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.isab{i}")


class SABStack:
    def __init__(self, depth, d, heads, rng):
        self.layers = [SAB(d, heads, rng) for _ in range(depth)]

    def __call__(self, x: SetBatch) -> SetBatch:
        for layer in self.layers:
            x = layer(x)
        return x

    def named_params(self, prefix):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.sab{i}")


class PMA:
    """Pooling by multihead attention: k trainable seeds attend over the set."""

    def __init__(self, d, heads, k, rng):
        if k < 1:
            raise ContractError("PMA needs k >= 1 seeds")
        self.seeds = Tensor(rng.normal(size=(k, d)) * 0.02, requires_grad=True)
        self.mab = MAB(d, heads, rng)

    def __call__(self, x: SetBatch) -> Tensor:
        if x.mask is not None and not x.mask.any(axis=1).all():
            raise ContractError("PMA over a batch element with no live points")
        b = x.shape[0]
        k, d = self.seeds.shape
        s = SetBatch(T.broadcast_to(self.seeds, (b, k, d)), None)
        return self.mab(s, x).values

    def named_params(self, prefix):
        yield f"{prefix}.seeds", self.seeds
        yield from self.mab.named_params(f"{prefix}.mab")
