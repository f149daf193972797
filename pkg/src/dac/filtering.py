"""Cluster filtering: extract one cluster per forward pass.

Two variants: a min-loss network free to pick whichever true cluster is
easiest this pass, and an anchored network conditioned on one point whose
cluster must be returned. Both emit cluster parameters plus per-point
membership probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import ISABStack, Linear, MAB, PMA, RowFF, SetBatch
from .errors import ContractError
from .tensor import Tensor


@dataclass
class LabeledSet:
    """A SetBatch with ground-truth cluster labels (1..k per set, 0 = padding)."""

    x: SetBatch
    y: np.ndarray  # [B, n] int
    k_per_set: np.ndarray  # [B] int

    def __post_init__(self):
        self.y = np.asarray(self.y)
        self.k_per_set = np.asarray(self.k_per_set)
        live = self.x.mask if self.x.mask is not None else np.ones(self.y.shape, dtype=bool)
        if np.any(self.y[live] < 1):
            raise ContractError("every live point needs a label in 1..k")

    def live_mask(self):
        if self.x.mask is None:
            return np.ones(self.y.shape, dtype=bool)
        return self.x.mask


@dataclass
class FilterOutput:
    """One filtering pass: cluster parameters and membership probabilities."""

    theta: Tensor | None  # [B, theta_dim] or None when no parameter head
    m: Tensor  # [B, n] probabilities in [0, 1]
    m_logits: Tensor | None = None  # pre-sigmoid; used for the stable losses


class _FilterCore:
    """Shared encoder and decoding heads of both filtering variants."""

    def __init__(self, d, heads, n_inducing, enc_depth, mask_depth, theta_dim, in_dim, rng):
        self.embed = Linear(in_dim, d, rng)
        self.encoder = ISABStack(enc_depth, d, heads, n_inducing, rng)
        self.theta_pool = PMA(d, heads, 1, rng)
        self.theta_head = RowFF(d, d, theta_dim, rng) if theta_dim else None
        self.mask_mab = MAB(d, heads, rng)
        self.mask_stack = ISABStack(mask_depth, d, heads, n_inducing, rng)
        self.mask_head = RowFF(d, d, 1, rng)
        self.theta_dim = theta_dim

    def encode(self, x: SetBatch) -> SetBatch:
        if x.mask is not None and not x.mask.any(axis=1).all():
            raise ContractError("filtering needs at least one live point per set")
        return self.encoder(SetBatch(self.embed(x.values), x.mask))

    def decode(self, h: SetBatch) -> FilterOutput:
        pooled = self.theta_pool(h)  # [B, 1, d]
        theta = self.theta_head(pooled)[:, 0, :] if self.theta_head else None
        hm = self.mask_mab(h, SetBatch(pooled, None))
        hm = self.mask_stack(hm)
        logits = self.mask_head(hm.values)[:, :, 0]
        return FilterOutput(theta=theta, m=T.sigmoid(logits), m_logits=logits)

    def named_params(self, prefix):
        yield from self.embed.named_params(f"{prefix}.embed")
        yield from self.encoder.named_params(f"{prefix}.encoder")
        yield from self.theta_pool.named_params(f"{prefix}.theta_pool")
        if self.theta_head:
            yield from self.theta_head.named_params(f"{prefix}.theta_head")
        yield from self.mask_mab.named_params(f"{prefix}.mask_mab")
        yield from self.mask_stack.named_params(f"{prefix}.mask_stack")
        yield from self.mask_head.named_params(f"{prefix}.mask_head")


class MlfModel:
    """Min-loss filtering: the network picks which cluster to return."""

    def __init__(self, d=32, heads=4, n_inducing=32, enc_depth=4, mask_depth=2,
                 theta_dim=4, in_dim=2, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.core = _FilterCore(d, heads, n_inducing, enc_depth, mask_depth,
                                theta_dim, in_dim, rng)

    def forward(self, x: SetBatch) -> FilterOutput:
        return self.core.decode(self.core.encode(x))

    def named_params(self, prefix="mlf"):
        yield from self.core.named_params(prefix)


class AfModel:
    """Anchored filtering: return the cluster containing the anchor point."""

    def __init__(self, d=32, heads=4, n_inducing=32, enc_depth=4, mask_depth=2,
                 theta_dim=4, in_dim=2, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.core = _FilterCore(d, heads, n_inducing, enc_depth, mask_depth,
                                theta_dim, in_dim, rng)
        self.anchor_mab = MAB(d, heads, rng)

    def forward(self, x: SetBatch, anchors) -> FilterOutput:
        anchors = np.asarray(anchors)
        live = x.mask if x.mask is not None else np.ones(x.shape[:2], dtype=bool)
        if not live[np.arange(x.shape[0]), anchors].all():
            raise ContractError("anchor indexes a masked point")
        h = self.core.encode(x)
        h_a = T.take_rows(h.values, anchors)
        conditioned = self.anchor_mab(h, SetBatch(h_a, None))
        return self.core.decode(conditioned)

    def named_params(self, prefix="af"):
        yield from self.core.named_params(prefix)
        yield from self.anchor_mab.named_params(f"{prefix}.anchor_mab")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy from logits, log-sum-exp stabilized."""
    t = targets if isinstance(targets, Tensor) else Tensor(np.asarray(targets, dtype=logits.dtype))
    return T.softplus(T.neg(logits)) + T.mul(T.sub(1.0 + 0.0 * t, t), logits)


def _bce_probability_form(m: Tensor, targets: np.ndarray) -> Tensor:
    t = Tensor(np.asarray(targets, dtype=m.dtype))
    return T.neg(T.mul(t, T.log(m)) + T.mul(1.0 - t, T.log(1.0 - m)))


def _bce_elementwise(out: FilterOutput, targets):
    if out.m_logits is not None:
        return bce_with_logits(out.m_logits, targets)
    return _bce_probability_form(out.m, targets)


def _selected_term(out, live_f, indicator, logp, counts, n_live, normalize_bce):
    """BCE against an indicator (+ optional per-cluster NLL), per set."""
    bce = _bce_elementwise(out, indicator)
    bce_per_set = T.tsum(T.mul(bce, Tensor(live_f, dtype=bce.dtype)), axis=1)
    if normalize_bce:
        bce_per_set = bce_per_set * Tensor(1.0 / n_live, dtype=bce.dtype)
    if logp is None:
        return bce_per_set
    sel = Tensor((indicator / counts[:, None]).astype(logp.dtype))
    nll_per_set = T.neg(T.tsum(T.mul(logp, sel), axis=1))
    return bce_per_set + nll_per_set


def _per_cluster_tables(out: FilterOutput, data: LabeledSet, logp_data, normalize_bce):
    """Forward-only per-(set, cluster) loss table used to pick the argmin."""
    live = data.live_mask()
    live_f = live.astype(np.float64)
    n_live = live_f.sum(axis=1)
    if out.m_logits is not None:
        z = out.m_logits.data.astype(np.float64)
        sp_pos = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))  # bce target 0
        sp_neg = sp_pos - z  # bce target 1
    else:
        m = np.clip(out.m.data.astype(np.float64), T.LOG_EPS, 1 - T.LOG_EPS)
        sp_neg = -np.log(m)
        sp_pos = -np.log(1 - m)
    k_max = int(data.k_per_set.max())
    b = data.y.shape[0]
    table = np.full((b, k_max), np.inf)
    counts = np.zeros((b, k_max))
    for j in range(1, k_max + 1):
        ind = (data.y == j) & live
        counts[:, j - 1] = ind.sum(axis=1)
        bce = (np.where(ind, sp_neg, sp_pos) * live_f).sum(axis=1)
        if normalize_bce:
            bce = bce / n_live
        total = bce
        if logp_data is not None:
            with np.errstate(invalid="ignore"):
                nll = -(logp_data * ind).sum(axis=1) / counts[:, j - 1]
            total = bce + nll
        valid = j <= data.k_per_set
        table[valid, j - 1] = total[valid]
    return table, counts, live, live_f, n_live


def mlf_loss(out: FilterOutput, data: LabeledSet, density=None, normalize_bce=True) -> Tensor:
    """Minimum over true clusters of (membership BCE + cluster NLL), batch mean.

    ``density`` maps (points, theta) to per-point log densities on the tape;
    omit it to train the membership head alone.
    """
    logp = density(data.x.values, out.theta) if density is not None else None
    logp_data = logp.data.astype(np.float64) if logp is not None else None
    table, counts, live, live_f, n_live = _per_cluster_tables(out, data, logp_data, normalize_bce)
    best_j = table.argmin(axis=1) + 1  # the min is exact: all candidates enumerated
    indicator = ((data.y == best_j[:, None]) & live).astype(np.float64)
    per_set = _selected_term(out, live_f, indicator, logp,
                             counts[np.arange(len(best_j)), best_j - 1], n_live, normalize_bce)
    return T.tmean(per_set)


def af_loss(out: FilterOutput, data: LabeledSet, anchors, density=None, normalize_bce=True) -> Tensor:
    """BCE against the anchor's cluster plus that cluster's NLL, batch mean."""
    anchors = np.asarray(anchors)
    live = data.live_mask()
    b = data.y.shape[0]
    if not live[np.arange(b), anchors].all():
        raise ContractError("anchor indexes a masked point")
    j_a = data.y[np.arange(b), anchors]
    live_f = live.astype(np.float64)
    n_live = live_f.sum(axis=1)
    indicator = ((data.y == j_a[:, None]) & live).astype(np.float64)
    counts = indicator.sum(axis=1)
    logp = density(data.x.values, out.theta) if density is not None else None
    per_set = _selected_term(out, live_f, indicator, logp, counts, n_live, normalize_bce)
    return T.tmean(per_set)
