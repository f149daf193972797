"""Set-transformer baseline with an adaptive-computation-time decoder.

A learned seed sequence is extended one pooled vector at a time; each step k
decodes k mixture components plus a continue probability v_k. The stop score
s_k = 1 - prod_{j<=k} v_j is nondecreasing, and inference halts once it
exceeds 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import ISABStack, Linear, MAB, PMA, RowFF, SABStack, SetBatch
from .density import LOG_2PI, LOG_VAR_RANGE
from .errors import ContractError
from .filtering import bce_with_logits
from .tensor import Tensor


def _stable_sigmoid(z):
    out = 1.0 / (1.0 + np.exp(-np.abs(z)))
    return np.where(z >= 0, out, 1.0 - out)


@dataclass
class ActOutput:
    """Per-step decoder outputs for k = 1..k_max."""

    halt_logits: list  # k_max tensors [B]; v_k = sigmoid(halt_logits[k-1])
    mixtures: list  # k_max tensors [B, k, 5]: (pi logit, mu1, mu2, logvar1, logvar2)
    k_max: int = field(default=0)

    def __post_init__(self):
        self.k_max = len(self.halt_logits)

    def continue_probs(self):
        """v_k values as a [B, k_max] array."""
        return np.stack([_stable_sigmoid(h.data) for h in self.halt_logits], axis=1)

    def stop_scores(self):
        """s_k = 1 - prod_{j<=k} v_j, nondecreasing in k."""
        return 1.0 - np.cumprod(self.continue_probs(), axis=1)


class ActStModel:
    def __init__(self, d=32, heads=4, n_inducing=32, enc_depth=4, dec_depth=2,
                 in_dim=2, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d = d
        self.embed = Linear(in_dim, d, rng)
        self.encoder = ISABStack(enc_depth, d, heads, n_inducing, rng)
        self.seed = Tensor(rng.normal(size=(1, d)) * 0.02, requires_grad=True)
        self.extend_pool = PMA(d, heads, 1, rng)  # grows the seed sequence
        self.attend = MAB(d, heads, rng)
        self.decoder = SABStack(dec_depth, d, heads, rng)
        self.halt_head = RowFF(1, d, 1, rng)
        self.param_head = RowFF(d - 1, d, 5, rng)

    def seed_rows(self, k):
        """The first k seeds; each new one is the pooled previous sequence."""
        if k < 1:
            raise ContractError("need k >= 1 seeds")
        rows = [self.seed]
        for _ in range(1, k):
            prev = T.concat(rows, axis=0) if len(rows) > 1 else rows[0]
            pooled = self.extend_pool(SetBatch(prev[None, :, :]))
            rows.append(pooled[0])
        return rows

    def apma(self, h: SetBatch, k) -> Tensor:
        """Attend the first k seeds over the encoded set -> [B, k, d]."""
        rows = self.seed_rows(k)
        seeds = T.concat(rows, axis=0) if k > 1 else rows[0]
        b = h.shape[0]
        s = SetBatch(T.broadcast_to(seeds, (b, k, self.d)), None)
        return self.attend(s, h).values

    def encode(self, x: SetBatch) -> SetBatch:
        return self.encoder(SetBatch(self.embed(x.values), x.mask))

    def decode_step(self, h: SetBatch, k):
        """One decoder unroll at width k: (halt logit [B], mixture [B, k, 5])."""
        g = self.decoder(SetBatch(self.apma(h, k), None)).values
        halt = T.tmean(self.halt_head(g[:, :, 0:1])[:, :, 0], axis=1)
        mixture = self.param_head(g[:, :, 1:])
        return halt, mixture

    def forward(self, x: SetBatch, k_max) -> ActOutput:
        if k_max < 1:
            raise ContractError("k_max must be >= 1")
        h = self.encode(x)
        halts, mixtures = [], []
        for k in range(1, k_max + 1):
            halt, mixture = self.decode_step(h, k)
            halts.append(halt)
            mixtures.append(mixture)
        return ActOutput(halt_logits=halts, mixtures=mixtures)

    def named_params(self, prefix="actst"):
        yield from self.embed.named_params(f"{prefix}.embed")
        yield from self.encoder.named_params(f"{prefix}.encoder")
        yield f"{prefix}.seed", self.seed
        yield from self.extend_pool.named_params(f"{prefix}.extend_pool")
        yield from self.attend.named_params(f"{prefix}.attend")
        yield from self.decoder.named_params(f"{prefix}.decoder")
        yield from self.halt_head.named_params(f"{prefix}.halt_head")
        yield from self.param_head.named_params(f"{prefix}.param_head")


def mixture_log_density_t(x: Tensor, mixture: Tensor) -> Tensor:
    """Per-point mixture log density: x[B, n, 2], mixture[B, k, 5] -> [B, n]."""
    log_pi = T.sub(mixture[:, :, 0], T.logsumexp(mixture[:, :, 0], axis=1, keepdims=True))
    mu = mixture[:, None, :, 1:3]
    lv = T.clip(mixture[:, None, :, 3:5], -LOG_VAR_RANGE, LOG_VAR_RANGE)
    diff = T.sub(x[:, :, None, :], mu)
    comp = T.tsum((T.mul(T.square(diff), T.exp(-lv)) + lv + LOG_2PI) * (-0.5), axis=-1)
    return T.logsumexp(comp + log_pi[:, None, :], axis=-1)


def mixture_responsibilities(x: np.ndarray, mixture: np.ndarray) -> np.ndarray:
    """Posterior assignment weights [n, k] for points [n, 2], mixture [k, 5]."""
    logits = mixture[:, 0]
    log_pi = logits - np.logaddexp.reduce(logits)
    lv = np.clip(mixture[:, 3:5], -LOG_VAR_RANGE, LOG_VAR_RANGE)
    diff = x[:, None, :] - mixture[None, :, 1:3]
    comp = -0.5 * ((diff ** 2) * np.exp(-lv) + lv + LOG_2PI).sum(-1)
    post = comp + log_pi
    post = post - post.max(axis=1, keepdims=True)
    w = np.exp(post)
    return w / w.sum(axis=1, keepdims=True)


def act_st_loss(out: ActOutput, data, k_true, k_max) -> Tensor:
    """Mixture NLL at the true component count plus halting supervision."""
    k_true = np.asarray(k_true)
    if np.any(k_true < 1) or np.any(k_true > k_max):
        raise ContractError("k_true must lie in [1, k_max]")
    live = data.live_mask().astype(np.float64)
    n_live = live.sum(axis=1)
    b = k_true.shape[0]
    total = None
    for k in range(1, k_max + 1):
        sel = (k_true == k)
        if sel.any():
            ll = mixture_log_density_t(data.x.values, out.mixtures[k - 1])
            per_set = T.tsum(T.mul(ll, Tensor(live, dtype=ll.dtype)), axis=1) * Tensor(1.0 / n_live, dtype=ll.dtype)
            term = T.neg(T.tsum(T.mul(per_set, Tensor(sel.astype(np.float64), dtype=per_set.dtype))))
            total = term if total is None else total + term
    nll = total * (1.0 / b)
    halt_bce = None
    for k in range(1, k_max + 1):
        target = (k < k_true).astype(np.float64)
        term = T.tmean(bce_with_logits(out.halt_logits[k - 1], target))
        halt_bce = term if halt_bce is None else halt_bce + term
    return nll + halt_bce


def act_st_predict(model: ActStModel, x: SetBatch, k_max):
    """Inference: emit components until the stop score exceeds 0.5.

    Returns (labels [n] 1-based, k, mixture [k, 5]) for a batch of one set.
    """
    h = model.encode(x)
    v_prod = np.ones(x.shape[0])
    for k in range(1, k_max + 1):
        halt, mixture = model.decode_step(h, k)
        v = _stable_sigmoid(halt.data)
        v_prod = v_prod * v
        if (1.0 - v_prod)[0] > 0.5 or k == k_max:
            resp = mixture_responsibilities(x.values.data[0], mixture.data[0])
            return resp.argmax(axis=1) + 1, k, mixture.data[0]
