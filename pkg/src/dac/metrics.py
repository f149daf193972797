"""Clustering metrics, an EM baseline for cross-checks, and report output."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .datagen import TAG_EM, MogParams, stream_rng
from .errors import ContractError


def _contingency(y_true, y_pred):
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ContractError(f"label arrays must match: {y_true.shape} vs {y_pred.shape}")
    if y_true.size < 2:
        raise ContractError("need at least two points")
    _, ti = np.unique(y_true, return_inverse=True)
    _, pi = np.unique(y_pred, return_inverse=True)
    table = np.zeros((ti.max() + 1, pi.max() + 1), dtype=np.int64)
    np.add.at(table, (ti, pi), 1)
    return table


def _comb2(x):
    return x * (x - 1) / 2.0


def ari(y_true, y_pred) -> float:
    """Adjusted Rand index from the pair-counting contingency table."""
    table = _contingency(y_true, y_pred)
    n = table.sum()
    index = _comb2(table).sum()
    row = _comb2(table.sum(axis=1)).sum()
    col = _comb2(table.sum(axis=0)).sum()
    expected = row * col / _comb2(n)
    max_index = 0.5 * (row + col)
    if max_index == expected:  # both partitions trivial: agreement is perfect
        return 1.0
    return float((index - expected) / (max_index - expected))


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(y_true, y_pred) -> float:
    """Mutual information normalized by the mean of the two entropies."""
    table = _contingency(y_true, y_pred)
    n = table.sum()
    hu = _entropy(table.sum(axis=1), n)
    hv = _entropy(table.sum(axis=0), n)
    pij = table / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / (n * n)
    nz = table > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    denom = 0.5 * (hu + hv)
    if denom == 0.0:
        return 0.0
    return mi / denom


def k_mae(k_true, k_pred) -> float:
    """Mean absolute error between true and estimated cluster counts."""
    k_true = np.asarray(k_true, dtype=float)
    k_pred = np.asarray(k_pred, dtype=float)
    if k_true.shape != k_pred.shape:
        raise ContractError("k lists must have equal length")
    return float(np.abs(k_true - k_pred).mean())


VAR_FLOOR = 1e-6


def _kmeanspp_centers(X, k, rng):
    centers = [X[rng.integers(len(X))]]
    for _ in range(1, k):
        d2 = np.min([((X - c) ** 2).sum(axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total == 0:
            centers.append(X[rng.integers(len(X))])
            continue
        centers.append(X[rng.choice(len(X), p=d2 / total)])
    return np.array(centers)


def _mog_log_comp(X, pi, mu, var):
    diff = X[:, None, :] - mu[None]
    return (np.log(pi)[None]
            - 0.5 * (np.log(2 * np.pi * var)[None] + diff ** 2 / var[None]).sum(-1))


def em_mog_fit(X, k, seed, tol=1e-6, max_iters=500):
    """Diagonal-covariance EM with distance-weighted seeding.

    Returns (MogParams estimate, responsibilities [n, k], per-iteration mean LL).
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if k < 1 or n < k:
        raise ContractError("need k >= 1 and at least k points")
    rng = stream_rng(seed, TAG_EM, 0)
    mu = _kmeanspp_centers(X, k, rng)
    assign = np.argmin(((X[:, None] - mu[None]) ** 2).sum(-1), axis=1)
    pi = np.bincount(assign, minlength=k) / n
    pi = np.maximum(pi, 1e-12)
    pi = pi / pi.sum()
    var = np.empty((k, X.shape[1]))
    for j in range(k):
        pts = X[assign == j]
        var[j] = pts.var(axis=0) if len(pts) > 1 else X.var(axis=0)
    var = np.maximum(var, VAR_FLOOR)

    ll_history = []
    prev_ll = -np.inf
    resp = None
    for _ in range(max_iters):
        comp = _mog_log_comp(X, pi, mu, var)
        m = comp.max(axis=1, keepdims=True)
        log_norm = m[:, 0] + np.log(np.exp(comp - m).sum(axis=1))
        ll = float(log_norm.mean())
        ll_history.append(ll)
        resp = np.exp(comp - log_norm[:, None])
        nk = resp.sum(axis=0)
        pi = np.maximum(nk / n, 1e-12)
        pi = pi / pi.sum()
        safe_nk = np.maximum(nk, 1e-12)
        mu = (resp[:, :, None] * X[:, None, :]).sum(axis=0) / safe_nk[:, None]
        diff = X[:, None, :] - mu[None]
        var = (resp[:, :, None] * diff ** 2).sum(axis=0) / safe_nk[:, None]
        var = np.maximum(var, VAR_FLOOR)
        if abs(ll - prev_ll) < tol:
            break
        prev_ll = ll
    params = MogParams(pi=pi, mu=mu, sigma=np.sqrt(var))
    return params, resp, ll_history


@dataclass
class MetricsReport:
    """Aggregates over an evaluation run of many datasets."""

    ll: float
    ari: float
    nmi: float
    k_mae: float
    time_per_dataset_seconds: float
    n_datasets: int
    config: dict = field(default_factory=dict)

    def to_kv_text(self) -> str:
        lines = [f"ll={self.ll:.6f}", f"ari={self.ari:.6f}", f"nmi={self.nmi:.6f}",
                 f"k_mae={self.k_mae:.6f}",
                 f"time_per_dataset_seconds={self.time_per_dataset_seconds:.6f}",
                 f"n_datasets={self.n_datasets}"]
        for key in sorted(self.config):
            lines.append(f"config.{key}={self.config[key]}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({
            "ll": self.ll, "ari": self.ari, "nmi": self.nmi, "k_mae": self.k_mae,
            "time_per_dataset_seconds": self.time_per_dataset_seconds,
            "n_datasets": self.n_datasets, "config": self.config,
        }, indent=2, sort_keys=True) + "\n"
