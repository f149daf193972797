"""Seeded generators for the two synthetic clustering benchmarks.

All randomness comes from counter-based Philox streams keyed by
(seed, tag << 48 | index), so datasets can be generated independently and
in parallel while staying exact functions of their seed.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

log = logging.getLogger(__name__)

# stream namespace tags (top 16 bits of the second key word)
TAG_DATA = 0
TAG_INIT = 1
TAG_ANCHOR = 2
TAG_EM = 3

_MASK64 = (1 << 64) - 1


def stream_rng(seed, tag=TAG_DATA, index=0):
    """Philox generator for one (seed, tag, index) stream."""
    key = np.array([np.uint64(seed & _MASK64),
                    np.uint64(((tag << 48) | (index & (1 << 48) - 1)) & _MASK64)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class MogParams:
    """True mixture parameters; sigma holds per-dimension standard deviations."""

    pi: np.ndarray  # [k]
    mu: np.ndarray  # [k, d]
    sigma: np.ndarray  # [k, d]

    @property
    def k(self):
        return len(self.pi)


@dataclass
class WarpParams:
    """Per-cluster warp parameters plus the 1-d radial source mixture."""

    radial: MogParams  # 1-d means/stds, shared mixing with labels
    a: np.ndarray  # [k]
    b: np.ndarray  # [k]
    rho: np.ndarray  # [k] rotation angles
    lam: np.ndarray  # [k, 2] offsets

    @property
    def k(self):
        return len(self.a)


@dataclass
class GeneratedDataset:
    X: np.ndarray  # [n, 2]
    y: np.ndarray  # [n] labels 1..k
    truth: object  # MogParams | WarpParams
    seed: int

    @property
    def n(self):
        return len(self.y)

    @property
    def k(self):
        return self.truth.k


def _draw_n_k(rng, n_max, k_max):
    if n_max < 4 or k_max < 1:
        raise ContractError("need n_max >= 4 and k_max >= 1")
    n_lo = int(np.ceil(0.3 * n_max))
    n = int(rng.integers(n_lo, n_max + 1))
    k = 1 + int(rng.binomial(k_max - 1, 0.5)) if k_max > 1 else 1
    return n, k


def _draw_labels(rng, pi, n, k):
    """Categorical labels with every cluster occupied; degenerate draws redrawn."""
    resamples = 0
    for _ in range(100):
        y = rng.choice(k, size=n, p=pi) + 1
        if len(np.unique(y)) == k:
            if resamples:
                log.debug("resampled degenerate label draw %d time(s)", resamples)
            return y
        resamples += 1
    # pathological mixing weights: force one point per missing cluster
    log.debug("forcing occupancy after %d resamples", resamples)
    missing = np.setdiff1d(np.arange(1, k + 1), np.unique(y))
    idx = rng.choice(n, size=len(missing), replace=False)
    y[idx] = missing
    return y


def _draw_mog_params(rng, k, dim):
    pi = rng.dirichlet(np.ones(k))
    mu = rng.normal(0.0, 3.0, size=(k, dim))
    sigma = rng.lognormal(mean=np.log(0.25), sigma=0.1, size=(k, dim))
    return MogParams(pi=pi, mu=mu, sigma=sigma)


def gen_mog(n_max, k_max, seed, index=0, n=None) -> GeneratedDataset:
    """One 2-d Gaussian-mixture dataset; pass ``n`` to pin the set size."""
    rng = stream_rng(seed, TAG_DATA, index)
    drawn_n, k = _draw_n_k(rng, n_max, k_max)
    n = drawn_n if n is None else n
    params = _draw_mog_params(rng, k, 2)
    y = _draw_labels(rng, params.pi, n, k)
    x = rng.normal(params.mu[y - 1], params.sigma[y - 1])
    return GeneratedDataset(X=x, y=y, truth=params, seed=seed)


def gen_warped(n_max, k_max, seed, index=0, n=None) -> GeneratedDataset:
    """One warped-Gaussian dataset: radial 1-d draws bent onto rotated arcs."""
    rng = stream_rng(seed, TAG_DATA, index)
    drawn_n, k = _draw_n_k(rng, n_max, k_max)
    n = drawn_n if n is None else n
    radial = _draw_mog_params(rng, k, 1)
    y = _draw_labels(rng, radial.pi, n, k)
    a = rng.normal(0.0, np.sqrt(np.sqrt(2.0)), size=k)
    b = rng.normal(0.0, np.sqrt(np.sqrt(2.0)), size=k)
    rho = rng.uniform(0.0, 2.0 * np.pi, size=k)
    lam = rng.normal(min(k, 4.0), 1.0, size=(k, 2))
    params = WarpParams(radial=radial, a=a, b=b, rho=rho, lam=lam)

    r_tilde = rng.normal(radial.mu[y - 1, 0], radial.sigma[y - 1, 0])
    r = 0.8 * np.pi * r_tilde
    ay, by = a[y - 1], b[y - 1]
    norm = np.sqrt(ay ** 2 + by ** 2)
    s = ay * np.cos(r) + 0.1 * by * np.cos(r) / norm
    t = by * np.sin(r) + 0.1 * ay * np.sin(r) / norm
    cos_r, sin_r = np.cos(rho[y - 1]), np.sin(rho[y - 1])
    x = np.stack([cos_r * s - sin_r * t, sin_r * s + cos_r * t], axis=1) + lam[y - 1]
    return GeneratedDataset(X=x, y=y, truth=params, seed=seed)


GENERATORS = {"mog": gen_mog, "warped": gen_warped}


def gen_batch(kind, n_max, k_max, batch, seed, step):
    """A training batch: ``batch`` datasets sharing one n, stacked [B, n, 2].

    Returns (X [B, n, 2] float array, y [B, n], k_per_set [B]).
    """
    gen = GENERATORS[kind]
    base = step * (batch + 1)
    rng = stream_rng(seed, TAG_DATA, base)
    n_lo = int(np.ceil(0.3 * n_max))
    n = int(rng.integers(n_lo, n_max + 1))
    xs, ys, ks = [], [], []
    for i in range(batch):
        ds = gen(n_max, k_max, seed, index=base + 1 + i, n=n)
        xs.append(ds.X)
        ys.append(ds.y)
        ks.append(ds.k)
    return np.stack(xs), np.stack(ys), np.array(ks)


def oracle_ll(X, truth: MogParams) -> float:
    """Mean per-point log-likelihood under the true mixture parameters."""
    X = np.asarray(X)
    var = truth.sigma ** 2
    diff = X[:, None, :] - truth.mu[None, :, :]
    comp = -0.5 * (np.log(2 * np.pi * var)[None] + diff ** 2 / var[None]).sum(-1)
    comp = comp + np.log(truth.pi)[None, :]
    m = comp.max(axis=1, keepdims=True)
    return float((m[:, 0] + np.log(np.exp(comp - m).sum(axis=1))).mean())


# ---------------------------------------------------------------------------
# delimited-text export: header set_id,x1,x2,label, one row per point

def save_datasets(path, datasets):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["set_id", "x1", "x2", "label"])
        for set_id, ds in enumerate(datasets):
            for (x1, x2), label in zip(ds.X, ds.y):
                writer.writerow([set_id, f"{x1:.9g}", f"{x2:.9g}", int(label)])


def load_datasets(path):
    """Read the export format back as a list of (X [n, 2], y [n]) pairs."""
    groups = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"set_id", "x1", "x2", "label"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ContractError(f"dataset file needs columns {sorted(required)}")
        for row in reader:
            groups.setdefault(int(row["set_id"]), []).append(
                (float(row["x1"]), float(row["x2"]), int(row["label"])))
    out = []
    for set_id in sorted(groups):
        rows = np.array(groups[set_id])
        out.append((rows[:, :2], rows[:, 2].astype(int)))
    return out
