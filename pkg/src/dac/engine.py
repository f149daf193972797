"""Training loop, iterative clustering driver, and benchmark evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics as M
from . import tensor as T
from .actst import ActStModel, act_st_loss, act_st_predict, mixture_log_density_t
from .blocks import SetBatch
from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import GENERATORS, TAG_ANCHOR, TAG_INIT, gen_batch, stream_rng
from .density import MafStack, gaussian_log_density_t
from .errors import ConfigError, ContractError, NumericError
from .filtering import AfModel, LabeledSet, MlfModel, af_loss, mlf_loss
from .optim import AdamState
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

MODELS = ("mlf", "af", "act-st")
KINDS = ("mog", "warped")
DENSITIES = ("gaussian", "maf", "none")


@dataclass
class TrainConfig:
    model: str = "mlf"
    kind: str = "mog"
    n_max: int = 1000
    k_max: int = 4
    steps: int = 20000
    batch: int = 100
    lr: float = 5e-4
    seed: int = 0
    density: str = "gaussian"
    width: int = 32
    heads: int = 4
    inducing: int = 32
    enc_depth: int = 4
    mask_depth: int = 2
    maf_blocks: int = 4
    made_hidden: int = 64
    context_dim: int = 128
    sum_bce: bool = False  # density-free losses: raw sums instead of per-point means
    log_every: int = 200

    def validate(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown data kind {self.kind!r}")
        if self.density not in DENSITIES:
            raise ConfigError(f"unknown density {self.density!r}")
        if self.model == "act-st" and self.density != "gaussian":
            raise ConfigError("act-st emits Gaussian mixture components; use density=gaussian")
        if self.steps < 1 or self.batch < 1 or self.lr <= 0:
            raise ConfigError("steps, batch and lr must be positive")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known}).validate()


class ClusterModel:
    """A configured network plus (for MAF densities) its flow, as one unit."""

    def __init__(self, config: TrainConfig):
        config.validate()
        self.config = config
        rng = stream_rng(config.seed, TAG_INIT, 0)
        kw = dict(d=config.width, heads=config.heads, n_inducing=config.inducing,
                  enc_depth=config.enc_depth, mask_depth=config.mask_depth, in_dim=2)
        theta_dim = {"gaussian": 4, "maf": config.context_dim, "none": 0}[config.density]
        self.flow = None
        if config.model == "mlf":
            self.net = MlfModel(theta_dim=theta_dim, rng=rng, **kw)
        elif config.model == "af":
            self.net = AfModel(theta_dim=theta_dim, rng=rng, **kw)
        else:
            self.net = ActStModel(d=config.width, heads=config.heads,
                                  n_inducing=config.inducing, enc_depth=config.enc_depth,
                                  dec_depth=config.mask_depth, in_dim=2, rng=rng)
        if config.density == "maf" and config.model != "act-st":
            self.flow = MafStack(dim=2, blocks=config.maf_blocks, hidden=config.made_hidden,
                                 context_dim=config.context_dim, rng=rng)

    def named_params(self):
        out = dict(self.net.named_params(self.config.model))
        if self.flow is not None:
            out.update(self.flow.named_params("flow"))
        return out

    def density_fn(self):
        if self.config.density == "gaussian":
            return gaussian_log_density_t
        if self.config.density == "maf":
            return self.flow.log_density_t
        return None

    def load_params(self, arrays):
        params = self.named_params()
        missing = set(params) ^ set(arrays)
        if missing:
            raise ConfigError(f"checkpoint parameter names do not match model: {sorted(missing)[:4]}")
        for name, tensor in params.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(tensor.data.shape):
                raise ConfigError(f"checkpoint shape mismatch for {name}")
            tensor.data = arr.astype(tensor.data.dtype)


def build_model(config: TrainConfig) -> ClusterModel:
    return ClusterModel(config)


def load_model(path) -> ClusterModel:
    config_dict, arrays = load_checkpoint(path)
    model = ClusterModel(TrainConfig.from_dict(config_dict))
    model.load_params(arrays)
    return model


def _training_loss(model: ClusterModel, x, y, k_per_set, step):
    config = model.config
    sb = SetBatch(Tensor(x.astype(T.default_dtype())))
    data = LabeledSet(sb, y, k_per_set)
    density = model.density_fn()
    normalize = not config.sum_bce
    if config.model == "mlf":
        out = model.net.forward(sb)
        return mlf_loss(out, data, density=density, normalize_bce=normalize)
    if config.model == "af":
        rng = stream_rng(config.seed, TAG_ANCHOR, step)
        anchors = rng.integers(0, x.shape[1], size=x.shape[0])
        out = model.net.forward(sb, anchors)
        return af_loss(out, data, anchors, density=density, normalize_bce=normalize)
    out = model.net.forward(sb, config.k_max)
    return act_st_loss(out, data, k_per_set, config.k_max)


def train(config: TrainConfig, out_path=None, progress=None):
    """Meta-train over generated datasets; returns (model, loss history)."""
    config.validate()
    model = ClusterModel(config)
    params = model.named_params()
    opt = AdamState(params.values(), lr=config.lr)
    history = []
    window = []
    t0 = time.perf_counter()
    for step in range(config.steps):
        x, y, k_per_set = gen_batch(config.kind, config.n_max, config.k_max,
                                    config.batch, config.seed, step)
        opt.zero_grad()
        with Tape() as tape:
            loss = _training_loss(model, x, y, k_per_set, step)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}; config={asdict(config)}")
        tape.backward(loss)
        opt.step()
        window.append(value)
        if (step + 1) % config.log_every == 0 or step == config.steps - 1:
            mean_loss = float(np.mean(window))
            history.append((step + 1, mean_loss))
            window.clear()
            msg = (f"step {step + 1}/{config.steps} loss {mean_loss:.4f} "
                   f"({time.perf_counter() - t0:.0f}s)")
            log.info(msg)
            if progress:
                progress(msg)
    if out_path:
        save_checkpoint(out_path, model.named_params(), asdict(config))
    return model, history


@dataclass
class ClusteringResult:
    """A full partition of one dataset produced by iterated filtering."""

    labels: np.ndarray  # [n] cluster ids 1..k
    k: int
    thetas: list  # per-cluster parameter vectors (None for forced final cluster)
    iterations: int
    truncated: bool = field(default=False)  # hit max_iters with points left over


def iterative_filtering(model: ClusterModel, X, threshold=0.5, max_iters=50, seed=0):
    """Extract clusters one forward pass at a time until no point remains.

    Assigned points are masked out (zero attention weight) between passes.
    If a pass selects nothing above ``threshold``, the single highest-score
    point is taken to guarantee progress; if ``max_iters`` passes still leave
    points unassigned, the remainder becomes one final cluster and the result
    is flagged truncated.
    """
    if model.config.model == "act-st":
        raise ContractError("iterative filtering drives the filtering models only")
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ContractError("need a nonempty [n, d] dataset")
    n = X.shape[0]
    values = Tensor(X[None].astype(T.default_dtype()))
    live = np.ones((1, n), dtype=bool)
    labels = np.zeros(n, dtype=int)
    thetas = []
    rng = stream_rng(seed, TAG_ANCHOR, 0)
    iterations = 0
    truncated = False
    next_id = 1
    while live.any():
        if iterations == max_iters:
            labels[live[0]] = next_id
            thetas.append(None)
            truncated = True
            log.warning("clustering truncated at %d iterations with %d points left",
                        max_iters, int(live.sum()))
            break
        iterations += 1
        sb = SetBatch(values, live.copy())
        if model.config.model == "af":
            anchor = rng.choice(np.flatnonzero(live[0]))
            out = model.net.forward(sb, np.array([anchor]))
        else:
            out = model.net.forward(sb)
        scores = out.m.data[0]
        picked = live[0] & (scores > threshold)  # ties at the threshold stay live
        if not picked.any():
            masked_scores = np.where(live[0], scores, -np.inf)
            picked = np.zeros(n, dtype=bool)
            picked[int(masked_scores.argmax())] = True
        labels[picked] = next_id
        thetas.append(out.theta.data[0].copy() if out.theta is not None else None)
        live[0, picked] = False
        next_id += 1
    return ClusteringResult(labels=labels, k=int(labels.max()), thetas=thetas,
                            iterations=iterations, truncated=truncated)


def _filtering_ll(model: ClusterModel, X, result: ClusteringResult):
    """Mean per-point log likelihood under the discovered clusters.

    Cluster weights are the empirical shares n_j / n; clusters without
    parameters (forced final cluster) are excluded and weights renormalized.
    """
    sizes = np.bincount(result.labels, minlength=result.k + 1)[1:]
    entries = [(sizes[j], theta) for j, theta in enumerate(result.thetas[:result.k])
               if theta is not None and sizes[j] > 0]
    if not entries:
        return float("nan")
    weights = np.array([e[0] for e in entries], dtype=float)
    weights = weights / weights.sum()
    x = Tensor(X[None].astype(T.default_dtype()))
    lls = []
    for _, theta in entries:
        th = Tensor(theta[None].astype(T.default_dtype()))
        if model.config.density == "gaussian":
            lls.append(gaussian_log_density_t(x, th).data[0])
        else:
            lls.append(model.flow.log_density_t(x, th).data[0])
    stacked = np.stack(lls, axis=1) + np.log(weights)[None, :]
    m = stacked.max(axis=1, keepdims=True)
    return float((m[:, 0] + np.log(np.exp(stacked - m).sum(axis=1))).mean())


def evaluate(model_or_path, kind, n_max, k_max, num_datasets, seed) -> M.MetricsReport:
    """Cluster ``num_datasets`` fresh datasets and aggregate the metrics."""
    model = load_model(model_or_path) if isinstance(model_or_path, (str, bytes)) else model_or_path
    if kind not in KINDS:
        raise ConfigError(f"unknown data kind {kind!r}")
    if kind != model.config.kind:
        raise ConfigError(f"checkpoint was trained on kind={model.config.kind!r}, "
                          f"evaluation requested kind={kind!r}")
    gen = GENERATORS[kind]
    aris, nmis, lls = [], [], []
    k_true, k_pred = [], []
    elapsed = 0.0
    for i in range(num_datasets):
        ds = gen(n_max, k_max, seed, index=i)
        t0 = time.perf_counter()
        if model.config.model == "act-st":
            labels, k_hat, mixture = act_st_predict(
                model.net, SetBatch(Tensor(ds.X[None].astype(T.default_dtype()))), k_max)
            elapsed += time.perf_counter() - t0
            ll = float(mixture_log_density_t(
                Tensor(ds.X[None].astype(T.default_dtype())),
                Tensor(mixture[None].astype(T.default_dtype()))).data.mean())
        else:
            result = iterative_filtering(model, ds.X, seed=seed + i)
            elapsed += time.perf_counter() - t0
            labels, k_hat = result.labels, result.k
            ll = _filtering_ll(model, ds.X, result) if model.config.density != "none" else float("nan")
        aris.append(M.ari(ds.y, labels))
        nmis.append(M.nmi(ds.y, labels))
        lls.append(ll)
        k_true.append(ds.k)
        k_pred.append(k_hat)
    return M.MetricsReport(
        ll=float(np.mean(lls)),
        ari=float(np.mean(aris)),
        nmi=float(np.mean(nmis)),
        k_mae=M.k_mae(k_true, k_pred),
        time_per_dataset_seconds=elapsed / num_datasets,
        n_datasets=num_datasets,
        config={"kind": kind, "n_max": n_max, "k_max": k_max, "seed": seed,
                "checkpoint_model": model.config.model,
                "checkpoint_density": model.config.density},
    )
