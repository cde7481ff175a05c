"""Learning: k-means anchors + convex read-out, and supervised end-to-end training."""
from __future__ import annotations

import copy
import logging
import math
import time
import warnings
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logsumexp

from .core import AnchorSet, PoolingMode, RknModel, backward_batch, embed_dataset, forward_batch, pad_batch
from .encoding import LabeledDataset
from .exceptions import (
    Diverged,
    EigengapWarning,
    EmptyValidation,
    LabelMismatch,
    NonFinite,
    RKNError,
    TooFewKmers,
)
from .linalg import kmeans
from .oracle import END_ANCHORED, GapWeighting

__all__ = [
    "TrainConfig",
    "Architecture",
    "GradientBundle",
    "loss_and_grad",
    "linear_objective",
    "fit_linear",
    "objective",
    "backward",
    "crossval_mu",
    "extract_kmers",
    "init_model",
    "train_unsupervised",
    "train_supervised",
    "gradient_check",
]

log = logging.getLogger(__name__)

LOSSES = ("logistic", "squared", "multinomial")
DEFAULT_MU_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)


@dataclass
class TrainConfig:
    loss: str = "logistic"
    mu: float = 1e-3
    epochs: int = 100
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 5
    batch_size: int = 32
    seed: int = 0
    mode: str = "supervised"
    val_fraction: float = 0.25
    mu_grid: tuple = DEFAULT_MU_GRID
    cv_folds: int = 5
    kmer_sample: int = 30000
    kmeans_iters: int = 100
    train_alpha: bool = False
    linear_tol: float = 1e-6
    workers: int = 1

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise RKNError(f"unknown loss {self.loss!r}; use one of {LOSSES}")
        if self.mode not in ("supervised", "unsupervised"):
            raise RKNError(f"unknown mode {self.mode!r}")
        if not self.mu > 0:
            raise RKNError("mu must be > 0")
        if not self.lr > 0:
            raise RKNError("lr must be > 0")
        if self.patience < 1:
            raise RKNError("patience must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise RKNError("batch_size must be >= 1 and epochs >= 0")
        self.mu_grid = tuple(float(m) for m in self.mu_grid)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class Architecture:
    """Layer hyperparameters; scalars are shared by all layers, sequences give one value per layer."""

    k: object = 6
    q: object = 16
    alpha: object = 0.5
    lam: object = 0.5
    weighting: str = "gaps"
    pooling: str = "mean"
    gmp_gamma: float = 1.0
    layers: int = 1
    epsilon: float | None = None

    def per_layer(self, name):
        value = getattr(self, name)
        if np.ndim(value) == 0:
            return [value] * self.layers
        value = list(value)
        if len(value) != self.layers:
            raise RKNError(f"{name} has {len(value)} entries for {self.layers} layers")
        return value


@dataclass
class GradientBundle:
    loss: float
    grad_W: np.ndarray
    grad_bias: np.ndarray | float
    grad_Z: list
    grad_alpha: list = field(default_factory=list)


# --------------------------------------------------------------------------
# losses and the convex read-out


def _check_labels(y, loss):
    y = np.asarray(y)
    if loss == "logistic" and not np.all(np.isin(y, (-1, 1))):
        raise LabelMismatch("logistic loss needs labels in {-1, +1}")
    if loss == "multinomial" and (y.min() < 0 or not np.issubdtype(y.dtype, np.integer)):
        raise LabelMismatch("multinomial loss needs integer class indices >= 0")
    return y


def loss_and_grad(scores, y, loss):
    """Mean loss over samples and its gradient with respect to the scores."""
    n = len(y)
    if loss == "logistic":
        z = y * scores
        return float(np.mean(np.logaddexp(0.0, -z))), -y * expit(-z) / n
    if loss == "squared":
        r = scores - y
        return float(0.5 * np.mean(r * r)), r / n
    lse = logsumexp(scores, axis=1)
    value = float(np.mean(lse - scores[np.arange(n), y]))
    P = np.exp(scores - lse[:, None])
    P[np.arange(n), y] -= 1.0
    return value, P / n


def _n_classes(y, n_classes=None):
    return int(n_classes if n_classes is not None else np.max(y) + 1)


def linear_objective(F, y, loss, mu, W, bias):
    """``mean L(F W + bias, y) + mu/2 ||W||^2`` and the gradient of the mean loss w.r.t. the scores."""
    value, gs = loss_and_grad(F @ W + bias, y, loss)
    return value + 0.5 * mu * float(np.sum(W * W)), gs


def fit_linear(F, y, loss="logistic", mu=1e-3, tol=1e-6, n_classes=None, max_iter=200):
    """Minimize ``mean L(F w + b, y) + mu/2 ||w||^2`` (bias unpenalized).

    Binary and squared losses use Newton's method with backtracking, which
    drives the gradient norm far below ``tol``; the multinomial loss uses
    L-BFGS.  Returns ``(W, bias)``.
    """
    F = np.asarray(F, dtype=np.float64)
    y = _check_labels(y, loss)
    n, q = F.shape
    if loss == "multinomial":
        return _fit_multinomial(F, y, mu, tol, _n_classes(y, n_classes))
    Fa = np.hstack([F, np.ones((n, 1))])
    theta = np.zeros(q + 1)
    reg = np.full(q + 1, mu)
    reg[-1] = 0.0

    def value_grad(th):
        v, gs = linear_objective(F, y, loss, mu, th[:-1], th[-1])
        return v, Fa.T @ gs + reg * th

    value, grad = value_grad(theta)
    for _ in range(max_iter):
        if np.linalg.norm(grad) <= tol * 1e-2:
            break
        if loss == "logistic":
            s = expit(y * (Fa @ theta))
            curv = s * (1.0 - s) / n
        else:
            curv = np.full(n, 1.0 / n)
        Hm = (Fa * curv[:, None]).T @ Fa + np.diag(reg)
        Hm[-1, -1] += 1e-12
        step = np.linalg.solve(Hm, -grad)
        t = 1.0
        while True:
            new_value, new_grad = value_grad(theta + t * step)
            if new_value <= value + 1e-4 * t * (grad @ step) or t < 1e-10:
                break
            t *= 0.5
        if new_value > value:
            break
        theta = theta + t * step
        value, grad = new_value, new_grad
    if np.linalg.norm(grad) > tol:
        log.warning("linear solve stopped at gradient norm %.3e", np.linalg.norm(grad))
    return theta[:-1].copy(), float(theta[-1])


def _fit_multinomial(F, y, mu, tol, C):
    n, q = F.shape

    def fun(th):
        W = th[: q * C].reshape(q, C)
        b = th[q * C:]
        v, gs = linear_objective(F, y, "multinomial", mu, W, b)
        return v, np.concatenate([(F.T @ gs + mu * W).ravel(), gs.sum(axis=0)])

    res = minimize(fun, np.zeros(q * C + C), jac=True, method="L-BFGS-B",
                   options={"maxiter": 5000, "gtol": tol * 1e-2, "ftol": 0.0, "maxcor": 30})
    return res.x[: q * C].reshape(q, C), res.x[q * C:]


def crossval_mu(features, labels, grid, folds=5, seed=0, loss="logistic"):
    """Pick the ridge weight with the lowest mean held-out loss (ties: larger mu)."""
    grid = sorted(set(float(g) for g in grid))
    if not grid:
        raise RKNError("mu grid is empty")
    if len(grid) == 1:
        return grid[0]
    F = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    n = len(y)
    folds = max(2, min(folds, n))
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(perm, folds)
    C = _n_classes(y) if loss == "multinomial" else None
    best_mu, best = None, math.inf
    for mu in sorted(grid, reverse=True):
        scores = []
        for f in range(folds):
            val = parts[f]
            tr = np.concatenate([parts[g] for g in range(folds) if g != f])
            W, b = fit_linear(F[tr], y[tr], loss, mu, n_classes=C)
            scores.append(loss_and_grad(F[val] @ W + b, y[val], loss)[0])
        mean = float(np.mean(scores))
        if mean < best:
            best_mu, best = mu, mean
    return best_mu


# --------------------------------------------------------------------------
# objective and gradients


def _arrays(sequences):
    return [s.positions if hasattr(s, "positions") else np.asarray(s, dtype=np.float64) for s in sequences]


def _features(model, arrays, config, keep=False):
    return forward_batch(model, pad_batch(arrays), keep=keep)


def objective(model: RknModel, dataset: LabeledDataset, config: TrainConfig) -> float:
    """``mean L(<psi(x_i), w> + b, y_i) + mu/2 ||w||^2`` for the current model."""
    y = _check_labels(dataset.labels, config.loss)
    F = embed_dataset(dataset.sequences, model, workers=config.workers)
    value, _ = linear_objective(model.standardize(F), y, config.loss, config.mu, model.W, model.bias)
    return value


def backward(model: RknModel, batch: LabeledDataset, config: TrainConfig) -> GradientBundle:
    """Exact gradients of the batch objective with respect to ``W``, ``b`` and all motifs."""
    y = _check_labels(batch.labels, config.loss)
    F, tape = _features(model, _arrays(batch.sequences), config, keep=True)
    Fs = model.standardize(F)
    value, gs = linear_objective(Fs, y, config.loss, config.mu, model.W, model.bias)
    W = model.W
    grad_W = Fs.T @ gs + config.mu * W
    grad_b = gs.sum(axis=0)
    gF = np.outer(gs, W) if W.ndim == 1 else gs @ W.T
    if model.feat_std is not None:
        gF = gF / model.feat_std
    gZ, g_alpha = backward_batch(model, tape, gF)
    for g in [grad_W] + gZ:
        if not np.all(np.isfinite(g)):
            raise NonFinite("non-finite gradient")
    return GradientBundle(value, grad_W, grad_b, gZ, g_alpha)


# --------------------------------------------------------------------------
# initialization


def extract_kmers(arrays, k, max_kmers=None, seed=0):
    """Contiguous k-mers with nonzero columns, flattened to ``k*d`` rows, optionally subsampled."""
    windows = []
    for X in arrays:
        if len(X) < k:
            continue
        W = np.lib.stride_tricks.sliding_window_view(X, (k, X.shape[1]))[:, 0]
        live = np.all(np.linalg.norm(W, axis=2) > 0, axis=1)
        windows.append(W[live].reshape(int(live.sum()), -1))
    if not windows:
        return np.zeros((0, 0))
    P = np.concatenate(windows)
    if max_kmers is not None and len(P) > max_kmers:
        idx = np.sort(np.random.default_rng(seed).choice(len(P), max_kmers, replace=False))
        P = P[idx]
    return P


def _kmeans_anchors(arrays, k, q, d, config, seed):
    P = extract_kmers(arrays, k, config.kmer_sample, seed)
    if len(P) < q:
        raise TooFewKmers(f"{len(P)} k-mers available for q={q} anchors")
    # cluster k-mers of unit columns, then project centroid columns back to the sphere
    C = kmeans(P.reshape(len(P), k, d).reshape(len(P), -1), q, config.kmeans_iters, seed)
    Z = C.reshape(q, k, d)
    norms = np.linalg.norm(Z, axis=2, keepdims=True)
    return Z / np.where(norms > 0, norms, 1.0)


def init_model(sequences, arch: Architecture, config: TrainConfig, encoder_id="onehot:ACGT", task="binary") -> RknModel:
    """Layer-by-layer k-means initialization of the anchors."""
    arrays = _arrays(sequences)
    ks, qs = arch.per_layer("k"), arch.per_layer("q")
    alphas, lams = arch.per_layer("alpha"), arch.per_layer("lam")
    layers = []
    inputs = arrays
    for n in range(arch.layers):
        d = inputs[0].shape[1]
        if n > 0:
            # upper layers cluster normalized prefix embeddings of the layer below
            inputs = [U / np.where(np.linalg.norm(U, axis=1, keepdims=True) > 0,
                                   np.linalg.norm(U, axis=1, keepdims=True), 1.0) for U in inputs]
        Z = _kmeans_anchors(inputs, int(ks[n]), int(qs[n]), d, config, config.seed + n)
        mode = END_ANCHORED if n < arch.layers - 1 else arch.weighting
        layer = AnchorSet(Z, float(alphas[n]), GapWeighting(mode, float(lams[n])), arch.epsilon, layer_index=n)
        layers.append(layer)
        if n < arch.layers - 1:
            partial = RknModel(layers, PoolingMode("gmp", 1.0))
            inputs = [_hidden_trace(partial, X) for X in inputs]
    return RknModel(layers, PoolingMode(arch.pooling, arch.gmp_gamma), encoder_id=encoder_id, task=task)


def _hidden_trace(model, X):
    """Projected end-anchored prefix trace of the last layer of ``model`` for one sequence."""
    _, tape = forward_batch(model, X[None], keep=True)
    return tape[-1]["U"][0]


# --------------------------------------------------------------------------
# unsupervised


def _standardization(F):
    """Column mean and scale; columns constant up to rounding keep scale 1."""
    mean = F.mean(axis=0)
    std = F.std(axis=0)
    floor = 1e-12 * np.maximum(np.abs(mean), 1.0)
    return mean, np.where(std > floor, std, 1.0)


def train_unsupervised(dataset: LabeledDataset, config: TrainConfig, arch: Architecture,
                       encoder_id="onehot:ACGT", concat=False) -> RknModel:
    """k-means anchors, standardized features, cross-validated ridge weight, convex fit."""
    y = _check_labels(dataset.labels, config.loss)
    model = init_model(dataset.sequences, arch, config, encoder_id, dataset.task)
    if concat:
        model.provenance["concat"] = True
    F = embed_dataset(dataset.sequences, model, concat=concat, workers=config.workers)
    model.feat_mean, model.feat_std = _standardization(F)
    Fs = model.standardize(F)
    mu = crossval_mu(Fs, y, config.mu_grid, config.cv_folds, config.seed, config.loss)
    model.W, model.bias = fit_linear(Fs, y, config.loss, mu, config.linear_tol)
    model.provenance.update(mode="unsupervised", mu=mu, seed=config.seed)
    return model


# --------------------------------------------------------------------------
# supervised


class _Adam:
    def __init__(self, shapes, lr, beta1, beta2, eps):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


def _split_validation(dataset, config):
    n = len(dataset)
    n_val = int(round(config.val_fraction * n))
    if n_val < 1 or n_val >= n:
        raise EmptyValidation(f"cannot hold out {config.val_fraction:.0%} of {n} sequences")
    perm = np.random.default_rng(config.seed).permutation(n)
    return dataset.subset(np.sort(perm[n_val:])), dataset.subset(np.sort(perm[:n_val]))


def _mean_loss(model, dataset, config):
    F = embed_dataset(dataset.sequences, model, workers=config.workers)
    return loss_and_grad(model.scores(F), dataset.labels, config.loss)[0], F


def train_supervised(dataset: LabeledDataset, valset: LabeledDataset | None, config: TrainConfig,
                     model: RknModel | None = None, arch: Architecture | None = None,
                     encoder_id="onehot:ACGT", log_stream=None, callback=None) -> RknModel:
    """Alternate Adam epochs on the motifs (read-out fixed) with exact convex read-out solves.

    The learning rate is halved whenever the validation loss has not
    decreased for ``patience`` epochs.  Returns the model with the lowest
    validation loss.  Without ``valset`` a seeded holdout of
    ``val_fraction`` of ``dataset`` is used.
    """
    _check_labels(dataset.labels, config.loss)
    if valset is None:
        dataset, valset = _split_validation(dataset, config)
    if len(valset) == 0:
        raise EmptyValidation("validation set is empty")
    if model is None:
        model = init_model(dataset.sequences, arch or Architecture(), config, encoder_id, dataset.task)
    model = copy.deepcopy(model)
    n_classes = _n_classes(dataset.labels) if config.loss == "multinomial" else None
    rng = np.random.default_rng(config.seed)
    arrays = _arrays(dataset.sequences)
    y = np.asarray(dataset.labels)

    def solve_readout():
        F = embed_dataset(dataset.sequences, model, workers=config.workers)
        model.W, model.bias = fit_linear(F, y, config.loss, config.mu, config.linear_tol, n_classes)
        return F

    def evaluate(F):
        train_loss = linear_objective(F, y, config.loss, config.mu, model.W, model.bias)[0]
        val_loss = _mean_loss(model, valset, config)[0]
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise Diverged(f"loss became non-finite (train={train_loss}, val={val_loss})")
        return train_loss, val_loss

    F = solve_readout()
    train_loss, val_loss = evaluate(F)
    best_val, best_model, best_epoch = val_loss, copy.deepcopy(model), 0
    _log_epoch(log_stream, 0, train_loss, val_loss, config.lr, 0.0)

    shapes = [layer.Z.shape for layer in model.layers]
    if config.train_alpha:
        shapes += [()] * len(model.layers)
    adam = _Adam(shapes, config.lr, config.beta1, config.beta2, config.adam_eps)
    stale = 0
    history = [(0, train_loss, val_loss, config.lr)]
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        perm = rng.permutation(len(arrays))
        for s in range(0, len(perm), config.batch_size):
            idx = perm[s:s + config.batch_size]
            batch = LabeledDataset([dataset.sequences[i] for i in idx], y[idx], dataset.task)
            with warnings.catch_warnings():
                # the adjoint has no eigengap denominators, so clustered Gram spectra are harmless here
                warnings.simplefilter("ignore", EigengapWarning)
                grads = backward(model, batch, config)
            params = [layer.Z for layer in model.layers]
            gparams = list(grads.grad_Z)
            if config.train_alpha:
                params += [np.array(layer.alpha) for layer in model.layers]
                gparams += [np.array(g) for g in grads.grad_alpha]
            new = adam.step(params, gparams)
            for n, layer in enumerate(model.layers):
                layer.Z = new[n]
                layer.normalize()
                if config.train_alpha:
                    layer.alpha = max(float(new[len(model.layers) + n]), 1e-6)
        F = solve_readout()
        train_loss, val_loss = evaluate(F)
        elapsed = time.perf_counter() - start
        _log_epoch(log_stream, epoch, train_loss, val_loss, adam.lr, elapsed)
        history.append((epoch, train_loss, val_loss, adam.lr))
        if callback is not None:
            callback(epoch, model, train_loss, val_loss)
        if val_loss < best_val:
            best_val, best_model, best_epoch = val_loss, copy.deepcopy(model), epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                adam.lr *= 0.5
                stale = 0
    best_model.provenance.update(mode="supervised", seed=config.seed, best_epoch=best_epoch,
                                 best_val_loss=best_val, final_train_loss=history[-1][1])
    best_model.provenance["history"] = history
    return best_model


def _log_epoch(stream, epoch, train_loss, val_loss, lr, elapsed):
    line = (f"epoch={epoch} train_loss={train_loss:.17g} val_loss={val_loss:.17g} "
            f"lr={lr:.6g} time={elapsed:.3f}")
    log.info(line)
    if stream is not None:
        stream.write(line + "\n")
        stream.flush()


# --------------------------------------------------------------------------
# finite-difference gradient check


def _toy_sequences(rng, d, lengths, jitter=1e-3):
    out = []
    for m in lengths:
        X = np.eye(d)[rng.integers(0, d, m)] + jitter * rng.normal(size=(m, d))
        out.append(X / np.linalg.norm(X, axis=1, keepdims=True))
    return out


def gradient_check(pooling="mean", layers=1, weighting="gaps", train_alpha=False, n_coords=20,
                   step=1e-5, seed=0, q=3, k=2, d=4, lam=0.5, alpha=0.8, gamma=0.1):
    """Largest relative error between backprop and central differences on motif coordinates.

    The relative error of a coordinate is ``|fd - an| / max(|fd|, |an|, floor)``
    with ``floor = 1e-3 * max_i |an_i|``, which keeps numerically-zero
    coordinates from dividing by round-off.
    """
    rng = np.random.default_rng(seed)
    seqs = _toy_sequences(rng, d, [5, 6, 4])
    y = np.array([1, -1, 1])
    layer_list = []
    dim = d
    for n in range(layers):
        Z = rng.normal(size=(q, k, dim))
        Z /= np.linalg.norm(Z, axis=2, keepdims=True)
        mode = END_ANCHORED if n < layers - 1 else weighting
        layer_list.append(AnchorSet(Z, alpha, GapWeighting(mode, lam), layer_index=n))
        dim = q
    model = RknModel(layer_list, PoolingMode(pooling, gamma))
    model.W = rng.normal(size=q)
    model.bias = 0.1
    config = TrainConfig(mu=0.1)
    batch = LabeledDataset(seqs, y)
    grads = backward(model, batch, config)

    def value():
        F = forward_batch(model, pad_batch(seqs))
        return linear_objective(F, y, "logistic", config.mu, model.W, model.bias)[0]

    coords = []
    for n, layer in enumerate(model.layers):
        for flat in range(layer.Z.size):
            coords.append((n, np.unravel_index(flat, layer.Z.shape)))
    picks = rng.choice(len(coords), size=min(n_coords, len(coords)), replace=False)
    analytic_all = np.concatenate([g.ravel() for g in grads.grad_Z])
    floor = 1e-3 * np.max(np.abs(analytic_all))
    worst = 0.0
    for p in picks:
        n, idx = coords[p]
        layer = model.layers[n]
        Z0 = layer.Z.copy()
        Zp, Zm = Z0.copy(), Z0.copy()
        Zp[idx] += step
        Zm[idx] -= step
        layer.Z = Zp
        fp = value()
        layer.Z = Zm
        fm = value()
        layer.Z = Z0
        fd = (fp - fm) / (2 * step)
        an = grads.grad_Z[n][idx]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), floor))
    if train_alpha:
        for n, layer in enumerate(model.layers):
            a0 = layer.alpha
            layer.alpha = a0 + step
            fp = value()
            layer.alpha = a0 - step
            fm = value()
            layer.alpha = a0
            fd = (fp - fm) / (2 * step)
            an = grads.grad_alpha[n]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-12))
    return worst
