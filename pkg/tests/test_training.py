import io
import math

import numpy as np
import pytest
from conftest import onehot, random_motifs, random_unit_sequence
from sklearn.linear_model import LogisticRegression

import rkn.training as training
from rkn.core import AnchorSet, PoolingMode, RknModel, embed_dataset, forward_embed, pool
from rkn.encoding import DNA, LabeledDataset, encode_onehot
from rkn.exceptions import Diverged, EmptyValidation, LabelMismatch, RKNError, TooFewKmers
from rkn.oracle import GapWeighting
from rkn.synth import synth_gen
from rkn.training import (
    Architecture,
    TrainConfig,
    backward,
    crossval_mu,
    extract_kmers,
    fit_linear,
    gradient_check,
    init_model,
    linear_objective,
    loss_and_grad,
    objective,
    train_supervised,
    train_unsupervised,
)


def tiny_model(rng, pooling="mean", mode="gaps", q=3, k=2, d=4):
    a = AnchorSet(random_motifs(rng, q, k, d), 0.8, GapWeighting(mode, 0.5))
    return RknModel([a], PoolingMode(pooling, 0.5))


def tiny_data(rng, n=3, d=4):
    seqs = [random_unit_sequence(rng, int(rng.integers(2, 7)), d, f"s{i}") for i in range(n)]
    return LabeledDataset(seqs, np.resize([1, -1], n))


def synth_dataset(n=80, length=30, motif=5, gap=0.1, seed=0):
    recs, y, _ = synth_gen(seed, n, length, motif, gap)
    return LabeledDataset([encode_onehot(s, DNA, i) for i, s in recs], y)


def test_config_validation():
    for bad in (dict(mu=0.0), dict(lr=-1.0), dict(patience=0), dict(loss="hinge"), dict(mode="semi")):
        with pytest.raises(RKNError):
            TrainConfig(**bad)


def test_objective_zero_weights_is_log2(rng):
    m = tiny_model(rng)
    m.W = np.zeros(3)
    assert objective(m, tiny_data(rng), TrainConfig()) == pytest.approx(math.log(2.0), abs=1e-15)


def test_objective_regularizer_only():
    value, _ = linear_objective(np.zeros((4, 3)), np.zeros(4), "squared", 2.0, np.array([1.0, 0, 0]), 0.0)
    assert value == 1.0


def test_objective_matches_scalar_recomputation(rng):
    m = tiny_model(rng)
    m.W, m.bias = rng.normal(size=3), 0.2
    data = tiny_data(rng)
    mu = 0.05
    total = 0.0
    for x, y in zip(data.sequences, data.labels):
        psi = pool(forward_embed(x, m.layers[0]).h[-1], m.layers[0], m.pooling)
        total += math.log1p(math.exp(-y * (psi @ m.W + m.bias)))
    expected = total / 3 + 0.5 * mu * float(m.W @ m.W)
    assert objective(m, data, TrainConfig(mu=mu)) == pytest.approx(expected, rel=1e-13)


def test_label_mismatch(rng):
    m = tiny_model(rng)
    m.W = np.zeros(3)
    data = LabeledDataset(tiny_data(rng).sequences, [0, 1, 2], task="multiclass")
    with pytest.raises(LabelMismatch):
        objective(m, data, TrainConfig(loss="logistic"))


def test_w_gradient_is_logistic_regression_gradient(rng):
    m = tiny_model(rng)
    m.W, m.bias = rng.normal(size=3), -0.1
    data = tiny_data(rng, n=5)
    g = backward(m, data, TrainConfig(mu=0.3))
    F = embed_dataset(data.sequences, m)
    y = data.labels
    s = 1.0 / (1.0 + np.exp(y * (F @ m.W + m.bias)))
    expected = -(F * (y * s)[:, None]).mean(axis=0) + 0.3 * m.W
    np.testing.assert_allclose(g.grad_W, expected, rtol=1e-12)
    assert g.grad_bias == pytest.approx(-(y * s).mean(), rel=1e-12)
    assert all(gz.shape == a.Z.shape for gz, a in zip(g.grad_Z, m.layers))


@pytest.mark.parametrize("loss", ["logistic", "squared", "multinomial"])
def test_loss_gradients(rng, loss):
    n = 6
    if loss == "multinomial":
        S, y = rng.normal(size=(n, 3)), rng.integers(0, 3, n)
    else:
        S, y = rng.normal(size=n), rng.choice([-1, 1], n)
    v, g = loss_and_grad(S, y, loss)
    h = 1e-6
    fd = np.zeros_like(S)
    for idx in np.ndindex(S.shape):
        E = np.zeros_like(S)
        E[idx] = h
        fd[idx] = (loss_and_grad(S + E, y, loss)[0] - loss_and_grad(S - E, y, loss)[0]) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-10)


@pytest.mark.parametrize("mode", ["gaps", "end"])
def test_gradcheck_mean_pooling(mode):
    assert gradient_check("mean", 1, mode) <= 1e-4


@pytest.mark.parametrize("pooling,layers", [("max", 1), ("max", 2), ("gmp", 1), ("gmp", 2), ("mean", 2)])
def test_gradcheck_other_paths(pooling, layers):
    for mode in ("gaps", "end"):
        assert gradient_check(pooling, layers, mode) <= 1e-4


@pytest.mark.parametrize("pooling", ["mean", "max", "gmp"])
def test_gradcheck_trainable_alpha(pooling):
    assert gradient_check(pooling, 2, "gaps", train_alpha=True) <= 1e-4


def test_fit_linear_matches_sklearn(rng):
    n, q, mu = 60, 5, 0.05
    F = rng.normal(size=(n, q))
    y = np.where(F @ rng.normal(size=q) + 0.3 * rng.normal(size=n) > 0, 1, -1)
    W, b = fit_linear(F, y, "logistic", mu)
    ref = LogisticRegression(C=1.0 / (n * mu), tol=1e-12, max_iter=10_000).fit(F, y)
    np.testing.assert_allclose(W, ref.coef_[0], atol=1e-6)
    assert b == pytest.approx(ref.intercept_[0], abs=1e-6)
    _, gs = linear_objective(F, y, "logistic", mu, W, b)
    grad = np.r_[F.T @ gs + mu * W, gs.sum()]
    assert np.linalg.norm(grad) <= 1e-6


def test_fit_linear_squared_closed_form(rng):
    F, y = rng.normal(size=(30, 4)), rng.normal(size=30)
    W, b = fit_linear(F, y, "squared", 0.1)
    Fa = np.hstack([F, np.ones((30, 1))])
    R = np.diag([0.1] * 4 + [0.0]) * 30
    ref = np.linalg.solve(Fa.T @ Fa + R, Fa.T @ y)
    np.testing.assert_allclose(np.r_[W, b], ref, rtol=1e-9, atol=1e-12)


def test_fit_linear_multinomial(rng):
    n, q, C, mu = 90, 4, 3, 0.02
    F = rng.normal(size=(n, q))
    y = np.argmax(F @ rng.normal(size=(q, C)) + 0.5 * rng.normal(size=(n, C)), axis=1)
    W, b = fit_linear(F, y, "multinomial", mu)
    _, gs = linear_objective(F, y, "multinomial", mu, W, b)
    assert np.linalg.norm(np.r_[(F.T @ gs + mu * W).ravel(), gs.sum(axis=0)]) <= 1e-6
    ref = LogisticRegression(C=1.0 / (n * mu), tol=1e-12, max_iter=10_000).fit(F, y)
    np.testing.assert_allclose(W, ref.coef_.T, atol=1e-5)


def test_crossval_mu_simple_cases(rng):
    F, y = rng.normal(size=(20, 3)), np.resize([1, -1], 20)
    assert crossval_mu(F, y, [0.3]) == 0.3
    assert crossval_mu(F, y, [0.3, 0.3]) == 0.3


def test_crossval_mu_picks_grid_minimum(rng):
    n = 50
    F = rng.normal(size=(n, 4))
    y = np.where(F[:, 0] + 0.8 * rng.normal(size=n) > 0, 1, -1)
    grid = [1e-3, 1e-2, 1e-1, 1.0]
    best = crossval_mu(F, y, grid, folds=5, seed=7)
    parts = np.array_split(np.random.default_rng(7).permutation(n), 5)
    scores = {}
    for mu in grid:
        vals = []
        for f in range(5):
            tr = np.concatenate([parts[g] for g in range(5) if g != f])
            W, b = fit_linear(F[tr], y[tr], "logistic", mu)
            vals.append(np.mean(np.logaddexp(0, -y[parts[f]] * (F[parts[f]] @ W + b))))
        scores[mu] = np.mean(vals)
    assert scores[best] == min(scores.values())


def test_crossval_ties_prefer_larger_mu():
    F = np.zeros((10, 2))
    y = np.resize([1, -1], 10)
    assert crossval_mu(F, y, [1e-3, 1e-1, 1.0]) == 1.0


def test_extract_kmers_skips_padding():
    x = onehot("ACGT")
    P = extract_kmers([x.positions], 2)
    assert P.shape == (3, 8)
    np.testing.assert_array_equal(P[0], np.r_[np.eye(4)[0], np.eye(4)[1]])


def test_unsupervised_recovers_distinct_kmers():
    seqs = [onehot("ACACACAC", seq_id=f"s{i}") for i in range(4)]
    data = LabeledDataset(seqs, [1, -1, 1, -1])
    m = init_model(seqs, Architecture(k=2, q=2), TrainConfig())
    got = m.layers[0].Z[np.argsort(m.layers[0].Z[:, 0].argmax(axis=1))]
    want = np.eye(4)[[[0, 1], [1, 0]]]
    np.testing.assert_allclose(got, want, atol=1e-12)
    assert len(data) == 4


def test_too_few_kmers():
    with pytest.raises(TooFewKmers):
        init_model([onehot("ACG")], Architecture(k=2, q=3), TrainConfig())


def test_unsupervised_standardization():
    data = synth_dataset()
    m = train_unsupervised(data, TrainConfig(mode="unsupervised"), Architecture(k=3, q=8))
    F = embed_dataset(data.sequences, m, standardize=True)
    assert np.max(np.abs(F.mean(axis=0))) <= 1e-9
    np.testing.assert_allclose(F.std(axis=0), 1.0, atol=1e-6)
    assert m.provenance["mu"] in TrainConfig().mu_grid
    np.testing.assert_allclose(np.linalg.norm(m.layers[0].Z, axis=2), 1.0, atol=1e-12)


def test_unsupervised_two_layers():
    data = synth_dataset(n=40)
    m = train_unsupervised(data, TrainConfig(mode="unsupervised"), Architecture(k=[3, 2], q=[6, 4], layers=2, pooling="gmp"))
    assert [a.dim for a in m.layers] == [4, 6]
    assert m.layers[0].weighting.mode == "end"


def test_supervised_one_alternation_reduces_loss():
    data = synth_dataset(gap=0.0)
    arch = Architecture(k=4, q=6, alpha=1.0, lam=0.6, pooling="max")
    cfg = TrainConfig(epochs=1, mu=1e-2)
    m = train_supervised(data, data, cfg, arch=arch)
    (_, loss0, _, _), (_, loss1, _, _) = m.provenance["history"]
    assert loss1 < loss0


def test_supervised_normalization_and_log():
    data = synth_dataset()
    log = io.StringIO()
    norms = []
    cfg = TrainConfig(epochs=3, batch_size=16)

    def check(epoch, model, train_loss, val_loss):
        norms.append(np.linalg.norm(model.layers[0].Z, axis=2))

    m = train_supervised(data, None, cfg, arch=Architecture(k=3, q=4), log_stream=log, callback=check)
    for n in norms:
        np.testing.assert_allclose(n, 1.0, atol=1e-6)
    lines = log.getvalue().strip().splitlines()
    assert len(lines) == 4
    for epoch, line in enumerate(lines):
        fields = dict(part.split("=") for part in line.split())
        assert set(fields) == {"epoch", "train_loss", "val_loss", "lr", "time"}
        assert int(fields["epoch"]) == epoch
    assert m.provenance["best_val_loss"] == min(float(dict(p.split("=") for p in l.split())["val_loss"]) for l in lines)


def test_supervised_lr_halving():
    data = synth_dataset(n=40)
    m = train_supervised(data, None, TrainConfig(epochs=8, patience=1, lr=0.5), arch=Architecture(k=3, q=4))
    lrs = [h[3] for h in m.provenance["history"]]
    assert min(lrs) < 0.5
    assert all(b in (a, a / 2) for a, b in zip(lrs, lrs[1:]))


def test_supervised_reproducible():
    data = synth_dataset(n=40)
    cfg = TrainConfig(epochs=2, seed=3)
    a = train_supervised(data, None, cfg, arch=Architecture(k=3, q=4))
    b = train_supervised(data, None, cfg, arch=Architecture(k=3, q=4))
    assert a.provenance["final_train_loss"] == b.provenance["final_train_loss"]
    np.testing.assert_array_equal(a.layers[0].Z, b.layers[0].Z)


def test_supervised_trainable_alpha():
    data = synth_dataset(n=40)
    seen = []
    train_supervised(data, None, TrainConfig(epochs=2, train_alpha=True), arch=Architecture(k=3, q=4, alpha=0.5),
                     callback=lambda epoch, model, tl, vl: seen.append(model.layers[0].alpha))
    assert all(a != 0.5 and a > 0 for a in seen)


def test_supervised_multiclass():
    recs, _, _ = synth_gen(0, 60, 20, 4, 0.0)
    seqs = [encode_onehot(s, DNA, i) for i, s in recs]
    data = LabeledDataset(seqs, np.arange(60) % 3, task="multiclass")
    m = train_supervised(data, None, TrainConfig(loss="multinomial", epochs=1), arch=Architecture(k=2, q=4))
    assert m.W.shape == (4, 3)


def test_empty_validation():
    data = synth_dataset(n=4)
    with pytest.raises(EmptyValidation):
        train_supervised(data, None, TrainConfig(val_fraction=0.0, epochs=1), arch=Architecture(k=2, q=2))


def test_diverged(monkeypatch):
    data = synth_dataset(n=40)
    monkeypatch.setattr(training, "_mean_loss", lambda model, ds, cfg: (float("nan"), None))
    with pytest.raises(Diverged):
        train_supervised(data, None, TrainConfig(epochs=1), arch=Architecture(k=3, q=4))
