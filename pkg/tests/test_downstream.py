import json
import warnings

import numpy as np
import pytest
from helpers import numeric_grad, rel_error
from hypothesis import given, settings
from hypothesis import strategies as st

from voxvae.downstream import (
    LstmConfig,
    LstmNet,
    LstmSpec,
    build_features,
    knn_labels,
    knn_predict,
    load_head,
    lstm_loss,
    raw_features,
    save_head,
    svm_objective,
    svr_objective,
    train_knn,
    train_linear_svm,
    train_linear_svr,
    train_lstm_head,
)
from voxvae.errors import ShapeError
from voxvae.tensor import autograd as ag

# --- features -----------------------------------------------------------------


def test_concat_width_at_paper_scale(rng):
    latents = [rng.standard_normal((33, 256)) for _ in range(3)]
    assert raw_features(latents, "concat").shape == (3, 8448)
    assert raw_features(latents, "mean").shape == (3, 256)


def test_concat_is_time_major():
    a = np.arange(6.0).reshape(3, 2)
    assert raw_features([a], "concat")[0].tolist() == [0, 1, 2, 3, 4, 5]
    assert raw_features([a], "mean")[0].tolist() == [2.0, 3.0]


def test_single_timepoint_modes_agree(rng):
    latents = [rng.standard_normal((1, 4)) for _ in range(5)]
    assert np.array_equal(build_features(latents, "concat").values, build_features(latents, "mean").values)


def test_constant_column_warns_and_zeros(rng):
    latents = [np.array([[rng.standard_normal(), 3.0]]) for _ in range(6)]
    with pytest.warns(RuntimeWarning, match="constant"):
        fm = build_features(latents, "mean")
    assert np.all(fm.values[:, 1] == 0)


def test_ragged_series_rejected(rng):
    with pytest.raises(ShapeError):
        raw_features([rng.standard_normal((3, 2)), rng.standard_normal((4, 2))], "concat")


def test_standardization_uses_training_rows_only(rng):
    latents = [rng.standard_normal((2, 3)) * 5 + 2 for _ in range(12)]
    train = np.arange(8)
    fm = build_features(latents, "concat", train_rows=train)
    raw = raw_features(latents, "concat")
    assert np.allclose(fm.col_mean, raw[train].mean(axis=0))
    assert np.allclose(fm.apply(raw[8:]), fm.values[8:])


@given(st.integers(2, 20), st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_standardized_training_columns(n, t, l, seed):
    r = np.random.default_rng(seed)
    latents = [r.standard_normal((t, l)) * r.uniform(0.1, 50) + r.uniform(-100, 100) for _ in range(n)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fm = build_features(latents, "concat")
    v = fm.values
    assert np.all(np.abs(v.mean(axis=0)) < 1e-9)
    live = fm.col_std > 0
    assert np.all(np.abs(v[:, live].var(axis=0) - 1) < 1e-6)


# --- reference optimizer for the linear heads ---------------------------------

def _subgradient_reference(objective, subgrad, dim, iters=60000, step=0.5):
    """Projected-subgradient descent with a diminishing step; returns the best objective seen."""
    theta = np.zeros(dim)
    best = objective(theta)
    for t in range(1, iters + 1):
        theta = theta - step / np.sqrt(t) * subgrad(theta)
        best = min(best, objective(theta))
    return best


def _svm_reference(x, y, c):
    s = 2.0 * y - 1.0
    xa = np.hstack([x, np.ones((len(x), 1))])

    def obj(th):
        return svm_objective(th[:-1], th[-1], x, y, c)

    def sub(th):
        active = s * (xa @ th) < 1
        return th - c * (s[active, None] * xa[active]).sum(axis=0)

    return _subgradient_reference(obj, sub, xa.shape[1])


def _svr_reference(x, y, c, eps):
    xa = np.hstack([x, np.ones((len(x), 1))])

    def obj(th):
        return svr_objective(th[:-1], th[-1], x, y, c, eps)

    def sub(th):
        r = xa @ th - y
        sgn = np.where(np.abs(r) > eps, np.sign(r), 0.0)
        return th + c * (sgn[:, None] * xa).sum(axis=0)

    return _subgradient_reference(obj, sub, xa.shape[1])


def test_svm_symmetric_pair():
    head = train_linear_svm(np.array([[-1.0], [1.0]]), np.array([0, 1]))
    scores = head.predict(np.array([[-1.0], [0.0], [1.0]]))
    assert scores[0] < 0 < scores[2]
    assert abs(scores[1]) < 1e-6


def test_svm_separates_blobs(rng):
    x = np.vstack([rng.standard_normal((20, 2)) * 0.3 + [-2, 0], rng.standard_normal((20, 2)) * 0.3 + [2, 0]])
    y = np.repeat([0, 1], 20)
    head = train_linear_svm(x, y)
    assert np.all((head.predict(x) > 0) == (y == 1))


def test_svm_objective_matches_reference(rng):
    w_true = np.array([1.5, -1.0])
    x = rng.standard_normal((40, 2))
    margin = x @ w_true + 0.3
    keep = np.abs(margin) > 0.4
    x = x[keep][:20]
    y = (margin[keep][:20] > 0).astype(float)
    head = train_linear_svm(x, y, c=1.0)
    ours = svm_objective(head.params["w"], head.params["b"][0], x, y, 1.0)
    ref = _svm_reference(x, y, 1.0)
    assert abs(ours - ref) / ref < 0.01
    assert ours <= ref + 1e-9


def test_svm_single_class_rejected():
    with pytest.raises(ValueError):
        train_linear_svm(np.zeros((3, 2)), np.ones(3))


def test_svr_recovers_line(rng):
    x = np.linspace(-3, 3, 40)[:, None]
    y = 2 * x[:, 0] + 1
    head = train_linear_svr(x, y, c=10.0, epsilon=0.1)
    assert head.params["w"][0] == pytest.approx(2.0, rel=0.05)


def test_svr_constant_target(rng):
    x = rng.standard_normal((15, 3))
    y = np.full(15, 4.2)
    head = train_linear_svr(x, y, epsilon=0.1)
    assert np.all(np.abs(head.predict(x) - 4.2) <= 0.1)


def test_svr_objective_matches_reference(rng):
    x = rng.standard_normal((20, 3))
    y = x @ np.array([0.5, -1.0, 2.0]) + 0.2 * rng.standard_normal(20)
    head = train_linear_svr(x, y, c=1.0, epsilon=0.1, center_targets=False)
    ours = svr_objective(head.params["w"], head.params["b"][0], x, y, 1.0, 0.1)
    ref = _svr_reference(x, y, 1.0, 0.1)
    assert abs(ours - ref) / ref < 0.01
    assert ours <= ref + 1e-9


def test_linear_heads_invariant_to_row_order(rng):
    x = rng.standard_normal((25, 4))
    y = (x[:, 0] + 0.3 * rng.standard_normal(25) > 0).astype(float)
    t = x @ np.array([1.0, 0.0, -2.0, 0.5])
    perm = rng.permutation(25)
    a = train_linear_svm(x, y, seed=1)
    b = train_linear_svm(x[perm], y[perm], seed=1)
    oa = svm_objective(a.params["w"], a.params["b"][0], x, y, 1.0)
    ob = svm_objective(b.params["w"], b.params["b"][0], x, y, 1.0)
    assert abs(oa - ob) < 1e-6
    a = train_linear_svr(x, t, center_targets=False)
    b = train_linear_svr(x[perm], t[perm], center_targets=False)
    oa = svr_objective(a.params["w"], a.params["b"][0], x, t, 1.0, 0.1)
    ob = svr_objective(b.params["w"], b.params["b"][0], x, t, 1.0, 0.1)
    assert abs(oa - ob) < 1e-6


# --- kNN ------------------------------------------------------------------------

def test_knn_exact_match(rng):
    x = rng.standard_normal((10, 3))
    y = rng.integers(0, 2, 10).astype(float)
    assert knn_predict(x, y, x[4], k=1) == y[4]


def test_knr_mean_of_three():
    x = np.array([[0.0], [1.0], [2.0], [10.0]])
    y = np.array([1.0, 2.0, 3.0, 50.0])
    assert knn_predict(x, y, np.array([1.0]), k=3, task="regress") == 2.0


def test_k_larger_than_training_set():
    with pytest.raises(ValueError):
        knn_predict(np.zeros((3, 2)), np.zeros(3), np.zeros(2), k=4)


def _brute_force_knn(train_x, train_y, query, k):
    dists = [(float(np.sqrt(np.sum((row - query) ** 2))), float(t)) for row, t in zip(train_x, train_y)]
    dists.sort()
    return np.mean([t for _, t in dists[:k]])


@pytest.mark.parametrize("task", ["classify", "regress"])
def test_knn_matches_brute_force(rng, task):
    x = rng.standard_normal((50, 4))
    y = rng.integers(0, 2, 50).astype(float) if task == "classify" else rng.standard_normal(50)
    queries = rng.standard_normal((20, 4))
    pred = knn_predict(x, y, queries, k=5, task=task)
    for q, p in zip(queries, pred):
        assert p == _brute_force_knn(x, y, q, 5)


def test_knn_permutation_invariant(rng):
    x = np.round(rng.standard_normal((30, 2)), 1)  # rounding creates distance ties
    y = rng.standard_normal(30)
    queries = np.round(rng.standard_normal((15, 2)), 1)
    perm = rng.permutation(30)
    a = knn_predict(x, y, queries, k=5, task="regress")
    b = knn_predict(x[perm], y[perm], queries, k=5, task="regress")
    assert np.array_equal(a, b)


def test_knn_even_vote_goes_to_nearest():
    x = np.array([[0.0], [0.5], [-1.0], [2.0]])
    y = np.array([1.0, 0.0, 1.0, 0.0])
    assert knn_labels(x, y, np.array([0.1]), k=2).tolist() == [1]
    assert knn_labels(x, y, np.array([0.45]), k=2).tolist() == [0]


def test_train_knn_head(rng):
    x = rng.standard_normal((12, 3))
    y = rng.standard_normal(12)
    head = train_knn(x, y, k=3, task="regress")
    assert head.kind == "knr"
    assert np.array_equal(head.predict(x[:4]), knn_predict(x, y, x[:4], 3, "regress"))


# --- LSTM -----------------------------------------------------------------------

def test_lstm_feature_width(rng):
    spec = LstmSpec(64)
    assert spec.hidden_dim == 128
    net = LstmNet(spec, 33, rng)
    feats = net.features(ag.Tensor(rng.standard_normal((2, 33, 64)).astype(np.float32)))
    assert feats.shape == (2, 4224)
    assert net.w_out.shape == (4224, 1)


def test_lstm_overfits_toy_set():
    r = np.random.default_rng(7)
    series = [r.standard_normal((10, 8)) for _ in range(8)]
    for i, s in enumerate(series):
        s[:, 0] += 0.8 if i % 2 else -0.8
    y = np.array([float(s[:, 0].mean() > 0) for s in series])
    head = train_lstm_head(series, y, LstmSpec(8), LstmConfig(max_epochs=200, patience=200))
    assert head.meta["epochs_run"] <= 200
    assert np.array_equal(head.predict(series) > 0, y == 1)


def test_lstm_eval_is_deterministic(rng):
    series = [rng.standard_normal((4, 3)) for _ in range(6)]
    y = np.arange(6) % 2
    head = train_lstm_head(series, y, LstmSpec(3), LstmConfig(max_epochs=5))
    assert np.array_equal(head.predict(series), head.predict(series))


def test_lstm_gradient_check(f64):
    r = np.random.default_rng(3)
    spec = LstmSpec(2, dropout_rate=0.5)
    net = LstmNet(spec, 3, r).eval()
    x = ag.Tensor(r.standard_normal((4, 3, 2)))
    y = np.array([0.0, 1.0, 1.0, 0.0])
    named = list(net.named_parameters())
    net.zero_grad()
    lstm_loss(net, x, y, spec).backward()
    for name, p in named:
        numeric = numeric_grad(lambda: lstm_loss(net, x, y, spec).item(), p.data)
        assert rel_error(p.grad, numeric) < 1e-3, name


def test_lstm_regression_maps_back_to_target_scale(rng):
    series = [rng.standard_normal((5, 3)) for _ in range(10)]
    y = np.array([60.0 + 2 * s[:, 1].mean() for s in series])
    head = train_lstm_head(series, y, LstmSpec(3, loss="mse"), LstmConfig(max_epochs=150, patience=150))
    pred = head.predict(series)
    assert abs(pred.mean() - y.mean()) < 2.0


def test_lstm_rejects_wrong_width(rng):
    series = [rng.standard_normal((4, 3)) for _ in range(4)]
    with pytest.raises(ShapeError):
        train_lstm_head(series, [0, 1, 0, 1], LstmSpec(5))


# --- persistence ------------------------------------------------------------------

def test_head_round_trip(tmp_path, rng):
    x = rng.standard_normal((20, 3))
    y = (x[:, 0] > 0).astype(float)
    head = train_linear_svm(x, y)
    save_head(tmp_path / "svm.hed", head, {"mode": "mean"})
    back = load_head(tmp_path / "svm.hed")
    assert back.kind == "svm"
    assert np.allclose(back.predict(x), head.predict(x), atol=1e-5)
    sidecar = json.loads((tmp_path / "svm.hed.json").read_text())
    assert sidecar["kind"] == "svm" and sidecar["mode"] == "mean" and sidecar["seed"] == 0


def test_lstm_head_round_trip(tmp_path, rng):
    series = [rng.standard_normal((4, 2)) for _ in range(6)]
    head = train_lstm_head(series, np.arange(6) % 2, LstmSpec(2), LstmConfig(max_epochs=3))
    save_head(tmp_path / "l.hed", head)
    back = load_head(tmp_path / "l.hed")
    assert np.array_equal(back.predict(series), head.predict(series))
