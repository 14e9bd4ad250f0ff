"""Prediction heads over latent representations.

Linear SVM/SVR (dual coordinate descent), k-nearest neighbours and an LSTM
that reads a subject's latent time series.  Every head works on a
``FeatureMatrix`` built from per-subject (T, L) latent arrays, except the
LSTM which consumes the series directly.
"""
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .containers import atomic_write_bytes, load_bundle, save_bundle
from .errors import ShapeError
from .tensor import autograd as ag
from .tensor import nn
from .tensor.config import default_dtype, no_grad
from .tensor.optim import AdamState, adam_step

log = logging.getLogger(__name__)

HEAD_MAGIC = b"HED1"
MODES = ("concat", "mean")


# --- features ---------------------------------------------------------------

def _stack_series(latents):
    arrays = [np.asarray(a, dtype=np.float64) for a in latents]
    if not arrays:
        raise ShapeError("no subjects given")
    arrays = [a[None, :] if a.ndim == 1 else a for a in arrays]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"subjects disagree on (T, L): {sorted(shapes)}")
    return np.stack(arrays)


@dataclass
class FeatureMatrix:
    values: np.ndarray
    mode: str
    col_mean: np.ndarray
    col_std: np.ndarray

    @property
    def shape(self):
        return self.values.shape

    def apply(self, raw):
        """Standardize new rows with the stored training statistics."""
        out = (raw - self.col_mean) / np.where(self.col_std > 0, self.col_std, 1.0)
        out[:, self.col_std == 0] = 0.0
        return out


def raw_features(latents, mode):
    """(N, T, L) series to an (N, T*L) time-major matrix or (N, L) temporal means."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    series = _stack_series(latents)
    if mode == "concat":
        return series.reshape(len(series), -1)
    return series.mean(axis=1)


def build_features(latents, mode, train_rows=None):
    """Raw features standardized with statistics from ``train_rows`` only."""
    raw = raw_features(latents, mode)
    fit_on = raw if train_rows is None else raw[np.asarray(train_rows)]
    mu = fit_on.mean(axis=0)
    sd = fit_on.std(axis=0)
    flat = sd <= 1e-12 * np.maximum(1.0, np.abs(mu))
    if np.any(flat):
        warnings.warn(f"{int(flat.sum())} constant feature column(s) set to zero", RuntimeWarning)
        sd = np.where(flat, 0.0, sd)
    fm = FeatureMatrix(None, mode, mu, sd)
    fm.values = fm.apply(raw)
    if not np.all(np.isfinite(fm.values)):
        raise ValueError("features contain NaN or Inf")
    return fm


# --- trained head container -------------------------------------------------

@dataclass
class TrainedHead:
    kind: str
    params: dict
    meta: dict = field(default_factory=dict)

    def predict(self, x):
        return PREDICTORS[self.kind](self, x)


def _augment(x):
    return np.hstack([np.asarray(x, dtype=np.float64), np.ones((len(x), 1))])


def _check_xy(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.ndim != 2 or len(x) != len(y):
        raise ShapeError(f"X {x.shape} and y {y.shape} do not line up")
    return x, y


# --- linear SVM (hinge loss) ------------------------------------------------

def svm_objective(w, b, x, y01, c):
    """0.5 * (|w|^2 + b^2) + C * sum(hinge); the bias is regularized too."""
    s = 2.0 * np.asarray(y01) - 1.0
    margins = 1.0 - s * (x @ w + b)
    return 0.5 * (w @ w + b * b) + c * np.sum(np.maximum(margins, 0.0))


def train_linear_svm(x, y, c=1.0, tol=1e-8, max_epochs=20000, seed=0):
    """Dual coordinate descent for the L1-loss linear SVM.

    The intercept is an extra constant feature, so it shares the L2 penalty.
    """
    x, y = _check_xy(x, y)
    if set(np.unique(y)) != {0.0, 1.0}:
        raise ValueError("SVM needs both classes 0 and 1 present")
    xa = _augment(x)
    s = 2.0 * y - 1.0
    n = len(xa)
    q = np.einsum("ij,ij->i", xa, xa)
    alpha = np.zeros(n)
    w = np.zeros(xa.shape[1])
    rng = np.random.default_rng(seed)
    for epoch in range(max_epochs):
        pg_max, pg_min = -math.inf, math.inf
        for i in rng.permutation(n):
            g = s[i] * (w @ xa[i]) - 1.0
            if alpha[i] == 0:
                pg = min(g, 0.0)
            elif alpha[i] == c:
                pg = max(g, 0.0)
            else:
                pg = g
            pg_max = max(pg_max, pg)
            pg_min = min(pg_min, pg)
            if pg != 0.0 and q[i] > 0:
                old = alpha[i]
                alpha[i] = min(max(old - g / q[i], 0.0), c)
                w += (alpha[i] - old) * s[i] * xa[i]
        if pg_max - pg_min < tol:
            break
    return TrainedHead("svm", {"w": w[:-1], "b": np.array([w[-1]])},
                       {"C": c, "seed": seed, "epochs": epoch + 1})


def _predict_linear(head, x):
    return np.asarray(x, dtype=np.float64) @ head.params["w"] + head.params["b"][0]


# --- linear SVR (epsilon-insensitive loss) ----------------------------------

def svr_objective(w, b, x, y, c, epsilon):
    res = np.abs(x @ w + b - y)
    return 0.5 * (w @ w + b * b) + c * np.sum(np.maximum(res - epsilon, 0.0))


def train_linear_svr(x, y, c=1.0, epsilon=0.1, tol=1e-8, max_epochs=20000, seed=0,
                     center_targets=True):
    """Dual coordinate descent for the L1-loss linear SVR.

    Each coordinate step is a soft-threshold of the unconstrained minimizer,
    clipped to the box [-C, C].  Targets are centred first so the regularized
    intercept only has to absorb the residual offset.
    """
    x, y = _check_xy(x, y)
    if len(y) < 2:
        raise ValueError("SVR needs at least two samples")
    offset = float(y.mean()) if center_targets else 0.0
    yc = y - offset
    xa = _augment(x)
    n = len(xa)
    q = np.einsum("ij,ij->i", xa, xa)
    beta = np.zeros(n)
    w = np.zeros(xa.shape[1])
    rng = np.random.default_rng(seed)
    for epoch in range(max_epochs):
        largest = 0.0
        for i in rng.permutation(n):
            if q[i] == 0:
                continue
            g = w @ xa[i] - yc[i]
            z = beta[i] - g / q[i]
            new = np.sign(z) * max(abs(z) - epsilon / q[i], 0.0)
            new = min(max(new, -c), c)
            d = new - beta[i]
            if d != 0.0:
                beta[i] = new
                w += d * xa[i]
                largest = max(largest, abs(d) * math.sqrt(q[i]))
        if largest < tol:
            break
    return TrainedHead("svr", {"w": w[:-1], "b": np.array([w[-1] + offset])},
                       {"C": c, "epsilon": epsilon, "seed": seed, "epochs": epoch + 1})


# --- k nearest neighbours ---------------------------------------------------

def _neighbours(train_x, train_y, queries, k):
    d2 = np.sum((queries[:, None, :] - train_x[None, :, :]) ** 2, axis=2)
    # Sort by distance, then by target, so equal-distance ties do not depend on row order.
    order = np.stack([np.lexsort((train_y, row)) for row in d2])
    return order[:, :k]


def knn_predict(train_x, train_y, query, k=5, task="classify"):
    """Euclidean kNN for one query vector or a matrix of queries.

    ``classify`` returns the positive-class fraction among the k neighbours;
    use ``knn_labels`` for hard votes.  ``regress`` returns the neighbour mean.
    """
    train_x, train_y = _check_xy(train_x, train_y)
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if not 1 <= k <= len(train_x):
        raise ValueError(f"k={k} must lie in [1, {len(train_x)}]")
    if task not in ("classify", "regress"):
        raise ValueError(f"unknown task {task!r}")
    idx = _neighbours(train_x, train_y, q, k)
    out = train_y[idx].mean(axis=1)
    return float(out[0]) if single else out


def knn_labels(train_x, train_y, query, k=5):
    """Majority vote; an even split goes to the single nearest neighbour."""
    train_x, train_y = _check_xy(train_x, train_y)
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    if not 1 <= k <= len(train_x):
        raise ValueError(f"k={k} must lie in [1, {len(train_x)}]")
    idx = _neighbours(train_x, train_y, q, k)
    votes = train_y[idx].mean(axis=1)
    labels = (votes > 0.5).astype(np.int64)
    tied = votes == 0.5
    labels[tied] = train_y[idx[tied, 0]].astype(np.int64)
    return labels


def train_knn(x, y, k=5, task="classify"):
    x, y = _check_xy(x, y)
    if not 1 <= k <= len(x):
        raise ValueError(f"k={k} must lie in [1, {len(x)}]")
    kind = "knn" if task == "classify" else "knr"
    return TrainedHead(kind, {"x": x, "y": y}, {"k": k, "task": task})


def _predict_knn(head, x):
    return knn_predict(head.params["x"], head.params["y"], np.atleast_2d(x),
                       head.meta["k"], head.meta["task"])


# --- LSTM head --------------------------------------------------------------

@dataclass
class LstmSpec:
    input_dim: int
    dropout_rate: float = 0.5
    loss: str = "bce"

    def __post_init__(self):
        if self.loss not in ("bce", "mse"):
            raise ValueError("loss must be 'bce' or 'mse'")

    @property
    def hidden_dim(self):
        return 2 * self.input_dim


@dataclass
class LstmConfig:
    lr: float = 1e-3
    max_epochs: int = 300
    patience: int = 20
    seed: int = 0


class LstmNet(nn.Module):
    """Single-layer LSTM; all T hidden states feed one linear read-out."""

    def __init__(self, spec, steps, rng, dtype=None):
        dtype = dtype or default_dtype()
        h = spec.hidden_dim

        def glorot(n_in, n_out):
            bound = math.sqrt(6.0 / (n_in + n_out))
            return ag.Parameter(rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype))

        self.spec = spec
        self.steps = steps
        # Gate order along the 4H axis: input, forget, cell, output.
        self.w_x = glorot(spec.input_dim, 4 * h)
        q, _ = np.linalg.qr(rng.standard_normal((4 * h, h)))
        self.w_h = ag.Parameter(q.T.astype(dtype))
        bias = np.zeros(4 * h)
        bias[h : 2 * h] = 1.0
        self.b = ag.Parameter(bias.astype(dtype))
        self.w_out = glorot(steps * h, 1)
        self.b_out = ag.Parameter(np.zeros(1, dtype=dtype))

    def features(self, x):
        """(N, T, L) input to the (N, T*H) concatenation of hidden states."""
        n, t, _ = x.shape
        if t != self.steps:
            raise ShapeError(f"head was built for T={self.steps}, got T={t}")
        hd = self.spec.hidden_dim
        xw = ag.matmul(x, self.w_x) + self.b
        h = ag.Tensor(np.zeros((n, hd), dtype=self.b.dtype))
        c = ag.Tensor(np.zeros((n, hd), dtype=self.b.dtype))
        states = []
        for step in range(t):
            z = xw[:, step, :] + ag.matmul(h, self.w_h)
            i = ag.sigmoid(z[:, :hd])
            f = ag.sigmoid(z[:, hd : 2 * hd])
            g = ag.tanh(z[:, 2 * hd : 3 * hd])
            o = ag.sigmoid(z[:, 3 * hd :])
            c = f * c + i * g
            h = o * ag.tanh(c)
            states.append(h)
        return ag.concat(states, axis=1)

    def __call__(self, x, rng=None):
        feats = self.features(x)
        feats = ag.dropout(feats, self.spec.dropout_rate, rng, training=self.training and rng is not None)
        return ag.reshape(ag.matmul(feats, self.w_out) + self.b_out, (x.shape[0],))


def _series_tensor(series, in_mean=None, in_std=None):
    data = _stack_series(series)
    if in_mean is not None:
        data = (data - np.asarray(in_mean)) / np.asarray(in_std)
    return ag.Tensor(data.astype(default_dtype()))


def _input_stats(series):
    """Per-latent-dim mean and std over all training subjects and timepoints."""
    flat = _stack_series(series).reshape(-1, np.shape(series[0])[-1])
    sd = flat.std(axis=0)
    return flat.mean(axis=0), np.where(sd > 0, sd, 1.0)


def lstm_loss(net, x, y, spec, rng=None):
    out = net(x, rng)
    if spec.loss == "bce":
        return ag.bce_with_logits(out, y)
    diff = out - ag.Tensor(np.asarray(y, dtype=out.dtype))
    return ag.mean(diff * diff)


def train_lstm_head(series, y, spec, cfg=None, val_series=None, val_y=None):
    """Full-batch ADAM with early stopping on the validation loss.

    Inputs are standardized per latent dim, and regression targets before the
    MSE loss, both with training statistics; predictions are mapped back.
    """
    cfg = cfg or LstmConfig()
    in_mean, in_std = _input_stats(series)
    x = _series_tensor(series, in_mean, in_std)
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape[0] != len(y):
        raise ShapeError("one target per subject required")
    if x.shape[2] != spec.input_dim:
        raise ShapeError(f"spec expects L={spec.input_dim}, series have L={x.shape[2]}")
    if spec.loss == "bce":
        t_mean, t_std = 0.0, 1.0
    else:
        t_mean, t_std = float(y.mean()), float(y.std()) or 1.0
    yt = (y - t_mean) / t_std
    if val_series is not None and len(val_series):
        xv = _series_tensor(val_series, in_mean, in_std)
        yv = (np.asarray(val_y, dtype=np.float64).ravel() - t_mean) / t_std
    else:
        xv, yv = x, yt

    rng = np.random.default_rng([cfg.seed, 2])
    net = LstmNet(spec, x.shape[1], rng)
    params = net.parameters()
    names = [n for n, _ in net.named_parameters()]
    opt = AdamState(lr=cfg.lr).init_for(params)
    best = (math.inf, [p.data.copy() for p in params], 0)
    stale = 0
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        net.train()
        loss = lstm_loss(net, x, yt, spec, rng)
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"LSTM head diverged at epoch {epoch}: loss {loss.item()}")
        net.zero_grad()
        loss.backward()
        adam_step(params, opt, names)
        net.eval()
        with no_grad():
            val = lstm_loss(net, xv, yv, spec).item()
        history.append((epoch, loss.item(), val))
        if val < best[0]:
            best = (val, [p.data.copy() for p in params], epoch)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for p, arr in zip(params, best[1]):
        p.data = arr
    meta = {
        "input_dim": spec.input_dim,
        "steps": x.shape[1],
        "dropout_rate": spec.dropout_rate,
        "loss": spec.loss,
        "lr": cfg.lr,
        "patience": cfg.patience,
        "seed": cfg.seed,
        "best_epoch": best[2],
        "epochs_run": len(history),
        "target_mean": t_mean,
        "target_std": t_std,
        "input_mean": in_mean.tolist(),
        "input_std": in_std.tolist(),
    }
    return TrainedHead("lstm", net.state_arrays(), meta)


def _lstm_from_head(head):
    meta = head.meta
    spec = LstmSpec(meta["input_dim"], meta["dropout_rate"], meta["loss"])
    net = LstmNet(spec, meta["steps"], np.random.default_rng(0))
    net.load_state_arrays(head.params)
    return net.eval()


def _predict_lstm(head, series):
    """Logits for classification, target-scale values for regression."""
    net = _lstm_from_head(head)
    with no_grad():
        x = _series_tensor(series, head.meta["input_mean"], head.meta["input_std"])
        out = net(x).data.astype(np.float64)
    return out * head.meta["target_std"] + head.meta["target_mean"]


PREDICTORS = {
    "svm": _predict_linear,
    "svr": _predict_linear,
    "knn": _predict_knn,
    "knr": _predict_knn,
    "lstm": _predict_lstm,
}


# --- persistence ------------------------------------------------------------

def save_head(path, head, extra_meta=None):
    """Tensor bundle at ``path`` plus a human-readable ``path + '.json'`` sidecar."""
    meta = {"kind": head.kind, **head.meta, **(extra_meta or {})}
    names = sorted(head.params)
    save_bundle(path, HEAD_MAGIC, {"head": meta}, [(n, head.params[n]) for n in names])
    sidecar = json.dumps(meta, sort_keys=True, indent=2).encode("utf-8")
    atomic_write_bytes(os.fspath(path) + ".json", sidecar)


def load_head(path):
    meta, tensors = load_bundle(path, HEAD_MAGIC)
    info = dict(meta["head"])
    kind = info.pop("kind")
    params = {k: v.astype(np.float64) if kind != "lstm" else v for k, v in tensors.items()}
    return TrainedHead(kind, params, info)
