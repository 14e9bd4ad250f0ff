"""Streaming PCA baseline over per-timepoint flattened volumes.

The update is the mean-corrected SVD merge: the current subspace (scaled by
its singular values), the centred new batch and one mean-correction row are
stacked and re-decomposed, so memory stays O((k + B) * V).
"""
import logging
from dataclasses import dataclass

import numpy as np

from .containers import load_bundle, save_bundle
from .errors import NumericError, ShapeError, StateError

log = logging.getLogger(__name__)

PCA_MAGIC = b"PCA1"


def default_batch_size(k):
    return max(2 * k, 64)


def _fix_signs(components):
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(len(components)), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


@dataclass
class PcaModel:
    n_components: int
    mean: np.ndarray = None
    components: np.ndarray = None
    singular_values: np.ndarray = None
    n_samples_seen: int = 0
    # Running sum of squares of the centred data; used for explained-variance ratios.
    total_var: float = 0.0

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")

    @property
    def n_features(self):
        return None if self.mean is None else self.mean.shape[0]

    @property
    def fitted(self):
        return self.components is not None

    @property
    def explained_variance(self):
        return self.singular_values**2 / max(self.n_samples_seen - 1, 1)

    def partial_fit(self, batch):
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[0] < 1:
            raise ShapeError(f"batch must be a non-empty B x V matrix, got {x.shape}")
        if self.mean is not None and x.shape[1] != self.mean.shape[0]:
            raise ShapeError(f"batch has {x.shape[1]} features, model has {self.mean.shape[0]}")
        b = x.shape[0]
        batch_mean = x.mean(axis=0)
        if self.mean is None:
            n_total = b
            stacked = x - batch_mean
            new_mean = batch_mean
            self.total_var = float(np.sum(stacked**2))
        else:
            n_old = self.n_samples_seen
            n_total = n_old + b
            new_mean = self.mean + (batch_mean - self.mean) * (b / n_total)
            correction = np.sqrt(n_old * b / n_total) * (self.mean - batch_mean)
            stacked = np.vstack(
                [self.singular_values[:, None] * self.components, x - batch_mean, correction[None, :]]
            )
            self.total_var += float(np.sum((x - batch_mean) ** 2) + np.sum(correction**2))
        _, s, vt = np.linalg.svd(stacked, full_matrices=False)
        keep = min(self.n_components, len(s))
        self.components = _fix_signs(vt[:keep])
        self.singular_values = s[:keep]
        self.mean = new_mean
        self.n_samples_seen = n_total
        return self

    def _check_ready(self):
        if not self.fitted:
            raise StateError("PCA model is not fitted")
        if self.n_samples_seen < self.n_components or len(self.components) < self.n_components:
            raise StateError(
                f"need at least {self.n_components} samples before transform, have {self.n_samples_seen}"
            )

    def project(self, x):
        self._check_ready()
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.mean.shape[0]:
            raise ShapeError(f"expected {self.mean.shape[0]} features, got {x.shape[-1]}")
        return (x - self.mean) @ self.components.T

    def whitening_scale(self):
        self._check_ready()
        scale = self.singular_values / np.sqrt(max(self.n_samples_seen - 1, 1))
        bad = np.flatnonzero(scale <= np.finfo(np.float64).tiny)
        if len(bad):
            raise NumericError(f"component {int(bad[0])} has zero singular value; cannot whiten")
        return scale

    def transform_whitened(self, x):
        """Project one vector (or rows of a matrix) and scale to unit training variance."""
        return self.project(x) / self.whitening_scale()

    def reconstruct(self, x, k=None):
        self._check_ready()
        k = self.n_components if k is None else k
        comps = self.components[:k]
        x = np.asarray(x, dtype=np.float64)
        return self.mean + ((x - self.mean) @ comps.T) @ comps


def fit_incremental(rows, n_components, batch_size=None):
    """Fit on a 2-D array or an iterable of row batches."""
    model = PcaModel(n_components)
    batch_size = batch_size or default_batch_size(n_components)
    if isinstance(rows, np.ndarray):
        if rows.ndim != 2:
            raise ShapeError("expected a samples x features matrix")
        for start in range(0, len(rows), batch_size):
            model.partial_fit(rows[start : start + batch_size])
    else:
        for chunk in rows:
            model.partial_fit(chunk)
    return model


def _timepoint_rows(volume):
    data = volume.data if hasattr(volume, "data") else np.asarray(volume)
    return data.reshape(data.shape[0], -1)


def fit_volumes(volumes, n_components, batch_size=None):
    """Stream every timepoint of every series through partial_fit."""
    batch_size = batch_size or default_batch_size(n_components)

    def batches():
        pending = []
        count = 0
        for vol in volumes:
            rows = _timepoint_rows(vol)
            pending.append(rows)
            count += len(rows)
            while count >= batch_size:
                block = np.concatenate(pending)
                yield block[:batch_size]
                rest = block[batch_size:]
                pending = [rest] if len(rest) else []
                count = len(rest)
        if count:
            yield np.concatenate(pending)

    return fit_incremental(batches(), n_components, batch_size)


def encode_subject(model, volume):
    """Whiten each timepoint independently, then average over time."""
    return model.transform_whitened(_timepoint_rows(volume)).mean(axis=0)


def save_pca(path, model):
    model._check_ready()
    meta = {
        "format": "pca",
        "k": model.n_components,
        "V": int(model.n_features),
        "n_samples_seen": int(model.n_samples_seen),
        "total_var": model.total_var,
    }
    tensors = [
        ("mean", model.mean),
        ("components", model.components),
        ("singular_values", model.singular_values),
    ]
    save_bundle(path, PCA_MAGIC, meta, tensors)


def load_pca(path):
    meta, t = load_bundle(path, PCA_MAGIC)
    model = PcaModel(meta["k"])
    model.mean = t["mean"].astype(np.float64)
    model.components = t["components"].astype(np.float64)
    model.singular_values = t["singular_values"].astype(np.float64)
    model.n_samples_seen = meta["n_samples_seen"]
    model.total_var = meta["total_var"]
    return model
