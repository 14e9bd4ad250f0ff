"""3D residual variational autoencoder over single volumes.

Every timepoint of every subject is an independent training sample. The
encoder halves each spatial axis five times (ceil rule), flattens, and emits
the posterior mean and log-variance; the decoder mirrors the encoder's
recorded spatial sizes so reconstructions match the input grid exactly.
"""
import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import containers
from .errors import ShapeError, TrainingDiverged
from .tensor import autograd as ag
from .tensor import nn
from .tensor.config import no_grad
from .tensor.optim import AdamState, adam_step

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VAE1"
PAPER_LATENT_DIMS = (64, 128, 256, 512)
LOGVAR_INIT_GAIN = 0.01


@dataclass
class VaeSpec:
    latent_dim: int = 256
    input_spatial: tuple = (53, 63, 52)
    encoder_channels: tuple = (16, 32, 64, 128, 256)

    def __post_init__(self):
        self.input_spatial = tuple(int(d) for d in self.input_spatial)
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if len(self.encoder_channels) != 5:
            raise ValueError("the encoder has exactly five residual blocks")
        if self.latent_dim < 1 or min(self.input_spatial) < 1:
            raise ValueError("latent_dim and spatial dims must be positive")

    @property
    def stage_sizes(self):
        """Spatial size entering each encoder block, plus the final map size."""
        sizes = [self.input_spatial]
        for _ in self.encoder_channels:
            sizes.append(tuple((d + 1) // 2 for d in sizes[-1]))
        return sizes

    @property
    def final_spatial(self):
        return self.stage_sizes[-1]

    @property
    def bottleneck_features(self):
        return self.encoder_channels[-1] * int(np.prod(self.final_spatial))

    @property
    def decoder_channels(self):
        rev = self.encoder_channels[::-1]
        return rev[1:] + (self.encoder_channels[0],)

    def to_dict(self):
        return {
            "latent_dim": self.latent_dim,
            "input_spatial": list(self.input_spatial),
            "encoder_channels": list(self.encoder_channels),
        }


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 5e-4
    batch_size: int = 16
    patience: int = 20
    kl_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1 or self.lr < 0 or self.kl_weight < 0:
            raise ValueError(f"invalid training config {self}")


@dataclass
class LatentDistribution:
    mu: np.ndarray
    log_var: np.ndarray

    @property
    def sigma(self):
        return np.exp(0.5 * self.log_var)


class Encoder(nn.Module):
    def __init__(self, spec, rng):
        chans = (1,) + spec.encoder_channels
        self.blocks = [nn.ResBlock(chans[i], chans[i + 1], 2, rng) for i in range(5)]
        self.mu_head = nn.WNLinear(spec.bottleneck_features, spec.latent_dim, rng)
        # Small initial gain keeps exp(log_var) near 1; at full He scale the KL term
        # starts in the tens of thousands and dominates the first epochs.
        self.logvar_head = nn.WNLinear(
            spec.bottleneck_features, spec.latent_dim, rng, gain=LOGVAR_INIT_GAIN
        )

    def __call__(self, x):
        h = x
        for block in self.blocks:
            h = block(h)
        h = ag.reshape(h, (h.shape[0], -1))
        return self.mu_head(h), self.logvar_head(h)


class Decoder(nn.Module):
    def __init__(self, spec, rng):
        self.spec = spec
        self.fc = nn.WNLinear(spec.latent_dim, spec.bottleneck_features, rng)
        chans = (spec.encoder_channels[-1],) + spec.decoder_channels
        self.blocks = [nn.ResBlock(chans[i], chans[i + 1], 1, rng) for i in range(5)]
        self.out = nn.WNConvTranspose1x1(chans[-1], 1, rng)
        # Mirror of the encoder: block j upsamples to the size that entered encoder block 4-j.
        self.targets = spec.stage_sizes[:-1][::-1]

    def __call__(self, z):
        h = ag.elu(self.fc(z))
        h = ag.reshape(h, (z.shape[0], self.spec.encoder_channels[-1]) + self.spec.final_spatial)
        for block, target in zip(self.blocks, self.targets):
            h = block(ag.trilinear_resize(h, target))
        return self.out(h)


class VAE(nn.Module):
    def __init__(self, spec, seed=0):
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.encoder = Encoder(spec, rng)
        self.decoder = Decoder(spec, rng)

    def _check_input(self, x):
        if x.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != self.spec.input_spatial:
            raise ShapeError(f"expected (N, 1, {self.spec.input_spatial}) input, got {tuple(x.shape)}")

    def encode(self, x):
        """Return (mu, log_var) tensors for a (N, 1, X, Y, Z) batch."""
        x = ag.as_tensor(x)
        self._check_input(x)
        return self.encoder(x)

    def decode(self, z):
        z = ag.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.spec.latent_dim:
            raise ShapeError(f"expected (N, {self.spec.latent_dim}) latents, got {tuple(z.shape)}")
        return self.decoder(z)

    def __call__(self, x, rng):
        mu, log_var = self.encode(x)
        z = reparameterize(mu, log_var, rng)
        return self.decode(z), mu, log_var


def reparameterize(mu, log_var, rng):
    """z = mu + exp(log_var / 2) * eps with eps ~ N(0, I)."""
    if isinstance(mu, LatentDistribution):
        mu, log_var = mu.mu, mu.log_var
    if not isinstance(mu, ag.Tensor):
        mu, log_var = np.asarray(mu), np.asarray(log_var)
        eps = rng.standard_normal(mu.shape).astype(mu.dtype)
        return mu + np.exp(0.5 * log_var) * eps
    eps = rng.standard_normal(mu.shape).astype(mu.dtype)
    return mu + ag.exp(log_var * 0.5) * eps


def kl_divergence(mu, log_var):
    """KL(N(mu, exp(log_var)) || N(0, I)) summed over the last axis.

    Works on arrays (returns floats) and on tensors (returns a tensor).
    """
    if isinstance(mu, LatentDistribution):
        mu, log_var = mu.mu, mu.log_var
    if isinstance(mu, ag.Tensor) or isinstance(log_var, ag.Tensor):
        terms = ag.square(mu) + ag.exp(log_var) - 1.0 - log_var
        return ag.tsum(terms, axis=-1) * 0.5
    mu, log_var = np.asarray(mu, dtype=float), np.asarray(log_var, dtype=float)
    # expm1 avoids the cancellation in exp(v) - 1 - v for tiny v
    return 0.5 * np.sum(mu**2 + (np.expm1(log_var) - log_var), axis=-1)


def elbo_loss(x, x_hat, mu, log_var, beta=1.0):
    """Negative ELBO: per-sample summed squared error plus beta * KL, batch-averaged.

    Returns (total, recon, kl) as scalar tensors.
    """
    x, x_hat = ag.as_tensor(x), ag.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction shape {x_hat.shape} differs from input {x.shape}")
    n = x.shape[0]
    recon = ag.tsum(ag.square(x_hat - x)) * (1.0 / n)
    kl = ag.tsum(kl_divergence(ag.as_tensor(mu), ag.as_tensor(log_var))) * (1.0 / n)
    total = recon + kl * float(beta)
    return total, recon, kl


# --- checkpoints -------------------------------------------------------------


@dataclass
class VaeCheckpoint:
    spec: VaeSpec
    parameters: dict
    optimizer_state: AdamState = None
    history: list = field(default_factory=list)
    epoch: int = 0
    rng_seed: int = 0
    best_epoch: int = 0

    def build_model(self):
        model = VAE(self.spec, seed=self.rng_seed)
        model.load_state_arrays(self.parameters)
        return model

    def copy(self):
        return copy.deepcopy(self)


def checkpoint_bytes(ckpt):
    names = list(ckpt.parameters)
    tensors = [(f"param/{n}", ckpt.parameters[n]) for n in names]
    opt = ckpt.optimizer_state
    opt_meta = None
    if opt is not None:
        opt_meta = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step_count": opt.step_count}
        if opt.first_moment:
            for n, m, v in zip(names, opt.first_moment, opt.second_moment):
                tensors.append((f"adam_m/{n}", m))
                tensors.append((f"adam_v/{n}", v))
    meta = {
        "format": "voxvae-checkpoint",
        "spec": ckpt.spec.to_dict(),
        "epoch": ckpt.epoch,
        "best_epoch": ckpt.best_epoch,
        "seed": ckpt.rng_seed,
        "history": ckpt.history,
        "optimizer": opt_meta,
    }
    return containers.encode_bundle(CHECKPOINT_MAGIC, meta, tensors)


def save_checkpoint(path, ckpt):
    containers.atomic_write_bytes(path, checkpoint_bytes(ckpt))


def load_checkpoint(path):
    meta, tensors = containers.load_bundle(path, CHECKPOINT_MAGIC)
    s = meta["spec"]
    spec = VaeSpec(latent_dim=s["latent_dim"], input_spatial=tuple(s["input_spatial"]),
                   encoder_channels=tuple(s["encoder_channels"]))
    names = [t[len("param/"):] for t in meta["tensors"] if t.startswith("param/")]
    params = {n: tensors[f"param/{n}"] for n in names}
    opt = None
    if meta.get("optimizer"):
        o = meta["optimizer"]
        opt = AdamState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step_count=o["step_count"])
        if f"adam_m/{names[0]}" in tensors:
            opt.first_moment = [tensors[f"adam_m/{n}"] for n in names]
            opt.second_moment = [tensors[f"adam_v/{n}"] for n in names]
    return VaeCheckpoint(spec=spec, parameters=params, optimizer_state=opt, history=meta["history"],
                         epoch=meta["epoch"], rng_seed=meta["seed"], best_epoch=meta.get("best_epoch", 0))


def checkpoint_from_model(model, **kwargs):
    params = {name: p.data.copy() for name, p in model.named_parameters()}
    return VaeCheckpoint(spec=model.spec, parameters=params, **kwargs)


# --- data plumbing -------------------------------------------------------------


def _as_arrays(volumes):
    """Accept VolumeSeries objects or (T, X, Y, Z) arrays; return float32 arrays."""
    out = []
    for v in volumes:
        data = getattr(v, "data", v)
        out.append(np.asarray(data, dtype=np.float32))
    return out


class TimepointPool:
    """Flat view of (subject, timepoint) samples across a list of series."""

    def __init__(self, volumes):
        self.arrays = _as_arrays(volumes)
        self.index = np.array([(i, t) for i, a in enumerate(self.arrays) for t in range(a.shape[0])], dtype=np.int64)

    def __len__(self):
        return len(self.index)

    @property
    def spatial(self):
        return tuple(self.arrays[0].shape[1:])

    def batch(self, rows):
        return np.stack([self.arrays[i][t] for i, t in self.index[rows]])[:, None]


def evaluate_loss(model, pool, batch_size, beta, seed):
    """Mean negative ELBO over ``pool``; sampling noise fixed by ``seed``."""
    rng = np.random.default_rng(seed)
    totals = np.zeros(3)
    with no_grad():
        for start in range(0, len(pool), batch_size):
            rows = np.arange(start, min(start + batch_size, len(pool)))
            x = pool.batch(rows)
            x_hat, mu, lv = model(x, rng)
            parts = elbo_loss(x, x_hat, mu, lv, beta)
            totals += len(rows) * np.array([p.item() for p in parts])
    return totals / len(pool)


def _run_epochs(model, opt, train_pool, val_pool, cfg, first_epoch, n_epochs, early_stop, snapshot=None):
    """Shared loop for training from scratch and fine-tuning.

    Returns (history rows, best parameter arrays, best epoch).
    """
    params = model.parameters()
    names = [n for n, _ in model.named_parameters()]
    history = []
    best = (math.inf, None, first_epoch)
    stale = 0
    for epoch in range(first_epoch + 1, first_epoch + n_epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_pool))
        sums = np.zeros(3)
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            x = train_pool.batch(rows)
            x_hat, mu, lv = model(x, rng)
            total, recon, kl = elbo_loss(x, x_hat, mu, lv, cfg.kl_weight)
            if not np.isfinite(total.item()):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            model.zero_grad()
            total.backward()
            adam_step(params, opt, names)
            sums += len(rows) * np.array([total.item(), recon.item(), kl.item()])
        train = sums / len(train_pool)
        pool = val_pool if val_pool is not None and len(val_pool) else train_pool
        val = evaluate_loss(model, pool, cfg.batch_size, cfg.kl_weight, seed=[cfg.seed, 7919])
        row = {
            "epoch": epoch,
            "train_total": float(train[0]),
            "train_recon": float(train[1]),
            "train_kl": float(train[2]),
            "val_total": float(val[0]),
            "val_recon": float(val[1]),
            "val_kl": float(val[2]),
        }
        history.append(row)
        log.info("epoch %d train %.4f val %.4f", epoch, train[0], val[0])
        if not np.isfinite(val[0]):
            raise FloatingPointError(f"non-finite validation loss at epoch {epoch}")
        if val[0] < best[0]:
            best = (val[0], [p.data.copy() for p in params], epoch)
            stale = 0
        else:
            stale += 1
        if snapshot is not None:
            snapshot(epoch - first_epoch, model, history)
        if early_stop and stale >= cfg.patience:
            log.info("early stop after %d epochs without improvement", stale)
            break
    return history, best[1], best[2]


def train(train_volumes, val_volumes, cfg, spec=None, latent_dim=None, encoder_channels=None):
    """Fit a VAE from scratch; return the checkpoint at the best validation loss."""
    train_pool = TimepointPool(train_volumes)
    if len(train_pool) == 0:
        raise ValueError("training set is empty")
    val_pool = TimepointPool(val_volumes) if val_volumes else None
    if spec is None:
        spec = VaeSpec(latent_dim=latent_dim or 256, input_spatial=train_pool.spatial,
                       encoder_channels=encoder_channels or VaeSpec.encoder_channels)
    if spec.input_spatial != train_pool.spatial:
        raise ShapeError(f"spec expects {spec.input_spatial}, data is {train_pool.spatial}")
    model = VAE(spec, seed=cfg.seed)
    opt = AdamState(lr=cfg.lr).init_for(model.parameters())
    try:
        history, best_params, best_epoch = _run_epochs(
            model, opt, train_pool, val_pool, cfg, 0, cfg.epochs, early_stop=True
        )
    except FloatingPointError as exc:
        last = checkpoint_from_model(model, optimizer_state=None, rng_seed=cfg.seed)
        raise TrainingDiverged(f"training diverged: {exc}", checkpoint=last) from exc
    ckpt = checkpoint_from_model(model, optimizer_state=opt, history=history, epoch=len(history),
                                 rng_seed=cfg.seed, best_epoch=best_epoch)
    if best_params is not None:
        ckpt.parameters = {n: a for n, a in zip(ckpt.parameters, best_params)}
    return ckpt


def fine_tune(ckpt, train_volumes, epochs, cfg, val_volumes=None, snapshot_epochs=()):
    """Continue training a checkpoint for exactly ``epochs`` epochs with a fresh optimizer.

    Returns the final-epoch checkpoint. With ``snapshot_epochs`` also returns
    a dict {n: checkpoint after n epochs}; a run of ``n`` epochs and the
    snapshot at ``n`` of a longer run are identical because each epoch draws
    from its own (seed, epoch) stream.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    train_pool = TimepointPool(train_volumes)
    if train_pool.spatial != ckpt.spec.input_spatial:
        raise ShapeError(f"checkpoint expects {ckpt.spec.input_spatial}, data is {train_pool.spatial}")
    snaps = {}
    if epochs == 0:
        out = ckpt.copy()
        if 0 in snapshot_epochs:
            snaps[0] = out
        return (out, snaps) if snapshot_epochs else out
    model = ckpt.build_model()
    opt = AdamState(lr=cfg.lr).init_for(model.parameters())
    val_pool = TimepointPool(val_volumes) if val_volumes else None
    base_history = list(ckpt.history)
    base_epoch = ckpt.epoch
    if 0 in snapshot_epochs:
        snaps[0] = ckpt.copy()

    def snapshot(done, m, hist):
        if done in snapshot_epochs:
            snaps[done] = checkpoint_from_model(
                m, optimizer_state=copy.deepcopy(opt), history=base_history + [dict(r, phase="finetune") for r in hist],
                epoch=base_epoch + done, rng_seed=ckpt.rng_seed, best_epoch=base_epoch + done,
            )

    try:
        history, _, _ = _run_epochs(model, opt, train_pool, val_pool, cfg, base_epoch, epochs,
                                    early_stop=False, snapshot=snapshot)
    except FloatingPointError as exc:
        raise TrainingDiverged(f"fine-tuning diverged: {exc}", checkpoint=ckpt) from exc
    out = checkpoint_from_model(
        model, optimizer_state=opt, history=base_history + [dict(r, phase="finetune") for r in history],
        epoch=base_epoch + len(history), rng_seed=ckpt.rng_seed, best_epoch=base_epoch + len(history),
    )
    return (out, snaps) if snapshot_epochs else out


# --- inference ---------------------------------------------------------------


def encode_volumes(model, x, batch_size=32):
    """Posterior (mu, log_var) arrays for a (N, X, Y, Z) stack."""
    x = np.asarray(x, dtype=np.float32)
    mus, lvs = [], []
    with no_grad():
        for start in range(0, len(x), batch_size):
            mu, lv = model.encode(x[start : start + batch_size, None])
            mus.append(mu.data)
            lvs.append(lv.data)
    return LatentDistribution(np.concatenate(mus), np.concatenate(lvs))


def infer_latents(ckpt_or_model, volume, batch_size=32):
    """Posterior means, one row per timepoint: a (T, L) array."""
    model = ckpt_or_model.build_model() if isinstance(ckpt_or_model, VaeCheckpoint) else ckpt_or_model
    data = getattr(volume, "data", volume)
    return encode_volumes(model, data, batch_size).mu


def decode_latents(ckpt_or_model, z):
    model = ckpt_or_model.build_model() if isinstance(ckpt_or_model, VaeCheckpoint) else ckpt_or_model
    z = np.atleast_2d(np.asarray(z, dtype=np.float32))
    with no_grad():
        return model.decode(z).data[:, 0]


def quantile_threshold(diff, quantile):
    """Zero every voxel whose |value| is below the ``quantile`` of |diff|."""
    diff = np.asarray(diff)
    if not 0.0 <= quantile <= 1.0:
        raise ValueError(f"quantile must be within [0, 1], got {quantile}")
    mag = np.abs(diff)
    cut = np.quantile(mag, quantile)
    return np.where(mag < cut, 0.0, diff).astype(diff.dtype)


def group_difference(ckpt, latents_a, latents_b, quantile=0.8):
    """Decode each group's mean latent, subtract (a - b), keep the top magnitudes."""
    if len(latents_a) == 0 or len(latents_b) == 0:
        raise ValueError("both groups need at least one subject")
    mean_a = np.concatenate([np.atleast_2d(z) for z in latents_a]).mean(axis=0)
    mean_b = np.concatenate([np.atleast_2d(z) for z in latents_b]).mean(axis=0)
    model = ckpt.build_model() if isinstance(ckpt, VaeCheckpoint) else ckpt
    rec = decode_latents(model, np.stack([mean_a, mean_b]))
    return quantile_threshold(rec[0] - rec[1], quantile)


def history_csv(history):
    cols = ["epoch", "train_total", "train_recon", "train_kl", "val_total", "val_recon", "val_kl"]
    lines = [",".join(cols)]
    for row in history:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols))
    return "\n".join(lines) + "\n"
