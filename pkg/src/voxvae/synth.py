"""Synthetic 4D cohorts with known generative factors.

Each subject is a brain-shaped ellipsoid at a constant baseline, a small
constant bright reference block, and four Gaussian blobs:

* M1 (anterior): amplitude affine in ``age_like``;
* M2 / M3 (left / right): switched on by ``sex_like`` = 1 / 0;
* M4 (posterior): course whose lag-1 autocorrelation is high for
  ``dx_like`` = 1 and negative for ``dx_like`` = 0.

M1-M3 are modulated in time by 1 + course_mod * u_k(t) with u_k white and
standardized.  M4 follows 1 + dx_mod * a(t) with a(t) an AR(1) draw
standardized to exactly zero mean and unit variance, so the diagnosis factor
changes only the temporal ordering and leaves every voxel's temporal mean
untouched.  Noise is added inside the brain only, and the result goes
through the usual per-timepoint rescale and threshold.
"""
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .containers import atomic_write_bytes
from .ingest import DatasetManifest, SubjectRecord, VolumeSeries, rescale_and_threshold, save_nifti, write_manifest

AGE_RANGE = (45.0, 80.0)
MAP_NAMES = ("M1_age", "M2_sex1", "M3_sex0", "M4_dx")


@dataclass
class SynthConfig:
    grid: tuple = (16, 16, 16)
    timepoints: int = 30
    n_subjects: int = 60
    noise_sigma: float = 0.02
    seed: int = 0
    baseline: float = 0.45
    # Above any tissue value, so the per-timepoint rescale is a fixed division.
    reference: float = 2.2
    age_amp_min: float = 0.15
    age_amp_max: float = 0.6
    # Strong enough that the sex contrast carries several units of per-sample
    # squared error, which a VAE decoder trained on SSE + KL will spend bits on.
    sex_amp: float = 1.0
    dx_amp: float = 0.2
    dx_mod: float = 0.8
    course_mod: float = 0.2
    phi_high: float = 0.9
    phi_low: float = -0.5
    blob_radius: float = 3.5
    blob_width: float = 3.5          # Gaussian sigma before truncation at blob_radius
    tr_seconds: float = 2.0

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if len(self.grid) != 3 or min(self.grid) < 8:
            raise ValueError(f"grid dims must be >= 8, got {self.grid}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.timepoints < 2:
            raise ValueError("need at least 2 timepoints")

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d


@dataclass
class SubjectTruth:
    subject_id: str
    age_like: float
    sex_like: int
    dx_like: int
    amplitudes: list
    courses: list = field(repr=False, default=None)


def _grid_coords(grid):
    return np.meshgrid(*[np.arange(n, dtype=np.float64) for n in grid], indexing="ij")


def brain_mask(grid):
    x, y, z = _grid_coords(grid)
    c = [(n - 1) / 2.0 for n in grid]
    r = [0.42 * n for n in grid]
    return ((x - c[0]) / r[0]) ** 2 + ((y - c[1]) / r[1]) ** 2 + ((z - c[2]) / r[2]) ** 2 <= 1.0


def reference_mask(grid):
    m = np.zeros(grid, dtype=bool)
    c = [n // 2 for n in grid]
    m[c[0] - 1 : c[0] + 1, c[1] - 1 : c[1] + 1, c[2] - 1 : c[2] + 1] = True
    return m


def blob_centres(grid):
    """Fractional positions scaled to the grid; pairwise gaps exceed two radii at 16^3."""
    frac = {
        "M1_age": (0.5, 0.78, 0.5),
        "M2_sex1": (0.25, 0.40, 0.34),
        "M3_sex0": (0.75, 0.40, 0.34),
        "M4_dx": (0.5, 0.18, 0.72),
    }
    return {k: tuple(f * (n - 1) for f, n in zip(v, grid)) for k, v in frac.items()}


def spatial_maps(cfg):
    """Truncated Gaussian blobs (peak 1) restricted to the brain, minus the reference block."""
    x, y, z = _grid_coords(cfg.grid)
    inside = brain_mask(cfg.grid) & ~reference_mask(cfg.grid)
    width = cfg.blob_width
    maps = {}
    for name, (cx, cy, cz) in blob_centres(cfg.grid).items():
        d2 = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2
        m = np.exp(-d2 / (2 * width**2))
        m[(d2 > cfg.blob_radius**2) | ~inside] = 0.0
        maps[name] = m
    return maps


def baseline_volume(cfg):
    vol = np.where(brain_mask(cfg.grid), cfg.baseline, 0.0)
    vol[reference_mask(cfg.grid)] = cfg.reference
    return vol


def _standardize(u):
    u = u - u.mean()
    sd = u.std()
    return u / sd if sd > 0 else u


def ar1_course(phi, n, rng):
    """AR(1) draw with a burn-in, standardized to zero mean and unit variance."""
    burn = 50
    e = rng.standard_normal(n + burn)
    a = np.zeros(n + burn)
    for t in range(1, n + burn):
        a[t] = phi * a[t - 1] + e[t]
    return _standardize(a[burn:])


def lag1_autocorr(u):
    u = np.asarray(u, dtype=np.float64) - np.mean(u)
    return float(np.sum(u[1:] * u[:-1]) / np.sum(u * u))


def age_amplitude(age, cfg):
    frac = (age - AGE_RANGE[0]) / (AGE_RANGE[1] - AGE_RANGE[0])
    return cfg.age_amp_min + frac * (cfg.age_amp_max - cfg.age_amp_min)


def generate_subject(covariates, cfg, rng, subject_id="sub", maps=None):
    """Return (normalized VolumeSeries, SubjectTruth) for one subject.

    ``covariates`` holds age_like, sex_like and dx_like.
    """
    age = float(covariates["age_like"])
    sex = int(covariates["sex_like"])
    dx = int(covariates["dx_like"])
    if not AGE_RANGE[0] <= age <= AGE_RANGE[1]:
        raise ValueError(f"age_like {age} outside {AGE_RANGE}")
    if sex not in (0, 1) or dx not in (0, 1):
        raise ValueError("sex_like and dx_like must be 0 or 1")
    maps = maps or spatial_maps(cfg)
    n = cfg.timepoints
    amps = [age_amplitude(age, cfg), cfg.sex_amp * sex, cfg.sex_amp * (1 - sex), cfg.dx_amp]
    courses = [1.0 + cfg.course_mod * _standardize(rng.standard_normal(n)) for _ in range(3)]
    courses.append(1.0 + cfg.dx_mod * ar1_course(cfg.phi_high if dx else cfg.phi_low, n, rng))
    base = baseline_volume(cfg)
    data = np.broadcast_to(base, (n,) + cfg.grid).copy()
    for amp, course, name in zip(amps, courses, MAP_NAMES):
        if amp:
            data += amp * course[:, None, None, None] * maps[name][None]
    if cfg.noise_sigma > 0:
        inside = brain_mask(cfg.grid)
        data[:, inside] += cfg.noise_sigma * rng.standard_normal((n, int(inside.sum())))
    raw = VolumeSeries(subject_id, data.astype(np.float32), cfg.tr_seconds)
    truth = SubjectTruth(subject_id, age, sex, dx, [float(a) for a in amps],
                         [c.tolist() for c in courses])
    return rescale_and_threshold(raw), truth


def balanced_labels(n, rng):
    labels = np.arange(n) % 2
    return rng.permutation(labels)


def cohort_covariates(n, rng):
    if n < 4:
        raise ValueError("a cohort needs at least 4 subjects")
    ages = rng.uniform(*AGE_RANGE, size=n)
    sex = balanced_labels(n, rng)
    dx = balanced_labels(n, rng)
    return [{"age_like": float(a), "sex_like": int(s), "dx_like": int(d)} for a, s, d in zip(ages, sex, dx)]


def generate_cohort(n, cfg, out_dir, prefix="sub"):
    """Write NIfTI volumes, manifest.csv and ground_truth.json under ``out_dir``.

    Cohort-level draws (ages, label assignment) use the stream ``[seed]``;
    subject ``i`` uses its own stream ``[seed, i]``.
    """
    os.makedirs(out_dir, exist_ok=True)
    covs = cohort_covariates(n, np.random.default_rng([cfg.seed]))
    maps = spatial_maps(cfg)
    records = []
    truths = []
    for i, cov in enumerate(covs):
        sid = f"{prefix}{i:04d}"
        vol, truth = generate_subject(cov, cfg, np.random.default_rng([cfg.seed, i]), sid, maps)
        rel = f"{sid}.nii.gz"
        save_nifti(os.path.join(out_dir, rel), vol.data, tr_seconds=vol.tr_seconds)
        records.append(SubjectRecord(sid, rel, round(truth.age_like, 6), truth.sex_like, truth.dx_like))
        truths.append(truth)
    manifest = DatasetManifest(records, root=os.path.abspath(out_dir))
    write_manifest(os.path.join(out_dir, "manifest.csv"), manifest)
    gt = {
        "config": cfg.to_dict(),
        "factor_wiring": {
            "M1_age": "amplitude affine in age_like",
            "M2_sex1": "present when sex_like == 1",
            "M3_sex0": "present when sex_like == 0",
            "M4_dx": "1 + dx_mod * standardized AR(1) course; phi_high if dx_like == 1 else phi_low",
        },
        "sex_differential_maps": ["M2_sex1", "M3_sex0"],
        "maps": {k: {"shape": list(v.shape), "values": v.ravel().round(8).tolist()} for k, v in maps.items()},
        "subjects": [asdict(t) for t in truths],
    }
    blob = json.dumps(gt, sort_keys=True, separators=(",", ":")).encode("utf-8")
    atomic_write_bytes(os.path.join(out_dir, "ground_truth.json"), blob)
    return manifest


def load_ground_truth(out_dir):
    with open(os.path.join(out_dir, "ground_truth.json")) as fh:
        gt = json.load(fh)
    gt["maps"] = {k: np.asarray(v["values"]).reshape(v["shape"]) for k, v in gt["maps"].items()}
    return gt


def differential_mask(ground_truth, names=None):
    names = names or ground_truth["sex_differential_maps"]
    return np.any([ground_truth["maps"][n] > 0 for n in names], axis=0)


def dice(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else float(2.0 * np.sum(a & b) / denom)
