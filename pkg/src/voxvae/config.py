"""Experiment configuration: a TOML file with documented keys, overridable by CLI flags.

Example::

    seed = 0

    [data]
    manifest = "cohort/manifest.csv"
    target_manifest = "cohort_b/manifest.csv"   # fine-tuning cohort
    paa_window = 15

    [model]
    latent_dims = [64, 128, 256, 512]
    encoder_channels = [16, 32, 64, 128, 256]
    pca_components = 0            # 0 = same as the latent dim

    [train]
    epochs = 100
    lr = 0.0005
    batch_size = 16
    patience = 20
    kl_weight = 1.0

    [finetune]
    epochs = [0, 1, 2, 5, 10, 50, 100]

    [eval]
    folds = 5
    split = [0.8, 0.1, 0.1]
    tasks = ["age", "sex", "diagnosis"]
    heads = ["svm", "msvm", "knn", "mknn", "lstm", "svr", "msvr", "knr", "mknr"]
"""
import copy
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

import tomli

from .vae import TrainConfig

CLASSIFICATION_HEADS = ("svm", "msvm", "knn", "mknn", "lstm")
REGRESSION_HEADS = ("svr", "msvr", "knr", "mknr", "lstm")
ALL_HEADS = ("svm", "msvm", "knn", "mknn", "lstm", "svr", "msvr", "knr", "mknr")
# task name -> (manifest column, kind)
TASKS = {"age": ("age", "regress"), "sex": ("sex", "classify"), "diagnosis": ("diagnosis", "classify")}


@dataclass
class DataSection:
    manifest: str = ""
    target_manifest: str = ""
    paa_window: int = 1


@dataclass
class ModelSection:
    latent_dims: list = field(default_factory=lambda: [64, 128, 256, 512])
    encoder_channels: list = field(default_factory=lambda: [16, 32, 64, 128, 256])
    pca_components: int = 0


@dataclass
class FinetuneSection:
    epochs: list = field(default_factory=lambda: [0, 1, 2, 5, 10, 50, 100])


@dataclass
class EvalSection:
    folds: int = 5
    split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    tasks: list = field(default_factory=lambda: ["age", "sex", "diagnosis"])
    heads: list = field(default_factory=lambda: list(ALL_HEADS))
    knn_k: int = 5
    svm_c: float = 1.0
    svr_c: float = 1.0
    svr_epsilon: float = 0.1
    lstm_lr: float = 1e-3
    lstm_max_epochs: int = 300
    lstm_patience: int = 20
    lstm_dropout: float = 0.5


@dataclass
class GroupdiffSection:
    column: str = "sex"
    quantile: float = 0.8


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)
    groupdiff: GroupdiffSection = field(default_factory=GroupdiffSection)

    def validate(self):
        if len(self.eval.split) != 3 or not math.isclose(sum(self.eval.split), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must be three values summing to 1, got {self.eval.split}")
        if any(f < 0 for f in self.eval.split):
            raise ValueError("split fractions must be non-negative")
        if self.eval.folds < 2:
            raise ValueError("folds must be >= 2")
        unknown = [h for h in self.eval.heads if h not in ALL_HEADS]
        if unknown:
            raise ValueError(f"unknown heads {unknown}")
        bad_tasks = [t for t in self.eval.tasks if t not in TASKS]
        if bad_tasks:
            raise ValueError(f"unknown tasks {bad_tasks}")
        if self.data.paa_window < 1:
            raise ValueError("paa_window must be >= 1")
        if any(e < 0 for e in self.finetune.epochs):
            raise ValueError("fine-tune epoch counts must be >= 0")
        self.train.seed = self.seed
        return self

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        """Digest of every setting; data paths count relative to the config file."""
        d = self.to_dict()
        base = getattr(self, "base_dir", None)
        if base:
            for key in ("manifest", "target_manifest"):
                if d["data"][key]:
                    d["data"][key] = os.path.relpath(d["data"][key], base).replace(os.sep, "/")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "train": TrainConfig,
    "finetune": FinetuneSection,
    "eval": EvalSection,
    "groupdiff": GroupdiffSection,
}


def _build(cls, values, where):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown key(s) in [{where}]: {unknown}")
    return cls(**values)


def config_from_dict(raw, base_dir="."):
    raw = copy.deepcopy(raw)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build(cls, raw.pop(name, {}), name)
    if "seed" in raw:
        kwargs["seed"] = int(raw.pop("seed"))
    if raw:
        raise ValueError(f"unknown top-level key(s): {sorted(raw)}")
    cfg = ExperimentConfig(**kwargs)
    for key in ("manifest", "target_manifest"):
        path = getattr(cfg.data, key)
        if path and not os.path.isabs(path):
            setattr(cfg.data, key, os.path.normpath(os.path.join(base_dir, path)))
    cfg.base_dir = os.path.abspath(base_dir)
    return cfg.validate()


def load_config(path=None):
    """Read a TOML config; no path gives the defaults."""
    if path is None:
        return ExperimentConfig().validate()
    with open(path, "rb") as fh:
        raw = tomli.load(fh)
    return config_from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))
