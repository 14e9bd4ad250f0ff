import json
import math
import os
import shutil

import numpy as np
import pytest

from voxvae import cli, synth, workflows
from voxvae.config import ExperimentConfig, config_from_dict, load_config
from voxvae.containers import load_tensor
from voxvae.errors import ShapeError, StratificationError
from voxvae.ingest import DatasetManifest, SubjectRecord, load_nifti, read_manifest
from voxvae.vae import load_checkpoint

TOML = """
seed = 0

[data]
manifest = "cohort/manifest.csv"
paa_window = 2

[model]
latent_dims = [4]
encoder_channels = [2, 4, 8, 8, 16]

[train]
epochs = 2
batch_size = 8
patience = 5

[finetune]
epochs = [0, 1, 2]

[eval]
folds = 3
lstm_max_epochs = 5
"""


@pytest.fixture(scope="module")
def project(tmp_path_factory):
    root = tmp_path_factory.mktemp("project")
    synth.generate_cohort(12, synth.SynthConfig(grid=(8, 8, 8), timepoints=6, seed=2), root / "cohort")
    (root / "exp.toml").write_text(TOML)
    return root


@pytest.fixture(scope="module")
def cfg(project):
    return load_config(project / "exp.toml")


@pytest.fixture(scope="module")
def pretrained(project, cfg):
    return workflows.cmd_pretrain(cfg, project / "models")


@pytest.fixture(scope="module")
def store(project, cfg, pretrained):
    workflows.cmd_encode(cfg, str(pretrained[4]), project / "store")
    return project / "store"


def _manifest(n, labels=None):
    recs = [SubjectRecord(f"s{i:03d}", f"s{i:03d}.nii", sex=None if labels is None else int(labels[i]))
            for i in range(n)]
    return DatasetManifest(recs)


# --- split ---------------------------------------------------------------------

def test_five_equal_folds():
    out = workflows.cmd_split(_manifest(100), seed=0, folds=5)
    assert np.bincount([r.fold for r in out]).tolist() == [20] * 5


def test_split_is_deterministic():
    a = workflows.cmd_split(_manifest(37), seed=4, folds=5)
    b = workflows.cmd_split(_manifest(37), seed=4, folds=5)
    assert [r.fold for r in a] == [r.fold for r in b]
    c = workflows.cmd_split(_manifest(37), seed=5, folds=5)
    assert [r.fold for r in a] != [r.fold for r in c]


def test_stratified_folds_are_balanced():
    labels = np.random.default_rng(0).permutation(np.arange(60) % 2)
    out = workflows.cmd_split(_manifest(60, labels), seed=1, folds=5, stratify="sex")
    folds = np.array([r.fold for r in out])
    for f in range(5):
        members = labels[folds == f]
        assert abs(int(members.sum()) - len(members) / 2) <= 1


def test_folds_are_disjoint_and_exhaustive():
    folds = workflows.assign_folds(np.arange(23) % 3, 4, seed=2)
    assert sorted(np.unique(folds)) == [0, 1, 2, 3]
    assert len(folds) == 23


def test_small_class_cannot_be_stratified():
    labels = np.array([0] * 10 + [1] * 3)
    with pytest.raises(StratificationError):
        workflows.cmd_split(_manifest(13, labels), seed=0, folds=5, stratify="sex")


def test_fold_count_limit():
    with pytest.raises(ValueError):
        workflows.cmd_split(_manifest(20), seed=0, folds=6)


def test_fraction_split(tmp_path):
    out = workflows.cmd_split(_manifest(50), seed=0, fractions=[0.8, 0.1, 0.1], out_path=tmp_path / "m.csv")
    counts = {s: sum(r.fold == s for r in out) for s in ("train", "val", "test")}
    assert counts == {"train": 40, "val": 5, "test": 5}
    assert [r.fold for r in read_manifest(tmp_path / "m.csv")] == [r.fold for r in out]


# --- config --------------------------------------------------------------------

def test_config_loads_and_resolves_paths(project, cfg):
    assert cfg.data.manifest == os.path.join(str(project), "cohort", "manifest.csv")
    assert cfg.train.epochs == 2 and cfg.finetune.epochs == [0, 1, 2]
    assert cfg.eval.heads == ["svm", "msvm", "knn", "mknn", "lstm", "svr", "msvr", "knr", "mknr"]


def test_defaults_follow_the_protocol():
    cfg = ExperimentConfig().validate()
    assert cfg.model.latent_dims == [64, 128, 256, 512]
    assert cfg.finetune.epochs == [0, 1, 2, 5, 10, 50, 100]
    assert cfg.eval.folds == 5 and cfg.eval.split == [0.8, 0.1, 0.1]
    assert cfg.train.lr == 5e-4 and cfg.train.patience == 20 and cfg.train.epochs == 100


def test_unknown_keys_rejected():
    with pytest.raises(ValueError, match="unknown"):
        config_from_dict({"train": {"epochz": 3}})
    with pytest.raises(ValueError, match="unknown"):
        config_from_dict({"colour": "red"})


def test_fractions_must_sum_to_one():
    with pytest.raises(ValueError):
        config_from_dict({"eval": {"split": [0.5, 0.2, 0.2]}})


def test_hash_changes_with_every_field():
    base = ExperimentConfig().validate()
    h = base.config_hash()
    assert h == ExperimentConfig().validate().config_hash()
    variants = [
        {"seed": 1},
        {"data": {"paa_window": 3}},
        {"model": {"latent_dims": [64]}},
        {"train": {"lr": 1e-3}},
        {"finetune": {"epochs": [0, 1]}},
        {"eval": {"knn_k": 3}},
        {"groupdiff": {"quantile": 0.9}},
    ]
    hashes = {config_from_dict(v).config_hash() for v in variants}
    assert h not in hashes and len(hashes) == len(variants)


def test_hash_ignores_project_location(tmp_path):
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        (tmp_path / name / "exp.toml").write_text(TOML)
    a = load_config(tmp_path / "a" / "exp.toml")
    b = load_config(tmp_path / "b" / "exp.toml")
    assert a.data.manifest != b.data.manifest
    assert a.config_hash() == b.config_hash()
    (tmp_path / "b" / "exp.toml").write_text(TOML.replace("cohort/manifest", "other/manifest"))
    assert load_config(tmp_path / "b" / "exp.toml").config_hash() != a.config_hash()


# --- pretrain / finetune -----------------------------------------------------------

def test_pretrain_outputs(project, pretrained):
    path = pretrained[4]
    assert os.path.basename(path) == "vae_L4.vae"
    ckpt = load_checkpoint(path)
    assert len(ckpt.history) == 2
    assert ckpt.spec.input_spatial == (8, 8, 8)
    lines = (project / "models" / "vae_L4_history.csv").read_text().splitlines()
    assert len(lines) == 3


def test_pretrain_rerun_is_identical(project, cfg, pretrained):
    again = workflows.cmd_pretrain(cfg, project / "models_again")
    assert open(again[4], "rb").read() == open(pretrained[4], "rb").read()
    a = (project / "models" / "vae_L4_history.csv").read_bytes()
    assert (project / "models_again" / "vae_L4_history.csv").read_bytes() == a


def test_pretrain_never_touches_test_subjects(project, cfg):
    manifest = read_manifest(cfg.data.manifest)
    train_m, val_m = workflows.pretrain_partition(manifest, cfg)
    assert len(train_m) + len(val_m) < len(manifest)


def test_pca_pretrain(project, cfg):
    out = workflows.cmd_pretrain(cfg, project / "pca", model="pca", latent_dims=[3])
    assert os.path.basename(out[3]) == "pca_k3.pca"


def test_finetune_bookkeeping(project, cfg, pretrained):
    out = workflows.cmd_finetune(cfg, pretrained[4], project / "ft")
    assert sorted(k for k in out if k != "control") == [0, 1, 2]
    assert os.path.basename(out["control"]) == "control_e002.vae"
    assert open(out[0], "rb").read() == open(pretrained[4], "rb").read()
    base = load_checkpoint(pretrained[4])
    assert len(load_checkpoint(out[2]).history) == len(base.history) + 2
    assert len(load_checkpoint(out["control"]).history) == 2


def test_finetune_dimension_mismatch(project, cfg, pretrained, tmp_path):
    synth.generate_cohort(4, synth.SynthConfig(grid=(10, 10, 10), timepoints=4), tmp_path)
    with pytest.raises(ShapeError):
        workflows.cmd_finetune(cfg, pretrained[4], tmp_path / "ft", manifest_path=tmp_path / "manifest.csv")


# --- encode -----------------------------------------------------------------------

def test_encode_writes_one_file_per_subject(store):
    index = json.loads((store / "index.json").read_text())
    assert index["representation"] == "vae" and index["latent_dim"] == 4
    assert len(index["subjects"]) == 12 and index["failures"] == {}
    for entry in index["subjects"].values():
        assert load_tensor(store / entry["file"]).shape == (3, 4)


def test_reencode_is_bit_identical(project, cfg, pretrained, store):
    workflows.cmd_encode(cfg, str(pretrained[4]), project / "store2")
    for name in sorted(os.listdir(store)):
        assert (store / name).read_bytes() == (project / "store2" / name).read_bytes()


def test_encode_records_missing_subjects(project, cfg, pretrained, tmp_path):
    src = project / "cohort"
    for name in os.listdir(src):
        shutil.copy(src / name, tmp_path / name)
    victim = read_manifest(tmp_path / "manifest.csv").records[3]
    os.remove(tmp_path / victim.path)
    index = workflows.cmd_encode(cfg, str(pretrained[4]), tmp_path / "store",
                                 manifest_path=tmp_path / "manifest.csv")
    assert list(index["failures"]) == [victim.subject_id]
    assert len(index["subjects"]) == 11


def test_pca_store_has_one_vector_per_subject(project, cfg):
    out = workflows.cmd_pretrain(cfg, project / "pca2", model="pca", latent_dims=[3])
    index = workflows.cmd_encode(cfg, str(out[3]), project / "pca_store")
    assert index["representation"] == "pca"
    for entry in index["subjects"].values():
        assert load_tensor(project / "pca_store" / entry["file"]).shape == (3,)


# --- eval ---------------------------------------------------------------------------

def test_eval_grid_is_complete(project, cfg, store):
    report = workflows.cmd_eval(cfg, store, project / "eval")
    n_folds = report["n_folds"]
    assert n_folds == 3
    per_task = {"age": 5, "sex": 5, "diagnosis": 5}
    for task, n_heads in per_task.items():
        cells = [c for c in report["cells"] if c["task"] == task]
        assert len(cells) == n_heads * n_folds
        for c in cells:
            assert c["status"] == "ok" or c["reason"]
    prov = report["provenance"]
    assert prov["config_sha256"] == cfg.config_hash()
    assert prov["model_sha256"] == workflows.sha256_file(project / "models" / "vae_L4.vae")
    lines = (project / "eval" / "report.csv").read_text().splitlines()
    assert lines[0].split(",") == workflows.CSV_COLUMNS
    assert len(lines) == len(report["cells"]) + 1


def test_held_out_folds_cover_the_cohort(project, cfg, store):
    report = json.loads((project / "eval" / "report.json").read_text()) if (
        project / "eval" / "report.json").exists() else workflows.cmd_eval(cfg, store, project / "eval")
    cells = [c for c in report["cells"] if c["task"] == "sex" and c["head"] == "msvm"]
    assert sum(c["n_test"] for c in cells) == 12


def test_eval_rerun_is_byte_identical(project, cfg, store):
    workflows.cmd_eval(cfg, store, project / "eval_a", tasks=["sex"], heads=["msvm", "knn", "lstm"])
    workflows.cmd_eval(cfg, store, project / "eval_b", tasks=["sex"], heads=["msvm", "knn", "lstm"])
    for name in ("report.json", "report.csv"):
        assert (project / "eval_a" / name).read_bytes() == (project / "eval_b" / name).read_bytes()


def test_parallel_eval_matches_serial(project, cfg, store):
    a = workflows.cmd_eval(cfg, store, project / "eval_s", tasks=["age"], heads=["msvr", "knr"])
    b = workflows.cmd_eval(cfg, store, project / "eval_p", tasks=["age"], heads=["msvr", "knr"], jobs=2)
    assert a == b


def test_pca_store_marks_sequence_heads_failed(project, cfg):
    if not (project / "pca_store" / "index.json").exists():
        out = workflows.cmd_pretrain(cfg, project / "pca3", model="pca", latent_dims=[3])
        workflows.cmd_encode(cfg, str(out[3]), project / "pca_store")
    report = workflows.cmd_eval(cfg, project / "pca_store", project / "pca_eval", tasks=["sex"])
    by_head = {}
    for c in report["cells"]:
        by_head.setdefault(c["head"], set()).add(c["status"])
    assert by_head["svm"] == {"failed"} and by_head["lstm"] == {"failed"}
    assert "ok" in by_head["msvm"]


def test_single_class_fold_is_recorded_as_failure():
    series = np.random.default_rng(0).standard_normal((8, 2, 3))
    y = np.array([0, 0, 0, 0, 1, 1, 1, 1], dtype=float)
    ev = vars(ExperimentConfig().eval)
    res = workflows.eval_cell(("msvm", "classify", series, y, np.array([0, 1, 4, 5]),
                               np.array([], dtype=int), np.array([2, 3]), ev, 0))
    assert res["status"] == "failed" and "UndefinedMetricError" in res["reason"]


def test_head_modes():
    assert workflows.head_mode("msvm") == ("svm", "mean")
    assert workflows.head_mode("knr") == ("knr", "concat")
    assert workflows.head_mode("lstm") == ("lstm", "sequence")


# --- group difference ------------------------------------------------------------------

def test_groupdiff_outputs_and_quantile_count(project, cfg, pretrained, store):
    diff, vol_path, csv_path = workflows.cmd_groupdiff(cfg, pretrained[4], store, project / "gd")
    v = diff.size
    expected = v - math.ceil(0.8 * (v - 1))
    assert np.count_nonzero(diff) == expected
    assert np.array_equal(load_nifti(vol_path).data[0], diff)
    rows = open(csv_path).read().splitlines()
    assert rows[0] == "x,y,z,value" and len(rows) == expected + 1


def test_identical_groups_decode_to_zero(project, cfg, pretrained, store, tmp_path):
    same = load_tensor(store / "sub0000.vxt")
    index = json.loads((store / "index.json").read_text())
    for sid, entry in index["subjects"].items():
        from voxvae.containers import save_tensor

        save_tensor(tmp_path / entry["file"], same)
    shutil.copy(store / "index.json", tmp_path / "index.json")
    diff, _, _ = workflows.cmd_groupdiff(cfg, pretrained[4], tmp_path, project / "gd_same")
    assert not np.any(diff)


def test_groupdiff_needs_both_groups(project, cfg, pretrained, store, tmp_path):
    m = read_manifest(cfg.data.manifest)
    only = m.subset(lambda r: r.sex == 1)
    only.root = m.root
    from voxvae.ingest import write_manifest

    path = os.path.join(m.root, "only_one_sex.csv")
    write_manifest(path, only)
    with pytest.raises(ValueError):
        workflows.cmd_groupdiff(cfg, pretrained[4], store, tmp_path, manifest_path=path)


# --- report and CLI -------------------------------------------------------------------

def test_report_aggregates_folds(project, cfg, store, tmp_path):
    report = workflows.cmd_eval(cfg, store, tmp_path / "e", tasks=["sex"], heads=["msvm"])
    rows = workflows.cmd_report([tmp_path / "e" / "report.json"], tmp_path / "r")
    assert len(rows) == 1
    aucs = [c["metrics"]["roc_auc"] for c in report["cells"] if c["status"] == "ok"]
    assert rows[0]["roc_auc_mean"] == pytest.approx(np.mean(aucs))
    assert rows[0]["folds_ok"] + rows[0]["folds_failed"] == 3
    assert (tmp_path / "r" / "summary.csv").exists()


def test_cli_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "exp.toml"
    cfg.write_text(TOML)
    common = ["--config", str(cfg), "--deterministic"]
    assert cli.main(["synth", *common, "--out-dir", str(tmp_path / "cohort"), "--n", "8",
                     "--grid", "8,8,8", "--timepoints", "4"]) == 0
    assert cli.main(["split", *common, "--folds", "2", "--stratify", "sex",
                     "--output", str(tmp_path / "cohort" / "manifest.csv")]) == 0
    assert cli.main(["pretrain", *common, "--out-dir", str(tmp_path / "m"), "--epochs", "1"]) == 0
    model = str(tmp_path / "m" / "vae_L4.vae")
    assert cli.main(["finetune", *common, "--checkpoint", model, "--schedule", "0,1",
                     "--out-dir", str(tmp_path / "ft")]) == 0
    assert cli.main(["encode", *common, "--model", model, "--out-dir", str(tmp_path / "s")]) == 0
    assert cli.main(["eval", *common, "--store", str(tmp_path / "s"), "--tasks", "sex",
                     "--heads", "msvm,mknn", "--out-dir", str(tmp_path / "e")]) == 0
    assert cli.main(["groupdiff", *common, "--checkpoint", model, "--store", str(tmp_path / "s"),
                     "--out-dir", str(tmp_path / "g")]) == 0
    assert cli.main(["report", *common, str(tmp_path / "e" / "report.json"),
                     "--out-dir", str(tmp_path / "r")]) == 0
    assert sorted(os.listdir(tmp_path / "ft")) == [
        "control_e001.vae", "control_e001_history.csv", "finetune_e000.vae",
        "finetune_e001.vae", "finetune_e001_history.csv",
    ]
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert report["n_folds"] == 2 and len(report["cells"]) == 4
    assert (tmp_path / "g" / "groupdiff_sex.nii.gz").exists()
    out = capsys.readouterr().out
    assert "4 cells" in out


def test_cli_seed_override(tmp_path):
    cfg = tmp_path / "exp.toml"
    cfg.write_text(TOML)
    args = cli.build_parser().parse_args(["report", "--config", str(cfg), "--seed", "9", "x.json"])
    assert cli._config(args).seed == 9
    assert cli._config(args).train.seed == 9


def test_cli_help_lists_verbs(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for verb in ("split", "synth", "pretrain", "finetune", "encode", "eval", "groupdiff", "report"):
        assert verb in out
