"""Command-line entry point: ``voxvae <verb> [options]``."""
import argparse
import logging
import os
import sys

from . import synth, workflows
from .config import load_config
from .ingest import read_manifest
from .tensor.config import set_deterministic


def _ints(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _names(text):
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded BLAS so reruns are byte-identical")
    common.add_argument("--out-dir", default=".", help="directory for outputs")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers for evaluation cells")
    common.add_argument("--manifest", help="overrides data.manifest")
    common.add_argument("--paa-window", type=int, help="overrides data.paa_window")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="voxvae", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("split", parents=[common], help="assign folds or train/val/test splits")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--folds", type=int)
    group.add_argument("--fractions", type=_floats, help="e.g. 0.8,0.1,0.1")
    p.add_argument("--stratify", help="binary label column to stratify on")
    p.add_argument("--output", help="output manifest path (default OUT_DIR/manifest.csv)")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--n", type=int, default=60)
    p.add_argument("--grid", type=_ints, default=[16, 16, 16])
    p.add_argument("--timepoints", type=int, default=30)
    p.add_argument("--noise", type=float, default=synth.SynthConfig.noise_sigma)
    p.add_argument("--prefix", default="sub")

    p = sub.add_parser("pretrain", parents=[common], help="train VAE (or PCA) models")
    p.add_argument("--model", choices=["vae", "pca"], default="vae")
    p.add_argument("--latent-dims", type=_ints, help="overrides model.latent_dims")
    p.add_argument("--epochs", type=int, help="overrides train.epochs")

    p = sub.add_parser("finetune", parents=[common], help="fine-tune a checkpoint on a target cohort")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--schedule", type=_ints, help="overrides finetune.epochs")

    p = sub.add_parser("encode", parents=[common], help="write a latent store")
    p.add_argument("--model", required=True, help="a .vae checkpoint or .pca model")

    p = sub.add_parser("eval", parents=[common], help="downstream evaluation grid")
    p.add_argument("--store", required=True)
    p.add_argument("--tasks", type=_names)
    p.add_argument("--heads", type=_names)

    p = sub.add_parser("groupdiff", parents=[common], help="group-difference map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--column")
    p.add_argument("--quantile", type=float)

    p = sub.add_parser("report", parents=[common], help="aggregate report.json files")
    p.add_argument("reports", nargs="+")
    return parser


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.manifest:
        cfg.data.manifest = os.path.abspath(args.manifest)
    if args.paa_window:
        cfg.data.paa_window = args.paa_window
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    if getattr(args, "latent_dims", None):
        cfg.model.latent_dims = args.latent_dims
    if getattr(args, "schedule", None) is not None:
        cfg.finetune.epochs = args.schedule
    if getattr(args, "tasks", None):
        cfg.eval.tasks = args.tasks
    if getattr(args, "heads", None):
        cfg.eval.heads = args.heads
    if getattr(args, "column", None):
        cfg.groupdiff.column = args.column
    if getattr(args, "quantile", None) is not None:
        cfg.groupdiff.quantile = args.quantile
    return cfg.validate()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.deterministic:
        set_deterministic(True)
    cfg = _config(args)
    out = args.out_dir
    if args.verb == "split":
        manifest = read_manifest(cfg.data.manifest)
        path = args.output or os.path.join(out, "manifest.csv")
        workflows.cmd_split(manifest, cfg.seed, folds=args.folds, fractions=args.fractions,
                            stratify=args.stratify, out_path=path)
        print(path)
    elif args.verb == "synth":
        scfg = synth.SynthConfig(grid=tuple(args.grid), timepoints=args.timepoints, n_subjects=args.n,
                                 noise_sigma=args.noise, seed=cfg.seed)
        synth.generate_cohort(args.n, scfg, out, prefix=args.prefix)
        print(os.path.join(out, "manifest.csv"))
    elif args.verb == "pretrain":
        for path in workflows.cmd_pretrain(cfg, out, model=args.model).values():
            print(path)
    elif args.verb == "finetune":
        for path in workflows.cmd_finetune(cfg, args.checkpoint, out).values():
            print(path)
    elif args.verb == "encode":
        index = workflows.cmd_encode(cfg, args.model, out)
        print(f"{len(index['subjects'])} encoded, {len(index['failures'])} failed")
    elif args.verb == "eval":
        report = workflows.cmd_eval(cfg, args.store, out, jobs=args.jobs)
        failed = sum(c["status"] != "ok" for c in report["cells"])
        print(f"{len(report['cells'])} cells, {failed} failed")
    elif args.verb == "groupdiff":
        _, vol, table = workflows.cmd_groupdiff(cfg, args.checkpoint, args.store, out)
        print(vol)
        print(table)
    elif args.verb == "report":
        rows = workflows.cmd_report(args.reports, out)
        print(f"{len(rows)} summary rows")
    return 0


if __name__ == "__main__":
    sys.exit(main())
