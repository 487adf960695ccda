"""Command-line entry point: ``pointskip <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime/pipeline failure, 2 input or manifest
validation failure.
"""
import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench, dataset, synthetic, training
from .autograd import softmax
from .dataset import ManifestError
from .geometry import normalize_unit_sphere
from .model import ConfigError, ModelConfig, forward, is_model_key, parameter_count, parse_kv
from .training import TRAIN_KEYS, CheckpointError, TrainConfig


class UsageError(Exception):
    """Bad input detected before any work starts (exit code 2)."""


def _add_common(p, *names):
    if "root" in names:
        p.add_argument("--root", help="dataset root directory or index CSV")
    if "config" in names:
        p.add_argument("--config", help="key = value configuration file")
    if "seed" in names:
        p.add_argument("--seed", type=int)
    if "out" in names:
        p.add_argument("--out", help="output directory")
    if "train" in names:
        p.add_argument("--augment", choices=["none", "rotation", "jitter", "anisotropic_scaling",
                                             "translation", "all"])
        p.add_argument("--skip-mode", choices=["concat", "add", "concatenation", "addition"])
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--no-cosine", action="store_true", help="constant learning rate")
    if "points" in names:
        p.add_argument("--n-points", type=int)
    if "split" in names:
        p.add_argument("--split", default="test", choices=["train", "test"])


def build_parser():
    ap = argparse.ArgumentParser(prog="pointskip", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("refine", help="apply a refinement manifest and write an audit")
    _add_common(p, "root", "out", "seed")
    p.add_argument("--manifest", help="manifest CSV (default: shipped ModelNet-R manifest)")

    p = sub.add_parser("stats", help="dataset statistics")
    _add_common(p, "root", "out", "seed")

    p = sub.add_parser("train", help="train a model")
    _add_common(p, "root", "config", "seed", "out", "train", "points")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p, "root", "config", "seed", "out", "points", "split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("classify", help="top-3 classes for one OFF or point file")
    _add_common(p, "config", "seed", "points")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("file")

    p = sub.add_parser("ablate", help="augmentation and skip-mode ablation tables")
    _add_common(p, "root", "config", "seed", "out", "train", "points")
    p.add_argument("--kind", choices=["augmentation", "skip_mode", "both"], default="both")

    p = sub.add_parser("bench", help="kernel and forward-pass timings")
    _add_common(p, "config", "seed", "points")
    p.add_argument("--sizes", default="1024,2048,4096,8192")
    p.add_argument("--repeats", type=int, default=3)

    p = sub.add_parser("make-synthetic", help="write a procedural shape dataset")
    _add_common(p, "out", "seed")
    p.add_argument("--classes", default=",".join(synthetic.SHAPES))
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-test", type=int, default=0)
    return ap


# ---------------------------------------------------------------------------


def _need_path(value, flag):
    if not value:
        raise UsageError(f"{flag} is required")
    if not Path(value).exists():
        raise UsageError(f"{flag} path does not exist: {value}")
    return Path(value)


def _load_configs(args):
    kv = {}
    if getattr(args, "config", None):
        kv = parse_kv(_need_path(args.config, "--config").read_text())
    unknown = [k for k in kv if not is_model_key(k) and k not in TRAIN_KEYS]
    if unknown:
        raise UsageError(f"unknown configuration keys: {', '.join(unknown)}")
    mcfg = ModelConfig.from_dict({k: v for k, v in kv.items() if is_model_key(k)})
    tcfg = TrainConfig.from_dict({k: v for k, v in kv.items() if k in TRAIN_KEYS})
    over = {}
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("batch_size", "batch_size"),
                      ("lr", "learning_rate"), ("n_points", "n_points"), ("augment", "augment")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    if getattr(args, "no_cosine", False):
        over["cosine"] = False
    tcfg = replace(tcfg, **over)
    if getattr(args, "skip_mode", None):
        mcfg = replace(mcfg, skip_mode=args.skip_mode)
    return mcfg, tcfg


def _index(args):
    return dataset.load_index(_need_path(args.root, "--root"))


def _with_classes(mcfg, index):
    return replace(mcfg, n_classes=len(index.classes), class_names=tuple(index.classes))


def _out_dir(args, default="."):
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_refine(args):
    index = _index(args)
    mpath = Path(args.manifest) if args.manifest else dataset.shipped_manifest_path()
    if not mpath.exists():
        raise UsageError(f"--manifest path does not exist: {mpath}")
    manifest = dataset.read_manifest(mpath)
    refined, report = dataset.apply_manifest(index, manifest)
    out = _out_dir(args)
    refined.to_csv(out / "refined_index.csv")
    report.write_csv(out / "audit.csv")
    report.write_counts_csv(out / "class_counts.csv")
    print(report.format())
    print(f"removed {report.removed}, touched {report.touched_total}, "
          f"remaining {len(refined.entries)} instances")
    return 0


def cmd_stats(args):
    st = dataset.dataset_stats(_index(args))
    print(f"classes            {st.n_classes}")
    print(f"instances          {st.n_instances}")
    print(f"mean per class     {st.mean_count:.3f}")
    print(f"max class count    {st.max_count}")
    print(f"min class count    {st.min_count}")
    if args.out:
        import csv
        with open(_out_dir(args) / "stats.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "count"])
            for c, n in st.per_class.items():
                w.writerow([c, n])
    return 0


def cmd_train(args):
    mcfg, tcfg = _load_configs(args)
    index = _index(args)
    mcfg = _with_classes(mcfg, index)
    out = _out_dir(args, "run")

    def show(r):
        print(f"epoch {r.epoch:4d}  loss {r.train_loss:.4f}  train_oa {r.train_oa:.4f}  "
              f"eval_oa {r.eval_oa:.4f}  eval_macc {r.eval_macc:.4f}", flush=True)

    res = training.train(index, mcfg, tcfg, out_dir=out, progress=show)
    print(f"best epoch {res.best_epoch + 1}: OA {res.best_eval.overall_accuracy:.4f} "
          f"mAcc {res.best_eval.mean_class_accuracy:.4f}; checkpoints in {out}")
    return 0


def cmd_eval(args):
    _, tcfg = _load_configs(args)
    params, mcfg = training.load_checkpoint(_need_path(args.checkpoint, "--checkpoint"))
    index = _index(args)
    if mcfg.class_names:
        index = dataset.DatasetIndex(index.entries, list(mcfg.class_names))
    res = training.evaluate(index, args.split, params, mcfg, tcfg.n_points,
                            args.batch_size or tcfg.batch_size, tcfg.seed)
    print(f"OA   {res.overall_accuracy:.6f}")
    print(f"mAcc {res.mean_class_accuracy:.6f}")
    names = list(mcfg.class_names) or [str(i) for i in range(mcfg.n_classes)]
    training.write_confusion_csv(res, names, _out_dir(args) / "confusion.csv")
    return 0


def cmd_classify(args):
    _, tcfg = _load_configs(args)
    params, mcfg = training.load_checkpoint(_need_path(args.checkpoint, "--checkpoint"))
    src = _need_path(args.file, "file")
    pts = dataset.load_cloud_file(src, tcfg.n_points, tcfg.seed)
    logits = forward(normalize_unit_sphere(pts).points, mcfg, params).data[0]
    probs = softmax(logits)
    names = list(mcfg.class_names) or [str(i) for i in range(mcfg.n_classes)]
    for rank, c in enumerate(np.argsort(-probs, kind="stable")[:3], 1):
        print(f"{rank}  {names[c]:<20} {probs[c]:.4f}")
    return 0


def cmd_ablate(args):
    mcfg, tcfg = _load_configs(args)
    index = _index(args)
    mcfg = _with_classes(mcfg, index)
    out = _out_dir(args, "ablation")
    kinds = ["augmentation", "skip_mode"] if args.kind == "both" else [args.kind]
    store = dataset.PointStore(tcfg.n_points, tcfg.seed)
    for kind in kinds:
        rows = training.run_ablation(kind, index, mcfg, tcfg, out / f"ablation_{kind}.csv",
                                     store=store)
        print(f"{kind}:")
        for r in rows:
            print(f"  {r.mode:<22} OA {r.result.overall_accuracy:.4f}  "
                  f"mAcc {r.result.mean_class_accuracy:.4f}")
    return 0


def cmd_bench(args):
    mcfg, tcfg = _load_configs(args)
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    rows, agree = bench.bench_kernels(sizes, repeats=args.repeats)
    mrows, count = bench.bench_model(mcfg, tcfg.n_points, repeats=args.repeats)
    print(bench.format_rows(rows + mrows))
    print(f"ball query paths agree with scan: {'yes' if agree else 'NO'}")
    print(f"parameters: {count} ({count / 1e6:.2f} M)")
    return 0 if agree else 1


def cmd_make_synthetic(args):
    out = _out_dir(args, "synthetic")
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    synthetic.write_synthetic_dataset(out, classes, args.n_train, args.n_test, args.seed or 0)
    print(f"wrote {len(classes)} classes to {out}")
    return 0


COMMANDS = {
    "refine": cmd_refine, "stats": cmd_stats, "train": cmd_train, "eval": cmd_eval,
    "classify": cmd_classify, "ablate": cmd_ablate, "bench": cmd_bench,
    "make-synthetic": cmd_make_synthetic,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.cmd](args)
    except (UsageError, ManifestError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError, IndexError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
