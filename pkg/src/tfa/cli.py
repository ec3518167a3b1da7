"""Command-line interface.

One `tfa` command with subcommands covering the full workflow: train a
model on synthetic shapes or a CIFAR-10 subset, rank training examples for
a test prediction, render saliency maps, run the paired insertion and
patch-sweep experiments, explain a misclassification, and print the
closed-form ridge toy tables.

Every subcommand that writes artifacts drops a key=value manifest of its
fully resolved configuration next to them, and all of its randomness
derives from one master seed, so a rerun reproduces each output file byte
for byte. Exit codes: 0 success, 1 usage error, 2 data or format error.
"""

import argparse
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import FormatError, SyntheticShapesSpec, generate_synthetic, load_cifar10_binary
from .harness import (
    InterventionConfig,
    PatchSpec,
    explain_misclassification,
    paired_insertion_experiment,
    patch_sweep,
)
from .models import Dataset, Model, ParamVector, TrainConfig, tiny_cnn, train
from .outputs import format_value, read_key_value, write_csv, write_grid_artifacts, write_manifest
from .ridge import ToySetup, feature_contributions, representer_coefficients
from .rng import child_seed
from .saliency import channel_aggregate, smoothgrad_saliency
from .tda import dense_hessian, rank_training_set


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    # argparse wants to sys.exit(2) on bad flags; route through our own
    # exit-code scheme instead
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def add_data_flags(p):
    p.add_argument("--data", choices=("synthetic", "cifar10"), default="synthetic")
    p.add_argument("--size", type=int, default=32, help="synthetic image size")
    p.add_argument("--classes", type=int, default=3, help="synthetic class count")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--train-per-class", type=int, default=200)
    p.add_argument("--holdout-per-class", type=int, default=20)
    p.add_argument("--test-per-class", type=int, default=40)
    p.add_argument("--data-dir", help="directory with CIFAR-10 binary batches")
    p.add_argument("--cifar-classes", default="0,1,2", help="comma-separated label subset")
    p.add_argument("--per-class-cap", type=int, default=1000)


def add_train_flags(p):
    p.add_argument("--lr", type=float, default=0.25)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr-decay", type=float, default=0.93)
    p.add_argument("--loss", choices=("cross-entropy", "mse"), default="cross-entropy")


def add_smoothing_flags(p, samples_default=10):
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--samples", type=int, default=samples_default)


def build_parser() -> Parser:
    parser = Parser(prog="tfa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"tfa {__version__}")
    parser.add_argument(
        "--config",
        help="key=value file of flag defaults; explicit flags override it",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("train", help="train a model and create a run directory")
    add_data_flags(p)
    add_train_flags(p)
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out", required=True, help="run directory to create")

    p = sub.add_parser("rank", help="rank training examples for one test example")
    p.add_argument("--run", required=True, help="run directory from `tfa train`")
    p.add_argument("--test-index", type=int, required=True)
    p.add_argument("--method", choices=("grad-cos", "grad-effect", "influence", "relatif"), default="grad-cos")
    p.add_argument("--top", type=int, default=10, help="rows to print per tail")
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--lam", type=float, help="Hessian damping (default: auto, kept positive definite)")
    p.add_argument("--hessian-examples", type=int, default=200, help="training subset used for the dense Hessian")

    p = sub.add_parser("saliency", help="saliency map for one train/test pair")
    p.add_argument("--run", required=True)
    p.add_argument("--train-index", type=int, required=True)
    p.add_argument("--test-index", type=int, required=True)
    add_smoothing_flags(p)
    p.add_argument("--raw", action="store_true", help="noiseless single-sample map (same as --sigma 0 --samples 1)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("insertion", help="paired topk-vs-random insertion experiment")
    p.add_argument("--run", required=True)
    p.add_argument("--ks", default="10,20,30,40,50,100", help="comma-separated k percents")
    p.add_argument("--tests", type=int, default=20)
    p.add_argument("--top-m", type=int, default=10)
    p.add_argument("--lr-step", type=float, default=1e-3)
    add_smoothing_flags(p, samples_default=30)
    p.add_argument("--fill", choices=("dataset-mean", "zero"), default="dataset-mean")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("explain", help="harmful/helpful report for one test example")
    p.add_argument("--run", required=True)
    p.add_argument("--test-index", type=int, required=True)
    p.add_argument("--top-r", type=int, default=5)
    add_smoothing_flags(p)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("patch-sweep", help="shortcut-patch prevalence sweep")
    add_data_flags(p)
    add_train_flags(p)
    p.add_argument("--fractions", default="0,0.1,0.25,0.4,0.55,0.7,0.85,0.95")
    p.add_argument("--patch-size", type=int, default=5)
    p.add_argument("--patch-color", default="0.95", help="comma-separated per-channel values")
    p.add_argument("--target-class", type=int, default=0)
    p.add_argument("--probe-class", type=int, default=1)
    p.add_argument("--probes", type=int, default=5)
    p.add_argument("--harmful", type=int, default=10)
    add_smoothing_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("toy-ridge", help="closed-form representer tables for the planted toy")
    p.add_argument("--n", type=int, default=5, help="total examples (n-1 on the axis)")
    p.add_argument("--c", type=float, default=2.0)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--t", type=float, default=1.0, help="test point (0, t)")
    p.add_argument("--out", help="optional directory for the CSV")
    return parser


def apply_config_file(parser, argv):
    """Pre-parse --config and install its pairs as subcommand defaults."""
    probe = Parser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    pairs = read_key_value(known.config)
    # defaults attach to every subparser that knows the flag
    for action in parser._subparsers._group_actions[0].choices.values():
        usable = {}
        for key, value in pairs.items():
            dest = key.replace("-", "_")
            for act in action._actions:
                if act.dest == dest:
                    usable[dest] = value if act.type is None else act.type(value)
        action.set_defaults(**usable)


def parse_int_list(text) -> list:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"bad integer list {text!r}") from e


def parse_float_list(text) -> list:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"bad number list {text!r}") from e


def build_datasets(args, data_seed):
    if args.data == "synthetic":
        spec = SyntheticShapesSpec(
            size=args.size,
            num_classes=args.classes,
            noise=args.noise,
            train_per_class=args.train_per_class,
            holdout_per_class=args.holdout_per_class,
            test_per_class=args.test_per_class,
            seed=data_seed,
        )
        return generate_synthetic(spec)
    if not args.data_dir:
        raise UsageError("--data cifar10 needs --data-dir")
    classes = parse_int_list(args.cifar_classes)
    train_ds, test_ds = load_cifar10_binary(args.data_dir, classes, args.per_class_cap)
    # carve a per-class holdout off the end of the training split
    hold_idx = []
    for cls in range(len(classes)):
        members = np.flatnonzero(train_ds.y == cls)
        hold_idx.extend(members[-args.holdout_per_class :] if args.holdout_per_class else [])
    hold_idx = sorted(int(i) for i in hold_idx)
    keep = sorted(set(range(len(train_ds))) - set(hold_idx))
    holdout = Dataset(train_ds.X[hold_idx], train_ds.y[hold_idx]) if hold_idx else None
    return Dataset(train_ds.X[keep], train_ds.y[keep]), holdout, test_ds


def data_manifest(args, data_seed) -> dict:
    entries = {"data": args.data}
    if args.data == "synthetic":
        entries.update(
            size=args.size,
            classes=args.classes,
            noise=args.noise,
            train_per_class=args.train_per_class,
            holdout_per_class=args.holdout_per_class,
            test_per_class=args.test_per_class,
        )
    else:
        entries.update(
            data_dir=args.data_dir,
            cifar_classes=args.cifar_classes,
            per_class_cap=args.per_class_cap,
            holdout_per_class=args.holdout_per_class,
        )
    entries["data_seed"] = data_seed
    return entries


def cmd_train(args) -> int:
    data_seed = child_seed(args.seed, "data")
    train_seed = child_seed(args.seed, "train")
    train_ds, holdout, test_ds = build_datasets(args, data_seed)
    input_shape = train_ds.X.shape[1:]
    num_classes = int(train_ds.y.max()) + 1
    arch = tiny_cnn(input_shape, num_classes)
    model = Model(arch)
    config = TrainConfig(
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=train_seed,
        loss=args.loss,
        lr_decay=args.lr_decay,
    )
    params, history = train(train_ds, arch, config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "params.npy", params.data)
    manifest = {
        "command": "train",
        "seed": args.seed,
        **data_manifest(args, data_seed),
        "arch": "tiny-cnn",
        "input_shape": "x".join(str(d) for d in input_shape),
        "num_classes": num_classes,
        "lr": args.lr,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr_decay": args.lr_decay,
        "loss": args.loss,
        "train_seed": train_seed,
        "num_params": model.num_params,
        "final_train_accuracy": history.accuracies[-1] if history.accuracies else 0.0,
        "test_accuracy": model.accuracy(params, test_ds),
    }
    write_manifest(out / "manifest.txt", manifest)
    print(f"trained {model.num_params} parameters; test accuracy {manifest['test_accuracy']:.3f}")
    print(f"run directory: {out}")
    return 0


class Run:
    """A trained run directory: manifest, parameters and rebuilt datasets."""

    def __init__(self, path):
        self.path = Path(path)
        manifest_path = self.path / "manifest.txt"
        if not manifest_path.exists():
            raise FormatError(f"{self.path} has no manifest.txt (not a run directory?)")
        self.manifest = read_key_value(manifest_path)
        try:
            input_shape = tuple(int(d) for d in self.manifest["input_shape"].split("x"))
            self.arch = tiny_cnn(input_shape, int(self.manifest["num_classes"]))
            self.model = Model(self.arch)
            self.params = ParamVector(np.load(self.path / "params.npy"), self.model.layout)
            args = argparse.Namespace(
                data=self.manifest["data"],
                size=int(self.manifest.get("size", 32)),
                classes=int(self.manifest.get("classes", 3)),
                noise=float(self.manifest.get("noise", 0.05)),
                train_per_class=int(self.manifest.get("train_per_class", 200)),
                holdout_per_class=int(self.manifest.get("holdout_per_class", 20)),
                test_per_class=int(self.manifest.get("test_per_class", 40)),
                data_dir=self.manifest.get("data_dir"),
                cifar_classes=self.manifest.get("cifar_classes", "0,1,2"),
                per_class_cap=int(self.manifest.get("per_class_cap", 1000)),
            )
            self.train_ds, self.holdout, self.test_ds = build_datasets(
                args, int(self.manifest["data_seed"])
            )
        except (KeyError, ValueError, OSError) as e:
            raise FormatError(f"cannot restore run from {self.path}: {e}") from e

    def test_example(self, index):
        if not 0 <= index < len(self.test_ds):
            raise FormatError(f"test index {index} out of range [0, {len(self.test_ds)})")
        return self.test_ds.example(index)


def cmd_rank(args) -> int:
    run = Run(args.run)
    z_test = run.test_example(args.test_index)
    hessian = None
    lam = args.lam
    if args.method in ("influence", "relatif"):
        subset = run.train_ds.subset(range(min(args.hessian_examples, len(run.train_ds))))
        hessian = dense_hessian(run.model, run.params, subset)
        if lam is None:
            # partially trained models have indefinite Hessians; damp past
            # the most negative eigenvalue so the solve stays well posed
            smallest = float(np.linalg.eigvalsh(hessian.matrix)[0])
            lam = hessian.default_damping() + max(0.0, -1.1 * smallest)
    ranking = rank_training_set(
        run.model,
        run.params,
        run.train_ds,
        z_test,
        args.method,
        test_index=args.test_index,
        epsilon=args.epsilon,
        hessian=hessian,
        lam=lam,
    )
    rows = [(r.train_index, r.method, r.score) for r in ranking.records]
    table = run.path / "tables" / f"rank_test{args.test_index}_{args.method}.csv"
    write_csv(table, ("train_index", "method", "score"), rows)
    write_manifest(
        run.path / f"manifest_rank_test{args.test_index}_{args.method}.txt",
        {
            "command": "rank",
            "test_index": args.test_index,
            "method": args.method,
            "epsilon": args.epsilon,
            "lam": "unused" if lam is None else lam,
            "hessian_examples": args.hessian_examples if hessian is not None else 0,
            "skipped": len(ranking.skipped),
        },
    )
    print(f"wrote {table}")
    top = min(args.top, len(ranking.records))
    for r in ranking.helpful(top):
        print(f"  helpful train[{r.train_index}] score {r.score:+.4f}")
    for r in ranking.harmful(top):
        print(f"  harmful train[{r.train_index}] score {r.score:+.4f}")
    return 0


def cmd_saliency(args) -> int:
    run = Run(args.run)
    if not 0 <= args.train_index < len(run.train_ds):
        raise FormatError(f"train index {args.train_index} out of range [0, {len(run.train_ds)})")
    z_train = run.train_ds.example(args.train_index)
    z_test = run.test_example(args.test_index)
    sigma, samples = (0.0, 1) if args.raw else (args.sigma, args.samples)
    sal = smoothgrad_saliency(
        run.model,
        run.params,
        z_train,
        z_test,
        sigma=sigma,
        samples=samples,
        seed=args.seed,
        train_index=args.train_index,
        test_index=args.test_index,
    )
    grid = channel_aggregate(sal)
    stem = run.path / "maps" / f"saliency_train{args.train_index}_test{args.test_index}"
    write_grid_artifacts(stem, grid)
    write_manifest(
        run.path / f"manifest_saliency_train{args.train_index}_test{args.test_index}.txt",
        {
            "command": "saliency",
            "train_index": args.train_index,
            "test_index": args.test_index,
            "sigma": sigma,
            "samples": samples,
            "seed": args.seed,
        },
    )
    print(f"wrote {stem}.pgm and {stem}.csv")
    return 0


def cmd_insertion(args) -> int:
    run = Run(args.run)
    if run.holdout is None or len(run.holdout) == 0:
        raise FormatError("this run has no holdout pool; retrain with --holdout-per-class > 0")
    config = InterventionConfig(
        k_percents=tuple(parse_int_list(args.ks)),
        num_tests=args.tests,
        top_m=args.top_m,
        lr_step=args.lr_step,
        sigma=args.sigma,
        samples=args.samples,
        seed=args.seed,
        fill=args.fill,
    )
    results = paired_insertion_experiment(run.model, run.params, run.holdout, run.test_ds, config)
    table = run.path / "tables" / "insertion.csv"
    write_csv(
        table,
        ("k", "mean_random", "mean_topk", "mean_paired_delta", "ci_half_width", "pairs"),
        [
            (r.k, r.mean_random, r.mean_topk, r.mean_paired_delta, r.ci_half_width, r.pairs)
            for r in results
        ],
    )
    write_manifest(
        run.path / "manifest_insertion.txt",
        {
            "command": "insertion",
            "ks": args.ks,
            "tests": config.num_tests,
            "top_m": config.top_m,
            "lr_step": config.lr_step,
            "sigma": config.sigma,
            "samples": config.samples,
            "fill": config.fill,
            "seed": config.seed,
        },
    )
    print(f"wrote {table}")
    for r in results:
        print(
            f"  k={r.k:5.1f}  d(T-R)={r.mean_paired_delta:+.4f} "
            f"[{r.mean_paired_delta - r.ci_half_width:+.4f}, {r.mean_paired_delta + r.ci_half_width:+.4f}]"
        )
    return 0


def cmd_explain(args) -> int:
    run = Run(args.run)
    z_test = run.test_example(args.test_index)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = explain_misclassification(
            run.model,
            run.params,
            run.train_ds,
            z_test,
            top_r=args.top_r,
            sigma=args.sigma,
            samples=args.samples,
            seed=args.seed,
            test_index=args.test_index,
        )
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)

    rows = [("helpful", r.train_index, r.score) for r in report.helpful]
    rows += [("harmful", r.train_index, r.score) for r in report.harmful]
    table = run.path / "tables" / f"explain_test{args.test_index}.csv"
    write_csv(table, ("tail", "train_index", "score"), rows)
    for idx, sal in report.maps.items():
        write_grid_artifacts(
            run.path / "maps" / f"explain_test{args.test_index}_train{idx}",
            channel_aggregate(sal),
        )
    write_manifest(
        run.path / f"manifest_explain_test{args.test_index}.txt",
        {
            "command": "explain",
            "test_index": args.test_index,
            "top_r": args.top_r,
            "sigma": args.sigma,
            "samples": args.samples,
            "seed": args.seed,
            "predicted_class": report.predicted_class,
            "true_class": report.true_class,
            "correctly_classified": report.correctly_classified,
        },
    )
    state = "correct" if report.correctly_classified else "misclassified"
    print(
        f"test[{args.test_index}] predicted {report.predicted_class}, "
        f"true {report.true_class} ({state})"
    )
    print(f"wrote {table} and {len(report.maps)} maps")
    return 0


def cmd_patch_sweep(args) -> int:
    data_seed = child_seed(args.seed, "data")
    train_ds, _, test_ds = build_datasets(args, data_seed)
    input_shape = train_ds.X.shape[1:]
    arch = tiny_cnn(input_shape, int(train_ds.y.max()) + 1)
    fractions = parse_float_list(args.fractions)
    color = tuple(parse_float_list(args.patch_color))
    if len(color) != input_shape[0]:
        raise UsageError(
            f"--patch-color has {len(color)} channels, images have {input_shape[0]}"
        )
    spec = PatchSpec(size=args.patch_size, color=color, target_class=args.target_class, fraction=0.0)
    config = TrainConfig(
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=0,  # replaced per fraction inside the sweep
        loss=args.loss,
        lr_decay=args.lr_decay,
    )
    rows = patch_sweep(
        train_ds,
        test_ds,
        fractions,
        arch,
        config,
        spec,
        probe_class=args.probe_class,
        probe_count=args.probes,
        harmful_count=args.harmful,
        sigma=args.sigma,
        samples=args.samples,
        seed=child_seed(args.seed, "sweep"),
    )
    out = Path(args.out)
    table = out / "tables" / "patch_sweep.csv"
    write_csv(
        table,
        (
            "fraction",
            "overall_accuracy",
            "unpatched_target_accuracy",
            "patched_probe_accuracy",
            "patch_attribution_fraction",
        ),
        [
            (
                r.fraction,
                r.overall_accuracy,
                r.unpatched_target_accuracy,
                r.patched_probe_accuracy,
                r.patch_attribution_fraction,
            )
            for r in rows
        ],
    )
    write_manifest(
        out / "manifest.txt",
        {
            "command": "patch-sweep",
            "seed": args.seed,
            **data_manifest(args, data_seed),
            "fractions": args.fractions,
            "patch_size": args.patch_size,
            "patch_color": args.patch_color,
            "target_class": args.target_class,
            "probe_class": args.probe_class,
            "probes": args.probes,
            "harmful": args.harmful,
            "sigma": args.sigma,
            "samples": args.samples,
            "lr": args.lr,
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "lr_decay": args.lr_decay,
        },
    )
    print(f"wrote {table}")
    for r in rows:
        print(
            f"  fraction={r.fraction:.2f}  probe_acc={r.patched_probe_accuracy:.3f}  "
            f"patch_attr={r.patch_attribution_fraction:.4f}"
        )
    return 0


def cmd_toy_ridge(args) -> int:
    if args.n < 2:
        raise UsageError("--n must be at least 2")
    setup = ToySetup(axis_coords=(1.0,) * (args.n - 1), c=args.c, lam=args.lam)
    problem = setup.problem()
    x_test = setup.test_point(args.t)
    alpha = representer_coefficients(problem, x_test)
    beta = feature_contributions(problem, x_test)
    header = ("i", "y", "alpha", "beta_1", "beta_2")
    rows = [
        (i, problem.y[i], alpha[i], beta[i, 0], beta[i, 1]) for i in range(len(alpha))
    ]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(format_value(v) for v in row))
    print("\n".join(lines))
    prediction = float(alpha @ problem.y)
    print(f"# prediction alpha.y = {prediction!r}", file=sys.stderr)
    if args.out:
        write_csv(Path(args.out) / "tables" / "toy_ridge.csv", header, rows)
        write_manifest(
            Path(args.out) / "manifest.txt",
            {"command": "toy-ridge", "n": args.n, "c": args.c, "lambda": args.lam, "t": args.t},
        )
    return 0


HANDLERS = {
    "train": cmd_train,
    "rank": cmd_rank,
    "saliency": cmd_saliency,
    "insertion": cmd_insertion,
    "explain": cmd_explain,
    "patch-sweep": cmd_patch_sweep,
    "toy-ridge": cmd_toy_ridge,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        return HANDLERS[args.command](args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except (FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
