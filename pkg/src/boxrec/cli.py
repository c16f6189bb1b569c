"""Command-line entry point: prepare, train, evaluate, recommend, export, grad-check, synth."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as configio
from .autodiff import broken_gradients, finite_difference_check
from .checkpoint import load_model
from .datasets import (
    chronological_split,
    filter_min_activity,
    load_bundle,
    load_log,
    save_bundle,
)
from .encoder import ABLATIONS, POOLINGS, EncoderConfig, init_params
from .errors import DataError, InvalidArgumentError, NumericFaultError
from .evaluation import DEFAULT_KS, Model, evaluate, score_all, user_window
from .geometry import MODES
from .synthetic import generate_box_world, save_world, world_split
from .training import TrainConfig, batch_loss, fit

logger = logging.getLogger("boxrec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass(frozen=True)
class SynthSpec:
    n_users: int = 50
    n_items: int = 500
    d0: int = 4
    boxes_per_user: int = 1
    noise: float = 0.05
    seed: int = 0
    offset_min: float = 0.4
    offset_max: float = 0.7
    stay_prob: float = 0.8


# flag name -> config key, for the options that override config files
_TRAIN_FLAGS = {
    "dim": "d", "window": "L", "boxes": "M", "mode": "mode", "memory": "N", "pooling": "pooling",
    "dropout": "dropout_rate", "ablation": "ablation", "freeze_offsets": "freeze_offsets",
    "gamma": "gamma", "alpha": "alpha", "additional": "use_additional", "init_std": "init_std",
    "targets": "T", "lr": "learning_rate", "margin": "margin", "batch_size": "batch_size",
    "l2": "l2", "epochs": "epochs", "seed": "seed", "negatives": "negatives_per_positive",
}
_SYNTH_FLAGS = {"users": "n_users", "items": "n_items", "d0": "d0", "boxes": "boxes_per_user",
                "noise": "noise", "seed": "seed"}


def _overrides(args, mapping):
    return {key: getattr(args, flag) for flag, key in mapping.items() if getattr(args, flag) is not None}


def _read_config(path):
    if path is None:
        return {}
    try:
        return configio.read_config_file(path)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None


def _ks(text):
    try:
        ks = sorted({int(k) for k in text.replace(",", " ").split()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad k list {text!r}") from None
    if not ks or ks[0] < 1:
        raise argparse.ArgumentTypeError("k values must be >= 1")
    return ks


def _open_model(checkpoint, data):
    cfg, params = load_model(checkpoint)
    split = load_bundle(data)
    n_items = params["item_embeddings"].shape[0] - 1
    if n_items != split.n_items:
        raise DataError(f"checkpoint has {n_items} items but bundle {data} has {split.n_items}")
    return Model(cfg, params), split


def _print_stats(split, out=None):
    out = out or sys.stdout
    stats = split.stats()
    print(f"dataset\t{split.name}", file=out)
    print(f"#interactions\t{stats['interactions']}", file=out)
    print(f"#users\t{stats['users']}", file=out)
    print(f"#items\t{stats['items']}", file=out)
    print(f"density\t{stats['density_percent']:.4f}%", file=out)


# -- commands -------------------------------------------------------------------


def cmd_prepare(args):
    fmt = args.format or ("csv" if str(args.input).endswith(".csv") else "tsv")
    log = load_log(args.input, format=fmt, rating_threshold=args.rating_threshold)
    log = filter_min_activity(log, args.min_user, args.min_item)
    split = chronological_split(log, name=args.name or Path(args.input).stem)
    out = save_bundle(split, args.out)
    configio.write_config_file(out / "prepare.cfg", {
        "input": args.input, "format": fmt, "rating_threshold": args.rating_threshold,
        "min_user": args.min_user, "min_item": args.min_item})
    _print_stats(split)
    return EXIT_OK


def cmd_train(args):
    values = _read_config(args.config)
    values.update(_overrides(args, _TRAIN_FLAGS))
    model_kw, train_kw = configio.split_overrides(values, EncoderConfig, TrainConfig)
    model_config = EncoderConfig(**model_kw)
    train_config = TrainConfig(**train_kw)
    split = load_bundle(args.data)
    logger.info("training on %s: %d users, %d items", split.name, split.n_users, split.n_items)
    result = fit(split, model_config, train_config, out_dir=args.out, log_every=1)
    print(f"final loss\t{result.losses[-1]:.6f}" if result.losses else "no epochs run")
    print(f"checkpoint\t{result.checkpoint}")
    return EXIT_OK


def _train_seed(checkpoint):
    cfg = Path(checkpoint).parent / "train.cfg"
    if cfg.exists():
        seed = configio.read_config_file(cfg).get("seed")
        return int(seed) if seed is not None else None
    return None


def cmd_evaluate(args):
    model, split = _open_model(args.checkpoint, args.data)
    if args.point_baseline:
        model = model.point_baseline()
    meta = {"seed": _train_seed(args.checkpoint)}
    if args.point_baseline:
        meta["point_baseline"] = True
    table = evaluate(model, split, ks=args.ks, threads=args.threads, meta=meta)
    print(table.to_text())
    report = Path(args.report) if args.report else Path(args.checkpoint).with_suffix(
        ".point.json" if args.point_baseline else ".metrics.json")
    table.write(report)
    report.with_suffix(".txt").write_text(table.to_text() + "\n", encoding="utf-8")
    logger.info("report written to %s", report)
    return EXIT_OK


def cmd_recommend(args):
    model, split = _open_model(args.checkpoint, args.data)
    if args.user not in split.user_vocab:
        raise InvalidArgumentError(f"unknown user {args.user!r}")
    row = score_all(model, split, split.user_vocab.to_internal(args.user), k=args.k)
    for rank, (item, dist) in enumerate(zip(row.ranked, row.distances), 1):
        print(f"{rank}\t{split.item_vocab.to_external(int(item))}\t{dist:.6f}")
    return EXIT_OK


def pca_projection(X: np.ndarray, D: int):
    """Mean and ``d x D`` orthonormal basis of the top-D principal directions."""
    d = X.shape[1]
    if not 1 <= D <= d:
        raise InvalidArgumentError(f"--pca must lie in [1, {d}]")
    mean = X.mean(axis=0)
    _, _, vt = np.linalg.svd(X - mean, full_matrices=True)
    return mean, vt[:D].T


def _fmt(row):
    return " ".join(f"{x:.10g}" for x in row)


def cmd_export(args):
    cfg, params = load_model(args.checkpoint)
    model = Model(cfg, params)
    items = model.item_matrix()[1:]
    mean, W = (None, None)
    if args.pca is not None:
        mean, W = pca_projection(items, args.pca)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        if args.what == "items":
            ids = None
            if args.data:
                _, split = _open_model(args.checkpoint, args.data)
                ids = split.item_vocab.ids
            rows = items if W is None else (items - mean) @ W
            for i, row in enumerate(rows):
                print(f"{ids[i] if ids else i + 1}\t{_fmt(row)}", file=out)
        else:
            if not args.data:
                raise UsageError("export --what boxes needs --data to build user windows")
            model, split = _open_model(args.checkpoint, args.data)
            users = split.users
            boxsets = model.encode(np.stack([user_window(split, u, cfg.L) for u in users]))
            for u, boxes in zip(users, boxsets):
                for j, box in enumerate(boxes.boxes):
                    c, f = box.center, box.offset
                    if W is not None:
                        # the projected box is the bounding box of the rotated one
                        c, f = (c - mean) @ W, np.abs(W).T @ f
                    print(f"{split.user_vocab.to_external(u)}\t{j}\t{_fmt(c)}\t{_fmt(f)}", file=out)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def run_grad_check(seed=0, rtol=1e-3):
    """Finite-difference check of the full training loss on toy dimensions."""
    reports = {}
    windows = np.array([[0, 1, 2], [3, 4, 5]])
    targets = np.array([[3, 6], [1, 0]])
    negatives = np.array([[2, 5], [6, 4]])
    for mode, M in (("single", 1), ("concentric", 2), ("independent", 2)):
        cfg = EncoderConfig(d=4, L=3, N=2, M=M, mode=mode, gamma=0.5, use_additional=True, alpha=150.0)
        params = init_params(cfg, 6, np.random.default_rng(seed), dtype=np.float64)
        params["offset_b"].value[:] = 0.2
        # a large margin keeps every hinge term active so all parameters get gradient
        loss = lambda g: batch_loss(g, params, cfg, windows, targets, negatives, 5.0)[0]  # noqa: E731
        reports[mode] = finite_difference_check(loss, params, step=1e-5, rtol=rtol, atol=1e-6)
    return reports


def cmd_grad_check(args):
    if args.inject_bug:
        with broken_gradients():
            reports = run_grad_check(args.seed)
    else:
        reports = run_grad_check(args.seed)
    failed = set()
    for mode, report in reports.items():
        print(f"{mode}\t{report.summary()}")
        failed |= {c.param for c in report.failures}
    if failed:
        print("failing parameters: " + ", ".join(sorted(failed)), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_synth(args):
    values = _read_config(args.spec)
    values.update(_overrides(args, _SYNTH_FLAGS))
    spec = configio.build(SynthSpec, values)
    world = generate_box_world(spec.n_users, spec.n_items, spec.d0, spec.boxes_per_user, spec.noise,
                               seed=spec.seed, offset_range=(spec.offset_min, spec.offset_max),
                               stay_prob=spec.stay_prob)
    out = save_world(world, args.out)
    split = world_split(world, name=args.name)
    save_bundle(split, out)
    configio.write_config_file(out / "synth.cfg", configio.as_dict(spec))
    _print_stats(split)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = _Parser(prog="boxrec", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = add("prepare", help="ingest a log into a dataset bundle")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("tsv", "csv"))
    p.add_argument("--rating-threshold", type=float)
    p.add_argument("--min-user", type=int, default=10)
    p.add_argument("--min-item", type=int, default=5)
    p.add_argument("--name")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = add("train", help="train a model on a bundle")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="key=value file; flags win over it")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--boxes", type=int, help="number of boxes M")
    p.add_argument("--gamma", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--pooling", choices=POOLINGS)
    p.add_argument("--dim", type=int, help="embedding size d")
    p.add_argument("--window", type=int, help="window length L")
    p.add_argument("--targets", type=int, help="target length T")
    p.add_argument("--memory", type=int, help="memory slots N")
    p.add_argument("--lr", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--l2", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--init-std", type=float)
    p.add_argument("--negatives", type=int, help="negatives per positive")
    p.add_argument("--alpha", type=float)
    p.add_argument("--additional", action="store_const", const=True,
                   help="add the offset-size term to distances")
    p.add_argument("--freeze-offsets", action="store_const", const=True,
                   help="train the point model (offsets pinned at zero)")
    p.set_defaults(func=cmd_train)

    p = add("evaluate", help="all-item ranking metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ks", type=_ks, default=list(DEFAULT_KS))
    p.add_argument("--point-baseline", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--report", help="JSON report path (default next to the checkpoint)")
    p.set_defaults(func=cmd_evaluate)

    p = add("recommend", help="top-k items for one user")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--user", required=True, help="external user id")
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_recommend)

    p = add("export", help="dump item embeddings or user boxes as text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--what", choices=("items", "boxes"), required=True)
    p.add_argument("--data", help="bundle (needed for boxes; gives external ids for items)")
    p.add_argument("--pca", type=int, metavar="D")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)

    p = add("grad-check", help="finite-difference check on toy dimensions")
    p.add_argument("--dims", choices=("toy",), default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--break", dest="inject_bug", action="store_true",
                   help="corrupt one derivative; the check must fail")
    p.set_defaults(func=cmd_grad_check)

    p = add("synth", help="generate a box world and its bundle")
    p.add_argument("--spec", help="key=value file with generator settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--users", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--d0", type=int)
    p.add_argument("--boxes", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--name", default="boxworld")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "recommend" and args.k < 1:
            raise UsageError("--k must be >= 1")
        return args.func(args)
    except (UsageError, InvalidArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFaultError as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
