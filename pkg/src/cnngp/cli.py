"""``cnngp`` command line: kernel, fit-eval, validate-mc and search.

Exit codes: 0 success, 2 usage, 3 configuration, 4 data or I/O, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .architecture import ArchitectureSpec, KernelConfig, ReluPrefactor, load_config
from .data import DATA_DIR_ENV, load_idx, mnist_paths, split
from .errors import CnnGpError, ConfigError, DataError, NumericError
from .finite_width import empirical_moments, kernel_predictions, random_inputs
from .gp import encode_targets, error_rate, predict, read_gram, solve, write_gram
from .kernel import gram_matrix
from .search import SearchSpace, random_search, sample_seeds

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5
GRAM_FILES = {"train": "k_train.gram", "val": "k_val.gram", "test": "k_test.gram"}

log = logging.getLogger("cnngp")


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config_path: str | None = None
    config_digest: str | None = None
    config: dict | None = None
    datasets: dict = field(default_factory=dict)
    subsets: dict = field(default_factory=dict)
    seed: int | None = None
    parallelism: int = 1
    jitter: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)
    started: str = ""

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, default=_json_default) + "\n")
        return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _manifest(args, argv) -> RunManifest:
    return RunManifest(
        command=args.command,
        argv=list(argv),
        seed=args.seed,
        parallelism=args.parallelism,
        environment={
            "package": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "platform": platform.platform(),
            DATA_DIR_ENV: os.environ.get(DATA_DIR_ENV),
        },
        started=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )


def _attach_config(man: RunManifest, spec: str) -> KernelConfig:
    cfg = load_config(spec)
    man.config_path = spec
    man.config_digest = cfg.digest()
    man.config = cfg.to_dict()
    return cfg


# -- argument types ---------------------------------------------------------


def _int_at_least(lo: int):
    def parse(text: str) -> int:
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
        if v < lo:
            raise argparse.ArgumentTypeError(f"must be at least {lo}, got {v}")
        return v

    return parse


def _jitter(text: str):
    if text == "auto":
        return None
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("jitter must be 'auto' or a nonnegative number") from None
    if v < 0:
        raise argparse.ArgumentTypeError("jitter must be nonnegative")
    return v


# -- data -------------------------------------------------------------------


def _paths(args) -> dict[str, Path]:
    defaults = mnist_paths(args.data_dir)
    return {
        "train_images": Path(args.train_images) if args.train_images else defaults["train_images"],
        "train_labels": Path(args.train_labels) if args.train_labels else defaults["train_labels"],
        "test_images": Path(args.test_images) if args.test_images else defaults["test_images"],
        "test_labels": Path(args.test_labels) if args.test_labels else defaults["test_labels"],
    }


def _load_splits(args, man: RunManifest, need_test: bool = True):
    """(train, val, test); val and test may be None."""
    paths = _paths(args)
    normalize = not args.raw_pixels
    full = load_idx(paths["train_images"], paths["train_labels"], normalize)
    n_train = len(full) if args.subset_train is None else args.subset_train
    n_val = args.subset_val or 0
    if args.subset_train is None and n_val:
        n_train = len(full) - n_val
    train, val = split(full, n_train, n_val, args.split_seed)
    test = None
    if need_test and args.subset_test != 0:
        test = load_idx(paths["test_images"], paths["test_labels"], normalize).head(args.subset_test)
        man.datasets["test_images"] = str(paths["test_images"])
        man.datasets["test_labels"] = str(paths["test_labels"])
    man.datasets["train_images"] = str(paths["train_images"])
    man.datasets["train_labels"] = str(paths["train_labels"])
    man.subsets = {
        "train": len(train),
        "val": len(val),
        "test": len(test) if test is not None else 0,
        "split_seed": args.split_seed,
        "raw_pixels": args.raw_pixels,
    }
    return train, (val if len(val) else None), test


def _compute_grams(cfg, train, val, test, parallelism, man, arch=None, tag=""):
    arch = arch or cfg.arch
    grams = {}
    t0 = time.perf_counter()
    grams["train"] = gram_matrix(train.images, None, arch, cfg.hyper, parallelism)
    for name, ds in (("val", val), ("test", test)):
        if ds is not None:
            grams[name] = gram_matrix(ds.images, train.images, arch, cfg.hyper, parallelism)
    man.timings[f"{tag}kernel_seconds"] = time.perf_counter() - t0
    return grams


def _fit(grams, train, val, test, jitter, escalate, man, tag=""):
    num_classes = int(max(ds.labels.max() for ds in (train, val, test) if ds is not None)) + 1
    t0 = time.perf_counter()
    sol = solve(grams["train"], encode_targets(train.labels, num_classes), jitter, escalate)
    man.jitter[f"{tag}used"] = sol.jitter
    man.jitter[f"{tag}attempts"] = sol.attempts
    man.metrics[f"{tag}solve_residual"] = sol.residual
    for name, ds in (("val", val), ("test", test)):
        if ds is not None:
            err = error_rate(predict(grams[name], sol.alpha), ds.labels)
            man.metrics[f"{tag}{name}_error"] = err
    man.timings[f"{tag}solve_seconds"] = time.perf_counter() - t0


# -- commands ---------------------------------------------------------------


def cmd_kernel(args, man: RunManifest) -> int:
    cfg = _attach_config(man, args.config)
    train, val, test = _load_splits(args, man)
    grams = _compute_grams(cfg, train, val, test, args.parallelism, man)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, k in grams.items():
        write_gram(out / GRAM_FILES[name], k)
        man.metrics[f"{name}_shape"] = list(k.shape)
    print(f"kernel matrices {', '.join(f'{n} {k.shape[0]}x{k.shape[1]}' for n, k in grams.items())} "
          f"in {man.timings['kernel_seconds']:.2f}s -> {out}")
    return EXIT_OK


def cmd_fit_eval(args, man: RunManifest) -> int:
    train, val, test = _load_splits(args, man)
    if args.grams:
        gdir = Path(args.grams)
        grams = {}
        t0 = time.perf_counter()
        for name, ds in (("train", train), ("val", val), ("test", test)):
            if ds is None:
                continue
            k = read_gram(gdir / GRAM_FILES[name])
            want = (len(ds), len(train))
            if k.shape != want:
                raise DataError(f"{gdir / GRAM_FILES[name]} is {k.shape[0]}x{k.shape[1]}, "
                                f"labels require {want[0]}x{want[1]}")
            grams[name] = k
        man.timings["load_seconds"] = time.perf_counter() - t0
        man.datasets["grams"] = str(gdir)
        if args.config:
            _attach_config(man, args.config)
    else:
        if not args.config:
            raise ConfigError("fit-eval needs --config or --grams")
        cfg = _attach_config(man, args.config)
        grams = _compute_grams(cfg, train, val, test, args.parallelism, man)
        if args.save_grams:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            for name, k in grams.items():
                write_gram(out / GRAM_FILES[name], k)
    _fit(grams, train, val, test, args.jitter, not args.no_escalate, man)
    if args.linear_baseline:
        hyper_cfg = load_config(args.config) if args.config else None
        if hyper_cfg is None:
            raise ConfigError("--linear-baseline needs --config for sigma_b_sq/sigma_w_sq")
        lin = ArchitectureSpec((), hyper_cfg.arch.nonlinearity)
        lgrams = _compute_grams(hyper_cfg, train, val, test, args.parallelism, man, arch=lin, tag="linear_")
        _fit(lgrams, train, val, test, args.jitter, not args.no_escalate, man, tag="linear_")
    for key in sorted(man.metrics):
        if key.endswith("_error"):
            print(f"{key}\t{man.metrics[key]:.4f}")
    print(f"jitter\t{man.jitter['used']:.3g}")
    return EXIT_OK


def cmd_validate_mc(args, man: RunManifest) -> int:
    cfg = _attach_config(man, args.config)
    if args.inputs == "mnist":
        paths = _paths(args)
        ds = load_idx(paths["train_images"], paths["train_labels"], not args.raw_pixels)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(args.seed)))
        images = ds.images[rng.choice(len(ds), 2 * args.pairs, replace=False)]
        man.datasets["train_images"] = str(paths["train_images"])
    else:
        images = random_inputs(2 * args.pairs, args.input_size, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    alt = None
    if cfg.arch.nonlinearity.value == "relu":
        other = (ReluPrefactor.PAPER_LITERAL if cfg.hyper.relu_prefactor is ReluPrefactor.STANDARD
                 else ReluPrefactor.STANDARD)
        alt = replace(cfg.hyper, relu_prefactor=other)
    chunks, moments, means, cross, alt_moments = [], [], [], [], []
    t0 = time.perf_counter()
    for p, s in enumerate(sample_seeds(args.seed, args.pairs)):
        pair = images[2 * p : 2 * p + 2]
        rep = empirical_moments(
            cfg.arch, cfg.hyper, args.channels, args.samples, pair, s,
            readout_channels=args.readout_channels, parallelism=args.parallelism,
            method=args.method,
        )
        chunks.append(rep.to_tsv(prefix=f"pair{p}/", header=p == 0))
        moments += rep.select("moment")
        means += rep.select("mean")
        cross += rep.select("cross")
        if alt is not None:
            alt_moments += rep.rescored(kernel_predictions(pair, cfg.arch, alt)).select("moment")
    man.timings["sampling_seconds"] = time.perf_counter() - t0
    (out / "moments.tsv").write_text("".join(chunks))

    def frac(entries):
        return sum(abs(e.z) < 3 for e in entries) / len(entries) if entries else 1.0

    man.metrics.update({
        "channels": args.channels, "samples": args.samples, "pairs": args.pairs,
        "moment_fraction_within_3se": frac(moments),
        "mean_fraction_within_3se": frac(means),
        "cross_fraction_within_3se": frac(cross),
        "max_abs_z": max(abs(e.z) for e in moments),
    })
    if alt is not None:
        man.metrics[f"{alt.relu_prefactor.value}_moment_fraction_within_3se"] = frac(alt_moments)
    for k in sorted(man.metrics):
        print(f"{k}\t{man.metrics[k]}")
    print(f"report -> {out / 'moments.tsv'}")
    return EXIT_OK


def cmd_search(args, man: RunManifest) -> int:
    space = SearchSpace.load(args.space) if args.space else SearchSpace()
    man.config = {"search_space": asdict(space)}
    train, val, _ = _load_splits(args, man, need_test=False)
    if val is None:
        raise DataError("search needs a validation split: pass --subset-val N")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(rec):
        log.info("sample %d: val_error=%s (%s)", rec.index, rec.val_error, rec.status)

    t0 = time.perf_counter()
    result = random_search(args.samples, train, val, space, args.seed,
                           parallelism=args.parallelism, progress=progress)
    man.timings["search_seconds"] = time.perf_counter() - t0
    result.write_log(out / "search_log.tsv")
    man.metrics["scored"] = sum(r.ok for r in result.records)
    man.metrics["failed"] = sum(not r.ok for r in result.records)
    if result.best is None:
        raise NumericError("every sampled configuration failed; see search_log.tsv")
    result.best.config.dump(out / "best_config.yaml")
    man.metrics["best_val_error"] = result.best.val_error
    man.metrics["best_index"] = result.best.index
    man.metrics["best_digest"] = result.best.config.digest()
    print(f"best sample {result.best.index}: val_error {result.best.val_error:.4f} "
          f"({result.best.config.digest()}) -> {out / 'best_config.yaml'}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file or shipped name (convnet_gp, residual_cnn_gp, resnet32)")
    common.add_argument("--data-dir", help=f"directory with MNIST IDX files (also ${DATA_DIR_ENV})")
    common.add_argument("--train-images")
    common.add_argument("--train-labels")
    common.add_argument("--test-images")
    common.add_argument("--test-labels")
    common.add_argument("--subset-train", type=_int_at_least(1), help="first N training images")
    common.add_argument("--subset-val", type=_int_at_least(0), default=0,
                        help="validation images taken after the training subset")
    common.add_argument("--subset-test", type=_int_at_least(0), help="first M test images (0 = none)")
    common.add_argument("--split-seed", type=int, help="shuffle before splitting train/val")
    common.add_argument("--raw-pixels", action="store_true", help="keep pixel bytes in [0, 255]")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--parallelism", type=_int_at_least(1), default=os.cpu_count() or 1)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cnngp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("kernel", parents=[common], help="compute and store Gram matrices")
    p.set_defaults(func=cmd_kernel, need_config=True)

    p = sub.add_parser("fit-eval", parents=[common], help="GP fit and validation/test error")
    p.add_argument("--grams", help="directory written by 'cnngp kernel'")
    p.add_argument("--jitter", type=_jitter, default=None, help="'auto' (default) or a starting value")
    p.add_argument("--no-escalate", action="store_true", help="fail instead of raising the jitter")
    p.add_argument("--save-grams", action="store_true")
    p.add_argument("--linear-baseline", action="store_true", help="also score a linear-kernel GP")
    p.set_defaults(func=cmd_fit_eval, need_config=False)

    p = sub.add_parser("validate-mc", parents=[common], help="finite-width Monte-Carlo moment check")
    p.add_argument("--channels", type=_int_at_least(1), default=512)
    p.add_argument("--samples", type=_int_at_least(2), default=100_000)
    p.add_argument("--pairs", type=_int_at_least(1), default=3)
    p.add_argument("--input-size", type=_int_at_least(1), default=5)
    p.add_argument("--inputs", choices=("gaussian", "mnist"), default="gaussian")
    p.add_argument("--readout-channels", type=_int_at_least(1), default=1)
    p.add_argument("--method", choices=("layerwise", "literal"), default="layerwise")
    p.set_defaults(func=cmd_validate_mc, need_config=True)

    p = sub.add_parser("search", parents=[common], help="random hyperparameter search")
    p.add_argument("--samples", type=_int_at_least(1), required=True)
    p.add_argument("--space", help="YAML file overriding search-space ranges")
    p.set_defaults(func=cmd_search, need_config=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.need_config and not args.config:
        print(f"cnngp {args.command}: error: --config is required", file=sys.stderr)
        return EXIT_USAGE
    if args.out is None:
        args.out = str(Path("cnngp-out") / args.command)
    man = _manifest(args, argv)
    t0 = time.perf_counter()
    try:
        code = args.func(args, man)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, f"configuration error: {exc}"
    except NumericError as exc:
        code, msg = EXIT_NUMERIC, f"numerical failure: {exc}"
    except (DataError, OSError) as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    except CnnGpError as exc:
        code, msg = EXIT_CONFIG, str(exc)
    else:
        msg = None
    man.timings["total_seconds"] = time.perf_counter() - t0
    man.metrics["exit_code"] = code
    if msg:
        man.metrics["error"] = msg
        print(f"cnngp {args.command}: {msg}", file=sys.stderr)
    try:
        path = man.write(Path(args.out))
        print(f"manifest -> {path}", file=sys.stderr)
    except OSError as exc:
        print(f"cnngp: cannot write manifest: {exc}", file=sys.stderr)
        code = code or EXIT_DATA
    return code


if __name__ == "__main__":
    sys.exit(main())
