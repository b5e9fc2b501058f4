"""``spineseg`` command line: phantom, prepare, train, segment, evaluate, gradcheck.

Every option can also come from a shared ``key = value`` config file
(``--config``).  Precedence is flag, then config file, then built-in default.
Keys are option names with dashes or underscores; unknown keys are rejected.

Exit codes: 0 success, 1 usage error, 2 data error, 3 validation failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VALIDATION = 0, 1, 2, 3
SUBCOMMANDS = ("phantom", "prepare", "train", "segment", "evaluate", "gradcheck")

log = logging.getLogger("spineseg")


class UsageError(Exception):
    pass


class ValidationFailure(Exception):
    pass


def _bands(text: str):
    text = text.strip()
    if text == "auto":
        return "auto"
    try:
        t1, t2 = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'auto' or 't1,t2', got {text!r}") from None
    if t1 < 1 or t2 < 1:
        raise argparse.ArgumentTypeError("band widths must be >= 1")
    return (t1, t2)


def _int_pair(text: str):
    try:
        lo, hi = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}") from None
    return (lo, hi)


def _classes(text: str) -> int:
    if text.strip() not in ("2", "4"):
        raise argparse.ArgumentTypeError("classes must be 2 or 4")
    return int(text)


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _flag(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


@dataclass(frozen=True)
class Opt:
    name: str
    type: object
    default: object
    help: str
    commands: tuple[str, ...]
    flag: bool = False

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


ALL = SUBCOMMANDS
OPTIONS = [
    Opt("seed", _seed, 0, "random seed", ALL),
    Opt("threads", _positive_int, None, "cap on BLAS worker threads", ALL),
    Opt("deterministic", _flag, False, "single-threaded, bit-reproducible run", ALL, flag=True),
    # phantom
    Opt("out-dir", Path, None, "output directory", ("phantom", "segment")),
    Opt("subjects", _positive_int, 4, "number of phantom subjects", ("phantom",)),
    Opt("test-subjects", _positive_int, None, "held-out subjects (default: a quarter)", ("phantom",)),
    Opt("frames", _positive_int, 64, "frames per phantom volume", ("phantom",)),
    Opt("size", _positive_int, 256, "phantom frame width and height", ("phantom",)),
    # prepare / train shared
    Opt("data", Path, None, "benchmark directory holding manifest.txt", ("prepare", "segment", "evaluate")),
    Opt("classes", _classes, None,
        "2 (spine/background) or 4 (with boundary bands); default 4, train reads it from the patches",
        ("prepare", "train", "gradcheck")),
    Opt("patch", _positive_int, 32, "patch side length", ("prepare",)),
    Opt("stride", _positive_int, 1, "patch center stride", ("prepare",)),
    Opt("bands", _bands, "auto", "boundary band widths 'auto' or 't1,t2'", ("prepare",)),
    Opt("band-range", _int_pair, (1, 16), "search range for automatic band widths", ("prepare",)),
    Opt("margin", int, 6, "ROI box margin in pixels", ("prepare",)),
    Opt("patches-per-class", _positive_int, None,
        "patches per class (default: 40000 / classes)", ("prepare", "train")),
    Opt("patches", Path, None, "patch set stem written by prepare", ("prepare", "train")),
    Opt("pgm", _flag, False, "also write PGM images", ("prepare", "segment"), flag=True),
    # train
    Opt("checkpoint", Path, None, "checkpoint file", ("train", "segment")),
    Opt("epochs", _positive_int, 3, "training epochs", ("train",)),
    Opt("batch-size", _positive_int, 64, "mini-batch size", ("train",)),
    Opt("optimizer", str, "adam", "adam or sgd-momentum", ("train",)),
    Opt("lr", float, 1e-4, "learning rate", ("train",)),
    Opt("val-fraction", float, 0.1, "validation fraction per class", ("train",)),
    Opt("trace", Path, None, "training trace CSV (default: <checkpoint>.trace.csv)", ("train",)),
    # segment / evaluate
    Opt("seg-dir", Path, None, "directory of <id>_mask.vhdr segmentations", ("evaluate",)),
    Opt("csv", Path, None, "write the metric table as CSV", ("evaluate",)),
    Opt("min-dice", float, None, "fail (exit 3) if mean Dice is below this", ("evaluate",)),
    # gradcheck
    Opt("draws", _positive_int, 10, "random (input, label) draws", ("gradcheck",)),
    Opt("eps", float, 3e-3, "largest finite-difference step", ("gradcheck",)),
    Opt("tolerance", float, 1e-6, "maximum allowed relative error", ("gradcheck",)),
]
OPTION_BY_DEST = {o.dest: o for o in OPTIONS}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spineseg", description="Patch-based CNN spine segmentation.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "phantom": "write a synthetic benchmark",
        "prepare": "label training frames and extract patches",
        "train": "train a network on prepared patches",
        "segment": "segment volumes with a checkpoint",
        "evaluate": "compare segmentations against ground truth",
        "gradcheck": "check analytic gradients on a reduced network",
    }
    for cmd in SUBCOMMANDS:
        p = sub.add_parser(cmd, help=helps[cmd], description=helps[cmd])
        p.add_argument("--config", type=Path, help="key = value config file")
        p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
        for o in OPTIONS:
            if cmd not in o.commands:
                continue
            if o.flag:
                p.add_argument(f"--{o.name}", action="store_const", const=True, default=None,
                               help=o.help)
            else:
                p.add_argument(f"--{o.name}", type=o.type, default=None,
                               help=o.help if "(default" in o.help or o.default is None
                               else f"{o.help} (default: {o.default})")
        if cmd == "segment":
            p.add_argument("images", nargs="*", type=Path, help="image .vhdr files")
        if cmd == "evaluate":
            p.add_argument("pairs", nargs="*", type=Path, help="SEG GT [SEG GT ...] .vhdr files")
    return parser


def read_config(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        dest = key.replace("-", "_")
        if dest not in OPTION_BY_DEST:
            raise UsageError(f"{path}:{n}: unknown config key {key!r}")
        out[dest] = value
    return out


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset options from the config file, then from defaults."""
    config = read_config(args.config) if args.config else {}
    for o in OPTIONS:
        if args.command not in o.commands:
            continue
        if getattr(args, o.dest) is not None:
            continue
        if o.dest in config:
            try:
                value = o.type(config[o.dest])
            except (argparse.ArgumentTypeError, ValueError) as e:
                raise UsageError(f"config key {o.name}: {e}") from None
        else:
            value = o.default
        setattr(args, o.dest, value)
    return args


def _require(args, *names):
    missing = [f"--{n}" for n in names if getattr(args, n.replace("-", "_")) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s) {', '.join(missing)}")


def _require_files(*paths):
    for p in paths:
        if not Path(p).is_file():
            raise FileNotFoundError(f"input file not found: {p}")


def _subjects(data: Path, role: str | None):
    from .phantom import read_manifest

    manifest = Path(data) / "manifest.txt"
    _require_files(manifest)
    subjects = [s for s in read_manifest(manifest) if role is None or s.role == role]
    for s in subjects:
        _require_files(s.image, s.gt)
    if not subjects:
        raise ValueError(f"{manifest}: no {role} subjects")
    return subjects


# -- subcommands -----------------------------------------------------------

def cmd_phantom(args) -> int:
    from .phantom import PhantomConfig, make_benchmark

    _require(args, "out-dir")
    size = args.size
    cfg = PhantomConfig(size=size, frames=args.frames, center=(size // 2, size // 2), seed=args.seed)
    cfg.validate()
    subjects = make_benchmark(cfg, args.subjects, args.out_dir, args.test_subjects)
    for s in subjects:
        print(f"{s.subject_id} {s.role} {s.image}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    from .patchgen import PatchSpec, save_patchset
    from .phantom import load_subject
    from .pipeline import prepare
    from .volume_io import as_mask, load_volume, save_mask

    _require(args, "data", "patches")
    classes = args.classes or 4
    subjects = _subjects(args.data, "train")
    spec = PatchSpec(args.patch, args.stride)
    ppc = args.patches_per_class or 40_000 // classes
    pairs = [(load_volume(s.image), load_volume(s.gt)) for s in subjects]
    prep = prepare(pairs, classes, spec, args.margin, args.bands, args.band_range, ppc, args.seed)
    save_patchset(prep.pool, args.patches, prep.box, prep.bands)
    alphabet = (0, 1) if classes == 2 else (1, 2, 3, 4)
    stem = Path(args.patches)
    for s, (_, gt), lm in zip(subjects, pairs, prep.label_maps):
        out = stem.parent / f"{stem.name}_labels" / f"{s.subject_id}_labels.vhdr"
        out.parent.mkdir(parents=True, exist_ok=True)
        save_mask(as_mask(lm, gt.spacing, alphabet), out, pgm=args.pgm, alphabet=alphabet)
    b = prep.box
    print(f"box rows {b.row0}..{b.row1} cols {b.col0}..{b.col1}")
    if prep.bands is not None:
        print(f"bands t1={prep.bands[0]} t2={prep.bands[1]}")
    print(f"patches {len(prep.pool)} {prep.pool.class_histogram(np.unique(prep.pool.labels))}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .nn import OptimizerConfig
    from .patchgen import load_patchset, read_patchset_manifest
    from .trainer import TrainConfig, assemble_dataset, save_checkpoint, train, trace_csv

    _require(args, "patches", "checkpoint")
    stem = Path(args.patches)
    _require_files(stem.parent / (stem.name + ".manifest"))
    meta = read_patchset_manifest(stem)
    pool, box = load_patchset(stem)
    inferred = 2 if pool.labels.max() <= 1 else 4
    classes = args.classes or inferred
    if classes != inferred:
        raise ValueError(f"patch labels are {inferred}-class but --classes is {classes}")
    bands = tuple(int(x) for x in meta["bands"].split()) if "bands" in meta else None
    cfg = TrainConfig(
        classes=classes,
        patches_per_class=args.patches_per_class or 40_000 // classes,
        batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
        optimizer=OptimizerConfig(args.optimizer, lr=args.lr), val_fraction=args.val_fraction,
    )
    dataset = assemble_dataset(pool, cfg, box, bands)
    ckpt, trace = train(dataset, cfg)
    Path(args.checkpoint).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, args.checkpoint)
    trace_path = args.trace or Path(str(args.checkpoint) + ".trace.csv")
    Path(trace_path).write_text(trace_csv(trace))
    print(f"checkpoint {args.checkpoint} id {ckpt.checkpoint_id} epoch {ckpt.meta['epoch']} "
          f"val_accuracy {ckpt.meta['val_accuracy']:.4f}")
    return EXIT_OK


def cmd_segment(args) -> int:
    from .segmenter import segment_with_checkpoint, write_overlays
    from .trainer import load_checkpoint
    from .volume_io import load_volume, save_mask

    _require(args, "checkpoint", "out-dir")
    if args.images and args.data:
        raise UsageError("segment: give image files or --data, not both")
    if args.data:
        jobs = [(s.subject_id, s.image) for s in _subjects(args.data, "test")]
    elif args.images:
        jobs = [(Path(p).name.removesuffix(".vhdr").removesuffix("_image"), p) for p in args.images]
    else:
        raise UsageError("segment: no input images (give files or --data)")
    _require_files(args.checkpoint, *(p for _, p in jobs))
    ckpt = load_checkpoint(args.checkpoint)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for sid, path in jobs:
        volume = load_volume(path)
        result = segment_with_checkpoint(ckpt, volume)
        save_mask(result.mask, out_dir / f"{sid}_mask.vhdr", pgm=args.pgm)
        if args.pgm:
            write_overlays(volume, result.mask, out_dir / "overlays" / sid)
        print(f"{sid} {int(result.mask.values.sum())} spine voxels -> {out_dir / (sid + '_mask.vhdr')}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from . import metrics as M
    from .volume_io import load_volume

    if args.pairs and (args.data or args.seg_dir):
        raise UsageError("evaluate: give SEG GT pairs or --data with --seg-dir, not both")
    if args.pairs:
        if len(args.pairs) % 2:
            raise UsageError("evaluate: paths must come in SEG GT pairs")
        it = iter(args.pairs)
        jobs = [(Path(s).name.removesuffix(".vhdr"), s, g) for s, g in zip(it, it)]
    elif args.data and args.seg_dir:
        jobs = [(s.subject_id, Path(args.seg_dir) / f"{s.subject_id}_mask.vhdr", s.gt)
                for s in _subjects(args.data, "test")]
    else:
        raise UsageError("evaluate: give SEG GT pairs or --data with --seg-dir")
    _require_files(*(p for _, s, g in jobs for p in (s, g)))
    reports = {}
    for vid, s_path, g_path in jobs:
        s, g = load_volume(s_path), load_volume(g_path)
        if s.values.shape != g.values.shape:
            raise ValueError(f"{vid}: segmentation and ground truth dimensions differ")
        reports[vid] = M.evaluate_all(s.values > 0, g.values > 0, g.zyx_spacing)
    print(M.format_table(reports))
    flags = sorted(set().union(*(r.flags for r in reports.values())))
    if flags:
        print("conventions applied: " + ", ".join(flags))
    if args.csv:
        Path(args.csv).write_text(M.to_csv(reports))
    if args.min_dice is not None:
        mean_dice = float(np.mean([r.dice for r in reports.values()]))
        if mean_dice < args.min_dice:
            raise ValidationFailure(f"mean Dice {mean_dice:.4f} below {args.min_dice}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .nn import reduced_check

    err = reduced_check(args.seed, args.draws, args.eps, args.classes or 4)
    ok = err < args.tolerance
    print(f"max relative error {err:.3e} ({'PASS' if ok else 'FAIL'} vs {args.tolerance:g})")
    if not ok:
        raise ValidationFailure("gradient check failed")
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom, "prepare": cmd_prepare, "train": cmd_train,
    "segment": cmd_segment, "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck,
}


def _thread_limit(args):
    from threadpoolctl import threadpool_limits

    limit = 1 if args.deterministic else args.threads
    return threadpool_limits(limit) if limit else contextlib.nullcontext()


def run(argv=None) -> int:
    from .distance import EmptySurfaceError
    from .patchgen import EmptyGroundTruthError, GeometryError
    from .trainer import CheckpointError, DivergenceError
    from .volume_io import VolumeFormatError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("spineseg: error: a subcommand is required")
        args = resolve(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"spineseg: {e}", file=sys.stderr)
        return EXIT_DATA

    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit(args):
            return COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except ValidationFailure as e:
        print(f"spineseg {args.command}: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, VolumeFormatError, CheckpointError, GeometryError, EmptyGroundTruthError,
            EmptySurfaceError, DivergenceError, ValueError) as e:
        print(f"spineseg {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
