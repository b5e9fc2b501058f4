"""Balanced dataset assembly, the training loop, and checkpoints.

Checkpoint layout (all integers little-endian)::

    b"VSEG" | u16 version | u32 descriptor length | descriptor (UTF-8 JSON)
    | parameters as f32, in descriptor order | u32 CRC-32 of everything before
"""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Architecture, Network, OptimizerConfig, OptimizerState, optimizer_step
from .patchgen import PatchSet, PatchSpec, RoiBox, normalize_patches

log = logging.getLogger(__name__)

MAGIC = b"VSEG"
VERSION = 1
_HEAD = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


class CrcMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class DivergenceError(RuntimeError):
    pass


def class_ids(classes: int) -> list[int]:
    """Label values in network-output order (index i predicts class_ids[i])."""
    if classes == 2:
        return [0, 1]
    if classes == 4:
        return [1, 2, 3, 4]
    raise ValueError(f"classes must be 2 or 4, got {classes}")


def spine_index(classes: int) -> int:
    return class_ids(classes).index(1 if classes == 2 else 4)


@dataclass
class TrainConfig:
    classes: int = 4
    patches_per_class: int = 10_000
    batch_size: int = 64
    epochs: int = 3
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    val_fraction: float = 0.1
    norm_floor: float = 1e-6

    def __post_init__(self):
        class_ids(self.classes)
        if min(self.patches_per_class, self.batch_size, self.epochs) < 1:
            raise ValueError("patches_per_class, batch_size and epochs must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")


@dataclass
class Dataset:
    train: PatchSet
    val: PatchSet
    classes: int
    box: RoiBox | None = None
    bands: tuple[int, ...] | None = None

    def label_indices(self, ps: PatchSet) -> np.ndarray:
        lookup = np.full(256, -1, dtype=np.int64)
        lookup[class_ids(self.classes)] = np.arange(self.classes)
        idx = lookup[ps.labels]
        if (idx < 0).any():
            raise ValueError("patch labels outside the configured class set")
        return idx


def assemble_dataset(patch_sets, cfg: TrainConfig, box: RoiBox | None = None, bands=None) -> Dataset:
    """Equal-count per-class sample, split stratified into train and validation.

    A class with fewer than ``patches_per_class`` patches lowers every class
    to its count, with a warning.
    """
    pool = PatchSet.concat(patch_sets) if isinstance(patch_sets, (list, tuple)) else patch_sets
    if pool.labels is None:
        raise ValueError("training patches must be labeled")
    ids = class_ids(cfg.classes)
    by_class = [np.flatnonzero(pool.labels == c) for c in ids]
    counts = [len(ix) for ix in by_class]
    if min(counts) == 0:
        missing = [c for c, n in zip(ids, counts) if n == 0]
        raise ValueError(f"no patches for class(es) {missing}")
    per_class = min(cfg.patches_per_class, min(counts))
    if per_class < cfg.patches_per_class:
        log.warning("only %d patches available for some class; using %d per class (requested %d)",
                    min(counts), per_class, cfg.patches_per_class)
    n_val = max(1, int(round(cfg.val_fraction * per_class)))
    if n_val >= per_class:
        raise ValueError(f"{per_class} patches per class is too few for a validation split")
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = [], []
    for ix in by_class:
        pick = rng.permutation(ix)[:per_class]
        val_idx.append(pick[:n_val])
        train_idx.append(pick[n_val:])
    return Dataset(
        pool.subset(np.concatenate(train_idx)),
        pool.subset(np.concatenate(val_idx)),
        cfg.classes, box, None if bands is None else tuple(bands),
    )


@dataclass
class Checkpoint:
    arch: Architecture
    params: dict
    meta: dict = field(default_factory=dict)

    @property
    def classes(self) -> int:
        return self.arch.classes

    def network(self) -> Network:
        return Network(self.arch, {k: v.copy() for k, v in self.params.items()}, np.float32)

    @property
    def box(self) -> RoiBox | None:
        b = self.meta.get("box")
        return None if b is None else RoiBox(*b)

    @property
    def spec(self) -> PatchSpec:
        return PatchSpec(*self.meta.get("patch", (self.arch.input_size, 1)))

    def to_bytes(self) -> bytes:
        desc = {
            "architecture": self.arch.to_dict(),
            "classes": self.classes,
            "params": [[name, list(shape)] for name, shape in self.arch.param_shapes()],
            "meta": self.meta,
        }
        desc_bytes = json.dumps(desc, sort_keys=True).encode("utf-8")
        body = [_HEAD.pack(MAGIC, VERSION, len(desc_bytes)), desc_bytes]
        for name, _ in self.arch.param_shapes():
            body.append(np.ascontiguousarray(self.params[name], dtype="<f4").tobytes())
        blob = b"".join(body)
        return blob + struct.pack("<I", zlib.crc32(blob))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < _HEAD.size + 4:
            raise TruncatedCheckpointError(f"checkpoint is only {len(data)} bytes")
        magic, version, desc_len = _HEAD.unpack_from(data)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        if version != VERSION:
            raise UnsupportedVersionError(f"checkpoint version {version} (supported: {VERSION})")
        start = _HEAD.size + desc_len
        if len(data) < start + 4:
            raise TruncatedCheckpointError("checkpoint ends inside the descriptor")

        def crc_ok():
            return zlib.crc32(data[:-4]) == struct.unpack("<I", data[-4:])[0]

        try:
            desc = json.loads(data[_HEAD.size:start].decode("utf-8"))
            arch = Architecture(**desc["architecture"])
            shapes = [(n, tuple(s)) for n, s in desc["params"]]
        except (ValueError, KeyError, TypeError) as exc:
            if not crc_ok():
                raise CrcMismatchError("checkpoint CRC mismatch") from None
            raise CheckpointError(f"malformed descriptor: {exc}") from None
        n_floats = sum(math.prod(s) for _, s in shapes)
        expected = start + 4 * n_floats + 4
        if len(data) < expected:
            raise TruncatedCheckpointError(f"checkpoint has {len(data)} bytes, expected {expected}")
        if len(data) > expected:
            raise CheckpointError(f"checkpoint has {len(data) - expected} trailing bytes")
        if not crc_ok():
            raise CrcMismatchError("checkpoint CRC mismatch")
        if shapes != arch.param_shapes() or desc["classes"] != arch.classes:
            raise CheckpointError("parameter list does not match the architecture descriptor")
        params, off = {}, start
        for name, shape in shapes:
            size = math.prod(shape)
            params[name] = np.frombuffer(data, "<f4", size, off).reshape(shape).astype(np.float32)
            off += 4 * size
        return cls(arch, params, desc["meta"])

    @property
    def checkpoint_id(self) -> str:
        return f"{zlib.crc32(self.to_bytes()):08x}"


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    val_accuracy: float


def _batches_proba(net: Network, x: np.ndarray, batch: int = 256) -> np.ndarray:
    return np.concatenate([net.forward(x[i:i + batch]) for i in range(0, len(x), batch)])


def train(dataset: Dataset, cfg: TrainConfig, arch: Architecture | None = None):
    """Train from scratch; returns the best-validation checkpoint and per-epoch stats."""
    if len(dataset.train) == 0 or len(dataset.val) == 0:
        raise ValueError("empty dataset")
    if dataset.classes != cfg.classes:
        raise ValueError(f"dataset has {dataset.classes} classes, config {cfg.classes}")
    arch = arch or Architecture(input_size=dataset.train.spec.n, classes=cfg.classes)
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    init_rng, order_rng, drop_rng = (np.random.default_rng(s) for s in seeds)
    net = Network.init(arch, init_rng)

    x_train = normalize_patches(dataset.train.gather(), cfg.norm_floor)[..., None]
    y_train = dataset.label_indices(dataset.train)
    x_val = normalize_patches(dataset.val.gather(), cfg.norm_floor)[..., None]
    y_val = dataset.label_indices(dataset.val)

    state = OptimizerState()
    trace: list[EpochStats] = []
    best = None
    n = len(x_train)
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(n)
        losses = []
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            loss, grads, _ = net.loss_and_grads(x_train[idx], y_train[idx], train=True, rng=drop_rng)
            if not math.isfinite(loss):
                raise DivergenceError(f"loss became {loss} in epoch {epoch}")
            optimizer_step(net.params, grads, cfg.optimizer, state)
            losses.append(loss * len(idx))
        mean_loss = float(np.sum(losses) / n)
        val_acc = float(np.mean(_batches_proba(net, x_val).argmax(axis=1) == y_val))
        trace.append(EpochStats(epoch, mean_loss, val_acc))
        log.info("epoch %d: loss %.5f, val accuracy %.4f", epoch, mean_loss, val_acc)
        if best is None or val_acc > best[0]:
            best = (val_acc, epoch, mean_loss, {k: v.copy() for k, v in net.params.items()})

    val_acc, epoch, mean_loss, params = best
    meta = {
        "seed": cfg.seed,
        "epoch": epoch,
        "final_loss": mean_loss,
        "val_accuracy": val_acc,
        "epochs_run": cfg.epochs,
        "patch": [dataset.train.spec.n, dataset.train.spec.s],
        "normalization": {"kind": "per-patch-standardize", "floor": cfg.norm_floor},
    }
    if dataset.box is not None:
        b = dataset.box
        meta["box"] = [b.row0, b.col0, b.rows, b.cols]
    if dataset.bands is not None:
        meta["bands"] = list(dataset.bands)
    return Checkpoint(arch, params, meta), trace


def trace_csv(trace) -> str:
    lines = ["epoch,mean_loss,val_accuracy"]
    lines += [f"{t.epoch},{t.mean_loss!r},{t.val_accuracy!r}" for t in trace]
    return "\n".join(lines) + "\n"
