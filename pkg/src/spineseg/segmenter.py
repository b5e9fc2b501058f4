"""Sliding-window inference and spine-mask reconstruction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distance import surface_voxels
from .nn import Network
from .patchgen import PatchSpec, RoiBox, extract_patches, normalize_patches
from .trainer import Checkpoint, class_ids
from .volume_io import Volume, write_pgm

log = logging.getLogger(__name__)


class NetworkClassifier:
    """Adapts a :class:`Network` to raw (unnormalized) patches."""

    def __init__(self, net: Network, norm_floor: float = 1e-6, batch_size: int = 256):
        self.net = net
        self.norm_floor = norm_floor
        self.batch_size = batch_size

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, batch_size: int = 256) -> "NetworkClassifier":
        floor = ckpt.meta.get("normalization", {}).get("floor", 1e-6)
        return cls(ckpt.network(), floor, batch_size)

    @property
    def n_classes(self) -> int:
        return self.net.n_classes

    def predict_proba(self, patches: np.ndarray) -> np.ndarray:
        out = []
        for i in range(0, len(patches), self.batch_size):
            x = normalize_patches(patches[i:i + self.batch_size], self.norm_floor)
            out.append(self.net.forward(x[..., None]))
        if not out:
            return np.zeros((0, self.n_classes), np.float32)
        return np.concatenate(out)


def segment_frame(classifier, frame, box: RoiBox, spec: PatchSpec = PatchSpec(), classes: int | None = None):
    """Classify the patch around every box pixel on the stride grid.

    ``classifier`` needs ``n_classes`` and ``predict_proba(patches)``.
    Returns ``(class_map, mask)``; pixels outside the box or off the stride
    grid are background.
    """
    classes = classifier.n_classes if classes is None else classes
    if classifier.n_classes != classes:
        raise ValueError(f"classifier has {classifier.n_classes} outputs, mode expects {classes}")
    ids = np.asarray(class_ids(classes), dtype=np.uint8)
    values = np.asarray(getattr(frame, "values", frame))
    ps = extract_patches(values, None, box, spec)
    probs = classifier.predict_proba(ps.gather())
    # argmax returns the first maximum, i.e. the lowest class id on ties
    pred = ids[np.argmax(probs, axis=1)]
    background, spine = ids[0], ids[-1]
    class_map = np.full(values.shape, background, dtype=np.uint8)
    class_map[ps.centers[:, 0], ps.centers[:, 1]] = pred
    return class_map, (class_map == spine).astype(np.uint8)


@dataclass
class SegmentationResult:
    mask: Volume
    class_maps: np.ndarray
    provenance: dict = field(default_factory=dict)


def segment_volume(classifier, volume: Volume, box: RoiBox, spec: PatchSpec = PatchSpec(),
                   classes: int | None = None, provenance: dict | None = None) -> SegmentationResult:
    box.check(volume.height, volume.width, spec)
    maps = np.empty(volume.values.shape, dtype=np.uint8)
    masks = np.empty(volume.values.shape, dtype=np.uint8)
    for k in range(volume.depth):
        maps[k], masks[k] = segment_frame(classifier, volume.values[k], box, spec, classes)
    rs, cs = box.slices()
    inner = masks[:, rs, cs]
    touching = inner[:, 0].any() or inner[:, -1].any() or inner[:, :, 0].any() or inner[:, :, -1].any()
    if touching:
        log.warning("segmented spine touches the ROI box edge; it may extend beyond the box")
    prov = {"box": [box.row0, box.col0, box.rows, box.cols], "patch": [spec.n, spec.s]}
    prov.update(provenance or {})
    return SegmentationResult(Volume(masks, volume.spacing), maps, prov)


def segment_with_checkpoint(ckpt: Checkpoint, volume: Volume, box: RoiBox | None = None) -> SegmentationResult:
    """Segment using the box and patch geometry stored at training time."""
    box = box or ckpt.box
    if box is None:
        raise ValueError("checkpoint carries no ROI box; pass one explicitly")
    clf = NetworkClassifier.from_checkpoint(ckpt)
    return segment_volume(clf, volume, box, ckpt.spec, ckpt.classes,
                          {"checkpoint": ckpt.checkpoint_id, "classes": ckpt.classes})


def write_overlays(volume: Volume, mask: Volume, stem) -> list[Path]:
    """Per-frame PGMs of the input with spine boundary pixels at full intensity."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    v = volume.values.astype(np.float64)
    lo, hi = v.min(), v.max()
    scaled = (v - lo) / (hi - lo) * 254 if hi > lo else np.zeros_like(v)
    out = []
    for k in range(volume.depth):
        img = scaled[k].copy()
        img[surface_voxels(mask.values[k])] = 255
        path = stem.parent / f"{stem.name}_{k:04d}.pgm"
        write_pgm(path, img)
        out.append(path)
    return out
