"""Glue from ground-truth volumes to a labeled, class-balanced patch pool."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .patchgen import (
    PatchSet, PatchSpec, RoiBox, balance_band_widths, class_counts, compute_roi_box,
    extract_patches, generate_label_map,
)
from .trainer import class_ids

log = logging.getLogger(__name__)


@dataclass
class PreparedData:
    pool: PatchSet
    box: RoiBox
    bands: tuple[int, int] | None
    label_maps: list[np.ndarray]


def label_maps_for(gt: np.ndarray, classes: int, bands) -> np.ndarray:
    """Per-frame label maps: banded 1..4 classes, or the 0/1 mask in 2-class mode."""
    if classes == 2:
        return (np.asarray(gt) > 0).astype(np.uint8)
    return np.stack([generate_label_map(f, *bands) for f in gt])


def prepare(pairs, classes: int = 4, spec: PatchSpec = PatchSpec(), margin: int = 6,
            bands="auto", search_range=(1, 16), patches_per_class: int | None = None,
            seed: int = 0) -> PreparedData:
    """Label every box pixel of every training frame and sample per class.

    ``pairs`` is a sequence of ``(image, gt)`` volumes.  With
    ``patches_per_class`` set, at most that many centers are kept per class
    (seeded, without replacement); pixels are copied only later, on gather.
    """
    pairs = list(pairs)
    gts = np.concatenate([np.asarray(gt.values) for _, gt in pairs])
    box = compute_roi_box(gts, margin, spec)
    if classes == 4:
        if bands == "auto":
            bands = balance_band_widths(gts, box, search_range)
            log.info("band widths chosen by balancing: t1=%d t2=%d", *bands)
        bands = tuple(int(b) for b in bands)
    else:
        bands = None

    sets, maps = [], []
    for image, gt in pairs:
        lm = label_maps_for(gt.values, classes, bands)
        maps.append(lm)
        for k in range(image.depth):
            sets.append(extract_patches(image.values[k], lm[k], box, spec))
    pool = PatchSet.concat(sets)
    if classes == 4:
        counts = class_counts(np.concatenate(maps), box, 4)
        log.info("class pixel counts inside box: %s", dict(zip(range(1, 5), counts.tolist())))
    if patches_per_class is not None:
        rng = np.random.default_rng(seed)
        keep = []
        for c in class_ids(classes):
            ix = np.flatnonzero(pool.labels == c)
            keep.append(np.sort(rng.permutation(ix)[:patches_per_class]))
        pool = pool.subset(np.concatenate(keep))
    return PreparedData(pool, box, bands, maps)
