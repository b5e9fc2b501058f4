"""ROI box, redundant-class label maps and n x n patch extraction.

Label maps use class 1 for background, the highest id for spine, and one
class per distance band in between (inner band next to the spine).  With
the default two bands the classes are 1 background, 2 outer band, 3 inner
band, 4 spine.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .distance import squared_edt

log = logging.getLogger(__name__)

BACKGROUND = 1
SPINE = 4


class GeometryError(ValueError):
    pass


class EmptyGroundTruthError(ValueError):
    pass


@dataclass(frozen=True)
class PatchSpec:
    n: int = 32
    s: int = 1

    def __post_init__(self):
        if self.n < 1 or self.s < 1:
            raise ValueError(f"patch size and stride must be >= 1, got n={self.n} s={self.s}")

    @property
    def half(self) -> int:
        # offset of the center from the patch top-left
        return self.n // 2

    @property
    def edge(self) -> int:
        return math.ceil(self.n / 2)


@dataclass(frozen=True)
class RoiBox:
    row0: int
    col0: int
    rows: int
    cols: int

    @property
    def row1(self) -> int:
        """Last row, inclusive."""
        return self.row0 + self.rows - 1

    @property
    def col1(self) -> int:
        return self.col0 + self.cols - 1

    @property
    def area(self) -> int:
        return self.rows * self.cols

    def slices(self) -> tuple[slice, slice]:
        return slice(self.row0, self.row0 + self.rows), slice(self.col0, self.col0 + self.cols)

    def check(self, height: int, width: int, spec: PatchSpec | None = None) -> None:
        """Raise ``GeometryError`` unless every patch centered in the box fits the frame."""
        if self.rows < 1 or self.cols < 1:
            raise GeometryError(f"empty box {self}")
        lo_r, lo_c = self.row0, self.col0
        hi_r, hi_c = self.row1, self.col1
        if spec is not None:
            lo_r -= spec.half
            lo_c -= spec.half
            hi_r += spec.n - 1 - spec.half
            hi_c += spec.n - 1 - spec.half
        if lo_r < 0 or lo_c < 0 or hi_r >= height or hi_c >= width:
            what = f"patches of size {spec.n}" if spec else "box"
            raise GeometryError(f"{what} around {self} leave the {height}x{width} frame")


def compute_roi_box(gt, margin: int, spec: PatchSpec = PatchSpec()) -> RoiBox:
    """Bounding box of all spine pixels over all frames, grown by ``margin``.

    The box is clamped so every edge keeps at least ``ceil(n/2)`` pixels to
    the frame edge; a warning is logged when that cuts off spine pixels.
    """
    gt = np.asarray(gt)
    if gt.ndim == 2:
        gt = gt[None]
    spine = gt.any(axis=0)
    if not spine.any():
        raise EmptyGroundTruthError("ground truth contains no spine pixels")
    height, width = spine.shape
    rows = np.flatnonzero(spine.any(axis=1))
    cols = np.flatnonzero(spine.any(axis=0))
    r0, r1 = rows[0] - margin, rows[-1] + margin
    c0, c1 = cols[0] - margin, cols[-1] + margin
    e = spec.edge
    if height - 1 - e < e or width - 1 - e < e:
        raise GeometryError(f"{height}x{width} frame too small for patch size {spec.n}")
    # clipping both ends keeps r0 <= r1; a box entirely past a limit
    # collapses onto the limit line
    r0, r1 = np.clip([r0, r1], e, height - 1 - e)
    c0, c1 = np.clip([c0, c1], e, width - 1 - e)
    box = RoiBox(int(r0), int(c0), int(r1 - r0 + 1), int(c1 - c0 + 1))
    outside = spine.sum() - spine[box.slices()].sum()
    if outside:
        log.warning("%d spine pixel(s) fall outside the clamped ROI box %s", outside, box)
    return box


def _band_classes(k: int) -> list[int]:
    # class ids for bands, inner to outer
    return list(range(k + 1, 1, -1))


def spine_class(n_bands: int = 2) -> int:
    return n_bands + 2


def generate_label_map(gt_frame, t1, t2=None) -> np.ndarray:
    """Class map from a binary spine frame by Euclidean distance banding.

    ``t1``/``t2`` are the inner/outer band widths in pixels.  A sequence may
    be passed as ``t1`` instead (``t2=None``) for any number of bands.
    """
    widths = list(t1) if t2 is None else [t1, t2]
    if any(w <= 0 for w in widths):
        raise ValueError(f"band widths must be positive, got {widths}")
    gt_frame = np.asarray(gt_frame).astype(bool)
    out = np.full(gt_frame.shape, BACKGROUND, dtype=np.uint8)
    if not gt_frame.any():
        return out
    d2 = squared_edt(gt_frame)
    edges = np.cumsum(widths, dtype=np.float64)
    # outer bands first so inner ones overwrite
    for cls, edge in reversed(list(zip(_band_classes(len(widths)), edges))):
        out[d2 <= edge * edge] = cls
    out[gt_frame] = spine_class(len(widths))
    return out


def _squared_distance_histograms(gt, box: RoiBox, max_d2: int) -> tuple[int, np.ndarray]:
    """Spine pixel count and histogram of integer squared distance inside ``box``."""
    gt = np.asarray(gt).astype(bool)
    if gt.ndim == 2:
        gt = gt[None]
    rs, cs = box.slices()
    n_spine = 0
    hist = np.zeros(max_d2 + 1, dtype=np.int64)
    for frame in gt:
        if not frame.any():
            continue
        d2 = squared_edt(frame)[rs, cs]
        n_spine += int(frame[rs, cs].sum())
        vals = d2[(d2 > 0) & (d2 <= max_d2)]
        hist += np.bincount(np.rint(vals).astype(np.int64), minlength=max_d2 + 1)
    return n_spine, hist


def _as_range(r):
    if isinstance(r, int):
        return (r, r)
    lo, hi = r
    return int(lo), int(hi)


def balance_band_widths(gt, box: RoiBox, search_range=(1, 16)) -> tuple[int, int]:
    """Band widths in ``search_range`` giving the most even classes 2, 3, 4.

    ``search_range`` is ``(lo, hi)`` for both widths or a pair of such ranges.
    The objective is max/min pixel count over the three classes inside the
    box, summed over frames.  Ties go to the smaller ``t1 + t2``, then the
    smaller ``t1``.
    """
    if len(search_range) == 2 and all(isinstance(x, (int, np.integer)) for x in search_range):
        r1 = r2 = _as_range(search_range)
    else:
        r1, r2 = (_as_range(r) for r in search_range)
    for lo, hi in (r1, r2):
        if not 1 <= lo <= hi <= 64:
            raise ValueError(f"search range {lo}..{hi} must lie within 1..64")
    max_d2 = (r1[1] + r2[1]) ** 2
    n_spine, hist = _squared_distance_histograms(gt, box, max_d2)
    if n_spine == 0:
        raise EmptyGroundTruthError("ground truth has no spine pixels inside the box")
    cum = np.cumsum(hist)  # cum[q] = pixels with 0 < d^2 <= q
    best = None
    for t1 in range(r1[0], r1[1] + 1):
        inner = int(cum[t1 * t1])
        for t2 in range(r2[0], r2[1] + 1):
            outer = int(cum[(t1 + t2) ** 2]) - inner
            counts = (outer, inner, n_spine)
            ratio = math.inf if min(counts) == 0 else max(counts) / min(counts)
            key = (ratio, t1 + t2, t1)
            if best is None or key < best[0]:
                best = (key, (t1, t2))
    return best[1]


def class_counts(label_maps, box: RoiBox, n_classes: int = 4) -> np.ndarray:
    """Pixel count per class id ``1..n_classes`` inside the box."""
    lm = np.asarray(label_maps)
    if lm.ndim == 2:
        lm = lm[None]
    rs, cs = box.slices()
    return np.bincount(lm[:, rs, cs].ravel(), minlength=n_classes + 1)[1:]


def label_patch_2class(gt_frame, center) -> int:
    r, c = center
    gt_frame = np.asarray(gt_frame)
    if not (0 <= r < gt_frame.shape[0] and 0 <= c < gt_frame.shape[1]):
        raise IndexError(f"center {center} outside {gt_frame.shape} frame")
    return int(bool(gt_frame[r, c]))


@dataclass
class PatchSet:
    """Patches addressed by (frame, center) into a stack of source frames.

    Pixels are only copied out on :meth:`gather`, so large candidate pools
    cost one int per patch plus the source frames.
    """

    source: np.ndarray      # (F, H, W) float32
    frame_ids: np.ndarray   # (P,) index into source
    centers: np.ndarray     # (P, 2) row, col
    labels: np.ndarray | None
    spec: PatchSpec

    def __len__(self) -> int:
        return len(self.frame_ids)

    def gather(self, idx=None) -> np.ndarray:
        """Patch pixels as ``(k, n, n)`` float32."""
        if idx is None:
            idx = np.arange(len(self))
        idx = np.asarray(idx)
        windows = sliding_window_view(self.source, (self.spec.n, self.spec.n), axis=(1, 2))
        r = self.centers[idx, 0] - self.spec.half
        c = self.centers[idx, 1] - self.spec.half
        return np.ascontiguousarray(windows[self.frame_ids[idx], r, c], dtype=np.float32)

    @property
    def patches(self) -> np.ndarray:
        return self.gather()

    def subset(self, idx) -> "PatchSet":
        idx = np.asarray(idx)
        return PatchSet(
            self.source, self.frame_ids[idx], self.centers[idx],
            None if self.labels is None else self.labels[idx], self.spec,
        )

    def class_histogram(self, classes) -> dict[int, int]:
        return {int(c): int(np.count_nonzero(self.labels == c)) for c in classes}

    @staticmethod
    def concat(sets) -> "PatchSet":
        sets = list(sets)
        if not sets:
            raise ValueError("nothing to concatenate")
        spec = sets[0].spec
        if any(s.spec != spec for s in sets):
            raise ValueError("patch specs differ")
        offsets = np.cumsum([0] + [len(s.source) for s in sets[:-1]])
        labeled = [s.labels is not None for s in sets]
        if any(labeled) and not all(labeled):
            raise ValueError("cannot mix labeled and unlabeled patch sets")
        return PatchSet(
            np.concatenate([s.source for s in sets]).astype(np.float32, copy=False),
            np.concatenate([s.frame_ids + off for s, off in zip(sets, offsets)]),
            np.concatenate([s.centers for s in sets]),
            np.concatenate([s.labels for s in sets]) if all(labeled) else None,
            spec,
        )


def box_centers(box: RoiBox, spec: PatchSpec) -> np.ndarray:
    rows = box.row0 + spec.s * np.arange((box.rows - 1) // spec.s + 1)
    cols = box.col0 + spec.s * np.arange((box.cols - 1) // spec.s + 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def extract_patches(frame, label_map, box: RoiBox, spec: PatchSpec = PatchSpec()) -> PatchSet:
    """All patches centered on the stride grid of ``box``, labeled by center pixel."""
    values = np.asarray(getattr(frame, "values", frame), dtype=np.float32)
    box.check(*values.shape, spec)
    centers = box_centers(box, spec)
    labels = None
    if label_map is not None:
        labels = np.asarray(label_map)[centers[:, 0], centers[:, 1]].astype(np.uint8)
    return PatchSet(values[None], np.zeros(len(centers), dtype=np.int64), centers, labels, spec)


def normalize_patches(patches: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Map each patch to zero mean and unit standard deviation."""
    p = np.asarray(patches, dtype=np.float32)
    axes = tuple(range(1, p.ndim))
    mean = p.mean(axis=axes, keepdims=True)
    std = p.std(axis=axes, keepdims=True)
    return (p - mean) / np.maximum(std, floor)


def _sibling(stem, ext: str) -> Path:
    stem = Path(stem)
    return stem.parent / (stem.name + ext)


def save_patchset(ps: PatchSet, stem, box: RoiBox | None = None, bands=None) -> None:
    """Manifest text + f32 patch tensor + u8 label array."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    patches = ps.gather()
    patches.astype("<f4").tofile(_sibling(stem, ".patches.f32"))
    labels = ps.labels if ps.labels is not None else np.zeros(len(ps), np.uint8)
    labels.astype(np.uint8).tofile(_sibling(stem, ".labels.u8"))
    lines = [
        f"count = {len(ps)}",
        f"patch_size = {ps.spec.n}",
        f"stride = {ps.spec.s}",
        f"labeled = {int(ps.labels is not None)}",
    ]
    if box is not None:
        lines.append(f"box = {box.row0} {box.col0} {box.rows} {box.cols}")
    if bands is not None:
        lines.append("bands = " + " ".join(str(int(b)) for b in bands))
    if ps.labels is not None:
        hist = np.bincount(ps.labels, minlength=1)
        lines.append("class_counts = " + " ".join(f"{c}:{n}" for c, n in enumerate(hist) if n))
    _sibling(stem, ".manifest").write_text("\n".join(lines) + "\n")


def read_patchset_manifest(stem) -> dict[str, str]:
    meta = {}
    for line in _sibling(Path(stem), ".manifest").read_text().splitlines():
        if line.strip():
            k, v = (s.strip() for s in line.split("=", 1))
            meta[k] = v
    return meta


def load_patchset(stem) -> tuple[PatchSet, RoiBox | None]:
    stem = Path(stem)
    meta = read_patchset_manifest(stem)
    count, n = int(meta["count"]), int(meta["patch_size"])
    spec = PatchSpec(n, int(meta["stride"]))
    patches = np.fromfile(_sibling(stem, ".patches.f32"), dtype="<f4")
    labels = np.fromfile(_sibling(stem, ".labels.u8"), dtype=np.uint8)
    if patches.size != count * n * n or labels.size != count:
        raise ValueError(f"{stem}: patch data does not match manifest count {count}")
    patches = patches.reshape(count, n, n).astype(np.float32)
    # each stored patch becomes its own source frame, centered at (n//2, n//2)
    centers = np.full((count, 2), spec.half, dtype=np.int64)
    box = None
    if "box" in meta:
        box = RoiBox(*(int(x) for x in meta["box"].split()))
    ps = PatchSet(patches, np.arange(count), centers,
                  labels if meta["labeled"] == "1" else None, spec)
    return ps, box
