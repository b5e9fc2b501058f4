"""Segmentation evaluation: overlap, confusion-matrix and surface-distance measures.

Degenerate inputs (empty masks, zero MCC denominator) never produce NaN.
They fall back to a fixed value and the name of the convention used is
recorded in ``MetricReport.flags``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .distance import EmptySurfaceError, distance_transform, surface_voxels

METRIC_NAMES = (
    "dice", "jaccard", "vs", "sensitivity", "specificity",
    "os", "us", "accuracy", "mcc", "msd", "hd", "gce",
)
METRIC_LABELS = {
    "dice": "DC", "jaccard": "Jaccard", "vs": "VS", "sensitivity": "Sensitivity",
    "specificity": "Specificity", "os": "OS(%)", "us": "US(%)", "accuracy": "Accuracy(%)",
    "mcc": "MCC", "msd": "MSD(mm)", "hd": "HD(mm)", "gce": "GCE",
}


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _binary(a) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != bool:
        if not np.isin(a, (0, 1)).all():
            raise ValueError("expected a binary mask")
        a = a.astype(bool)
    return a


def _check_dims(s, gt):
    if s.shape != gt.shape:
        raise ValueError(f"dimension mismatch: {s.shape} vs {gt.shape}")


def confusion(s, gt) -> ConfusionMatrix:
    s, gt = _binary(s), _binary(gt)
    _check_dims(s, gt)
    tp = int(np.count_nonzero(s & gt))
    fp = int(np.count_nonzero(s & ~gt))
    fn = int(np.count_nonzero(~s & gt))
    return ConfusionMatrix(tp, fp, s.size - tp - fp - fn, fn)


def _flag(flags, name):
    if flags is not None:
        flags.add(name)


def dice(cm: ConfusionMatrix, flags: set | None = None) -> float:
    denom = 2 * cm.tp + cm.fp + cm.fn
    if denom == 0:
        _flag(flags, "dice:both-empty=1")
        return 1.0
    return 2 * cm.tp / denom


def jaccard(cm: ConfusionMatrix, flags: set | None = None) -> float:
    denom = cm.tp + cm.fp + cm.fn
    if denom == 0:
        _flag(flags, "jaccard:both-empty=1")
        return 1.0
    return cm.tp / denom


def volumetric_similarity(cm: ConfusionMatrix, flags: set | None = None) -> float:
    denom = 2 * cm.tp + cm.fp + cm.fn
    if denom == 0:
        _flag(flags, "vs:both-empty=1")
        return 1.0
    return 1.0 - abs(cm.fp - cm.fn) / denom


def sensitivity(cm: ConfusionMatrix, flags: set | None = None) -> float:
    if cm.tp + cm.fn == 0:
        _flag(flags, "sensitivity:no-positives=0")
        return 0.0
    return cm.tp / (cm.tp + cm.fn)


def specificity(cm: ConfusionMatrix, flags: set | None = None) -> float:
    if cm.tn + cm.fp == 0:
        _flag(flags, "specificity:no-negatives=0")
        return 0.0
    return cm.tn / (cm.tn + cm.fp)


def over_under_segmentation(cm: ConfusionMatrix, flags: set | None = None) -> tuple[float, float]:
    """Over- and under-segmentation, in percent of ``|S| + |GT|``."""
    denom = 2 * cm.tp + cm.fp + cm.fn
    if denom == 0:
        _flag(flags, "os_us:both-empty=0")
        return 0.0, 0.0
    return 200.0 * cm.fp / denom, 200.0 * cm.fn / denom


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("accuracy of an empty volume")
    return 100.0 * (cm.tp + cm.tn) / cm.total


def mcc(cm: ConfusionMatrix, flags: set | None = None) -> float:
    # python ints: the product of four counts overflows int64 on big volumes
    prod = (cm.tp + cm.fn) * (cm.tp + cm.fp) * (cm.tn + cm.fp) * (cm.tn + cm.fn)
    if prod == 0:
        _flag(flags, "mcc:zero-denominator=0")
        return 0.0
    return (cm.tp * cm.tn - cm.fp * cm.fn) / math.sqrt(prod)


def surface_extract(mask) -> np.ndarray:
    """Surface voxel coordinates, shape ``(n_s, ndim)``, in index order."""
    return np.argwhere(surface_voxels(_binary(mask)))


def _directed_surface_distances(a, b, spacing):
    """Distances from each surface voxel of ``a`` to the surface of ``b``."""
    surf_a = surface_voxels(a)
    if not surf_a.any():
        raise EmptySurfaceError("first mask has no surface voxels")
    field_b = distance_transform(b, spacing)
    return field_b[surf_a]


def _prep(s, gt, spacing):
    s, gt = _binary(s), _binary(gt)
    _check_dims(s, gt)
    if spacing is None:
        spacing = (1.0,) * s.ndim
    return s, gt, spacing


def mean_surface_distance(s, gt, spacing=None, symmetric: bool = False) -> float:
    """Mean distance from the surface of ``s`` to the surface of ``gt``.

    ``spacing`` is given per array axis (``(sz, sy, sx)`` for a volume).
    With ``symmetric`` the two directed means are averaged.
    """
    s, gt, spacing = _prep(s, gt, spacing)
    d_sg = _directed_surface_distances(s, gt, spacing).mean()
    if not symmetric:
        return float(d_sg)
    d_gs = _directed_surface_distances(gt, s, spacing).mean()
    return float(0.5 * (d_sg + d_gs))


def hausdorff(s, gt, spacing=None) -> float:
    s, gt, spacing = _prep(s, gt, spacing)
    h_sg = _directed_surface_distances(s, gt, spacing).max()
    h_gs = _directed_surface_distances(gt, s, spacing).max()
    return float(max(h_sg, h_gs))


def _refinement_error_sum(a, b) -> float:
    # sum over voxels of |R(a,x) \ R(b,x)| / |R(a,x)|, grouped by label pair
    total = 0.0
    for la in (False, True):
        in_a = a == la
        size_a = int(np.count_nonzero(in_a))
        if size_a == 0:
            continue
        for lb in (False, True):
            n_ab = int(np.count_nonzero(in_a & (b == lb)))
            total += n_ab * (size_a - n_ab) / size_a
    return total


def gce(s, gt) -> float:
    """Global consistency error between two binary partitions."""
    s, gt = _binary(s), _binary(gt)
    _check_dims(s, gt)
    if s.size == 0:
        raise ValueError("GCE of an empty volume")
    return min(_refinement_error_sum(s, gt), _refinement_error_sum(gt, s)) / s.size


@dataclass
class MetricReport:
    dice: float
    jaccard: float
    vs: float
    sensitivity: float
    specificity: float
    os: float
    us: float
    accuracy: float
    mcc: float
    msd: float
    hd: float
    gce: float
    msd_symmetric: float = float("nan")
    confusion: ConfusionMatrix | None = None
    flags: frozenset = field(default_factory=frozenset)

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, k) for k in METRIC_NAMES)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(METRIC_NAMES, self.values()))


def evaluate_all(s, gt, spacing=None) -> MetricReport:
    """All twelve measures for one (segmentation, ground truth) pair.

    MSD is the directed S-to-GT mean; the symmetric mean is kept alongside.
    Raises ``EmptySurfaceError`` when either mask is empty.
    """
    s, gt, spacing = _prep(s, gt, spacing)
    flags: set[str] = set()
    cm = confusion(s, gt)
    os_, us_ = over_under_segmentation(cm, flags)
    d_sg = _directed_surface_distances(s, gt, spacing)
    d_gs = _directed_surface_distances(gt, s, spacing)
    return MetricReport(
        dice=dice(cm, flags),
        jaccard=jaccard(cm, flags),
        vs=volumetric_similarity(cm, flags),
        sensitivity=sensitivity(cm, flags),
        specificity=specificity(cm, flags),
        os=os_,
        us=us_,
        accuracy=accuracy(cm),
        mcc=mcc(cm, flags),
        msd=float(d_sg.mean()),
        hd=float(max(d_sg.max(), d_gs.max())),
        gce=gce(s, gt),
        msd_symmetric=float(0.5 * (d_sg.mean() + d_gs.mean())),
        confusion=cm,
        flags=frozenset(flags),
    )


def summarize(reports) -> tuple[dict[str, float], dict[str, float]]:
    """Per-metric mean and sample standard deviation over several reports."""
    arr = np.array([r.values() for r in reports], dtype=np.float64)
    if len(arr) == 0:
        raise ValueError("no reports to summarize")
    mean = arr.mean(axis=0)
    sd = arr.std(axis=0, ddof=1) if len(arr) > 1 else np.zeros(len(METRIC_NAMES))
    return dict(zip(METRIC_NAMES, mean)), dict(zip(METRIC_NAMES, sd))


def format_table(reports: dict[str, MetricReport]) -> str:
    """Aligned text table, one row per volume plus mean and SD rows."""
    names = list(reports)
    width = max([len("volume"), len("SD")] + [len(n) for n in names])
    head = "volume".ljust(width) + "".join(f"{METRIC_LABELS[k]:>13}" for k in METRIC_NAMES)
    lines = [head]
    for name, r in reports.items():
        lines.append(name.ljust(width) + "".join(f"{v:13.6f}" for v in r.values()))
    mean, sd = summarize(reports.values())
    lines.append("mean".ljust(width) + "".join(f"{mean[k]:13.6f}" for k in METRIC_NAMES))
    lines.append("SD".ljust(width) + "".join(f"{sd[k]:13.6f}" for k in METRIC_NAMES))
    return "\n".join(lines)


def to_csv(reports: dict[str, MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["volume_id", *METRIC_NAMES])
    for name, r in reports.items():
        w.writerow([name, *(repr(float(v)) for v in r.values())])
    mean, sd = summarize(reports.values())
    w.writerow(["mean", *(repr(float(mean[k])) for k in METRIC_NAMES)])
    w.writerow(["sd", *(repr(float(sd[k])) for k in METRIC_NAMES)])
    return buf.getvalue()


def from_csv(text: str) -> dict[str, tuple[float, ...]]:
    """Parse rows written by :func:`to_csv` (summary rows included)."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["volume_id", *METRIC_NAMES]:
        raise ValueError("not a metric report CSV")
    return {r[0]: tuple(float(v) for v in r[1:]) for r in rows[1:]}
