"""Synthetic spine-like CT volumes with known ground truth.

Each frame holds an elliptical spine cross-section with a posterior
process, and optionally rib arcs beside it.  Ribs have exactly the spine
intensity, so a classifier that looks at brightness alone confuses them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .distance import edt
from .volume_io import Volume, load_volume, save_volume

log = logging.getLogger(__name__)

MIN_EDGE = 16


class PhantomConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 256
    frames: int = 64
    spacing: tuple[float, float, float] = (0.75, 0.75, 1.25)
    center: tuple[int, int] = (128, 128)
    drift: float = 3.0                       # max center wander, pixels
    radii: tuple[float, float] = (8.0, 11.0)
    process_length: tuple[float, float] = (5.0, 9.0)
    process_width: float = 5.0
    ribs: int = 2
    rib_thickness: float = 3.0
    rib_gap: tuple[float, float] = (2.0, 6.0)  # spine edge to rib, pixels
    rib_span_deg: float = 40.0
    rib_frame_fraction: float = 0.5
    spine_intensity: float = 1000.0
    background: float = 200.0
    texture: float = 60.0
    noise_sigma: float = 40.0
    seed: int = 0

    def extent(self) -> float:
        """Largest possible distance from the nominal center to a spine pixel."""
        return self.drift + self.radii[1] + self.process_length[1] + 1

    def validate(self) -> None:
        if self.size < 2 * MIN_EDGE + 1 or self.frames < 1:
            raise PhantomConfigError("frame size or count too small")
        if not 0 < self.radii[0] <= self.radii[1]:
            raise PhantomConfigError(f"bad radii range {self.radii}")
        if self.ribs < 0 or self.rib_thickness <= 0 or self.rib_gap[0] < 1:
            raise PhantomConfigError("bad rib settings")
        if self.noise_sigma < 0:
            raise PhantomConfigError("noise sigma must be >= 0")
        r, c = self.center
        reach = self.extent()
        lo, hi = MIN_EDGE, self.size - 1 - MIN_EDGE
        if r - reach < lo or r + reach > hi or c - reach < lo or c + reach > hi:
            raise PhantomConfigError("spine can come closer than 16 pixels to the frame edge")
        rib_reach = self.drift + self.radii[1] + self.rib_gap[1] + self.rib_thickness + 2
        if min(r, c) - rib_reach < 0 or max(r, c) + rib_reach > self.size - 1:
            raise PhantomConfigError("ribs can leave the frame")
        if self.spine_intensity - (self.background + self.texture) <= 5 * self.noise_sigma:
            raise PhantomConfigError("spine/background contrast must exceed 5 noise sigmas")


def _smooth_track(rng, n, amplitude):
    """Slowly varying curve over ``n`` frames, bounded by ``amplitude``."""
    t = np.linspace(0, 1, n)
    phase, freq = rng.uniform(0, 2 * np.pi, 2), rng.uniform(0.5, 1.5, 2)
    curve = np.sin(2 * np.pi * freq[0] * t + phase[0]) + 0.5 * np.sin(2 * np.pi * freq[1] * 2 * t + phase[1])
    return amplitude * curve / 1.5


def _spine_frame(rr, cc, center, ry, rx, proc_len, proc_w):
    dr, dc = rr - center[0], cc - center[1]
    body = (dr / ry) ** 2 + (dc / rx) ** 2 <= 1.0
    # triangular process pointing to larger rows
    depth = dr - ry + 1
    process = (depth >= 0) & (depth <= proc_len) & (np.abs(dc) <= proc_w * (1 - depth / proc_len) / 2 + 0.5)
    return body | process


def generate_phantom(cfg: PhantomConfig = PhantomConfig()):
    """Return ``(image, gt, rib)`` volumes, deterministic in ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, size = cfg.frames, cfg.size
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)

    drift_r = _smooth_track(rng, n, cfg.drift)
    drift_c = _smooth_track(rng, n, cfg.drift)
    mid = 0.5 * (cfg.radii[0] + cfg.radii[1])
    half = 0.5 * (cfg.radii[1] - cfg.radii[0])
    ry = np.clip(mid + _smooth_track(rng, n, half), *cfg.radii)
    rx = np.clip(mid + _smooth_track(rng, n, half), *cfg.radii)
    proc = np.clip(
        np.mean(cfg.process_length) + _smooth_track(rng, n, 0.5 * np.ptp(cfg.process_length)),
        *cfg.process_length,
    )

    ribs = []
    for i in range(cfg.ribs):
        side = 0.0 if i % 2 == 0 else np.pi
        length = max(1, int(round(cfg.rib_frame_fraction * n)))
        start = int(rng.integers(0, n - length + 1))
        ribs.append({
            "angle": side + rng.uniform(-0.3, 0.3),
            "gap": rng.uniform(*cfg.rib_gap),
            "frames": range(start, start + length),
        })

    gt = np.zeros((n, size, size), dtype=np.uint8)
    rib = np.zeros((n, size, size), dtype=np.uint8)
    for k in range(n):
        center = (cfg.center[0] + drift_r[k], cfg.center[1] + drift_c[k])
        spine = _spine_frame(rr, cc, center, ry[k], rx[k], proc[k], cfg.process_width)
        gt[k] = spine
        active = [r for r in ribs if k in r["frames"]]
        if not active:
            continue
        d_spine = edt(spine)
        theta = np.arctan2(rr - center[0], cc - center[1])
        for r in active:
            dtheta = np.angle(np.exp(1j * (theta - r["angle"])))
            sector = np.abs(dtheta) <= np.deg2rad(cfg.rib_span_deg) / 2
            band = (d_spine > r["gap"]) & (d_spine <= r["gap"] + cfg.rib_thickness)
            rib[k] |= (sector & band).astype(np.uint8)

    texture = gaussian_filter(rng.standard_normal((n, size, size)), sigma=(1, 6, 6))
    texture /= max(np.abs(texture).max(), 1e-12)
    image = cfg.background + cfg.texture * texture
    image[(gt | rib).astype(bool)] = cfg.spine_intensity
    image += rng.normal(0.0, cfg.noise_sigma, image.shape)
    image = np.clip(np.rint(image), -32768, 32767).astype(np.int16)

    sx, sy, sz = cfg.spacing
    return Volume(image, (sx, sy, sz)), Volume(gt, (sx, sy, sz)), Volume(rib, (sx, sy, sz))


@dataclass
class BenchmarkSubject:
    subject_id: str
    role: str
    image: Path
    gt: Path
    rib: Path


def subject_seeds(seed: int, n_subjects: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(n_subjects)
    return [int(c.generate_state(1, np.uint64)[0]) for c in children]


def make_benchmark(cfg: PhantomConfig, n_subjects: int, out_dir, test_subjects: int | None = None):
    """Write ``n_subjects`` phantoms plus ``manifest.txt``; returns the subjects.

    By default a quarter of the subjects (at least one) are held out for testing.
    """
    if n_subjects < 2:
        raise ValueError("a benchmark needs at least two subjects")
    if test_subjects is None:
        test_subjects = max(1, n_subjects // 4)
    if not 1 <= test_subjects < n_subjects:
        raise ValueError(f"need 1..{n_subjects - 1} test subjects, got {test_subjects}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = subject_seeds(cfg.seed, n_subjects)
    order = np.random.default_rng(cfg.seed).permutation(n_subjects)
    test_ids = set(order[:test_subjects].tolist())
    subjects = []
    for i, seed in enumerate(seeds):
        image, gt, rib = generate_phantom(replace(cfg, seed=seed))
        sid = f"s{i:02d}"
        paths = [out_dir / f"{sid}_{kind}.vhdr" for kind in ("image", "gt", "rib")]
        for vol, p in zip((image, gt, rib), paths):
            save_volume(vol, p)
        subjects.append(BenchmarkSubject(sid, "test" if i in test_ids else "train", *paths))
        log.info("phantom %s (%s) written", sid, subjects[-1].role)
    lines = [f"# seed = {cfg.seed}", "# id role image gt rib"]
    for s in subjects:
        lines.append(f"{s.subject_id} {s.role} {s.image.name} {s.gt.name} {s.rib.name}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")
    return subjects


def read_manifest(path) -> list[BenchmarkSubject]:
    path = Path(path)
    subjects = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        sid, role, image, gt, rib = line.split()
        if role not in ("train", "test"):
            raise ValueError(f"{path}: unknown role {role!r}")
        subjects.append(BenchmarkSubject(sid, role, path.parent / image, path.parent / gt, path.parent / rib))
    return subjects


def load_subject(s: BenchmarkSubject):
    return load_volume(s.image), load_volume(s.gt), load_volume(s.rib)
