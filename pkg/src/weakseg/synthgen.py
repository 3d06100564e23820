"""Synthetic lesion dataset generator.

Each sample is a star-convex blob with known ground truth, an automatically
derived RECIST-style annotation (long diameter plus near-perpendicular short
diameter), and the pseudo-mask / constrained-region pair built from it.
Optional distractor blobs are placed strictly outside the constrained region.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import recist
from .imgcore import BG, FG
from .recist import RecistAnnotation, Ellipse, fit_ellipse, rasterize_ellipse, \
    constrained_region


@dataclass
class SynthConfig:
    size: int = 64
    radius_range: tuple[float, float] = (10.0, 16.0)
    contrast_range: tuple[float, float] = (0.3, 0.5)
    irregularity: float = 0.15
    noise_sigma: float = 0.05
    distractors: int = 0
    background: float = 0.25
    dark_prob: float = 0.0  # chance the lesion is darker than the background
    seed: int = 0

    def __post_init__(self):
        if self.radius_range[0] < 3:
            raise ValueError("lesion radius must be >= 3")
        if self.contrast_range[0] == 0 and self.contrast_range[1] == 0:
            raise ValueError("contrast must be nonzero")
        if not (0.0 <= self.irregularity < 1.0):
            raise ValueError("irregularity must lie in [0, 1)")
        if not (0.0 <= self.dark_prob <= 1.0):
            raise ValueError("dark_prob must lie in [0, 1]")


@dataclass
class Sample:
    image: np.ndarray
    annotation: RecistAnnotation
    ellipse: Ellipse
    pseudo: np.ndarray   # tri-mask, full resolution
    region: np.ndarray   # constrained region I'
    gt_mask: np.ndarray | None = None
    sample_id: str = ""
    meta: dict = field(default_factory=dict)


def _star_mask(size: int, center, radius: float, irregularity: float,
               rng: np.random.Generator) -> np.ndarray:
    """Fill radius(angle) = r * (1 + irregularity * low-order sinusoids),
    normalized so the perturbation magnitude never exceeds irregularity."""
    harmonics = []
    for k in (2, 3, 4):
        harmonics.append((k, rng.uniform(-1, 1), rng.uniform(-1, 1)))
    amp = sum(np.hypot(a, b) for _, a, b in harmonics)
    gx, gy = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5)
    dx = gx - center[0]
    dy = gy - center[1]
    ang = np.arctan2(dy, dx)
    pert = np.zeros_like(ang)
    if amp > 0 and irregularity > 0:
        for k, a, b in harmonics:
            pert += a * np.cos(k * ang) + b * np.sin(k * ang)
        pert *= irregularity / amp
    rad = radius * (1.0 + pert)
    return np.hypot(dx, dy) <= rad


def derive_recist(gt_mask: np.ndarray) -> RecistAnnotation:
    """Measure a RECIST-style annotation off a ground-truth mask: the long
    axis joins the farthest pair of boundary pixel centers, the short axis is
    the longest boundary chord within 5 degrees of perpendicular to it."""
    m = np.asarray(gt_mask, dtype=bool)
    if not m.any():
        raise ValueError("mask is empty")
    if _component_count(m) != 1:
        raise ValueError("mask must be a single connected component")
    pad = np.pad(m, 1)
    boundary = m & ~(pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:])
    ys, xs = np.nonzero(boundary)
    pts = np.stack([xs + 0.5, ys + 0.5], axis=1)
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = (diff ** 2).sum(axis=2)
    i, j = np.unravel_index(np.argmax(d2), d2.shape)
    long_a, long_b = pts[i], pts[j]
    axis = long_b - long_a
    axis_len = np.hypot(*axis)
    u = axis / axis_len
    # chords within 5 degrees of perpendicular to the long axis
    lens = np.sqrt(d2)
    with np.errstate(invalid="ignore", divide="ignore"):
        cosang = np.abs(diff[..., 0] * u[0] + diff[..., 1] * u[1]) / lens
    ok = (lens > 0) & (cosang <= np.sin(np.deg2rad(5.0)))
    if not ok.any():
        raise ValueError("no near-perpendicular chord found")
    masked = np.where(ok, lens, -1.0)
    k, l = np.unravel_index(np.argmax(masked), masked.shape)
    short_a, short_b = pts[k], pts[l]
    short_len = lens[k, l]
    if short_len <= 1e-9:
        raise ValueError("degenerate short axis")
    if short_len > axis_len:
        long_a, long_b, short_a, short_b = short_a, short_b, long_a, long_b
    return RecistAnnotation(long_a=tuple(long_a), long_b=tuple(long_b),
                            short_a=tuple(short_a), short_b=tuple(short_b))


def _component_count(m: np.ndarray) -> int:
    from scipy.ndimage import label
    _, n = label(m)
    return n


def build_sample_fields(image, gt_mask, sample_id="", meta=None) -> Sample:
    """Derive annotation, ellipse, pseudo mask and constrained region."""
    ann = derive_recist(gt_mask)
    e = fit_ellipse(ann)
    dims = (image.shape[1], image.shape[0])
    emask = rasterize_ellipse(e, dims)
    pseudo = np.where(emask, FG, BG).astype(np.int8)
    region = constrained_region(e, dims)
    return Sample(image=image, annotation=ann, ellipse=e, pseudo=pseudo,
                  region=region, gt_mask=np.asarray(gt_mask, dtype=bool),
                  sample_id=sample_id, meta=meta or {})


def gen_lesion(cfg: SynthConfig, rng: np.random.Generator,
               sample_id: str = "") -> Sample:
    s = cfg.size
    radius = rng.uniform(*cfg.radius_range)
    margin = radius * (1.0 + cfg.irregularity) + 2.0
    if 2 * margin >= s:
        raise ValueError(f"lesion radius {radius:.1f} does not fit a {s}px grid")
    center = (rng.uniform(margin, s - margin), rng.uniform(margin, s - margin))
    gt = _star_mask(s, center, radius, cfg.irregularity, rng)
    contrast = rng.uniform(*cfg.contrast_range)
    if cfg.dark_prob > 0 and rng.uniform() < cfg.dark_prob:
        contrast = -contrast
    img = np.full((s, s), cfg.background)
    img[gt] += contrast
    sample = build_sample_fields(img, gt, sample_id=sample_id,
                                 meta={"radius": radius, "contrast": contrast,
                                       "center": center})
    # distractors mimic lesion intensity but never touch I'
    placed = 0
    attempts = 0
    while placed < cfg.distractors and attempts < 200:
        attempts += 1
        dr = rng.uniform(3.0, max(4.0, radius * 0.6))
        dc = (rng.uniform(dr + 1, s - dr - 1), rng.uniform(dr + 1, s - dr - 1))
        blob = rasterize_ellipse(Ellipse(center=dc, a=dr, b=dr, theta=0.0),
                                 (s, s))
        if (blob & sample.region).any():
            continue
        img[blob] = cfg.background + contrast
        placed += 1
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    sample.image = np.clip(img, 0.0, 1.0)
    return sample


def gen_dataset(cfg: SynthConfig, n: int):
    """Generate n samples with per-sample derived RNG streams; returns
    (samples, manifest CSV text)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    samples = []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "radius", "contrast"])
    for i in range(n):
        rng = np.random.default_rng((cfg.seed, i))
        sid = f"{i:03d}"
        sample = gen_lesion(cfg, rng, sample_id=sid)
        samples.append(sample)
        writer.writerow([sid, f"{sample.meta['radius']:.6g}",
                         f"{sample.meta['contrast']:.6g}"])
    return samples, buf.getvalue()
