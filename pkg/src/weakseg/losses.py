"""Training losses with analytic gradients: pixel-wise binary cross entropy,
soft IoU, and the regional level set loss evaluated over a constrained
region, plus a central finite-difference gradient checker.

Tri-label masks may mark pixels IGNORE; those pixels contribute neither to
loss values nor to gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imgcore import BG, FG, IGNORE


class DegenerateRegionError(ValueError):
    """Raised when a region mean has (near) zero weight mass."""


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 3.0
    rls_weight: float = 0.1
    clamp_eps: float = 1e-7

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if not (0.0 < self.clamp_eps < 0.5):
            raise ValueError("clamp_eps must lie in (0, 0.5)")


@dataclass(frozen=True)
class RegionMeans:
    c1: float
    c2: float


@dataclass
class LossValueGrad:
    value: float
    grad: np.ndarray


def _split_trimask(g: np.ndarray, p: np.ndarray):
    if g.shape != p.shape:
        raise ValueError(f"shape mismatch: mask {g.shape} vs prediction {p.shape}")
    valid = g != IGNORE
    return valid, (g == FG).astype(np.float64)


def bce_loss(p: np.ndarray, g: np.ndarray, clamp_eps: float = 1e-7) -> LossValueGrad:
    """Mean binary cross entropy over non-IGNORE pixels, with the prediction
    clamped to [eps, 1-eps] before the logarithms."""
    p = np.asarray(p, dtype=np.float64)
    valid, tgt = _split_trimask(np.asarray(g), p)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("all pixels are IGNORE")
    pc = np.clip(p, clamp_eps, 1.0 - clamp_eps)
    terms = tgt * np.log(pc) + (1.0 - tgt) * np.log1p(-pc)
    value = -float(terms[valid].sum()) / n
    grad = np.zeros_like(p)
    unsat = valid & (p > clamp_eps) & (p < 1.0 - clamp_eps)
    grad[unsat] = (-(tgt[unsat] / pc[unsat])
                   + (1.0 - tgt[unsat]) / (1.0 - pc[unsat])) / n
    return LossValueGrad(value=value, grad=grad)


def iou_loss(p: np.ndarray, g: np.ndarray) -> LossValueGrad:
    """Soft IoU loss 1 - sum(gp) / sum(g + p - gp) over non-IGNORE pixels."""
    p = np.asarray(p, dtype=np.float64)
    valid, tgt = _split_trimask(np.asarray(g), p)
    inter = float((tgt * p)[valid].sum())
    union = float((tgt + p - tgt * p)[valid].sum())
    grad = np.zeros_like(p)
    if union <= 0.0:
        # empty target and empty prediction agree perfectly
        return LossValueGrad(value=0.0, grad=grad)
    # d/dp [1 - I/U] = -(g*U - I*(1-g)) / U^2
    grad[valid] = -(tgt[valid] * union - inter * (1.0 - tgt[valid])) / union ** 2
    return LossValueGrad(value=1.0 - inter / union, grad=grad)


def region_means(p: np.ndarray, img: np.ndarray, region: np.ndarray) -> RegionMeans:
    """Prediction-weighted mean intensities inside/outside, over the region."""
    p = np.asarray(p, dtype=np.float64)
    v = np.asarray(img, dtype=np.float64)
    r = np.asarray(region, dtype=bool)
    if not (p.shape == v.shape == r.shape):
        raise ValueError("prediction, image and region shapes must match")
    pw = p[r]
    vw = v[r]
    w1 = float(pw.sum())
    w2 = float((1.0 - pw).sum())
    if w1 <= 1e-12 or w2 <= 1e-12:
        raise DegenerateRegionError(
            f"degenerate region weights (inside {w1:.3g}, outside {w2:.3g})")
    return RegionMeans(c1=float((pw * vw).sum()) / w1,
                       c2=float(((1.0 - pw) * vw).sum()) / w2)


def rls_loss(p: np.ndarray, img: np.ndarray, region: np.ndarray,
             cfg: LossConfig = LossConfig(),
             through_means: bool = False) -> LossValueGrad:
    """Regional level set loss over the constrained region:

        (1/|R|) sum_R [ l1 * p * (v - c1)^2 + l2 * (1 - p) * (v - c2)^2 ]

    with c1, c2 the prediction-weighted region means. By default the gradient
    treats c1, c2 as constants (stop-gradient); through_means=True adds the
    terms from differentiating the means as well.
    """
    p = np.asarray(p, dtype=np.float64)
    v = np.asarray(img, dtype=np.float64)
    r = np.asarray(region, dtype=bool)
    means = region_means(p, v, r)
    c1, c2 = means.c1, means.c2
    n = int(r.sum())
    d1 = (v - c1) ** 2
    d2 = (v - c2) ** 2
    value = float((cfg.lambda1 * p * d1 + cfg.lambda2 * (1.0 - p) * d2)[r].sum()) / n
    grad = np.zeros_like(p)
    grad[r] = (cfg.lambda1 * d1[r] - cfg.lambda2 * d2[r]) / n
    if through_means:
        # dc1/dp_j = (v_j - c1) / sum(p); dc2/dp_j = -(v_j - c2) / sum(1-p)
        w1 = float(p[r].sum())
        w2 = float((1.0 - p[r]).sum())
        s1 = float((p * (v - c1))[r].sum())  # d(value)/d(c1) * (-n/2/l1)
        s2 = float(((1.0 - p) * (v - c2))[r].sum())
        grad[r] += (-2.0 * cfg.lambda1 * s1 * (v[r] - c1) / w1
                    + 2.0 * cfg.lambda2 * s2 * (v[r] - c2) / w2) / n
    return LossValueGrad(value=value, grad=grad)


def seg_loss(preds, masks, clamp_eps: float = 1e-7):
    """Deep-supervision segmentation loss: sum over the three scales of
    bce + iou. Returns (total value, list of per-scale gradients)."""
    if len(preds) != len(masks):
        raise ValueError("need one mask per prediction")
    total = 0.0
    grads = []
    for p, g in zip(preds, masks):
        if np.asarray(p).shape != np.asarray(g).shape:
            raise ValueError(
                f"shape mismatch: {np.asarray(p).shape} vs {np.asarray(g).shape}")
        b = bce_loss(p, g, clamp_eps)
        i = iou_loss(p, g)
        total += b.value + i.value
        grads.append(b.grad + i.grad)
    return total, grads


def finite_diff_check(fn, point: np.ndarray, h: float = 1e-5) -> float:
    """Compare fn's analytic gradient against central finite differences.

    fn(x) must return (value, grad). Returns the max over coordinates of
    |fd - analytic| / max(1e-8, |analytic|).
    """
    x = np.array(point, dtype=np.float64)
    _, grad = fn(x)
    grad = np.asarray(grad, dtype=np.float64)
    worst = 0.0
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp, _ = fn(x)
        flat[i] = orig - h
        fm, _ = fn(x)
        flat[i] = orig
        fd = (fp - fm) / (2.0 * h)
        err = abs(fd - gflat[i]) / max(1e-8, abs(gflat[i]))
        worst = max(worst, err)
    return worst
