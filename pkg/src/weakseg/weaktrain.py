"""Weakly-supervised training: three-scale pseudo masks, augmentation, the
two-stage loss schedule (segmentation losses first, regional level set loss
added later at weight 0.1), and the multi-round pseudo-mask update loop.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from . import imgcore
from .imgcore import BG, FG, IGNORE, affine_compose, affine_rotation, \
    affine_scaling, affine_translation, apply_affine
from .losses import LossConfig, bce_loss, iou_loss, rls_loss, seg_loss
from .model import ArchConfig, adam_init, adam_step, backward, \
    forward_with_params, init_params
from .recist import DegenerateAnnotationError, constrained_region, \
    fit_ellipse, rasterize_ellipse, transform_annotation
from .synthgen import Sample


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    lr: float = 0.001
    decay_epochs: tuple[int, ...] = (40, 60)
    stage2_start: int = 40
    rls_weight: float = 0.1
    rounds: int = 3
    seed: int = 0
    long_side: tuple[int, int] = (32, 64)
    batch: int = 1
    augment: bool = True
    rls_region: str = "constrained"  # "constrained" | "whole_image" | "off"
    arch: ArchConfig = ArchConfig()
    loss: LossConfig = LossConfig()

    def __post_init__(self):
        if not (0 < self.stage2_start <= self.epochs):
            raise ValueError("need 0 < stage2_start <= epochs")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.long_side[0] > self.long_side[1]:
            raise ValueError("long-side range must satisfy lo <= hi")
        if self.rls_region not in ("constrained", "whole_image", "off"):
            raise ValueError(f"unknown rls_region {self.rls_region!r}")


def train_config_from_json(text: str) -> TrainConfig:
    raw = json.loads(text)
    kwargs = {}
    for key in ("epochs", "lr", "stage2_start", "rls_weight", "rounds",
                "seed", "batch", "augment", "rls_region"):
        if key in raw:
            kwargs[key] = raw[key]
    if "decay_epochs" in raw:
        kwargs["decay_epochs"] = tuple(raw["decay_epochs"])
    if "long_side" in raw:
        kwargs["long_side"] = tuple(raw["long_side"])
    if "arch" in raw:
        kwargs["arch"] = ArchConfig(**raw["arch"])
    if "loss" in raw:
        a = raw["loss"]
        kwargs["loss"] = LossConfig(
            lambda1=a.get("lambda1", 1.0), lambda2=a.get("lambda2", 3.0),
            rls_weight=a.get("rls_weight", 0.1),
            clamp_eps=a.get("clamp_eps", 1e-7))
    return TrainConfig(**kwargs)


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    lr: float
    mean_seg_loss: float
    mean_rls_loss: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "stage", "lr", "mean_seg_loss", "mean_rls_loss"])
        for r in self.records:
            w.writerow([r.epoch, r.stage, f"{r.lr:.6g}",
                        f"{r.mean_seg_loss:.10g}", f"{r.mean_rls_loss:.10g}"])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# pseudo masks

def make_pseudo_masks(pseudo: np.ndarray, dims_list):
    """Nearest-downsample the full-resolution tri-mask to each head's dims.
    dims_list gives (h, w) for p1, p2, p3; the last must match the input."""
    h, w = pseudo.shape
    out = []
    for (th, tw) in dims_list:
        if (h % th) or (w % tw) or (h // th) != (w // tw):
            raise ValueError(f"dims ({th},{tw}) are not an integer scale of "
                             f"({h},{w})")
        out.append(imgcore.resample_labels(pseudo, (tw, th)))
    if out and dims_list[-1] != (h, w):
        raise ValueError("full-resolution head dims must match the pseudo mask")
    return tuple(out)


def update_pseudo_mask(p: np.ndarray, emask: np.ndarray,
                       threshold: float = 0.5):
    """Pseudo-mask update from a prediction and the fitted-ellipse mask:
    foreground = P AND e, ignored = symmetric difference, background = rest,
    with P the thresholded prediction. Returns (tri-mask, retain_previous)."""
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    p = np.asarray(p, dtype=np.float64)
    e = np.asarray(emask, dtype=bool)
    if p.shape != e.shape:
        raise ValueError("prediction and ellipse mask shapes must match")
    pred = p >= threshold
    fg = pred & e
    ign = (pred | e) & ~fg
    out = np.full(p.shape, BG, dtype=np.int8)
    out[ign] = IGNORE
    out[fg] = FG
    return out, not fg.any()


# ---------------------------------------------------------------------------
# augmentation

def _round4(x: float) -> int:
    return max(4, int(round(x / 4.0)) * 4)


def augment(sample: Sample, rng: np.random.Generator,
            long_side=(32, 64), max_retries: int = 10):
    """One random augmentation: affine (scale, rotation, resize so the long
    side lands in the configured range, translation keeping the lesion
    on-grid), brightness/contrast jitter, Gaussian blur. The ellipse, pseudo
    mask and constrained region are recomputed from the mapped annotation.
    Returns (sample', skipped)."""
    h, w = sample.image.shape
    for _ in range(max_retries):
        scale = rng.uniform(0.8, 1.2)
        theta = rng.uniform(-np.pi / 6.0, np.pi / 6.0)
        target_long = rng.uniform(*long_side)
        out_side = _round4(target_long)
        total_scale = scale * out_side / max(h, w)
        t = affine_compose(
            affine_scaling(total_scale),
            affine_rotation(theta, center=(w / 2.0, h / 2.0)))
        # recenter the lesion, with a random crop-like jitter
        cx, cy = imgcore.affine_apply_points(t, [sample.ellipse.center])[0]
        jitter = 0.1 * out_side
        t = affine_compose(affine_translation(
            out_side / 2.0 - cx + rng.uniform(-jitter, jitter),
            out_side / 2.0 - cy + rng.uniform(-jitter, jitter)), t)
        try:
            ann = transform_annotation(sample.annotation, t)
            e = fit_ellipse(ann)
        except DegenerateAnnotationError:
            continue
        if not (0 <= e.center[0] < out_side and 0 <= e.center[1] < out_side):
            continue
        img = apply_affine(sample.image, t, (out_side, out_side),
                           fill=float(np.median(sample.image)))
        brightness = rng.uniform(-0.1, 0.1)
        gain = rng.uniform(0.8, 1.2)
        sigma = rng.uniform(0.0, 1.0)
        img = np.clip((img - 0.5) * gain + 0.5 + brightness, 0.0, 1.0)
        if sigma > 1e-3:
            img = gaussian_filter(img, sigma, mode="nearest")
        dims = (out_side, out_side)
        emask = rasterize_ellipse(e, dims)
        if not emask.any():
            continue
        pseudo = _transfer_pseudo(sample.pseudo, emask)
        region = constrained_region(e, dims)
        gt = None
        if sample.gt_mask is not None:
            gt = apply_affine(sample.gt_mask.astype(np.float64), t,
                              dims, fill=0.0) >= 0.5
        return Sample(image=img, annotation=ann, ellipse=e, pseudo=pseudo,
                      region=region, gt_mask=gt, sample_id=sample.sample_id,
                      meta=dict(sample.meta)), False
    return sample, True


def _transfer_pseudo(old_pseudo: np.ndarray, new_emask: np.ndarray) -> np.ndarray:
    """Rebuild the tri-mask on the augmented grid. Foreground follows the
    re-rasterized ellipse; an updated mask's IGNORE ring (the part of the old
    ellipse not kept as foreground) is re-derived proportionally by dilating
    the new foreground when the old mask contained IGNORE pixels."""
    out = np.where(new_emask, FG, BG).astype(np.int8)
    if (old_pseudo == IGNORE).any():
        old_fg = int((old_pseudo == FG).sum())
        old_ring = int((old_pseudo == IGNORE).sum())
        if old_fg > 0:
            # grow by the same area ratio the old ignore band had
            ratio = np.sqrt(1.0 + old_ring / old_fg)
            grown = _scale_mask_about_centroid(new_emask, ratio)
            out[grown & ~new_emask] = IGNORE
    return out


def _scale_mask_about_centroid(mask: np.ndarray, ratio: float) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    cy, cx = ys.mean(), xs.mean()
    h, w = mask.shape
    gx, gy = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    sx = cx + 0.5 + (gx - cx - 0.5) / ratio
    sy = cy + 0.5 + (gy - cy - 0.5) / ratio
    xi = np.clip(np.floor(sx - 0.5).astype(int), 0, w - 1)
    yi = np.clip(np.floor(sy - 0.5).astype(int), 0, h - 1)
    return mask[yi, xi]


# ---------------------------------------------------------------------------
# training

def _sample_losses(sample: Sample, params, cfg: TrainConfig, with_rls: bool):
    p1, p2, p3, cache = forward_with_params(sample.image, params, cfg.arch)
    dims = [p.shape for p in (p1, p2, p3)]
    g1, g2, g3 = make_pseudo_masks(sample.pseudo, dims)
    seg_val, seg_grads = seg_loss((p1, p2, p3), (g1, g2, g3),
                                  cfg.loss.clamp_eps)
    rls_val = 0.0
    if with_rls and cfg.rls_region != "off":
        region = sample.region if cfg.rls_region == "constrained" \
            else np.ones_like(sample.region, dtype=bool)
        r = rls_loss(p3, sample.image, region, cfg.loss)
        rls_val = r.value
        seg_grads[2] = seg_grads[2] + cfg.rls_weight * r.grad
    grads = backward(cache, seg_grads)
    return seg_val, rls_val, grads


def train_stage(dataset, params, cfg: TrainConfig, stage: str,
                state=None, rng=None, lr_epoch_offset: int = 0,
                history: TrainHistory | None = None,
                epochs: int | None = None):
    """Train for a block of epochs with either the segmentation losses alone
    (stage='seg_only') or with the regional level set loss added at weight
    cfg.rls_weight (stage='seg_plus_rls')."""
    if not dataset:
        raise ValueError("dataset is empty")
    if stage not in ("seg_only", "seg_plus_rls"):
        raise ValueError(f"unknown stage {stage!r}")
    if state is None:
        state = adam_init(params)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if history is None:
        history = TrainHistory()
    with_rls = stage == "seg_plus_rls"
    n_epochs = cfg.epochs if epochs is None else epochs
    for ep in range(n_epochs):
        epoch = lr_epoch_offset + ep
        lr = cfg.lr * (0.1 ** sum(epoch >= d for d in cfg.decay_epochs))
        order = rng.permutation(len(dataset))
        seg_sum = 0.0
        rls_sum = 0.0
        for idx in order:
            sample = dataset[idx]
            if cfg.augment:
                sample, skipped = augment(sample, rng, cfg.long_side)
                if skipped:
                    continue
            seg_val, rls_val, grads = _sample_losses(sample, params, cfg,
                                                     with_rls)
            total = seg_val + cfg.rls_weight * rls_val
            if not np.isfinite(total):
                raise FloatingPointError(
                    f"non-finite loss on sample {sample.sample_id!r}")
            params, state = adam_step(params, grads, state, lr)
            seg_sum += seg_val
            rls_sum += rls_val
        history.records.append(EpochRecord(
            epoch=epoch, stage=stage, lr=lr,
            mean_seg_loss=seg_sum / len(dataset),
            mean_rls_loss=rls_sum / len(dataset)))
    return params, state, history


def train_schedule(dataset, cfg: TrainConfig, params=None):
    """One full round: stage 1 (seg only) for stage2_start epochs, then
    stage 2 with the RLS term for the remainder."""
    if params is None:
        params = init_params(cfg.seed, cfg.arch)
    rng = np.random.default_rng((cfg.seed, 17))
    state = adam_init(params)
    history = TrainHistory()
    params, state, history = train_stage(
        dataset, params, cfg, "seg_only", state=state, rng=rng,
        history=history, epochs=cfg.stage2_start)
    if cfg.epochs > cfg.stage2_start:
        stage2 = "seg_plus_rls" if cfg.rls_region != "off" else "seg_only"
        params, state, history = train_stage(
            dataset, params, cfg, stage2, state=state, rng=rng,
            lr_epoch_offset=cfg.stage2_start, history=history,
            epochs=cfg.epochs - cfg.stage2_start)
    return params, history


def predict(sample: Sample, params, arch: ArchConfig) -> np.ndarray:
    """Full-resolution probability map for one sample."""
    _, _, p3, _ = forward_with_params(sample.image, params, arch)
    return p3


def train_rounds(dataset, cfg: TrainConfig, on_round=None):
    """The multi-round procedure: train from scratch on the ellipse pseudo
    masks, then repeatedly re-infer, update pseudo masks, and retrain from
    scratch. Returns (final params, per-round histories). ``on_round`` is
    called with (round index, params) after each round's training."""
    dataset = list(dataset)
    histories = []
    params = None
    for rnd in range(cfg.rounds):
        round_cfg = replace(cfg, seed=cfg.seed)  # same init each round
        params, history = train_schedule(dataset, round_cfg)
        histories.append(history)
        if on_round is not None:
            on_round(rnd, params)
        if rnd == cfg.rounds - 1:
            break
        updated = []
        for sample in dataset:
            p = predict(sample, params, cfg.arch)
            emask = rasterize_ellipse(
                sample.ellipse, (sample.image.shape[1], sample.image.shape[0]))
            new_pseudo, retain = update_pseudo_mask(p, emask)
            if retain:
                updated.append(sample)
            else:
                updated.append(replace_sample_pseudo(sample, new_pseudo))
        dataset = updated
    return params, histories


def replace_sample_pseudo(sample: Sample, pseudo: np.ndarray) -> Sample:
    return Sample(image=sample.image, annotation=sample.annotation,
                  ellipse=sample.ellipse, pseudo=pseudo, region=sample.region,
                  gt_mask=sample.gt_mask, sample_id=sample.sample_id,
                  meta=dict(sample.meta))
