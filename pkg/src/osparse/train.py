"""Optimisation: poly learning rate, augmentation, SGD and stage-wise training."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from osparse import dml
from osparse.errors import ConfigError, NumericError
from osparse.pipeline import PipelineState
from osparse.taxonomy import (
    BACKGROUND,
    Episode,
    LabelMask,
    SplitManifest,
    make_episode,
    resize_nearest,
    sample_train_episode,
    select_fold,
    to_foreground,
)
from osparse.tensor import Tensor, backward, bilinear_matrix, cross_entropy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    max_epoch: int = 10
    episodes_per_epoch: int = 256
    stage1_epochs: int = 4
    base_lr: float = 0.05
    poly_power: float = 0.9
    momentum: float = 0.0  # plain SGD unless configured
    weight_decay: float = 0.0
    batch_size: int = 1
    static_epochs: int = 5
    beta_mode: str = "schedule"  # or "fixed"
    beta_value: float = 0.5
    scale_lo: float = 0.5
    scale_hi: float = 2.0
    crop: int = 64
    flip_prob: float = 0.5
    augment: bool = True

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ConfigError("train.base_lr must be > 0")
        if self.max_epoch < 1 or self.episodes_per_epoch < 1:
            raise ConfigError("train.max_epoch and train.episodes_per_epoch must be >= 1")
        if not 0 <= self.static_epochs <= self.max_epoch:
            raise ConfigError("train.static_epochs must lie in [0, max_epoch]")
        if self.beta_mode not in ("schedule", "fixed"):
            raise ConfigError("train.beta_mode must be 'schedule' or 'fixed'")
        if not 0.0 <= self.beta_value <= 1.0:
            raise ConfigError("train.beta_value must lie in [0, 1]")
        if not 0 < self.scale_lo <= self.scale_hi:
            raise ConfigError("train.scale_lo/scale_hi must satisfy 0 < lo <= hi")
        if self.crop < 4 or self.crop % 4:
            raise ConfigError("train.crop must be a positive multiple of 4")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")

    def beta_at(self, epoch: int) -> float:
        if self.beta_mode == "fixed":
            return self.beta_value
        return dml.beta(epoch, self.max_epoch)


def poly_lr(iteration: int, max_iter: int, base_lr: float, power: float = 0.9) -> float:
    return base_lr * (1.0 - iteration / max_iter) ** power


# augmentation -------------------------------------------------------------------


def augment_with(
    image: np.ndarray,
    mask: np.ndarray,
    scale: float,
    offset: tuple[int, int],
    flip: bool,
    crop: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic scale -> crop/pad -> flip; image bilinear, mask nearest.

    ``offset`` is the top-left corner of the crop window in the scaled image;
    negative entries place the scaled image inside a padded canvas.
    """
    H, W = mask.shape
    nh, nw = max(1, int(round(H * scale))), max(1, int(round(W * scale)))
    if (nh, nw) != (H, W):
        ry = bilinear_matrix(H, nh, image.dtype)
        rx = bilinear_matrix(W, nw, image.dtype)
        image = np.einsum("ah,bw,hwc->abc", ry, rx, image, optimize=True)
        mask = resize_nearest(mask, nh, nw)
    out_img = np.zeros((crop, crop, image.shape[2]), dtype=image.dtype)
    out_msk = np.full((crop, crop), BACKGROUND, dtype=mask.dtype)
    oy, ox = offset
    sy0, sx0 = max(oy, 0), max(ox, 0)
    sy1, sx1 = min(oy + crop, nh), min(ox + crop, nw)
    if sy1 > sy0 and sx1 > sx0:
        out_img[sy0 - oy : sy1 - oy, sx0 - ox : sx1 - ox] = image[sy0:sy1, sx0:sx1]
        out_msk[sy0 - oy : sy1 - oy, sx0 - ox : sx1 - ox] = mask[sy0:sy1, sx0:sx1]
    if flip:
        out_img = out_img[:, ::-1].copy()
        out_msk = out_msk[:, ::-1].copy()
    return out_img, out_msk


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator, cfg: TrainConfig):
    """Random scale, crop (padding with background when smaller) and horizontal flip."""
    H, W = mask.shape
    if not cfg.augment:
        return augment_with(image, mask, 1.0, ((H - cfg.crop) // 2, (W - cfg.crop) // 2), False, cfg.crop)
    s = float(rng.uniform(cfg.scale_lo, cfg.scale_hi))
    nh, nw = max(1, int(round(H * s))), max(1, int(round(W * s)))
    oy = int(rng.integers(min(0, nh - cfg.crop), max(0, nh - cfg.crop) + 1))
    ox = int(rng.integers(min(0, nw - cfg.crop), max(0, nw - cfg.crop) + 1))
    flip = bool(rng.random() < cfg.flip_prob)
    return augment_with(image, mask, s, (oy, ox), flip, cfg.crop)


def augment_episode(ep: Episode, rng: np.random.Generator, cfg: TrainConfig) -> Episode:
    s_img, s_msk = augment(ep.support_image, ep.support_mask.labels, rng, cfg)
    q_img, q_msk = augment(ep.query_image, ep.query_mask.labels, rng, cfg)
    return make_episode((s_img, s_msk), (q_img, q_msk), None, ep.support_id, ep.query_id)


# optimisation -------------------------------------------------------------------


def sgd_step(params, grads, lr: float):
    """Plain ``p - lr * g`` on arrays; returns new arrays."""
    out = []
    for p, g in zip(params, grads):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise ConfigError(f"param {p.shape} and grad {g.shape} differ")
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient")
        out.append(p - lr * g)
    return out


class SGD:
    """In-place SGD over named tensors with optional momentum and weight decay."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, grads: dict[Tensor, np.ndarray], lr: float) -> None:
        live = {n: grads[t] for n, t in self.params.items() if t in grads}
        for n, g in live.items():
            if not np.isfinite(g).all():
                log.warning("non-finite gradient for %s; step rejected", n)
                raise NumericError(f"non-finite gradient for {n}")
        for n, g in live.items():
            t = self.params[n]
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            if self.momentum:
                v = self.velocity.get(n)
                v = g if v is None else self.momentum * v + g
                self.velocity[n] = v
                g = v
            t.data = (t.data - lr * g).astype(t.data.dtype, copy=False)


# training loops -----------------------------------------------------------------


@dataclass
class TrainLog:
    stage: int
    rows: list[tuple[int, int, float]] = field(default_factory=list)  # (epoch, episode, loss)
    betas: list[float] = field(default_factory=list)
    counters: Counter = field(default_factory=Counter)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])


def _check_finite(loss: Tensor) -> None:
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss")


def train_stage1(
    state: PipelineState, manifest: SplitManifest, cfg: TrainConfig, seed: int = 0
) -> TrainLog:
    """Supervised foreground segmentation on all training images."""
    cfg.validate()
    rng = np.random.default_rng([seed, 1])
    state.set_trainable(1)
    params = state.stage_parameters(1)
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    pool = [("s_train", i) for i in range(len(manifest.splits["s_train"]))]
    pool += [("q_train", i) for i in range(len(manifest.splits["q_train"]))]
    total = cfg.stage1_epochs * cfg.episodes_per_epoch
    out = TrainLog(1)
    step = 0
    for epoch in range(cfg.stage1_epochs):
        for it in range(cfg.episodes_per_epoch):
            split, i = pool[int(rng.integers(len(pool)))]
            img, msk = manifest.load(split, i)
            img, msk = augment(img, msk, rng, cfg)
            probs = state.stage1_forward(img)
            target = resize_nearest(to_foreground(LabelMask(msk)).labels, probs.shape[0], probs.shape[1])
            # channel 0 is foreground
            loss = cross_entropy(probs, (target == 0).astype(np.int64))
            _check_finite(loss)
            grads = backward(loss)
            try:
                opt.step(grads, poly_lr(step, total, cfg.base_lr, cfg.poly_power))
            except NumericError:
                out.counters["rejected"] += 1
            out.rows.append((epoch, it, float(loss.data)))
            step += 1
    state.set_trainable(None)
    state.trained.add(1)
    return out


def episode_loss(state: PipelineState, stage: int, ep: Episode, phase: str, b: float, counters: Counter):
    res = state.stage_meta_forward(stage, ep, phase, heads=(b > 0, b < 1))
    if res is None:
        counters["empty_support"] += 1
        return None
    if b > 0:
        counters["agm_loss"] += 1
    if b < 1:
        counters["ncm_loss"] += 1
    return dml.dml_loss(res.agm, res.ncm, res.query_gt, res.order, b)


def meta_train(
    state: PipelineState,
    stage: int,
    manifest: SplitManifest,
    cfg: TrainConfig,
    seed: int = 0,
    fixed_episode: Episode | None = None,
) -> TrainLog:
    """Episodic training of stage 2 or 3 with the dual-metric loss.

    Each step draws a (support, query) pair, augments both, evaluates the
    ``beta``-weighted loss and takes one SGD step. Dynamic prototypes are only
    touched from epoch ``static_epochs`` onwards.
    """
    cfg.validate()
    state.check_order(stage)
    rng = np.random.default_rng([seed, stage])
    state.set_trainable(stage)
    params = state.stage_parameters(stage)
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    total = cfg.max_epoch * cfg.episodes_per_epoch
    out = TrainLog(stage)
    step = 0
    batch = []
    for epoch in range(cfg.max_epoch):
        b = cfg.beta_at(epoch)
        out.betas.append(b)
        phase = "train-early" if epoch < cfg.static_epochs else "train-late"
        for it in range(cfg.episodes_per_epoch):
            if fixed_episode is not None:
                ep = fixed_episode
            else:
                ep = sample_train_episode(manifest, rng, state.taxonomy)
                ep = augment_episode(ep, rng, cfg)
            loss = episode_loss(state, stage, ep, phase, b, out.counters)
            lr = poly_lr(step, total, cfg.base_lr, cfg.poly_power)
            step += 1
            if loss is None:
                out.rows.append((epoch, it, float("nan")))
                continue
            _check_finite(loss)
            out.rows.append((epoch, it, float(loss.data)))
            batch.append(loss)
            if len(batch) < cfg.batch_size:
                continue
            total_loss = batch[0] if len(batch) == 1 else sum(batch[1:], batch[0]) * (1.0 / len(batch))
            batch = []
            grads = backward(total_loss)
            try:
                opt.step(grads, lr)
            except NumericError:
                out.counters["rejected"] += 1
    state.set_trainable(None)
    state.trained.add(stage)
    # the non-parametric head gives the final prediction unless it was never trained
    state.test_weight[stage] = 1.0 if max(out.betas) == 1.0 and min(out.betas) == 1.0 else 0.0
    return out


def train_stage(
    state: PipelineState, stage: int, manifest: SplitManifest, cfg: TrainConfig, seed: int = 0
) -> TrainLog:
    state.check_order(stage)
    if stage == 1:
        return train_stage1(state, manifest, cfg, seed)
    return meta_train(state, stage, manifest, cfg, seed)


def base_classes(state: PipelineState, stage: int) -> frozenset[int]:
    return select_fold(state.taxonomy, state.fold)[0] if stage == 3 else state.base[2]
