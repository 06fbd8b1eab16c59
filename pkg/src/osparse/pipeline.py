"""Three-stage coarse-to-fine parser with knowledge infusion between stages.

Stage 1 is a supervised foreground/background parser. Stages 2 and 3 are
one-shot meta learners over parent areas and fine classes. Each stage owns
one encoder shared by support and query; stages 2 and 3 fuse the previous
stage's features with their own through a two-layer convolutional fuser.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from osparse import dml
from osparse.errors import ContractError, ShapeError, StateError
from osparse.taxonomy import (
    BACKGROUND,
    TAXONOMY,
    ClassTaxonomy,
    Episode,
    aggregate_to_parents,
    resize_nearest,
    select_fold,
)
from osparse.tensor import (
    Tensor,
    concat_channels,
    conv2d,
    relu,
    resize_bilinear,
    softmax_channels,
)

log = logging.getLogger(__name__)

DOWNSAMPLE = 4
ENCODER_WIDTHS = (16, 32)


@dataclass
class ModelConfig:
    k: int = 32
    kim: bool = True
    fg_prior: bool = False
    dynamic_prototypes: bool = True
    alpha: float = 0.001
    bank_at_test: bool = True
    missing_prototype: str = "static"  # or "raise"
    dtype: str = "float32"

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def _conv_param(rng, kh, cin, cout, dtype):
    std = np.sqrt(2.0 / (kh * kh * cin))
    w = Tensor(rng.normal(0.0, std, (kh, kh, cin, cout)).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return w, b


class StageEncoder:
    """Three 3x3 conv+ReLU blocks, strides 2, 2, 1: output is 1/4 of the input."""

    def __init__(self, stage: int, k: int, rng: np.random.Generator, dtype=np.float32):
        self.stage = stage
        self.k = k
        chans = (3,) + ENCODER_WIDTHS + (k,)
        self.strides = (2, 2, 1)
        self.layers = [_conv_param(rng, 3, chans[i], chans[i + 1], dtype) for i in range(3)]

    def __call__(self, images: Tensor) -> Tensor:
        H, W = images.shape[-3], images.shape[-2]
        if H % DOWNSAMPLE or W % DOWNSAMPLE:
            raise ShapeError(f"image size {H}x{W} is not divisible by {DOWNSAMPLE}")
        x = images
        for (w, b), s in zip(self.layers, self.strides):
            x = relu(conv2d(x, w, b, stride=s, padding=1))
        return x

    def named(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"conv{i}.w"] = w
            out[f"conv{i}.b"] = b
        return out


class KimFuser:
    """Concatenate coarse and current features, then two 3x3 conv+ReLU layers."""

    def __init__(self, k_prev: int, k: int, rng: np.random.Generator, dtype=np.float32):
        self.k_prev = k_prev
        self.k = k
        self.layers = [_conv_param(rng, 3, k_prev + k, k, dtype), _conv_param(rng, 3, k, k, dtype)]

    def __call__(self, prev: Tensor, cur: Tensor) -> Tensor:
        if prev.shape[:-1] != cur.shape[:-1]:
            raise ShapeError(f"cannot fuse {prev.shape} with {cur.shape}")
        if prev.shape[-1] != self.k_prev or cur.shape[-1] != self.k:
            raise ShapeError("channel counts do not match the fuser")
        x = concat_channels(prev, cur)
        for w, b in self.layers:
            x = relu(conv2d(x, w, b, stride=1, padding=1))
        return x

    def named(self) -> dict[str, Tensor]:
        return {f"conv{i}.{n}": t for i, (w, b) in enumerate(self.layers) for n, t in (("w", w), ("b", b))}


def kim_fuse(prev: Tensor, cur: Tensor, fuser: KimFuser) -> Tensor:
    return fuser(prev, cur)


def encode(stage: StageEncoder, image: Tensor) -> Tensor:
    return stage(image)


@dataclass
class StageOutput:
    agm: Tensor | None
    ncm: Tensor | None
    order: tuple[int, ...]
    query_gt: np.ndarray | None  # class ids at feature resolution, merged to ``order``
    query_features: Tensor | None = None


class PipelineState:
    """All parameters, prototype banks and training flags of the three stages."""

    def __init__(
        self,
        config: ModelConfig | None = None,
        fold: int = 1,
        seed: int = 0,
        taxonomy: ClassTaxonomy = TAXONOMY,
    ):
        self.config = config or ModelConfig()
        self.fold = fold
        self.taxonomy = taxonomy
        cfg = self.config
        dt = cfg.np_dtype
        base, novel = select_fold(taxonomy, fold)
        held = taxonomy.held_out_parent(fold)
        self.base = {3: base, 2: frozenset(range(1, taxonomy.num_parents)) - {held}}
        self.novel = {3: novel, 2: frozenset({held})}
        self.encoders = {s: StageEncoder(s, cfg.k, np.random.default_rng([seed, 10 + s]), dt) for s in (1, 2, 3)}
        prior = 1 if cfg.fg_prior else 0
        self.fusers = {
            2: KimFuser(cfg.k + prior, cfg.k, np.random.default_rng([seed, 22]), dt),
            3: KimFuser(cfg.k, cfg.k, np.random.default_rng([seed, 23]), dt),
        }
        w, b = _conv_param(np.random.default_rng([seed, 31]), 1, cfg.k, 2, dt)
        self.fg_head = {"w": w, "b": b}
        self.heads = {s: dml.HeadParams.init(cfg.k, np.random.default_rng([seed, 40 + s]), dt) for s in (2, 3)}
        self.banks = {s: dml.PrototypeBank(cfg.alpha, self.base[s]) for s in (2, 3)}
        self.trained: set[int] = set()
        self.test_weight = {2: 0.0, 3: 0.0}  # AGM share of the test-time probability mix

    # parameters ---------------------------------------------------------------
    def stage_parameters(self, stage: int) -> dict[str, Tensor]:
        out = {f"enc{stage}.{n}": t for n, t in self.encoders[stage].named().items()}
        if stage == 1:
            out.update({f"fg.{n}": t for n, t in self.fg_head.items()})
        else:
            if self.config.kim:
                out.update({f"kim{stage}.{n}": t for n, t in self.fusers[stage].named().items()})
            out.update({f"head{stage}.{n}": t for n, t in self.heads[stage].named().items()})
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for s in (1, 2, 3):
            out.update(self.stage_parameters(s))
        return out

    def set_trainable(self, stage: int | None) -> None:
        """Only ``stage`` receives gradients; ``None`` freezes everything."""
        for s in (1, 2, 3):
            for t in self.stage_parameters(s).values():
                t.requires_grad = s == stage

    def required_stages(self, stage: int) -> tuple[int, ...]:
        if stage == 1 or not self.config.kim:
            return ()
        return tuple(range(1, stage))

    # forward ------------------------------------------------------------------
    def features(self, stage: int, images: Tensor) -> Tensor:
        """Stage features: ``g`` for stage 1, infused ``h`` for stages 2-3 (``g`` without KIM)."""
        g = self.encoders[stage](images)
        if stage == 1 or not self.config.kim:
            return g
        if stage == 2:
            prev = self.encoders[1](images)
            if self.config.fg_prior:
                fg = self.fg_probs_from_features(prev)
                prev = concat_channels(prev, fg[..., 0:1].reshape(fg.shape[:-1] + (1,)))
        else:
            prev = self.features(2, images)
        return self.fusers[stage](prev, g)

    def fg_probs_from_features(self, g1: Tensor) -> Tensor:
        """``(..., 2)`` probabilities; channel 0 is foreground, 1 background."""
        return softmax_channels(conv2d(g1, self.fg_head["w"], self.fg_head["b"]))

    def stage1_forward(self, image) -> Tensor:
        image = image if isinstance(image, Tensor) else Tensor(np.asarray(image, self.config.np_dtype))
        return self.fg_probs_from_features(self.encoders[1](image))

    def stage_meta_forward(
        self,
        stage: int,
        episode: Episode,
        phase: str,
        heads: tuple[bool, bool] = (True, True),
    ) -> StageOutput | None:
        """Run both metric heads for one episode at feature resolution.

        Returns ``None`` when no foreground class survives in the support mask.
        """
        if stage not in (2, 3):
            raise ContractError("meta stages are 2 and 3")
        dt = self.config.np_dtype
        imgs = Tensor(np.stack([episode.support_image, episode.query_image]).astype(dt, copy=False))
        feats = self.features(stage, imgs)
        hs, hq = feats[0], feats[1]
        fh, fw = hs.shape[0], hs.shape[1]
        s_labels = episode.support_mask.labels
        q_labels = None if episode.query_mask is None else episode.query_mask.labels
        if stage == 2:
            s_labels = aggregate_to_parents(episode.support_mask, self.taxonomy).labels
            if episode.query_mask is not None:
                q_labels = aggregate_to_parents(episode.query_mask, self.taxonomy).labels
        s_small = resize_nearest(s_labels, fh, fw)
        wanted = sorted(set(np.unique(s_labels).tolist()) - {BACKGROUND})
        regions = dml.support_regions(s_small, wanted)
        if not regions:
            return None
        bank = self.banks[stage] if self.config.dynamic_prototypes else None
        protos = dml.effective_prototypes(
            bank, hs, regions, phase, self.base[stage], self.config.bank_at_test, self.config.missing_prototype
        )
        for c in [c for c, p in protos.items() if not np.any(p.data)]:
            log.warning("class %d has a zero-norm prototype; dropped from the episode", c)
            del protos[c]
        if not protos:
            return None
        order = tuple(sorted(protos))
        maps = dml.distance_maps(hq, protos, order)
        agm = dml.agm_forward(hq, maps, self.heads[stage]) if heads[0] else None
        ncm = dml.ncm_forward(maps) if heads[1] else None
        gt = None
        if q_labels is not None:
            q_small = resize_nearest(q_labels, fh, fw)
            gt = np.where(np.isin(q_small, order), q_small, BACKGROUND).astype(np.uint8)
        return StageOutput(agm, ncm, order, gt, hq)

    def predict(self, stage: int, episode: Episode, out_hw: tuple[int, int] | None = None) -> np.ndarray:
        """Class-id map for the query, upsampled to ``out_hw`` (default: image size)."""
        w = self.test_weight[stage]
        res = self.stage_meta_forward(stage, episode, "test", heads=(w > 0, w < 1))
        H, W = out_hw or episode.query_image.shape[:2]
        if res is None:
            return np.zeros((H, W), dtype=np.uint8)
        if res.agm is None:
            probs = res.ncm.data
        elif res.ncm is None:
            probs = res.agm.data
        else:
            probs = w * res.agm.data + (1.0 - w) * res.ncm.data
        up = resize_bilinear(Tensor(probs.astype(np.float64)), H, W).data
        lut = np.array(list(res.order) + [BACKGROUND], dtype=np.uint8)
        return lut[up.argmax(axis=-1)]

    def predict_foreground(self, image: np.ndarray) -> np.ndarray:
        probs = self.stage1_forward(image).data
        H, W = image.shape[:2]
        up = resize_bilinear(Tensor(probs.astype(np.float64)), H, W).data
        return (up[..., 0] > up[..., 1]).astype(np.uint8)

    def check_order(self, stage: int) -> None:
        missing = [s for s in self.required_stages(stage) if s not in self.trained]
        if missing:
            raise StateError(f"stage {stage} needs stages {missing} trained first")


def stage1_forward(state: PipelineState, image) -> Tensor:
    return state.stage1_forward(image)


def stage_meta_forward(state: PipelineState, stage: int, episode: Episode, phase: str) -> StageOutput | None:
    return state.stage_meta_forward(stage, episode, phase)
