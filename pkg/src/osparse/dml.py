"""Dual-metric learning head: prototypes, EMA prototype bank, AGM, NCM, loss.

Both heads emit ``k + 1`` channels per pixel: one per foreground class in the
order given, then background last. Background never gets a prototype; its
logit is aggregated from the foreground branches.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from osparse.errors import ContractError, EmptyMask, StateError
from osparse.taxonomy import BACKGROUND
from osparse.tensor import (
    Tensor,
    conv2d,
    cosine_map,
    cross_entropy,
    mul,
    softmax_channels,
    stack_channels,
    weighted_pool,
)

log = logging.getLogger(__name__)

PHASES = ("train-early", "train-late", "test")


def compute_prototype(support_features: Tensor, class_mask: np.ndarray) -> Tensor:
    """Mean support feature over the pixels where ``class_mask`` is set."""
    mask = np.asarray(class_mask, dtype=bool)
    if mask.shape != support_features.shape[:-1]:
        raise ContractError(f"mask {mask.shape} vs features {support_features.shape[:-1]}")
    n = int(mask.sum())
    if n == 0:
        raise EmptyMask("class has no support pixels")
    return weighted_pool(support_features, mask / n)


@dataclass
class PrototypeBank:
    """Per-class dynamic prototypes smoothed as ``alpha * old + (1 - alpha) * new``."""

    alpha: float = 0.001
    base: frozenset[int] = frozenset()
    protos: dict[int, np.ndarray] = field(default_factory=dict)

    def __contains__(self, cid: int) -> bool:
        return cid in self.protos

    def get(self, cid: int) -> np.ndarray:
        if cid not in self.protos:
            raise StateError(f"dynamic prototype for class {cid} was never initialised")
        return self.protos[cid]

    def mode(self, cid: int) -> str:
        return "dynamic" if cid in self.protos else "static"


def update_dynamic(bank: PrototypeBank, cid: int, p_now) -> PrototypeBank:
    """Fold the current estimate into the bank (first call initialises)."""
    if cid == BACKGROUND or cid not in bank.base:
        raise ContractError(f"class {cid} is not a base class; it cannot enter the bank")
    p = np.array(p_now.data if isinstance(p_now, Tensor) else p_now, dtype=np.float64)
    if not np.isfinite(p).all():
        raise ContractError("prototype update is not finite")
    if cid in bank.protos:
        bank.protos[cid] = bank.alpha * bank.protos[cid] + (1.0 - bank.alpha) * p
    else:
        bank.protos[cid] = p
    return bank


def support_regions(support_labels: np.ndarray, classes: Iterable[int]) -> dict[int, np.ndarray]:
    """Binary masks of the foreground ``classes`` that survive at this resolution."""
    out = {}
    for c in classes:
        if c == BACKGROUND:
            continue
        m = support_labels == c
        if m.any():
            out[c] = m
        else:
            log.warning("class %d vanished from the support mask; dropped from the episode", c)
    return out


def effective_prototypes(
    bank: PrototypeBank | None,
    support_features: Tensor,
    regions: dict[int, np.ndarray],
    phase: str,
    base: Iterable[int],
    bank_at_test: bool = True,
    missing: str = "raise",
) -> dict[int, Tensor]:
    """Prototype per class for the given training/testing phase.

    ``train-early`` uses the static masked mean everywhere. ``train-late``
    first folds the current estimate of each base class into the bank and then
    uses the smoothed value, keeping the current estimate differentiable.
    ``test`` reads the frozen bank for base classes and uses static prototypes
    for everything else. A base class the bank never saw raises
    :class:`StateError` unless ``missing="static"``, which falls back to the
    static prototype.
    """
    if phase not in PHASES:
        raise ContractError(f"unknown phase {phase!r}")
    base = frozenset(base)
    out: dict[int, Tensor] = {}
    for c, mask in regions.items():
        p_now = compute_prototype(support_features, mask)
        if bank is None or phase == "train-early" or c not in base:
            out[c] = p_now
        elif phase == "train-late":
            if c in bank:
                old = bank.get(c).astype(p_now.dtype)
                update_dynamic(bank, c, p_now)
                out[c] = mul(p_now, 1.0 - bank.alpha) + Tensor(bank.alpha * old)
            else:
                update_dynamic(bank, c, p_now)
                out[c] = p_now
        elif bank_at_test and (c in bank or missing == "raise"):
            out[c] = Tensor(bank.get(c).astype(p_now.dtype))
        elif bank_at_test:
            log.warning("class %d has no dynamic prototype; using the static one", c)
            out[c] = p_now
        else:
            out[c] = p_now
    return out


def distance_maps(query_features: Tensor, protos: dict[int, Tensor], order: Sequence[int]) -> list[Tensor]:
    return [cosine_map(query_features, protos[c]) for c in order]


@dataclass
class HeadParams:
    """Class-shared 1x1 convolutions: ``phi`` scores a branch, ``omega`` feeds background."""

    phi_w: Tensor
    phi_b: Tensor
    omega_w: Tensor
    omega_b: Tensor

    @classmethod
    def init(cls, k: int, rng: np.random.Generator, dtype=np.float64) -> "HeadParams":
        std = np.sqrt(1.0 / k)

        def t(shape, scale):
            return Tensor(rng.normal(0.0, scale, shape).astype(dtype), requires_grad=True)

        return cls(t((1, 1, k, 1), std), Tensor(np.zeros(1, dtype), True), t((1, 1, k, 1), std), Tensor(np.zeros(1, dtype), True))

    def named(self) -> dict[str, Tensor]:
        return {"phi_w": self.phi_w, "phi_b": self.phi_b, "omega_w": self.omega_w, "omega_b": self.omega_b}


def agm_forward(h_q: Tensor, distances: Sequence[Tensor], params: HeadParams) -> Tensor:
    """Attention-guided probabilities ``(H, W, k + 1)``, background last."""
    k = len(distances)
    if k == 0:
        raise ContractError("AGM needs at least one foreground class")
    logits, bg = [], None
    for m in distances:
        r = mul(h_q, m.reshape(m.shape + (1,))) + h_q
        logits.append(conv2d(r, params.phi_w, params.phi_b).reshape(m.shape))
        w = conv2d(r, params.omega_w, params.omega_b).reshape(m.shape)
        bg = w if bg is None else bg + w
    logits.append(bg * (1.0 / k))
    return softmax_channels(stack_channels(logits))


def ncm_forward(distances: Sequence[Tensor]) -> Tensor:
    """Parameter-free nearest-centroid probabilities ``(H, W, k + 1)``, background last."""
    k = len(distances)
    if k == 0:
        raise ContractError("NCM needs at least one foreground class")
    bg = None
    for m in distances:
        bg = (1.0 - m) if bg is None else bg + (1.0 - m)
    return softmax_channels(stack_channels(list(distances) + [bg * (1.0 / k)]))


def beta(epoch: int, max_epoch: int) -> float:
    if max_epoch <= 0 or not 0 <= epoch <= max_epoch:
        raise ContractError(f"epoch {epoch} outside [0, {max_epoch}]")
    return 1.0 - epoch / max_epoch


def to_channels(labels: np.ndarray, order: Sequence[int]) -> np.ndarray:
    """Map class ids to head channels: position in ``order``, background -> ``len(order)``."""
    lut = np.full(256, -1, dtype=np.int64)
    lut[BACKGROUND] = len(order)
    for i, c in enumerate(order):
        lut[c] = i
    out = lut[np.asarray(labels, dtype=np.uint8)]
    if (out < 0).any():
        bad = sorted(set(np.unique(labels)) - set(order) - {BACKGROUND})
        raise ContractError(f"ground truth classes {bad} have no prediction channel")
    return out


def dml_loss(
    agm_probs: Tensor | None,
    ncm_probs: Tensor | None,
    query_gt: np.ndarray,
    order: Sequence[int],
    beta_value: float,
    eps: float = 1e-12,
) -> Tensor:
    """``beta * CE(agm) + (1 - beta) * CE(ncm)``; a zero-weight branch is not evaluated."""
    if not 0.0 <= beta_value <= 1.0:
        raise ContractError(f"beta {beta_value} outside [0, 1]")
    target = to_channels(query_gt, order)
    terms = []
    if beta_value > 0:
        terms.append(cross_entropy(agm_probs, target, eps) * beta_value)
    if beta_value < 1:
        terms.append(cross_entropy(ncm_probs, target, eps) * (1.0 - beta_value))
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]
