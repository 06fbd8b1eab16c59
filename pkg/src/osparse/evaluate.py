"""Confusion-matrix metrics and the k-way / one-way meta-test harness."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from osparse.errors import ContractError, ShapeError
from osparse.taxonomy import (
    BACKGROUND,
    TAXONOMY,
    ClassTaxonomy,
    Episode,
    LabelMask,
    SplitManifest,
    enumerate_test_episodes,
    merge_unsupported,
    select_fold,
)


def confusion(pred: np.ndarray, gt: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    """``conf[i, j]`` counts pixels with ground truth ``classes[i]`` predicted as ``classes[j]``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    n = len(classes)
    lut = np.full(256, -1, dtype=np.int64)
    lut[np.asarray(classes, dtype=np.int64)] = np.arange(n)
    gi = lut[gt.astype(np.uint8).ravel()]
    pi = lut[pred.astype(np.uint8).ravel()]
    keep = (gi >= 0) & (pi >= 0)
    return np.bincount(gi[keep] * n + pi[keep], minlength=n * n).reshape(n, n)


def class_iou(conf: np.ndarray) -> np.ndarray:
    """Per-row IoU; NaN where a class is absent from both prediction and ground truth."""
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)


def miou(conf: np.ndarray, rows: Sequence[int] | None = None) -> float:
    """Mean IoU over ``rows`` (indices into ``conf``), skipping classes never seen."""
    rows = list(range(conf.shape[0])) if rows is None else list(rows)
    if not rows:
        raise ContractError("MIoU over an empty class set")
    ious = class_iou(conf)[rows]
    ious = ious[~np.isnan(ious)]
    return float(ious.mean()) if ious.size else float("nan")


def binary_iou(conf: np.ndarray) -> float:
    """Mean of foreground and background IoU for a 2x2 confusion."""
    if conf.shape != (2, 2):
        raise ContractError("binary IoU needs a 2x2 confusion")
    ious = class_iou(conf)
    return float(np.nanmean(ious)) if not np.isnan(ious).all() else float("nan")


def overall_accuracy(conf: np.ndarray) -> float:
    total = conf.sum()
    return float(np.trace(conf) / total) if total else float("nan")


@dataclass
class MetricsReport:
    mode: str
    per_class_iou: dict[str, float]
    novel_miou: float
    human_miou: float
    episodes: int
    overall_acc: float | None = None
    bi_iou: float | None = None
    base_miou: float | None = None

    def to_json(self) -> dict:
        out = {
            "mode": self.mode,
            "episodes": self.episodes,
            "novel_miou": _clean(self.novel_miou),
            "human_miou": _clean(self.human_miou),
            "base_miou": _clean(self.base_miou),
            "per_class_iou": {k: _clean(v) for k, v in self.per_class_iou.items()},
        }
        if self.mode == "k-way":
            out["overall_acc"] = _clean(self.overall_acc)
        else:
            out["bi_iou"] = _clean(self.bi_iou)
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        keys = ["novel_miou", "human_miou", "base_miou"] + (["overall_acc"] if self.mode == "k-way" else ["bi_iou"])
        lines = [f"{self.mode} ({self.episodes} episodes)"]
        for k in keys:
            v = getattr(self, k)
            lines.append(f"  {k:<12} {100 * v:6.2f}" if v is not None and v == v else f"  {k:<12}    n/a")
        for name, v in self.per_class_iou.items():
            lines.append(f"    {name:<14} {100 * v:6.2f}" if v == v else f"    {name:<14}    n/a")
        return "\n".join(lines)


def _clean(v):
    if v is None:
        return None
    v = float(v)
    return None if v != v else round(v, 12)


Predictor = Callable[[Episode], np.ndarray]


def gt_predictor(ep: Episode) -> np.ndarray:
    return ep.query_mask.labels


def _one_way(ep: Episode, c: int) -> Episode:
    s = LabelMask(np.where(ep.support_mask.labels == c, c, BACKGROUND))
    q = LabelMask(np.where(ep.query_mask.labels == c, c, BACKGROUND))
    return Episode(ep.support_image, s, ep.query_image, q, (BACKGROUND, c), ep.support_id, ep.query_id)


def run_meta_test(
    predictor: Predictor,
    manifest: SplitManifest,
    mode: str = "k-way",
    taxonomy: ClassTaxonomy = TAXONOMY,
    episodes: list[Episode] | None = None,
    per_episode: list | None = None,
) -> MetricsReport:
    """Evaluate ``predictor`` on every (test query, fixed support) pair.

    k-way pools one confusion over all episodes. One-way splits each pair into
    one binary episode per annotated foreground class and pools a binary
    confusion overall plus one per class.
    """
    if mode not in ("k-way", "one-way"):
        raise ContractError(f"unknown mode {mode!r}")
    _, novel = select_fold(taxonomy, manifest.fold)
    classes = list(range(taxonomy.num_fine))
    names = taxonomy.fine_names
    eps = enumerate_test_episodes(manifest) if episodes is None else episodes

    if mode == "k-way":
        conf = np.zeros((len(classes), len(classes)), dtype=np.int64)
        for ep in eps:
            gt = merge_unsupported(ep.query_mask, ep.classes).labels
            pred = predictor(ep)
            c = confusion(pred, gt, classes)
            conf += c
            if per_episode is not None:
                per_episode.append((ep.query_id, ep.support_id, miou(c) if c.sum() else float("nan")))
        ious = class_iou(conf)
        base_rows = [c for c in classes if c not in novel]
        return MetricsReport(
            mode,
            {names[c]: float(ious[c]) for c in classes},
            miou(conf, sorted(novel)),
            miou(conf),
            len(eps),
            overall_acc=overall_accuracy(conf),
            base_miou=miou(conf, base_rows),
        )

    total = np.zeros((2, 2), dtype=np.int64)
    per_class = {c: np.zeros((2, 2), dtype=np.int64) for c in classes[1:]}
    count = 0
    for ep in eps:
        for c in ep.foreground_classes:
            sub = _one_way(ep, c)
            pred = predictor(sub)
            b = confusion((pred == c).astype(np.uint8), (sub.query_mask.labels == c).astype(np.uint8), [0, 1])
            total += b
            per_class[c] += b
            count += 1
            if per_episode is not None:
                per_episode.append((ep.query_id, ep.support_id, names[c], binary_iou(b)))
    fg_iou = {c: float(class_iou(m)[1]) for c, m in per_class.items()}
    bg_iou = float(class_iou(total)[0])
    per = {names[0]: bg_iou} | {names[c]: v for c, v in fg_iou.items()}

    def mean(vals):
        vals = [v for v in vals if v == v]
        return float(np.mean(vals)) if vals else float("nan")

    return MetricsReport(
        mode,
        per,
        mean(fg_iou[c] for c in sorted(novel)),
        mean([bg_iou] + list(fg_iou.values())),
        count,
        bi_iou=binary_iou(total),
        base_miou=mean([bg_iou] + [v for c, v in fg_iou.items() if c not in novel]),
    )


def write_episode_csv(path, rows: list, mode: str) -> None:
    header = ["query", "support", "miou"] if mode == "k-way" else ["query", "support", "class", "bi_iou"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{x:.10f}" if isinstance(x, float) else x for x in r])
