"""Six-row component ablation: single heads, DML, weight shifting, KIM, dynamic prototypes."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from osparse.evaluate import MetricsReport, run_meta_test
from osparse.pipeline import ModelConfig, PipelineState
from osparse.taxonomy import SplitManifest
from osparse.train import TrainConfig, meta_train, train_stage1

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Row:
    name: str
    beta_mode: str
    beta_value: float
    kim: bool
    dp: bool


ROWS = (
    Row("AGM", "fixed", 1.0, False, False),
    Row("NCM", "fixed", 0.0, False, False),
    Row("DML", "fixed", 0.5, False, False),
    Row("DML+WS", "schedule", 0.5, False, False),
    Row("DML+WS+KIM", "schedule", 0.5, True, False),
    Row("DML+WS+KIM+DP", "schedule", 0.5, True, True),
)

# (lower, upper, minimum gap in MIoU points); strict pairs need the gap, the rest only order
NOVEL_ORDER = (
    ("AGM", "DML", 1.0),
    ("NCM", "DML", 1.0),
    ("DML", "DML+WS", 0.0),
    ("DML+WS", "DML+WS+KIM", 0.0),
    ("DML+WS+KIM", "DML+WS+KIM+DP", 0.0),
)
HUMAN_GAP = ("DML+WS", "DML+WS+KIM", 2.0)


@dataclass
class RowResult:
    row: str
    seed: int
    novel_miou: float
    human_miou: float
    base_miou: float
    overall_acc: float
    ncm_loss_calls: int
    agm_loss_calls: int
    seconds: float


def train_row(
    row: Row,
    manifest: SplitManifest,
    model: ModelConfig,
    train: TrainConfig,
    seed: int,
    stage1_cache: dict | None = None,
) -> tuple[PipelineState, dict]:
    cfg = replace(train, beta_mode=row.beta_mode, beta_value=row.beta_value)
    mcfg = replace(model, kim=row.kim, dynamic_prototypes=row.dp)
    state = PipelineState(mcfg, manifest.fold, seed)
    counters: dict = {}
    if row.kim:
        key = (seed, mcfg.k, mcfg.fg_prior)
        if stage1_cache is not None and key in stage1_cache:
            for name, t in state.stage_parameters(1).items():
                t.data = stage1_cache[key][name].copy()
            state.trained.add(1)
        else:
            train_stage1(state, manifest, cfg, seed)
            if stage1_cache is not None:
                stage1_cache[key] = {n: t.data.copy() for n, t in state.stage_parameters(1).items()}
        log2 = meta_train(state, 2, manifest, cfg, seed)
        counters.update({f"s2_{k}": v for k, v in log2.counters.items()})
    log3 = meta_train(state, 3, manifest, cfg, seed)
    counters.update(log3.counters)
    return state, counters


def run_row(row: Row, manifest, model, train, seed, stage1_cache=None) -> tuple[RowResult, MetricsReport]:
    t0 = time.time()
    state, counters = train_row(row, manifest, model, train, seed, stage1_cache)
    report = run_meta_test(lambda ep: state.predict(3, ep), manifest, "k-way")
    res = RowResult(
        row.name,
        seed,
        report.novel_miou,
        report.human_miou,
        report.base_miou,
        report.overall_acc,
        counters.get("ncm_loss", 0),
        counters.get("agm_loss", 0),
        time.time() - t0,
    )
    log.info("%s seed=%d novel=%.3f human=%.3f (%.0fs)", row.name, seed, res.novel_miou, res.human_miou, res.seconds)
    return res, report


def medians(results: list[RowResult]) -> dict[str, tuple[float, float]]:
    out = {}
    for row in ROWS:
        rs = [r for r in results if r.row == row.name]
        if rs:
            out[row.name] = (
                float(np.median([r.novel_miou for r in rs])),
                float(np.median([r.human_miou for r in rs])),
            )
    return out


def verdict(results: list[RowResult]) -> tuple[bool, list[str]]:
    """Check the expected ordering on medians; name every violated pair and per-seed slip."""
    med = medians(results)
    lines, ok = [], True
    for lo, hi, gap in NOVEL_ORDER:
        d = 100 * (med[hi][0] - med[lo][0])
        good = d >= gap if gap > 0 else d >= 0
        ok &= good
        rel = "<" if gap > 0 else "<="
        lines.append(f"{'PASS' if good else 'FAIL'} novel {lo} {rel} {hi} (diff {d:+.2f} pts, need >= {gap:.1f})")
    lo, hi, gap = HUMAN_GAP
    d = 100 * (med[hi][1] - med[lo][1])
    good = d >= gap
    ok &= good
    lines.append(f"{'PASS' if good else 'FAIL'} human {lo} +{gap:.0f} <= {hi} (diff {d:+.2f} pts)")
    seeds = sorted({r.seed for r in results})
    by = {(r.row, r.seed): r for r in results}
    for s in seeds:
        for lo, hi, gap in NOVEL_ORDER:
            if (lo, s) in by and (hi, s) in by and by[(hi, s)].novel_miou < by[(lo, s)].novel_miou:
                lines.append(f"note seed {s}: novel ordering {lo} -> {hi} violated")
    return ok, lines
