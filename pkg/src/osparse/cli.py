"""``osparse gen-data|train|eval|ablate --config <path> [--resume] [--seed N]``.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from osparse import checkpoint
from osparse.config import RunConfig, load
from osparse.errors import (
    ConfigError,
    CorruptCheckpoint,
    FormatError,
    GenError,
    IoError,
    NumericError,
    StateError,
)
from osparse.taxonomy import SplitManifest

log = logging.getLogger("osparse")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


def stage_checkpoint(cfg: RunConfig, stage: int) -> Path:
    return cfg.checkpoint_dir / f"stage{stage}.popc"


def final_checkpoint(cfg: RunConfig) -> Path:
    return cfg.checkpoint_dir / "final.popc"


def load_manifest(cfg: RunConfig) -> SplitManifest:
    path = cfg.manifest_path
    if not path.is_file():
        raise ConfigError(f"manifest {path} does not exist; run gen-data first")
    manifest = SplitManifest.from_file(path)
    manifest.fold = cfg.eval.fold
    return manifest


def write_loss_csv(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "episode", "loss"])
        for e, i, loss in rows:
            w.writerow([e, i, repr(float(loss))])


# commands -----------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, resume: bool = False) -> int:
    from osparse.synth import generate_dataset

    d = cfg.data
    counts = tuple(d.counts[k] for k in ("s_train", "q_train", "s_test", "q_test"))
    generate_dataset(cfg.seed, counts, d.height, d.width, cfg.data_dir, cfg.eval.fold, d.n_fixed)
    print(f"wrote {sum(counts)} samples and {cfg.data_dir / 'manifest.json'}")
    return EXIT_OK


def build_state(cfg: RunConfig):
    from osparse.pipeline import PipelineState

    return PipelineState(cfg.model, cfg.eval.fold, cfg.seed)


def cmd_train(cfg: RunConfig, resume: bool = False) -> int:
    from osparse.train import meta_train, train_stage1

    manifest = load_manifest(cfg)
    state = build_state(cfg)
    for stage in (1, 2, 3):
        ckpt = stage_checkpoint(cfg, stage)
        if resume and ckpt.is_file():
            try:
                checkpoint.load_state(ckpt, state, require=(stage,))
                print(f"stage {stage}: resumed from {ckpt}")
                continue
            except (CorruptCheckpoint, FormatError) as exc:
                log.warning("stage %d checkpoint unusable (%s); retraining", stage, exc)
        if stage == 1:
            out = train_stage1(state, manifest, cfg.train, cfg.seed)
        else:
            if cfg.model.kim:
                state.check_order(stage)
            out = meta_train(state, stage, manifest, cfg.train, cfg.seed)
        write_loss_csv(cfg.report_dir / f"loss_stage{stage}.csv", out.rows)
        checkpoint.save_state(ckpt, state, (stage,))
        losses = out.losses[~np.isnan(out.losses)]
        tail = float(losses[-50:].mean()) if losses.size else float("nan")
        print(f"stage {stage}: {len(out.rows)} episodes, final mean loss {tail:.4f} -> {ckpt}")
    checkpoint.save_state(final_checkpoint(cfg), state, (1, 2, 3))
    print(f"final checkpoint {final_checkpoint(cfg)}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, resume: bool = False) -> int:
    from osparse.evaluate import run_meta_test, write_episode_csv

    ckpt = final_checkpoint(cfg)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint {ckpt} does not exist; run train first")
    manifest = load_manifest(cfg)
    state = build_state(cfg)
    checkpoint.load_state(ckpt, state, require=(3,) if not cfg.model.kim else (1, 2, 3))
    rows: list = []
    report = run_meta_test(lambda ep: state.predict(3, ep), manifest, cfg.eval.mode, per_episode=rows)
    out = cfg.report_dir
    out.mkdir(parents=True, exist_ok=True)
    tag = cfg.eval.mode.replace("-", "")
    (out / f"metrics_{tag}.json").write_text(report.dumps())
    write_episode_csv(out / f"episodes_{tag}.csv", rows, cfg.eval.mode)
    print(report.table())
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, resume: bool = False) -> int:
    from osparse.ablation import ROWS, medians, run_row, verdict

    manifest = load_manifest(cfg)
    names = cfg.ablate.rows or [r.name for r in ROWS]
    seeds = [cfg.seed + i for i in range(cfg.ablate.n_seeds)]
    results, cache = [], {}
    for seed in seeds:
        for row in ROWS:
            if row.name in names:
                res, _ = run_row(row, manifest, cfg.model, cfg.train, seed, cache)
                results.append(res)
                print(f"{row.name:<16} seed {seed}  novel {100 * res.novel_miou:6.2f}  human {100 * res.human_miou:6.2f}")
    out = cfg.report_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", "seed", "novel_miou", "human_miou", "base_miou", "overall_acc", "seconds"])
        for r in results:
            w.writerow([r.row, r.seed] + [f"{v:.6f}" for v in (r.novel_miou, r.human_miou, r.base_miou, r.overall_acc)] + [f"{r.seconds:.1f}"])
    med = medians(results)
    print("\nmedians over seeds")
    for name, (nov, hum) in med.items():
        print(f"  {name:<16} novel {100 * nov:6.2f}  human {100 * hum:6.2f}")
    if len(med) == len(ROWS):
        ok, lines = verdict(results)
        text = "\n".join(lines + [f"verdict: ordering {'reproduced' if ok else 'NOT reproduced'}"])
        (out / "verdict.txt").write_text(text + "\n")
        print(text)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="osparse", description="One-shot human parsing experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--resume", action="store_true", help="skip stages with valid checkpoints")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("-v", "--verbose", action="store_true")
    try:
        args = p.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load(args.config, args.seed)
        return COMMANDS[args.command](cfg, args.resume)
    except (ConfigError, StateError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorruptCheckpoint, FormatError, IoError, GenError, NumericError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
