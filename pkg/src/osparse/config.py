"""JSON run configuration: one document, fixed sections, unknown keys rejected."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from osparse.errors import ConfigError
from osparse.pipeline import ModelConfig
from osparse.taxonomy import SPLITS
from osparse.train import TrainConfig


@dataclass
class DataConfig:
    counts: dict[str, int] = field(
        default_factory=lambda: {"s_train": 256, "q_train": 256, "s_test": 20, "q_test": 20}
    )
    height: int = 64
    width: int = 64
    n_fixed: int = 5
    out_dir: str = "data"


@dataclass
class EvalConfig:
    mode: str = "k-way"
    fold: int = 1


@dataclass
class PathsConfig:
    manifest: str | None = None  # default: <data.out_dir>/manifest.json
    checkpoints: str = "checkpoints"
    reports: str = "reports"


@dataclass
class AblateConfig:
    n_seeds: int = 3
    rows: list[str] | None = None  # default: all six


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    # paths are resolved against the directory holding the config file
    def resolve(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def data_dir(self) -> Path:
        return self.resolve(self.data.out_dir)

    @property
    def manifest_path(self) -> Path:
        return self.resolve(self.paths.manifest) if self.paths.manifest else self.data_dir / "manifest.json"

    @property
    def checkpoint_dir(self) -> Path:
        return self.resolve(self.paths.checkpoints)

    @property
    def report_dir(self) -> Path:
        return self.resolve(self.paths.reports)

    def validate(self) -> None:
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        d = self.data
        if set(d.counts) != set(SPLITS):
            raise ConfigError(f"data.counts must name exactly {list(SPLITS)}")
        for k, v in d.counts.items():
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"data.counts.{k} must be an integer >= 1, got {v!r}")
        if d.height < 48 or d.width < 48 or d.height % 4 or d.width % 4:
            raise ConfigError("data.height/data.width must be >= 48 and divisible by 4")
        if not 1 <= d.n_fixed <= d.counts["s_test"]:
            raise ConfigError("data.n_fixed must lie in [1, data.counts.s_test]")
        if self.eval.fold not in (1, 2):
            raise ConfigError(f"eval.fold must be 1 or 2, got {self.eval.fold!r}")
        if self.eval.mode not in ("k-way", "one-way"):
            raise ConfigError("eval.mode must be 'k-way' or 'one-way'")
        m = self.model
        if m.k < 1:
            raise ConfigError("model.k must be >= 1")
        if not 0.0 <= m.alpha <= 1.0:
            raise ConfigError("model.alpha must lie in [0, 1]")
        if m.missing_prototype not in ("static", "raise"):
            raise ConfigError("model.missing_prototype must be 'static' or 'raise'")
        if m.dtype not in ("float32", "float64"):
            raise ConfigError("model.dtype must be 'float32' or 'float64'")
        self.train.validate()
        if self.ablate.n_seeds < 1:
            raise ConfigError("ablate.n_seeds must be >= 1")
        if self.ablate.rows is not None:
            from osparse.ablation import ROWS

            bad = set(self.ablate.rows) - {r.name for r in ROWS}
            if bad:
                raise ConfigError(f"ablate.rows has unknown rows {sorted(bad)}")

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "data": asdict(self.data),
            "model": asdict(self.model),
            "train": asdict(self.train),
            "eval": asdict(self.eval),
            "paths": asdict(self.paths),
            "ablate": asdict(self.ablate),
        }


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
    "ablate": AblateConfig,
}


def _section(cls, name: str, doc) -> object:
    if not isinstance(doc, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {unknown}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigError(f"bad {name} section: {exc}") from exc


def from_dict(doc: dict, base_dir: str | Path = ".") -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    parts = {name: _section(cls, name, doc[name]) for name, cls in SECTIONS.items() if name in doc}
    cfg = RunConfig(seed=doc.get("seed", 0), base_dir=Path(base_dir), **parts)
    cfg.validate()
    return cfg


def load(path: str | Path, seed: int | None = None) -> RunConfig:
    """Parse and validate ``path``; ``seed`` overrides the file's seed."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if seed is not None:
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        doc = dict(doc, seed=seed)
    return from_dict(doc, path.parent)
