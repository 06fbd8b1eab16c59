"""Class taxonomy, fold partitions, mask relabeling and episode construction."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from osparse.errors import ConfigError, ContractError, FormatError

BACKGROUND = 0
FOREGROUND = 1

FINE_NAMES = (
    "background",
    "hat",
    "hair",
    "face",
    "upper-clothes",
    "dress",
    "belt",
    "bag",
    "arms",
    "pants",
    "legs",
    "shoes",
)
PARENT_NAMES = ("background", "head", "body", "arms", "legs")


@dataclass(frozen=True)
class ClassTaxonomy:
    """Three-level label hierarchy: fine class -> parent area -> foreground."""

    fine_names: tuple[str, ...]
    parent_names: tuple[str, ...]
    parent_of: dict[int, int]
    folds: dict[int, tuple[int, ...]]

    def __post_init__(self):
        fg = set(range(1, len(self.fine_names)))
        if set(self.parent_of) != fg:
            raise ConfigError("every non-background fine class needs exactly one parent")
        for fold, novel in self.folds.items():
            parents = {self.parent_of[c] for c in novel}
            if len(parents) != 1:
                raise ConfigError(f"fold {fold} novel classes span several parents: {parents}")

    @property
    def num_fine(self) -> int:
        return len(self.fine_names)

    @property
    def num_parents(self) -> int:
        return len(self.parent_names)

    @property
    def human(self) -> frozenset[int]:
        return frozenset(range(self.num_fine))

    def id(self, name: str) -> int:
        return self.fine_names.index(name)

    def parent_lut(self) -> np.ndarray:
        lut = np.zeros(self.num_fine, dtype=np.uint8)
        for c, p in self.parent_of.items():
            lut[c] = p
        return lut

    def held_out_parent(self, fold: int) -> int:
        _, novel = select_fold(self, fold)
        return self.parent_of[next(iter(novel))]


def default_taxonomy() -> ClassTaxonomy:
    idx = {n: i for i, n in enumerate(FINE_NAMES)}
    groups = {
        "head": ("hat", "hair", "face"),
        "body": ("upper-clothes", "dress", "belt", "bag"),
        "arms": ("arms",),
        "legs": ("pants", "legs", "shoes"),
    }
    parent_of = {idx[c]: PARENT_NAMES.index(p) for p, cs in groups.items() for c in cs}
    folds = {
        1: (idx["pants"], idx["legs"], idx["shoes"]),
        2: (idx["hat"], idx["hair"], idx["face"]),
    }
    return ClassTaxonomy(FINE_NAMES, PARENT_NAMES, parent_of, folds)


TAXONOMY = default_taxonomy()


@dataclass
class LabelMask:
    """H x W raster of class ids at one level of the hierarchy (fine/parent/fg)."""

    labels: np.ndarray
    level: str = "fine"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2:
            raise ContractError(f"mask must be 2-d, got {self.labels.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def classes(self) -> frozenset[int]:
        return frozenset(int(c) for c in np.unique(self.labels))


def _keep_only(mask: LabelMask, keep: Iterable[int]) -> LabelMask:
    keep = np.fromiter(keep, dtype=np.int64)
    out = np.where(np.isin(mask.labels, keep), mask.labels, BACKGROUND)
    return LabelMask(out, mask.level)


def select_fold(taxonomy: ClassTaxonomy, fold: int) -> tuple[frozenset[int], frozenset[int]]:
    if fold not in taxonomy.folds:
        raise ConfigError(f"unknown fold {fold}; defined folds: {sorted(taxonomy.folds)}")
    novel = frozenset(taxonomy.folds[fold])
    base = frozenset(range(1, taxonomy.num_fine)) - novel
    return base, novel


def relabel_for_training(mask: LabelMask, base: Iterable[int]) -> LabelMask:
    """Merge every id outside ``base`` into background."""
    return _keep_only(mask, base)


def merge_unsupported(query_gt: LabelMask, support_classes: Iterable[int]) -> LabelMask:
    """Query classes the support does not annotate become background."""
    return _keep_only(query_gt, support_classes)


def aggregate_to_parents(mask: LabelMask, taxonomy: ClassTaxonomy = TAXONOMY) -> LabelMask:
    return LabelMask(taxonomy.parent_lut()[mask.labels], "parent")


def resize_nearest(labels: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resampling at half-pixel centres (no new ids appear)."""
    H, W = labels.shape[:2]
    rows = np.minimum(((np.arange(h) + 0.5) * H / h).astype(int), H - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * W / w).astype(int), W - 1)
    return labels[rows[:, None], cols[None, :]]


def to_foreground(mask: LabelMask) -> LabelMask:
    return LabelMask((mask.labels != BACKGROUND).astype(np.uint8), "fg")


# splits and episodes ------------------------------------------------------------

SPLITS = ("s_train", "q_train", "s_test", "q_test")


@dataclass
class SplitManifest:
    """Image/mask path pairs for the four splits, relative to ``root``."""

    root: Path
    fold: int
    splits: dict[str, list[tuple[str, str]]]
    fixed_supports: list[str]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.root = Path(self.root)
        missing = [s for s in SPLITS if s not in self.splits]
        if missing:
            raise FormatError(f"manifest lacks splits {missing}")
        seen: dict[str, str] = {}
        for name in SPLITS:
            for img, _ in self.splits[name]:
                if img in seen:
                    raise FormatError(f"{img} appears in both {seen[img]} and {name}")
                seen[img] = name
        test_ids = set(self.ids("s_test"))
        if not set(self.fixed_supports) <= test_ids:
            raise FormatError("fixed supports must be drawn from s_test")

    def ids(self, split: str) -> list[str]:
        key = ("ids", split)
        if key not in self._cache:
            self._cache[key] = [Path(img).stem for img, _ in self.splits[split]]
        return self._cache[key]

    def load(self, split: str, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Image as float32 in [0, 1] and mask as uint8."""
        key = (split, i)
        if key not in self._cache:
            from osparse.synth import read_pgm, read_ppm

            img, msk = self.splits[split][i]
            image = read_ppm(self.root / img).astype(np.float32) / 255.0
            self._cache[key] = (image, read_pgm(self.root / msk))
        return self._cache[key]

    def to_json(self) -> dict:
        return {
            "fold": self.fold,
            "splits": {k: [list(p) for p in self.splits[k]] for k in SPLITS},
            "fixed_supports": list(self.fixed_supports),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def from_file(cls, path: str | Path) -> "SplitManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
            splits = {k: [tuple(p) for p in doc["splits"][k]] for k in SPLITS}
            return cls(path.parent, int(doc["fold"]), splits, list(doc["fixed_supports"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed manifest {path}: {exc}") from exc


def choose_fixed_supports(ids: Sequence[str], masks: Sequence[np.ndarray], n: int) -> list[str]:
    """The ``n`` supports annotating the most distinct classes; ties keep order."""
    counts = [len(np.unique(m)) for m in masks]
    order = sorted(range(len(ids)), key=lambda i: (-counts[i], i))
    return [ids[i] for i in sorted(order[:n])]


@dataclass
class Episode:
    support_image: np.ndarray
    support_mask: LabelMask
    query_image: np.ndarray
    query_mask: LabelMask | None
    classes: tuple[int, ...]
    support_id: str = ""
    query_id: str = ""

    @property
    def foreground_classes(self) -> tuple[int, ...]:
        return tuple(c for c in self.classes if c != BACKGROUND)


def make_episode(
    support: tuple[np.ndarray, np.ndarray],
    query: tuple[np.ndarray, np.ndarray | None],
    base: Iterable[int] | None = None,
    support_id: str = "",
    query_id: str = "",
) -> Episode:
    """Pair a support and a query; ``base`` set means training relabeling applies."""
    s_mask = LabelMask(support[1])
    q_mask = None if query[1] is None else LabelMask(query[1])
    if base is not None:
        s_mask = relabel_for_training(s_mask, base)
        if q_mask is not None:
            q_mask = relabel_for_training(q_mask, base)
    classes = tuple(sorted(s_mask.classes() | {BACKGROUND}))
    if q_mask is not None:
        q_mask = merge_unsupported(q_mask, classes)
    return Episode(support[0], s_mask, query[0], q_mask, classes, support_id, query_id)


def sample_train_episode(
    manifest: SplitManifest, rng: np.random.Generator, taxonomy: ClassTaxonomy = TAXONOMY
) -> Episode:
    """One uniformly drawn (support, query) pair with novel classes hidden."""
    ns, nq = len(manifest.splits["s_train"]), len(manifest.splits["q_train"])
    if ns == 0 or nq == 0:
        raise ConfigError("training splits are empty")
    base, _ = select_fold(taxonomy, manifest.fold)
    si = int(rng.integers(ns))
    qi = int(rng.integers(nq))
    return make_episode(
        manifest.load("s_train", si),
        manifest.load("q_train", qi),
        base,
        manifest.ids("s_train")[si],
        manifest.ids("q_train")[qi],
    )


def enumerate_test_episodes(manifest: SplitManifest) -> list[Episode]:
    """Every test query paired with every fixed support, query-major order."""
    s_ids = manifest.ids("s_test")
    q_ids = manifest.ids("q_test")
    supports = [s_ids.index(sid) for sid in manifest.fixed_supports]
    out = []
    for qi, qid in enumerate(q_ids):
        for si in supports:
            out.append(
                make_episode(manifest.load("s_test", si), manifest.load("q_test", qi), None, s_ids[si], qid)
            )
    return out
