"""Procedural labelled figures and binary PPM/PGM raster I/O.

Figures are layered geometric primitives painted in a rotated body frame, so
the mask is exactly the rendered coverage. Face, arms and legs share one skin
tone per figure, which keeps part identity tied to position and context rather
than colour alone.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from osparse.errors import FormatError, GenError, IoError
from osparse.taxonomy import TAXONOMY, SplitManifest, choose_fixed_supports

log = logging.getLogger(__name__)

C = {n: i for i, n in enumerate(TAXONOMY.fine_names)}

BASE_COLORS = {
    "hat": (0.80, 0.10, 0.12),
    "hair": (0.22, 0.13, 0.06),
    "upper-clothes": (0.12, 0.30, 0.80),
    "dress": (0.70, 0.20, 0.60),
    "belt": (0.45, 0.28, 0.10),
    "bag": (0.90, 0.72, 0.10),
    "pants": (0.10, 0.50, 0.22),
    "shoes": (0.12, 0.12, 0.14),
    "skin": (0.90, 0.70, 0.55),
}
COLOR_JITTER = 0.08
BG_NOISE = 0.05
MIN_REGION = 8


@dataclass
class FigureSpec:
    seed: int
    scale: float = 1.0
    head_rx: float = 8.5
    head_ry: float = 7.0
    torso_w: float = 24.0
    torso_h: float = 19.0
    arm_w: float = 6.5
    leg_len: float = 20.0
    leg_w: float = 9.0
    pants_frac: float = 0.6
    hat: bool = False
    dress: bool = False
    bag: bool = False
    belt: bool = False
    bag_side: int = 1
    dx: float = 0.0
    dy: float = 0.0
    angle: float = 0.0
    colors: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    background: tuple[float, float, float] = (0.5, 0.5, 0.5)

    @classmethod
    def sample(cls, seed: int) -> "FigureSpec":
        """Draw proportions, wardrobe and colours from ``seed``."""
        rng = np.random.default_rng(seed)
        colors = {
            k: tuple(np.clip(np.asarray(v) + rng.normal(0, COLOR_JITTER, 3), 0, 1).tolist())
            for k, v in BASE_COLORS.items()
        }
        return cls(
            seed=int(seed),
            scale=float(rng.uniform(0.85, 1.0)),
            head_rx=float(rng.uniform(8.0, 9.0)),
            head_ry=float(rng.uniform(6.5, 7.5)),
            torso_w=float(rng.uniform(22.0, 26.0)),
            torso_h=float(rng.uniform(17.0, 20.0)),
            arm_w=float(rng.uniform(6.0, 7.0)),
            leg_len=float(rng.uniform(19.0, 22.0)),
            leg_w=float(rng.uniform(8.5, 9.5)),
            pants_frac=float(rng.uniform(0.45, 0.7)),
            hat=bool(rng.random() < 0.4),
            dress=bool(rng.random() < 0.3),
            bag=bool(rng.random() < 0.4),
            belt=bool(rng.random() < 0.5),
            bag_side=int(rng.choice([-1, 1])),
            dx=float(rng.uniform(-1, 1)),
            dy=float(rng.uniform(-1, 1)),
            angle=float(rng.uniform(-5, 5)),
            colors=colors,
            background=tuple(rng.uniform(0.25, 0.75, 3).tolist()),
        )


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    mask: np.ndarray  # (H, W) uint8 fine ids


def _rect(u, v, x0, x1, y0, y1):
    return (u >= x0) & (u < x1) & (v >= y0) & (v < y1)


def _ellipse(u, v, cx, cy, rx, ry):
    return ((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2 <= 1.0


def generate(spec: FigureSpec, H: int = 64, W: int = 64) -> Sample:
    """Render ``spec`` onto an ``H x W`` canvas."""
    if H < 48 or W < 48:
        raise GenError("canvas must be at least 48x48")
    s = spec.scale * H / 64.0
    sx = spec.scale * W / 64.0
    hat_h = 5.0 * s if spec.hat else 0.0
    head_h = 2 * spec.head_ry * s
    torso_h = spec.torso_h * s
    leg_len = spec.leg_len * s
    height = hat_h + head_h + torso_h + leg_len
    width = (spec.torso_w + 2 * spec.arm_w + (7.0 if spec.bag else 0.0) * 2) * sx
    if height > H - 2 or width > W - 2:
        raise GenError(f"figure {height:.1f}x{width:.1f} does not fit {H}x{W}")

    top = (H - height) / 2 + spec.dy * s
    cx = W / 2 + spec.dx * sx
    cy = top + height / 2
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    t = np.deg2rad(spec.angle)
    u = np.cos(t) * (xx - cx) + np.sin(t) * (yy - cy) + cx
    v = -np.sin(t) * (xx - cx) + np.cos(t) * (yy - cy) + cy

    head_top = top + hat_h * 0.6
    head_cy = head_top + head_h / 2
    rx, ry = spec.head_rx * sx, spec.head_ry * s
    shoulder = head_top + head_h
    waist = shoulder + torso_h
    feet = waist + leg_len
    tw = spec.torso_w * sx
    aw = spec.arm_w * sx
    lw = spec.leg_w * sx
    gap = 1.0 * sx
    pants_end = waist + spec.pants_frac * leg_len
    shoe_h = 4.0 * s

    labels = np.zeros((H, W), dtype=np.uint8)

    def paint(region, name):
        labels[region] = C[name]

    legs = _rect(u, v, cx - gap - lw, cx - gap, waist, feet) | _rect(u, v, cx + gap, cx + gap + lw, waist, feet)
    paint(legs, "legs")
    if not spec.dress:
        paint(legs & (v < pants_end), "pants")
    shoes = _rect(u, v, cx - gap - lw - sx, cx - gap + sx, feet - shoe_h, feet) | _rect(
        u, v, cx + gap - sx, cx + gap + lw + sx, feet - shoe_h, feet
    )
    paint(shoes, "shoes")
    torso = _rect(u, v, cx - tw / 2, cx + tw / 2, shoulder, waist)
    if spec.dress:
        skirt_end = waist + 0.4 * leg_len
        frac = np.clip((v - waist) / max(skirt_end - waist, 1e-9), 0, 1)
        half = tw / 2 + 2.0 * sx * frac
        skirt = (v >= waist) & (v < skirt_end) & (np.abs(u - cx) < half)
        paint(torso | skirt, "dress")
    else:
        paint(torso, "upper-clothes")
    if spec.belt:
        paint(_rect(u, v, cx - tw / 2, cx + tw / 2, waist - 4.0 * s, waist), "belt")
    arm_end = waist + 2.0 * s
    arms = _rect(u, v, cx - tw / 2 - aw, cx - tw / 2, shoulder + s, arm_end) | _rect(
        u, v, cx + tw / 2, cx + tw / 2 + aw, shoulder + s, arm_end
    )
    paint(arms, "arms")
    if spec.bag:
        edge = cx + spec.bag_side * (tw / 2 + aw - 1.0 * sx)
        bx0, bx1 = (edge, edge + 7 * sx) if spec.bag_side > 0 else (edge - 7 * sx, edge)
        paint(_rect(u, v, bx0, bx1, waist - 6 * s, waist + 2 * s), "bag")
    head = _ellipse(u, v, cx, head_cy, rx, ry)
    paint(head, "face")
    hair = head & ((v < head_top + 0.42 * head_h) | (np.abs(u - cx) > 0.75 * rx))
    paint(hair, "hair")
    if spec.hat:
        paint(_rect(u, v, cx - rx - sx, cx + rx + sx, top, head_top + 0.3 * head_h), "hat")

    counts = np.bincount(labels.ravel(), minlength=TAXONOMY.num_fine)
    small = [TAXONOMY.fine_names[c] for c in range(1, len(counts)) if 0 < counts[c] < MIN_REGION]
    if small:
        raise GenError(f"regions below {MIN_REGION} px: {small}")

    rng = np.random.default_rng([spec.seed, 1])
    image = np.empty((H, W, 3), dtype=np.float64)
    bg = labels == 0
    noise = rng.uniform(-1, 1, (H, W, 3)) * BG_NOISE * np.sqrt(3.0)
    image[:] = np.asarray(spec.background)
    image[bg] += noise[bg]
    skin = {"face", "arms", "legs"}
    for name, cid in C.items():
        if cid == 0:
            continue
        key = "skin" if name in skin else name
        image[labels == cid] = spec.colors.get(key, BASE_COLORS[key])
    return Sample(np.clip(image, 0.0, 1.0), labels)


def generate_seeded(seed: int, H: int = 64, W: int = 64) -> Sample:
    return generate(FigureSpec.sample(seed), H, W)


# raster I/O -------------------------------------------------------------------

_HEADER = re.compile(rb"^(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def _to_bytes(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        return arr
    if arr.dtype.kind == "f":
        if arr.size and (arr.min() < 0 or arr.max() > 1):
            raise FormatError("float image values must lie in [0, 1]")
        return np.round(arr * 255.0).astype(np.uint8)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise FormatError("integer raster values must lie in [0, 255]")
    return arr.astype(np.uint8)


def _write(path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    try:
        with open(path, "wb") as f:
            f.write(magic + b"\n%d %d\n255\n" % (w, h))
            f.write(np.ascontiguousarray(arr).tobytes())
    except OSError as exc:
        raise IoError(str(exc)) from exc


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    m = _HEADER.match(raw)
    if m is None or m.group(1) != magic:
        raise FormatError(f"{path}: not a binary {magic.decode()} file")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported")
    body = raw[m.end() :]
    n = w * h * channels
    if len(body) != n:
        raise FormatError(f"{path}: expected {n} payload bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def write_ppm(path, image: np.ndarray) -> None:
    arr = _to_bytes(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"PPM needs (H, W, 3), got {arr.shape}")
    _write(path, b"P6", arr)


def read_ppm(path) -> np.ndarray:
    return _read(path, b"P6", 3)


def write_pgm(path, mask: np.ndarray) -> None:
    arr = _to_bytes(mask)
    if arr.ndim != 2:
        raise FormatError(f"PGM needs (H, W), got {arr.shape}")
    _write(path, b"P5", arr)


def read_pgm(path) -> np.ndarray:
    return _read(path, b"P5", 1)


# datasets ---------------------------------------------------------------------


def generate_dataset(
    seed: int,
    counts: tuple[int, int, int, int],
    H: int,
    W: int,
    out_dir,
    fold: int = 1,
    n_fixed: int = 5,
) -> SplitManifest:
    """Write four disjoint splits of figures plus ``manifest.json`` to ``out_dir``."""
    from osparse.taxonomy import SPLITS

    if any(c < 1 for c in counts):
        raise GenError(f"split counts must be >= 1, got {counts}")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    seeds = np.random.SeedSequence(seed).generate_state(sum(counts) * 4, dtype=np.uint32)
    cursor = 0
    splits: dict[str, list[tuple[str, str]]] = {}
    test_masks = []
    for name, n in zip(SPLITS, counts):
        entries = []
        i = 0
        while len(entries) < n:
            try:
                sample = generate_seeded(int(seeds[cursor]), H, W)
            except GenError:
                log.debug("seed %d rejected", seeds[cursor])
                cursor += 1
                continue
            cursor += 1
            stem = f"{name}_{i:04d}"
            write_ppm(out / "images" / f"{stem}.ppm", sample.image)
            write_pgm(out / "masks" / f"{stem}.pgm", sample.mask)
            entries.append((f"images/{stem}.ppm", f"masks/{stem}.pgm"))
            if name == "s_test":
                test_masks.append(sample.mask)
            i += 1
        splits[name] = entries
    s_ids = [Path(p).stem for p, _ in splits["s_test"]]
    fixed = choose_fixed_supports(s_ids, test_masks, min(n_fixed, len(s_ids)))
    manifest = SplitManifest(out, fold, splits, fixed)
    manifest.save(out / "manifest.json")
    return manifest
