"""POPC checkpoints: a little-endian named-tensor table closed by a CRC32.

Layout::

    b"POPC" | u32 version | u32 stage mask | u32 count
    count x ( u16 name_len | name utf-8 | u8 dtype tag | u8 ndim | ndim x u32 dim | payload )
    u32 crc32 of every preceding byte

Entries are written sorted by name, so equal states give equal bytes.
Prototype banks travel as ``bank{stage}.{class}`` float64 vectors, each with a
``.mode`` byte (1 = dynamic); run metadata lives under ``meta.*``.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from osparse.errors import CorruptCheckpoint, FormatError, IoError

MAGIC = b"POPC"
VERSION = 1
TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}


def stage_mask(stages) -> int:
    m = 0
    for s in stages:
        if s not in (1, 2, 3):
            raise FormatError(f"stage {s} cannot be recorded")
        m |= 1 << (s - 1)
    return m


def mask_stages(mask: int) -> tuple[int, ...]:
    return tuple(s for s in (1, 2, 3) if mask >> (s - 1) & 1)


def encode(tensors: dict[str, np.ndarray], stages) -> bytes:
    out = [MAGIC, struct.pack("<III", VERSION, stage_mask(stages), len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        tag = TAG_OF.get(arr.dtype.newbyteorder("="))
        if tag is None:
            raise FormatError(f"{name}: dtype {arr.dtype} has no checkpoint tag")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"{name}: name or rank too large")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", tag, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=TAGS[tag]).tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], tuple[int, ...]]:
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise CorruptCheckpoint("not a POPC checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpoint("CRC32 mismatch")
    version, mask, count = struct.unpack_from("<III", body, 4)
    if version != VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    pos, out = 16, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2 : pos + 2 + n].decode("utf-8")
            pos += 2 + n
            if name in out:
                raise CorruptCheckpoint(f"duplicate entry {name}")
            tag, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            dt = TAGS[tag]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + size > len(body):
                raise CorruptCheckpoint(f"{name}: payload runs past the end")
            arr = np.frombuffer(body, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape)
            out[name] = arr.astype(dt.newbyteorder("="))
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"malformed entry table: {exc}") from exc
    if pos != len(body) or len(out) != count:
        raise CorruptCheckpoint("entry table does not match the header")
    return out, mask_stages(mask)


def save(path, tensors: dict[str, np.ndarray], stages) -> bytes:
    blob = encode(tensors, stages)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(blob)
        tmp.replace(path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return blob


def load(path) -> tuple[dict[str, np.ndarray], tuple[int, ...]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return decode(blob)


# pipeline state <-> tensor table ------------------------------------------------


def state_tensors(state, stages) -> dict[str, np.ndarray]:
    """Parameters, banks and metadata of ``stages`` as plain arrays."""
    out: dict[str, np.ndarray] = {}
    for s in stages:
        out.update({n: t.data for n, t in state.stage_parameters(s).items()})
        if s in state.banks:
            for c, p in state.banks[s].protos.items():
                out[f"bank{s}.{c}"] = np.asarray(p, dtype=np.float64)
                out[f"bank{s}.{c}.mode"] = np.array([1], dtype=np.uint8)  # 1 = dynamic
    out["meta.fold"] = np.array([state.fold], dtype=np.uint8)
    out["meta.test_weight"] = np.array([state.test_weight[2], state.test_weight[3]], dtype=np.float64)
    return out


def restore(state, tensors: dict[str, np.ndarray], stages) -> None:
    """Copy ``stages`` from a tensor table into ``state``; shapes must match exactly."""
    if "meta.fold" in tensors and int(tensors["meta.fold"][0]) != state.fold:
        raise FormatError(f"checkpoint is for fold {int(tensors['meta.fold'][0])}, run uses fold {state.fold}")
    for s in stages:
        params = state.stage_parameters(s)
        for name, t in params.items():
            if name not in tensors:
                raise FormatError(f"checkpoint lacks {name}")
            arr = tensors[name]
            if arr.shape != t.data.shape or arr.dtype != t.data.dtype:
                raise FormatError(f"{name}: checkpoint {arr.dtype}{arr.shape} vs model {t.data.dtype}{t.data.shape}")
            t.data = arr.copy()
        if s in state.banks:
            prefix = f"bank{s}."
            state.banks[s].protos = {
                int(n[len(prefix) :]): tensors[n].copy()
                for n in sorted(tensors)
                if n.startswith(prefix) and not n.endswith(".mode") and tensors.get(n + ".mode", [1])[0] == 1
            }
        state.trained.add(s)
    if "meta.test_weight" in tensors:
        w = tensors["meta.test_weight"]
        for s in stages:
            if s in (2, 3):
                state.test_weight[s] = float(w[s - 2])


def save_state(path, state, stages) -> bytes:
    return save(path, state_tensors(state, stages), stages)


def load_state(path, state, require=()) -> tuple[int, ...]:
    tensors, stages = load(path)
    missing = [s for s in require if s not in stages]
    if missing:
        raise FormatError(f"{path} does not cover stages {missing}")
    restore(state, tensors, stages)
    return stages
