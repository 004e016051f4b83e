"""File formats: MSFLOW1 tensors, model checkpoints, images, JSON lines."""

from __future__ import annotations

import io as _io
import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"MSFLOW1"


class FormatError(ValueError):
    pass


def write_tensor(f, array: np.ndarray):
    """Write one record: magic, uint32 rank, uint32 extents, float32 LE values."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    f.write(MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes(order="C"))


def read_tensor(f) -> np.ndarray:
    magic = f.read(len(MAGIC))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    raw = f.read(4 * count)
    if len(raw) != 4 * count:
        raise FormatError(f"truncated tensor: expected {4 * count} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def save_tensor(path, array: np.ndarray):
    with open(path, "wb") as f:
        write_tensor(f, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def tensor_bytes(array: np.ndarray) -> bytes:
    buf = _io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def save_checkpoint(directory, tensors: dict[str, np.ndarray], meta: dict):
    """A checkpoint is a directory: ``meta.json`` plus one MSFLOW1 file per tensor."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = sorted(tensors)
    for name in names:
        save_tensor(d / f"{name}.msf", tensors[name])
    meta = dict(meta, tensors=names)
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    tensors = {name: load_tensor(d / f"{name}.msf") for name in meta["tensors"]}
    return tensors, meta


def read_image(path, size: int | None = None) -> np.ndarray:
    from PIL import Image

    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img: np.ndarray):
    from PIL import Image

    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    # fixed PNG settings keep output bytes reproducible
    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def write_jsonl(path, rows: Iterable[dict]):
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
