"""Versioned little-endian file formats and atomic writers.

Layout shared by datasets (``.svgd``) and checkpoints (``.svgc``)::

    magic (4 bytes) | version u32 | header length u32 | header JSON (utf-8) | payload

Dataset payload: float64 images then int32 labels. Checkpoint payload: float32
arrays in header order, each with its byte length declared in the header.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

DATASET_MAGIC = b"SVGD"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"SVGL"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<4sII")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj) -> None:
    atomic_write_text(path, dump_json(obj))


def _pack(magic: bytes, version: int, header: dict, payload: bytes) -> bytes:
    head = json.dumps(header, sort_keys=True, default=_json_default).encode("utf-8")
    return _PREFIX.pack(magic, version, len(head)) + head + payload


def _unpack(blob: bytes, magic: bytes, max_version: int, what: str):
    if len(blob) < _PREFIX.size:
        raise FormatError(f"truncated {what}: {len(blob)} bytes")
    got, version, hlen = _PREFIX.unpack_from(blob)
    if got != magic:
        raise FormatError(f"bad magic {got!r} for {what}, expected {magic!r}")
    if version > max_version or version < 1:
        raise FormatError(f"{what} format version {version} unsupported (max {max_version})")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise FormatError(f"truncated {what} header")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt {what} header: {exc}") from exc
    return header, blob[start + hlen:]


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


# ---------------------------------------------------------------- datasets

def dataset_bytes(dataset) -> bytes:
    n = len(dataset)
    if n == 0:
        raise FormatError("refusing to write an empty dataset")
    images = np.ascontiguousarray(dataset.images, dtype="<f8")
    labels = np.ascontiguousarray(dataset.labels, dtype="<i4")
    header = {"n": n, "image_shape": list(images.shape[1:]), "config": dataset.config,
              "image_dtype": "<f8", "label_dtype": "<i4"}
    return _pack(DATASET_MAGIC, DATASET_VERSION, header, images.tobytes() + labels.tobytes())


def save_dataset(path, dataset) -> None:
    atomic_write_bytes(path, dataset_bytes(dataset))


def load_dataset(path):
    from .datagen import ShapeImageDataset

    header, payload = _unpack(_read(path), DATASET_MAGIC, DATASET_VERSION, "dataset")
    try:
        n = int(header["n"])
        shape = tuple(int(s) for s in header["image_shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"dataset header missing fields: {exc}") from exc
    n_img = n * int(np.prod(shape)) * 8
    if len(payload) != n_img + n * 4:
        raise FormatError(f"truncated dataset payload: {len(payload)} != {n_img + n * 4}")
    images = np.frombuffer(payload[:n_img], dtype="<f8").reshape((n,) + shape).astype(np.float64)
    labels = np.frombuffer(payload[n_img:], dtype="<i4").astype(np.int64)
    return ShapeImageDataset(images, labels, header.get("config", {}))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, kind: str, arrays: dict, meta: dict | None = None) -> None:
    specs, chunks = [], []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        if not np.all(np.isfinite(a)):
            raise FormatError(f"array {name!r} is not finite")
        b = a.tobytes()
        specs.append({"name": name, "shape": list(a.shape), "nbytes": len(b)})
        chunks.append(b)
    header = {"kind": kind, "arrays": specs, "meta": meta or {}}
    atomic_write_bytes(path, _pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, b"".join(chunks)))


def load_checkpoint(path, expect_kind: str | None = None):
    """Returns ``(kind, arrays, meta)`` with arrays widened to float64."""
    header, payload = _unpack(_read(path), CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")
    kind = header.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"{path} holds a {kind!r} checkpoint, expected {expect_kind!r}")
    arrays, off = {}, 0
    for spec in header.get("arrays", []):
        nb = int(spec["nbytes"])
        shape = tuple(int(s) for s in spec["shape"])
        if nb != 4 * int(np.prod(shape)) or off + nb > len(payload):
            raise FormatError(f"truncated or inconsistent array {spec.get('name')!r}")
        arrays[spec["name"]] = np.frombuffer(payload[off:off + nb], dtype="<f4").reshape(shape).astype(np.float64)
        off += nb
    if off != len(payload):
        raise FormatError("trailing bytes after checkpoint payload")
    return kind, arrays, header.get("meta", {})


# ---------------------------------------------------------------- images / csv

def ppm_bytes(image: np.ndarray) -> bytes:
    """Binary PPM (P6) for (H, W, 3) or PGM (P5) for (H, W) images in [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    q = np.round(img * 255.0).astype(np.uint8)
    if q.ndim == 2:
        return f"P5\n{q.shape[1]} {q.shape[0]}\n255\n".encode() + q.tobytes()
    if q.ndim == 3 and q.shape[2] == 3:
        return f"P6\n{q.shape[1]} {q.shape[0]}\n255\n".encode() + q.tobytes()
    raise FormatError(f"cannot encode image of shape {img.shape} as PPM/PGM")


def write_ppm(path, image) -> None:
    atomic_write_bytes(path, ppm_bytes(image))


def read_ppm(path) -> np.ndarray:
    blob = _read(path)
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"P5", b"P6"):
        raise FormatError(f"{path} is not a binary PPM/PGM")
    w, h = (int(x) for x in parts[1].split())
    chans = 3 if parts[0] == b"P6" else 1
    data = np.frombuffer(parts[3], dtype=np.uint8)
    if data.size != w * h * chans:
        raise FormatError("truncated PPM payload")
    img = data.reshape((h, w, chans) if chans == 3 else (h, w))
    return img.astype(np.float64) / 255.0


def tile_images(images, ncols: int, pad: int = 1, pad_value: float = 1.0) -> np.ndarray:
    images = np.asarray(images)
    n, h, w, c = images.shape
    nrows = -(-n // ncols)
    out = np.full((nrows * (h + pad) + pad, ncols * (w + pad) + pad, c), pad_value)
    for i in range(n):
        r, col = divmod(i, ncols)
        y, x = pad + r * (h + pad), pad + col * (w + pad)
        out[y:y + h, x:x + w] = images[i]
    return out


def write_csv(path, header: list, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)
