"""File plumbing: versioned array blobs, PNG images and JSON documents."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image

BLOB_MAGIC = "GSAVATAR-BLOB"
BLOB_VERSION = 1


class FormatError(ValueError):
    """A file does not follow the declared layout."""


def save_blob(path, arrays: dict[str, np.ndarray], kind: str, meta: dict | None = None) -> None:
    """Write named arrays behind a one-line JSON header.

    Arrays are stored verbatim (little-endian, dtype preserved), so a
    save/load round trip is bit-exact.
    """
    entries = []
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        payload.append(arr.tobytes(order="C"))
    header = json.dumps({"kind": kind, "arrays": entries, "meta": meta or {}}, sort_keys=True)
    with open(path, "wb") as f:
        f.write(f"{BLOB_MAGIC} {BLOB_VERSION}\n".encode())
        f.write(header.encode() + b"\n")
        for chunk in payload:
            f.write(chunk)


def load_blob(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    first = data.find(b"\n")
    second = data.find(b"\n", first + 1)
    if first < 0 or second < 0:
        raise FormatError(f"{path}: truncated header")
    magic = data[:first].decode(errors="replace").split()
    if len(magic) != 2 or magic[0] != BLOB_MAGIC:
        raise FormatError(f"{path}: not a {BLOB_MAGIC} file")
    if int(magic[1]) != BLOB_VERSION:
        raise FormatError(f"{path}: unsupported blob version {magic[1]}")
    try:
        header = json.loads(data[first + 1 : second])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from None
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"{path}: expected a '{kind}' blob, found '{header.get('kind')}'")
    offset = second + 1
    arrays = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: array '{entry['name']}' runs past end of file")
        arrays[entry["name"]] = np.frombuffer(data, dtype=dt, count=int(np.prod(shape)), offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return arrays, header.get("meta", {})


def write_png(path, image: np.ndarray) -> None:
    """Save a float image in [0, 1] (H×W×3 or H×W) as 8-bit PNG."""
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG", optimize=False)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    return arr.astype(np.float64) / 255.0


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
