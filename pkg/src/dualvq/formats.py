"""Binary containers: named-tensor checkpoints, dataset cache, sample dumps.

All integers and floats are little-endian.

Checkpoint ("SDTC", version 1)::

    magic[4] u32 version  u32 meta_len  meta (UTF-8 JSON)  u32 count
    manifest: count x (u16 name_len, name, u8 dtype, u32 ndim, ndim x u32 dim)
    payloads in manifest order; dtype 0 = f32, 1 = f64

Dataset cache ("SDDS", version 1)::

    magic[4] u32 version u32 count u32 g u32 d u32 n_classes
    count x (u16 label, g*g*d f32 embeddings, row-major)

Sample dump ("SDSM", version 1)::

    magic[4] u32 version u32 count u32 g u8 has_embeddings u32 d
    count x (u16 label, g*g x (u16 semantic, u16 detail), [g*g*d f32])
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {"f32": 0, "f64": 1}


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype, count: int) -> np.ndarray:
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype).copy()

    def done(self) -> None:
        if self.pos != len(self.raw):
            raise FormatError(f"{self.path}: {len(self.raw) - self.pos} trailing bytes")


def _open(path, magic: bytes, version: int) -> _Reader:
    r = _Reader(Path(path).read_bytes(), path)
    got = r.take(4)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    (v,) = r.unpack("I")
    if v != version:
        raise FormatError(f"{path}: unsupported version {v}")
    return r


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None,
                 precision: str = "f32") -> None:
    code = _DTYPE_CODES[precision]
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [b"SDTC", struct.pack("<II", 1, len(meta_raw)), meta_raw, struct.pack("<I", len(tensors))]
    payloads = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BI", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payloads.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(parts + payloads))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    r = _open(path, b"SDTC", 1)
    (meta_len,) = r.unpack("I")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata") from exc
    (count,) = r.unpack("I")
    manifest = []
    for _ in range(count):
        (nlen,) = r.unpack("H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("BI")
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code}")
        shape = r.unpack(f"{ndim}I") if ndim else ()
        manifest.append((name, code, shape))
    out = {}
    for name, code, shape in manifest:
        out[name] = r.array(_DTYPES[code], int(np.prod(shape))).reshape(shape).astype(np.float64)
    r.done()
    return out, meta


def save_dataset(path, embeddings: np.ndarray, labels: np.ndarray, n_classes: int) -> None:
    """``embeddings``: (count, g, g, d)."""
    count, g, _, d = embeddings.shape
    rec = np.dtype([("label", "<u2"), ("emb", "<f4", (g * g * d,))])
    body = np.empty(count, dtype=rec)
    body["label"] = labels
    body["emb"] = embeddings.reshape(count, -1)
    header = b"SDDS" + struct.pack("<IIIII", 1, count, g, d, n_classes)
    Path(path).write_bytes(header + body.tobytes())


def load_dataset(path) -> tuple[np.ndarray, np.ndarray, int]:
    r = _open(path, b"SDDS", 1)
    count, g, d, n_classes = r.unpack("IIII")
    rec = np.dtype([("label", "<u2"), ("emb", "<f4", (g * g * d,))])
    body = np.frombuffer(r.take(rec.itemsize * count), dtype=rec)
    r.done()
    emb = body["emb"].astype(np.float64).reshape(count, g, g, d)
    return emb, body["label"].astype(np.int64), n_classes


def save_samples(path, labels: np.ndarray, semantic: np.ndarray, detail: np.ndarray,
                 embeddings: np.ndarray | None = None) -> None:
    """``semantic``/``detail``: (count, g*g) raster-ordered indices."""
    count, mt = semantic.shape
    g = int(round(mt ** 0.5))
    d = 0 if embeddings is None else embeddings.shape[-1]
    fields = [("label", "<u2"), ("codes", "<u2", (mt, 2))]
    if embeddings is not None:
        fields.append(("emb", "<f4", (mt * d,)))
    body = np.empty(count, dtype=np.dtype(fields))
    body["label"] = labels
    body["codes"] = np.stack([semantic, detail], axis=-1)
    if embeddings is not None:
        body["emb"] = embeddings.reshape(count, -1)
    header = b"SDSM" + struct.pack("<IIIBI", 1, count, g, int(embeddings is not None), d)
    Path(path).write_bytes(header + body.tobytes())


def load_samples(path) -> dict:
    r = _open(path, b"SDSM", 1)
    count, g, has_emb, d = r.unpack("IIBI")
    mt = g * g
    fields = [("label", "<u2"), ("codes", "<u2", (mt, 2))]
    if has_emb:
        fields.append(("emb", "<f4", (mt * d,)))
    rec = np.dtype(fields)
    body = np.frombuffer(r.take(rec.itemsize * count), dtype=rec)
    r.done()
    out = {
        "labels": body["label"].astype(np.int64),
        "semantic": body["codes"][..., 0].astype(np.int64),
        "detail": body["codes"][..., 1].astype(np.int64),
        "g": g,
    }
    if has_emb:
        out["embeddings"] = body["emb"].astype(np.float64).reshape(count, g, g, d)
    return out
