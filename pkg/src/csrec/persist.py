"""Binary embedding files, manifests and small file helpers."""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .model import EmbeddingTable

MAGIC = b"CSREMB\x00\x01"
# magic, endianness marker, 7 pad bytes, K, M, N
_HEADER = struct.Struct("<8sc7xQQQ")


def save_embeddings(emb: EmbeddingTable, path) -> None:
    """Header then P (K x M) and Q (K x N), row-major little-endian float64."""
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, b"<", emb.K, emb.num_users, emb.num_items))
        f.write(np.ascontiguousarray(emb.P, dtype="<f8").tobytes(order="C"))
        f.write(np.ascontiguousarray(emb.Q, dtype="<f8").tobytes(order="C"))


def load_embeddings(path) -> EmbeddingTable:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated embedding file")
    magic, endian, K, M, N = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not an embedding file")
    dtype = np.dtype("<f8") if endian == b"<" else np.dtype(">f8")
    expected = _HEADER.size + 8 * K * (M + N)
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size)
    P = body[: K * M].reshape(K, M).astype(np.float64)
    Q = body[K * M:].reshape(K, N).astype(np.float64)
    return EmbeddingTable(P, Q)


def export_text(emb: EmbeddingTable, dataset, path) -> None:
    """One line per user/item: ``kind<TAB>external id<TAB>factors...``."""
    with open(path, "w", encoding="utf-8") as f:
        for kind, ids, A in (("user", dataset.user_ids, emb.P), ("item", dataset.item_ids, emb.Q)):
            for c, ext in enumerate(ids):
                f.write(kind + "\t" + str(ext) + "\t" + " ".join(repr(float(x)) for x in A[:, c]) + "\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
