"""Binary checkpoint container shared by layers, decoders and the trainer.

Layout, all little-endian:

    8 bytes   magic "HLSTMAT1"
    u32       variant tag length, then utf-8 tag bytes
    u32       record count
    per record:
        u32       name length, then utf-8 name bytes
        u32       rank
        rank*u32  dims
        float64   payload, row-major
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"HLSTMAT1"

__all__ = ["MAGIC", "save_checkpoint", "load_checkpoint"]


def save_checkpoint(path, variant: str, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        tag = variant.encode("utf-8")
        fh.write(struct.pack("<I", len(tag)))
        fh.write(tag)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(
            f"truncated checkpoint while reading {what}: expected {n} bytes, got {len(buf)} "
            f"(at byte offset {fh.tell() - len(buf)})")
    return buf


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r} at byte offset 0")
        (tag_len,) = struct.unpack("<I", _read_exact(fh, 4, "tag length"))
        variant = _read_exact(fh, tag_len, "variant tag").decode("utf-8")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "record count"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims")) if rank else ()
            n_items = 1
            for d in dims:
                n_items *= d
            payload = _read_exact(fh, 8 * n_items, f"payload of {name!r}")
            arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return variant, arrays
