"""Versioned checkpoint container: named arrays + JSON metadata with a CRC
over the payload, so corrupted or incompatible files are refused on load."""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"ETCK"
VERSION = 1


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    payload_io = io.BytesIO()
    np.savez(payload_io, **arrays)
    payload = payload_io.getvalue()
    header = json.dumps(
        {"version": VERSION, "crc32": zlib.crc32(payload), "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    header_len = struct.unpack("<I", blob[4:8])[0]
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupted checkpoint header") from exc
    if header.get("version") != VERSION:
        raise CheckpointError(
            f"checkpoint version {header.get('version')} unsupported (want {VERSION})"
        )
    payload = blob[8 + header_len :]
    if zlib.crc32(payload) != header["crc32"]:
        raise CheckpointError("checkpoint payload failed CRC check")
    with np.load(io.BytesIO(payload)) as npz:
        arrays = {name: npz[name] for name in npz.files}
    return arrays, header.get("meta", {})


def rng_state_to_json(state: dict) -> dict:
    """numpy BitGenerator state -> JSON-safe nested dict."""

    def convert(obj):
        if isinstance(obj, dict):
            return {k: convert(v) for k, v in obj.items()}
        if isinstance(obj, np.ndarray):
            return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
        if isinstance(obj, (np.integer,)):
            return int(obj)
        return obj

    return convert(state)


def rng_state_from_json(state: dict) -> dict:
    def convert(obj):
        if isinstance(obj, dict):
            if "__ndarray__" in obj:
                return np.array(obj["__ndarray__"], dtype=obj["dtype"])
            return {k: convert(v) for k, v in obj.items()}
        return obj

    return convert(state)
