"""Flat named-array checkpoint container.

A checkpoint is an .npz holding arrays by name plus one reserved
``__meta__`` entry with a JSON document (format version, run metadata).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ParseError

FORMAT_VERSION = 1
_META_KEY = "__meta__"


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    if _META_KEY in arrays:
        raise ValueError(f"array name {_META_KEY!r} is reserved")
    doc = dict(meta or {})
    doc["format_version"] = FORMAT_VERSION
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload[_META_KEY] = np.array(json.dumps(doc, sort_keys=True))
    np.savez(path, **payload)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        if _META_KEY not in data:
            raise ParseError(f"{path}: not a checkpoint (missing {_META_KEY})")
        meta = json.loads(str(data[_META_KEY]))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ParseError(
                f"{path}: unsupported checkpoint version {meta.get('format_version')!r}"
            )
        arrays = {k: data[k] for k in data.files if k != _META_KEY}
    return arrays, meta
