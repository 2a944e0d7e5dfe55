"""Parameter checkpoints: ``manifest.json`` plus one little-endian ``params.bin``."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
BLOB = "params.bin"


def save_checkpoint(directory, params: dict[str, np.ndarray]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(directory / BLOB, "wb") as fh:
        for name, arr in params.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes(order="C")
            fh.write(raw)
            entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "f64",
                            "byte_offset": offset, "byte_len": len(raw)})
            offset += len(raw)
    (directory / MANIFEST).write_text(json.dumps(entries, indent=2))
    return directory


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    entries = json.loads((directory / MANIFEST).read_text())
    blob = (directory / BLOB).read_bytes()
    out = {}
    for e in entries:
        if e["dtype"] != "f64":
            raise ValueError(f"unsupported dtype {e['dtype']!r} for {e['name']}")
        chunk = blob[e["byte_offset"]:e["byte_offset"] + e["byte_len"]]
        out[e["name"]] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return out
