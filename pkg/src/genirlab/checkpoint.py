"""Parameter checkpoint container and plain key-value config files.

Checkpoint layout (single file):

    b"PAMTCKPT1\\n"                        header
    uint64 LE manifest byte length
    manifest JSON (utf-8)                  name -> {shape, dtype, offset}, frozen list
    raw little-endian float64 blob

Offsets are byte offsets into the blob. The manifest preserves parameter
order so that reload -> save round-trips byte-identically.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autograd import ContractError
from .optim import ParameterSet

HEADER = b"PAMTCKPT1\n"


def save_params(params: ParameterSet, path: str | Path) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, tensor in params.items():
        arr = np.asarray(tensor.data, dtype="<f8", order="C")
        raw = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(tensor.data.shape), "dtype": "<f8", "offset": offset}
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "version": 1,
        "params": entries,
        "frozen": params.frozen_names(),
    }
    payload = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(HEADER)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_params(path: str | Path) -> ParameterSet:
    with open(path, "rb") as fh:
        header = fh.read(len(HEADER))
        if header != HEADER:
            raise ContractError(f"{path}: not a PAMTCKPT1 checkpoint")
        (manifest_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(manifest_len).decode())
        blob = fh.read()
    if manifest.get("version") != 1:
        raise ContractError(f"{path}: unsupported checkpoint version")
    params = ParameterSet()
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        params.add(entry["name"], arr.reshape(shape).astype(np.float64))
    params.freeze(*manifest.get("frozen", []))
    return params


def checkpoint_bytes_equal(path_a: str | Path, path_b: str | Path) -> bool:
    return Path(path_a).read_bytes() == Path(path_b).read_bytes()


# -- flat key-value config text ------------------------------------------------


def dump_kv(pairs: dict[str, object], path: str | Path) -> None:
    """Write `key = value` lines; lists as comma-joined scalars."""
    lines = []
    for key in pairs:
        value = pairs[key]
        if isinstance(value, (list, tuple)):
            rendered = ",".join(_render_scalar(v) for v in value)
            rendered = f"[{rendered}]"
        else:
            rendered = _render_scalar(value)
        lines.append(f"{key} = {rendered}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_kv(path: str | Path) -> dict[str, object]:
    pairs: dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ContractError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        pairs[key.strip()] = _parse_value(raw.strip())
    return pairs


def _render_scalar(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str) -> object:
    if raw.startswith("[") and raw.endswith("]"):
        inner = raw[1:-1].strip()
        if not inner:
            return []
        return [_parse_value(part.strip()) for part in inner.split(",")]
    low = raw.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw
