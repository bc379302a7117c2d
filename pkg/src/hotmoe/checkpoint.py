"""Single-file tensor checkpoint: UTF-8 manifest, then raw float64 payload.

Layout:
    line 1: magic "hotmoe-checkpoint v1"
    line 2: "ntensors <N>"
    N records: "<name> f64 <d0>x<d1>x... <byte offset into payload>"
    one blank line, then little-endian float64 bytes, row-major,
    concatenated in manifest order.

Round-trips are bit-exact by construction: bytes in, identical bytes out.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import IoError

_MAGIC = "hotmoe-checkpoint v1"


def _shape_tag(shape: tuple[int, ...]) -> str:
    if shape == ():
        return "0d"
    return "x".join(str(d) for d in shape)


def _parse_shape(tag: str) -> tuple[int, ...]:
    if tag == "0d":
        return ()
    return tuple(int(d) for d in tag.split("x"))


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    lines = [_MAGIC, f"ntensors {len(arrays)}"]
    payload_parts: list[bytes] = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = arr.astype("<f8", copy=False).tobytes(order="C")
        lines.append(f"{name} f64 {_shape_tag(arr.shape)} {offset}")
        payload_parts.append(raw)
        offset += len(raw)
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        for part in payload_parts:
            fh.write(part)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise IoError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    nl = blob.find(b"\n")
    if nl < 0 or blob[:nl].decode("utf-8") != _MAGIC:
        raise IoError(f"bad checkpoint magic in {path}")
    pos = nl + 1
    nl = blob.find(b"\n", pos)
    count_line = blob[pos:nl].decode("utf-8")
    if not count_line.startswith("ntensors "):
        raise IoError(f"bad checkpoint header in {path}")
    ntensors = int(count_line.split(" ", 1)[1])
    pos = nl + 1
    records: list[tuple[str, tuple[int, ...], int]] = []
    for _ in range(ntensors):
        nl = blob.find(b"\n", pos)
        name, dtype_tag, shape_tag, off = blob[pos:nl].decode("utf-8").split(" ")
        if dtype_tag != "f64":
            raise IoError(f"unsupported dtype tag {dtype_tag} in {path}")
        records.append((name, _parse_shape(shape_tag), int(off)))
        pos = nl + 1
    if blob[pos:pos + 1] != b"\n":
        raise IoError(f"missing manifest terminator in {path}")
    payload = blob[pos + 1:]
    out: dict[str, np.ndarray] = {}
    for name, shape, off in records:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=off)
        out[name] = arr.astype(np.float64).reshape(shape)
    return out
