"""Event file formats: EVCL binary, N-MNIST 5-byte records, CSV, coarse caches."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .events import EVENT_DTYPE, SensorGeometry, make_events, validate_events

EVCL_MAGIC = b"EVCL"
_EVCL_HEADER = struct.Struct("<4sHHQ")
_EVCL_RECORD = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<i8"), ("p", "u1")])
NMNIST_GEOMETRY = SensorGeometry(34, 34)


class FormatError(ValueError):
    pass


def encode_evcl(events: np.ndarray, geometry: SensorGeometry) -> bytes:
    validate_events(events, geometry)
    rec = np.empty(len(events), dtype=_EVCL_RECORD)
    for f in ("x", "y", "t", "p"):
        rec[f] = events[f]
    return _EVCL_HEADER.pack(EVCL_MAGIC, geometry.W, geometry.H, len(events)) + rec.tobytes()


def decode_evcl(buf: bytes, offset: int = 0) -> tuple[np.ndarray, SensorGeometry, int]:
    """Decode one EVCL block starting at ``offset``; returns (events, geometry, end offset)."""
    if len(buf) - offset < _EVCL_HEADER.size:
        raise FormatError(f"truncated EVCL header at byte {offset}")
    magic, w, h, count = _EVCL_HEADER.unpack_from(buf, offset)
    if magic != EVCL_MAGIC:
        raise FormatError(f"bad EVCL magic {magic!r} at byte {offset}")
    start = offset + _EVCL_HEADER.size
    end = start + count * _EVCL_RECORD.itemsize
    if end > len(buf):
        raise FormatError(f"truncated EVCL payload: need {end} bytes, have {len(buf)}")
    try:
        geometry = SensorGeometry(w, h)
    except ValueError:
        raise FormatError(f"bad EVCL geometry {w}x{h} at byte {offset}") from None
    rec = np.frombuffer(buf, dtype=_EVCL_RECORD, count=count, offset=start)
    ev = make_events(rec["x"], rec["y"], rec["t"], rec["p"])
    try:
        validate_events(ev, geometry)
    except ValueError as exc:
        raise FormatError(f"invalid EVCL block at byte {offset}: {exc}") from None
    return ev, geometry, end


def write_evcl(path, events: np.ndarray, geometry: SensorGeometry) -> None:
    Path(path).write_bytes(encode_evcl(events, geometry))


def read_evcl(path) -> tuple[np.ndarray, SensorGeometry]:
    buf = Path(path).read_bytes()
    ev, geometry, end = decode_evcl(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after EVCL block")
    return ev, geometry


def decode_nmnist(buf: bytes) -> np.ndarray:
    """N-MNIST records: x, y, then polarity bit + 23-bit big-endian timestamp."""
    if len(buf) % 5:
        raise FormatError(f"truncated N-MNIST record at byte {len(buf) - len(buf) % 5}")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, 5).astype(np.int64)
    x, y = raw[:, 0], raw[:, 1]
    bad = np.flatnonzero((x >= NMNIST_GEOMETRY.W) | (y >= NMNIST_GEOMETRY.H))
    if len(bad):
        raise FormatError(f"coordinate out of range in record at byte {bad[0] * 5}")
    p = raw[:, 2] >> 7
    t = ((raw[:, 2] & 0x7F) << 16) | (raw[:, 3] << 8) | raw[:, 4]
    back = np.flatnonzero(np.diff(t) < 0)
    if len(back):
        raise FormatError(f"timestamp decreases in record at byte {(back[0] + 1) * 5}")
    return make_events(x, y, t, p)


def encode_nmnist(events: np.ndarray) -> bytes:
    t = events["t"].astype(np.int64)
    if len(t) and (t.min() < 0 or t.max() >= 1 << 23):
        raise FormatError("N-MNIST timestamps must fit in 23 bits")
    out = np.empty((len(events), 5), dtype=np.uint8)
    out[:, 0] = events["x"]
    out[:, 1] = events["y"]
    out[:, 2] = (events["p"].astype(np.int64) << 7) | (t >> 16)
    out[:, 3] = (t >> 8) & 0xFF
    out[:, 4] = t & 0xFF
    return out.tobytes()


def read_nmnist_bin(path) -> tuple[np.ndarray, SensorGeometry]:
    return decode_nmnist(Path(path).read_bytes()), NMNIST_GEOMETRY


def write_csv(path, events: np.ndarray, geometry: SensorGeometry) -> None:
    with open(path, "w") as f:
        f.write(f"# W={geometry.W} H={geometry.H}\n")
        for e in events:
            f.write(f"{e['t']},{e['x']},{e['y']},{e['p']}\n")


def read_csv(path) -> tuple[np.ndarray, SensorGeometry]:
    with open(path) as f:
        header = f.readline().strip()
        try:
            fields = dict(kv.split("=") for kv in header.lstrip("#").split())
            geometry = SensorGeometry(int(fields["W"]), int(fields["H"]))
        except (ValueError, KeyError):
            raise FormatError(f"{path}: bad CSV header {header!r}") from None
        rows = []
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(tuple(int(v) for v in line.split(",")))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: cannot parse {line!r}") from None
            if len(rows[-1]) != 4:
                raise FormatError(f"{path}:{lineno}: expected t,x,y,p")
    if not rows:
        return np.empty(0, dtype=EVENT_DTYPE), geometry
    t, x, y, p = np.array(rows).T
    ev = make_events(x, y, t, p)
    try:
        validate_events(ev, geometry)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return ev, geometry


def read_events(path) -> tuple[np.ndarray, SensorGeometry]:
    """Dispatch on extension: .evcl, .bin (N-MNIST) or .csv."""
    suffix = Path(path).suffix.lower()
    if suffix == ".evcl":
        return read_evcl(path)
    if suffix == ".bin":
        return read_nmnist_bin(path)
    if suffix == ".csv":
        return read_csv(path)
    raise FormatError(f"unknown event file type {suffix!r}")


# coarse cache: concatenated EVCL blocks plus a text index ------------------


def write_block_cache(path, blocks: list[tuple[str, np.ndarray, SensorGeometry]]) -> Path:
    """Write ``(sample_id, events, geometry)`` blocks; returns the index path."""
    path = Path(path)
    index = path.with_suffix(path.suffix + ".idx")
    lines = []
    with open(path, "wb") as f:
        for sample_id, events, geometry in blocks:
            if any(c.isspace() for c in sample_id):
                raise ValueError(f"sample id {sample_id!r} contains whitespace")
            lines.append(f"{sample_id} {f.tell()}\n")
            f.write(encode_evcl(events, geometry))
    index.write_text("".join(lines))
    return index


def read_block_index(path) -> dict[str, int]:
    path = Path(path)
    index = path.with_suffix(path.suffix + ".idx")
    out = {}
    for line in index.read_text().splitlines():
        if line.strip():
            sid, off = line.split()
            out[sid] = int(off)
    return out


def read_block_cache(path) -> dict[str, tuple[np.ndarray, SensorGeometry]]:
    buf = Path(path).read_bytes()
    out = {}
    for sid, off in read_block_index(path).items():
        ev, geometry, _ = decode_evcl(buf, off)
        out[sid] = (ev, geometry)
    return out
