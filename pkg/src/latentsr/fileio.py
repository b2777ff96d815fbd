"""On-disk formats: FTNSR1 tensors, P6 PPM images, checkpoint directories.

FTNSR1 layout: magic bytes ``FTNSR1``, one u8 rank, rank u32 little-endian
extents, then the row-major little-endian float32 payload. Rank 0 is a
scalar with an empty extent list.

A checkpoint is a directory of ``<name>.ftnsr`` files plus ``manifest.txt``
with one ``name<TAB>shape<TAB>sha256`` line per tensor, sorted by name so the
manifest itself is byte-stable.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "save_tensor",
    "load_tensor",
    "save_ppm",
    "load_ppm",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_digest",
]

_MAGIC = b"FTNSR1"


def save_tensor(path, data: np.ndarray) -> None:
    """Write one float32 array in FTNSR1 format."""
    # no ascontiguousarray here: it silently promotes rank-0 arrays to rank 1
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim > 255:
        raise ValueError(f"rank {arr.ndim} exceeds FTNSR1 u8 rank field")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<I", extent))
        fh.write(arr.astype("<f4", copy=False).tobytes())


def load_tensor(path) -> np.ndarray:
    """Read one FTNSR1 file back into a float32 array."""
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:6]!r}, expected {_MAGIC!r}")
    off = len(_MAGIC)
    (rank,) = struct.unpack_from("<B", raw, off)
    off += 1
    shape = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
    off += 4 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = off + 4 * count
    if len(raw) != expected:
        raise ValueError(f"{path}: payload {len(raw) - off} bytes, expected {4 * count}")
    flat = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
    return flat.reshape(shape).astype(np.float32)


def save_ppm(path, img: np.ndarray) -> None:
    """Write an image as binary P6 PPM.

    Accepts [H,W,3] or [H,W] (grayscale, replicated to RGB) float arrays with
    values in [0,1]; values are clipped then rounded to 8 bits.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"save_ppm: need [H,W,3] or [H,W], got {arr.shape}")
    h, w, _ = arr.shape
    byte = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(byte.tobytes())


def load_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM into a float [H,W,3] array in [0,1]."""
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    off = 0
    while len(fields) < 4:
        while off < len(raw) and raw[off : off + 1].isspace():
            off += 1
        if raw[off : off + 1] == b"#":
            while off < len(raw) and raw[off : off + 1] != b"\n":
                off += 1
            continue
        start = off
        while off < len(raw) and not raw[off : off + 1].isspace():
            off += 1
        fields.append(raw[start:off])
    off += 1  # single whitespace byte after maxval
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a P6 PPM (got {fields[0]!r})")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=off)
    return (pixels.reshape(h, w, 3).astype(np.float32)) / np.float32(255.0)


def _sha256(path) -> str:
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def save_checkpoint(directory, named: dict[str, np.ndarray]) -> None:
    """Write named tensors plus a checksum manifest into a directory."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(named):
        arr = named[name]
        path = d / f"{name}.ftnsr"
        save_tensor(path, arr)
        shape = "x".join(str(s) for s in np.asarray(arr).shape) or "scalar"
        lines.append(f"{name}\t{shape}\t{_sha256(path)}\n")
    (d / "manifest.txt").write_text("".join(lines), encoding="ascii")


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    """Read a checkpoint directory, verifying every manifest checksum."""
    d = Path(directory)
    manifest = d / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"{directory}: no manifest.txt (not a checkpoint?)")
    named: dict[str, np.ndarray] = {}
    for line in manifest.read_text(encoding="ascii").splitlines():
        if not line.strip():
            continue
        name, shape, digest = line.split("\t")
        path = d / f"{name}.ftnsr"
        actual = _sha256(path)
        if actual != digest:
            raise ValueError(f"{path}: checksum mismatch (manifest {digest[:12]}, file {actual[:12]})")
        named[name] = load_tensor(path)
        del shape
    return named


def checkpoint_digest(directory) -> str:
    """Single digest over the manifest; stable id for a whole checkpoint."""
    return _sha256(Path(directory) / "manifest.txt")
