"""Shared grid/pose types, per-stage random streams and the FQF1 binary container.

FQF1 layout (all little-endian)::

    b"FQF1" | uint32 header length | UTF-8 header (key=value lines) | raw payload

The header always carries ``dtype`` and ``shape``; user keys are stored next to
them and returned by :func:`read_container` without the reserved ones.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FQF1"

DTYPES: dict[str, np.dtype] = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "c64": np.dtype("<c8"),
    "c128": np.dtype("<c16"),
    "u8": np.dtype("u1"),
}
_RESERVED = ("dtype", "shape")


class ContainerError(ValueError):
    """Malformed or unsupported FQF1 data."""


def _dtype_name(dtype: np.dtype) -> str:
    dtype = np.dtype(dtype)
    for name, dt in DTYPES.items():
        if dt.kind == dtype.kind and dt.itemsize == dtype.itemsize:
            return name
    raise ContainerError(f"unsupported dtype {dtype}")


def _format_header(header: Mapping[str, object]) -> str:
    lines = []
    for key, value in header.items():
        key = str(key)
        text = str(value)
        if not key or "=" in key or "\n" in key or "\n" in text:
            raise ContainerError(f"header entry {key!r} is not a single key=value line")
        lines.append(f"{key}={text}")
    return "\n".join(lines)


def _parse_header(text: str) -> dict[str, str]:
    header = {}
    for line in text.split("\n"):
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ContainerError(f"bad header line {line!r}")
        header[key] = value
    return header


def write_container(path, header: Mapping[str, object], payload: np.ndarray) -> None:
    """Write ``payload`` with ``header`` metadata to ``path`` in FQF1 format.

    Header values are stringified; pass strings if an exact round trip of the
    header mapping is required.
    """
    payload = np.asarray(payload)
    name = _dtype_name(payload.dtype)
    clash = [k for k in header if k in _RESERVED]
    if clash:
        raise ContainerError(f"reserved header keys: {clash}")
    full = {"dtype": name, "shape": ",".join(str(n) for n in payload.shape)}
    full.update(header)
    text = _format_header(full).encode("utf-8")
    data = np.ascontiguousarray(payload, dtype=DTYPES[name]).tobytes(order="C")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        fh.write(data)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict[str, str], np.ndarray]:
    """Inverse of :func:`write_container`."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise ContainerError(f"{path}: truncated header length")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise ContainerError(f"{path}: truncated header")
    header = _parse_header(raw[8 : 8 + hlen].decode("utf-8"))
    try:
        dtype = DTYPES[header.pop("dtype")]
        shape_text = header.pop("shape")
    except KeyError as exc:
        raise ContainerError(f"{path}: missing header key {exc}") from None
    shape = tuple(int(s) for s in shape_text.split(",") if s)
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    body = raw[8 + hlen :]
    if len(body) < expected:
        raise ContainerError(f"{path}: truncated payload ({len(body)} < {expected} bytes)")
    if len(body) > expected:
        raise ContainerError(f"{path}: payload size {len(body)} does not match header ({expected})")
    payload = np.frombuffer(body, dtype=dtype).reshape(shape).copy()
    return header, payload


def write_bundle(path, header: Mapping[str, object], arrays: Mapping[str, np.ndarray]) -> None:
    """Pack several named arrays into one FQF1 file (u8 payload + section table)."""
    sections = []
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dname = _dtype_name(arr.dtype)
        shape = "x".join(str(n) for n in arr.shape)
        sections.append(f"{name}:{dname}:{shape}")
        chunks.append(np.ascontiguousarray(arr, dtype=DTYPES[dname]).tobytes())
    full = dict(header)
    full["sections"] = ";".join(sections)
    payload = np.frombuffer(b"".join(chunks), dtype=np.uint8)
    write_container(path, full, payload)


def read_bundle(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    header, payload = read_container(path)
    if "sections" not in header:
        raise ContainerError(f"{path}: not a bundle (no sections key)")
    table = header.pop("sections")
    raw = payload.tobytes()
    arrays = {}
    offset = 0
    for entry in filter(None, table.split(";")):
        name, dname, shape_text = entry.split(":")
        shape = tuple(int(s) for s in shape_text.split("x") if s)
        dtype = DTYPES[dname]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(raw):
            raise ContainerError(f"{path}: section {name} truncated")
        arrays[name] = np.frombuffer(raw[offset : offset + nbytes], dtype=dtype).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ContainerError(f"{path}: {len(raw) - offset} trailing bytes after sections")
    return header, arrays


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Independent Philox stream for ``stage`` derived from the global 64-bit seed.

    Streams depend only on (seed, stage name), never on execution order.
    """
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    digest = hashlib.blake2b(stage.encode("utf-8"), digest_size=8).digest()
    stage_key = int.from_bytes(digest, "little")
    return np.random.Generator(np.random.Philox(key=[seed, stage_key]))


def fmt_floats(values) -> str:
    """Lossless comma-joined float text for headers."""
    return ",".join(repr(float(v)) for v in np.ravel(values))


def parse_floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",") if v], dtype=float)


@dataclass(frozen=True)
class VoxelGrid:
    """Regular node-centred grid. ``data`` is indexed ``[i, j, k]`` (x, y, z), with a
    trailing axis of length 3 for vector grids. Flat order is x fastest."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    data: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive lengths, got {self.spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        if self.data is not None:
            data = np.asarray(self.data)
            if data.shape[:3] != dims or data.ndim not in (3, 4) or (data.ndim == 4 and data.shape[3] != 3):
                raise ValueError(f"data shape {data.shape} incompatible with dims {dims}")

    @classmethod
    def covering(cls, lo, hi, spacing) -> "VoxelGrid":
        """Smallest grid with nodes starting at ``lo`` that reaches ``hi``."""
        lo = np.asarray(lo, float)
        hi = np.asarray(hi, float)
        spacing = np.broadcast_to(np.asarray(spacing, float), (3,))
        dims = np.maximum(1, np.ceil((hi - lo) / spacing - 1e-9).astype(int) + 1)
        return cls(tuple(dims), tuple(spacing), tuple(lo))

    @property
    def n_points(self) -> int:
        return int(np.prod(self.dims))

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    @property
    def is_vector(self) -> bool:
        return self.data is not None and np.ndim(self.data) == 4

    def with_data(self, data) -> "VoxelGrid":
        return VoxelGrid(self.dims, self.spacing, self.origin, None if data is None else np.asarray(data))

    def axes(self) -> list[np.ndarray]:
        return [o + s * np.arange(n) for o, s, n in zip(self.origin, self.spacing, self.dims)]

    def flat_index(self, i, j, k):
        nx, ny, _ = self.dims
        return np.asarray(i) + nx * (np.asarray(j) + ny * np.asarray(k))

    def unravel(self, offset):
        nx, ny, _ = self.dims
        offset = np.asarray(offset)
        return offset % nx, (offset // nx) % ny, offset // (nx * ny)

    def points(self) -> np.ndarray:
        """Node coordinates in flat (x fastest) order, shape (n_points, 3)."""
        x, y, z = self.axes()
        zz, yy, xx = np.meshgrid(z, y, x, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)

    def flat_data(self) -> np.ndarray:
        if self.data is None:
            raise ValueError("grid has no data")
        if self.is_vector:
            return np.moveaxis(self.data, -1, 0).reshape(-1, order="F")
        return np.asarray(self.data).reshape(-1, order="F")

    def header(self) -> dict[str, str]:
        return {
            "dims": ",".join(str(n) for n in self.dims),
            "spacing": fmt_floats(self.spacing),
            "origin": fmt_floats(self.origin),
        }

    @classmethod
    def from_header(cls, header: Mapping[str, str]) -> "VoxelGrid":
        dims = tuple(int(v) for v in header["dims"].split(","))
        return cls(dims, tuple(parse_floats(header["spacing"])), tuple(parse_floats(header["origin"])))

    @classmethod
    def from_flat(cls, dims, spacing, origin, flat, vector: bool = False) -> "VoxelGrid":
        dims = tuple(int(n) for n in dims)
        if vector:
            data = np.moveaxis(np.asarray(flat).reshape((3,) + dims, order="F"), 0, -1)
        else:
            data = np.asarray(flat).reshape(dims, order="F")
        return cls(dims, spacing, origin, np.ascontiguousarray(data))


def save_grid(path, grid: VoxelGrid, extra: Mapping[str, object] | None = None, dtype=None) -> None:
    header = grid.header()
    header["vector"] = "1" if grid.is_vector else "0"
    if extra:
        header.update({k: str(v) for k, v in extra.items()})
    flat = grid.flat_data()
    if dtype is not None:
        flat = flat.astype(dtype)
    write_container(path, header, flat)


def load_grid(path) -> tuple[VoxelGrid, dict[str, str]]:
    header, flat = read_container(path)
    vector = header.pop("vector", "0") == "1"
    base = VoxelGrid.from_header(header)
    for key in ("dims", "spacing", "origin"):
        header.pop(key)
    return VoxelGrid.from_flat(base.dims, base.spacing, base.origin, flat, vector), header


@dataclass(frozen=True)
class Pose3:
    """Position plus orientation; orientation columns are heading, left, up."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.orientation, float)
        if R.shape != (3, 3):
            raise ValueError("orientation must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("orientation must be a proper rotation")
        object.__setattr__(self, "position", np.asarray(self.position, float).reshape(3))
        object.__setattr__(self, "orientation", R)

    @property
    def heading(self) -> np.ndarray:
        return self.orientation[:, 0]


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation by ``angle`` radians about unit ``axis``."""
    axis = np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )
