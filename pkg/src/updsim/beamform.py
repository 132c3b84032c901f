"""Chunked delay-and-sum reconstruction with precomputed per-transmit delay matrices."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numba
import numpy as np
from scipy import signal, sparse

from .core import VoxelGrid, load_grid, read_container, save_grid, write_container
from .rf_sim import RfFrame, Transducer, TxEvent


class BudgetError(MemoryError):
    pass


class AssemblyError(FileNotFoundError):
    pass


def rf_to_iq(rf: RfFrame | np.ndarray, fc: float, fs: float | None = None, t0: float | None = None,
             order: int = 5) -> np.ndarray:
    """Complex baseband: multiply by 2 exp(-i 2 pi fc t), zero-phase Butterworth low-pass at fc."""
    if isinstance(rf, RfFrame):
        fs = rf.fs if fs is None else fs
        t0 = rf.t0 if t0 is None else t0
        data = rf.samples
    else:
        data = np.asarray(rf, float)
        t0 = 0.0 if t0 is None else t0
    if fs is None:
        raise ValueError("sampling rate required for raw arrays")
    if not 0 < fc < fs / 2:
        raise ValueError("fc must lie in (0, fs/2)")
    t = t0 + np.arange(data.shape[0]) / fs
    mixer = 2 * np.exp(-2j * np.pi * fc * t)
    base = data * (mixer[:, None] if data.ndim == 2 else mixer)
    sos = signal.butter(order, fc / (fs / 2), output="sos")
    return signal.sosfiltfilt(sos, base.real, axis=0) + 1j * signal.sosfiltfilt(sos, base.imag, axis=0)


@dataclass(frozen=True)
class ChunkPlan:
    n_points: int
    n_tx: int
    budget: int
    n_chunks: int
    ranges: tuple[tuple[int, int], ...]

    def estimate(self, chunk: int) -> int:
        lo, hi = self.ranges[chunk]
        return 16 * (hi - lo) * self.n_tx


def plan_chunks(n_points: int, n_tx: int, budget: int) -> ChunkPlan:
    """N_chunks = ceil(16 * N_points * N_a / budget) equal contiguous ranges."""
    if n_points < 1 or n_tx < 1:
        raise ValueError("need at least one point and one transmit")
    if budget < 16 * n_tx:
        raise BudgetError("budget cannot hold a single voxel")
    n = max(1, math.ceil(16 * n_points * n_tx / budget))
    # equal split can leave one chunk a row over budget
    while 16 * math.ceil(n_points / n) * n_tx > budget:
        n += 1
    return _equal_plan(n_points, n_tx, budget, n)


def _equal_plan(n_points: int, n_tx: int, budget: int, n: int) -> ChunkPlan:
    n = min(n, n_points)
    edges = np.linspace(0, n_points, n + 1).round().astype(int)
    return ChunkPlan(n_points, n_tx, budget, n, tuple(zip(edges[:-1].tolist(), edges[1:].tolist())))


# complex128 value + int64 column per tap, two taps per (voxel, element), plus the row pointer
MATRIX_BYTES_PER_PAIR = 2 * (16 + 8)


def matrix_bytes_per_voxel(n_tx: int, n_elements: int) -> int:
    """Upper bound on cached delay-matrix storage per voxel for all transmits."""
    return n_tx * (MATRIX_BYTES_PER_PAIR * n_elements + 8)


def plan_reconstruction(n_points: int, n_tx: int, n_elements: int, budget: int,
                        matrix_budget: int | None = None) -> ChunkPlan:
    """Accumulator plan from ``plan_chunks``, split further until one chunk's matrices fit ``matrix_budget``."""
    plan = plan_chunks(n_points, n_tx, budget)
    if matrix_budget is None:
        return plan
    per = matrix_bytes_per_voxel(n_tx, n_elements)
    if matrix_budget < per:
        raise BudgetError("matrix budget cannot hold the delay matrices of a single voxel")
    n = max(plan.n_chunks, math.ceil(n_points * per / matrix_budget))
    while math.ceil(n_points / n) * per > matrix_budget:
        n += 1
    return _equal_plan(n_points, n_tx, budget, n)


@dataclass
class DelayMatrix:
    matrix: sparse.csr_matrix
    angle: tuple[float, float]
    n_rows: int
    out_of_window: int
    interpolation: str

    def apply(self, iq: np.ndarray) -> np.ndarray:
        """Delay-and-sum one transmit: ``iq`` is (time x element), zero-padded to ``n_rows``."""
        n_t, n_el = iq.shape
        if n_t < self.n_rows:
            iq = np.vstack([iq, np.zeros((self.n_rows - n_t, n_el), iq.dtype)])
        elif n_t > self.n_rows:
            iq = iq[: self.n_rows]
        return self.matrix @ iq.reshape(-1, order="F")


def receive_aperture(points, elements, f_number: float | None) -> np.ndarray:
    """Boolean (point x element) mask: lateral distance <= depth / (2 F#)."""
    if f_number is None or f_number <= 0:
        return np.ones((len(points), len(elements)), bool)
    lateral = np.hypot(points[:, None, 0] - elements[None, :, 0], points[:, None, 1] - elements[None, :, 1])
    return lateral <= (points[:, 2] - elements[:, 2].mean())[:, None] / (2 * f_number)


@numba.njit(cache=True)
def _tap_positions(points, elements, arrival, c, fs, t0, f_number, nearest_only, n_samples):
    """Fractional sample index, aperture and window flags for every (voxel, element) pair."""
    n_p, n_el = points.shape[0], elements.shape[0]
    pos = np.empty((n_p, n_el))
    tau = np.empty((n_p, n_el))
    keep = np.zeros((n_p, n_el), np.bool_)
    out_of_window = 0
    zbar = 0.0
    for j in range(n_el):
        zbar += elements[j, 2]
    zbar /= n_el
    for i in range(n_p):
        half = (points[i, 2] - zbar) / (2 * f_number) if f_number > 0 else np.inf
        for j in range(n_el):
            dx = points[i, 0] - elements[j, 0]
            dy = points[i, 1] - elements[j, 1]
            dz = points[i, 2] - elements[j, 2]
            t = arrival[i] + math.sqrt(dx * dx + dy * dy + dz * dz) / c
            p = (t - t0) * fs
            r = np.rint(p)
            # delays that land on a sample up to rounding get a single tap
            if abs(p - r) < 1e-9 or nearest_only:
                p = r
            tau[i, j] = t
            pos[i, j] = p
            if math.sqrt(dx * dx + dy * dy) <= half:
                if 0 <= p <= n_samples - 1:
                    keep[i, j] = True
                else:
                    out_of_window += 1
    return pos, tau, keep, out_of_window


@numba.njit(cache=True)
def _fill_csr(pos, tau, keep, fc, n_rows):
    n_p, n_el = pos.shape
    indptr = np.zeros(n_p + 1, np.int64)
    for i in range(n_p):
        n = 0
        for j in range(n_el):
            if keep[i, j]:
                n += 1 if pos[i, j] == math.floor(pos[i, j]) else 2
        indptr[i + 1] = indptr[i] + n
    cols = np.empty(indptr[n_p], np.int64)
    vals = np.empty(indptr[n_p], np.complex128)
    w = 2 * np.pi * fc
    for i in range(n_p):
        k = indptr[i]
        for j in range(n_el):
            if not keep[i, j]:
                continue
            base = math.floor(pos[i, j])
            frac = pos[i, j] - base
            rot = complex(math.cos(w * tau[i, j]), math.sin(w * tau[i, j]))
            cols[k] = int(base) + n_rows * j
            vals[k] = (1 - frac) * rot
            k += 1
            if frac > 0:
                cols[k] = int(base) + 1 + n_rows * j
                vals[k] = frac * rot
                k += 1
    return indptr, cols, vals


def build_delay_matrix(points, tx: TxEvent, transducer: Transducer, c: float, fs: float, fc: float, n_samples: int,
                       t0: float = 0.0, f_number: float | None = 1.5, interpolation: str = "linear") -> DelayMatrix:
    """Sparse (voxel x vec(time x element)) matrix of delayed, phase-rotated baseband taps.

    Total delay is the plane-wave arrival at the voxel plus the voxel-to-element
    path. Linear interpolation uses the two bracketing samples (one when the delay
    falls on a sample); taps carry exp(+i 2 pi fc tau). The receive aperture is
    the lateral distance <= depth / (2 F#) rule of ``receive_aperture``.
    """
    if interpolation not in ("linear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    points = np.ascontiguousarray(np.asarray(points, float).reshape(-1, 3))
    e = np.ascontiguousarray(transducer.element_centers, dtype=float)
    arrival = np.ascontiguousarray(tx.arrival_time(points, c), dtype=float)
    pos, tau, keep, out_of_window = _tap_positions(points, e, arrival, float(c), float(fs), float(t0),
                                                   float(f_number or 0.0), interpolation == "nearest", int(n_samples))
    # zero-pad so the second tap of the latest sample stays addressable
    n_rows = int(max(n_samples, np.floor(pos[keep]).max() + 2 if keep.any() else n_samples))
    indptr, cols, vals = _fill_csr(pos, tau, keep, float(fc), n_rows)
    mat = sparse.csr_matrix((vals, cols, indptr), shape=(len(points), n_rows * len(e)))
    return DelayMatrix(mat, tx.angle, n_rows, int(out_of_window), interpolation)


@dataclass
class IqVolume:
    data: np.ndarray
    grid: VoxelGrid
    frame_index: int
    n_compounded: int

    def save(self, path) -> None:
        save_grid(path, self.grid.with_data(self.data), {"frame": self.frame_index, "compounded": self.n_compounded})

    @classmethod
    def load(cls, path) -> "IqVolume":
        grid, extra = load_grid(path)
        return cls(grid.data, grid.with_data(None), int(extra["frame"]), int(extra["compounded"]))


def _chunk_path(directory: Path, k: int) -> Path:
    return directory / f"IQ_CHUNK_{k}.fqf"


def das_reconstruct(
    frames: Sequence[Sequence[RfFrame]],
    grid: VoxelGrid,
    txs: Sequence[TxEvent],
    transducer: Transducer,
    c: float,
    fc: float,
    budget: int,
    out_dir=None,
    f_number: float | None = 1.5,
    interpolation: str = "linear",
    cache_matrices: bool = True,
    n_chunks: int | None = None,
    stats: dict | None = None,
    matrix_budget: int | None = None,
) -> list[IqVolume]:
    """Reconstruct every frame (a list of per-transmit RF) on ``grid``, averaging over transmits.

    Voxels are processed in contiguous chunks sized from ``budget``; per chunk
    and transmit the delay matrix is built once and applied to every frame
    (``cache_matrices=False`` rebuilds it per frame, the naive baseline). With
    ``out_dir`` the chunk accumulators go to IQ_CHUNK_<k>.fqf and the volumes to
    Frame_<i>.fqf. ``budget`` sizes the accumulators (16 bytes per voxel and
    transmit); ``matrix_budget`` separately caps the cached matrices of a chunk.
    """
    stats = stats if stats is not None else {}
    stats.update(matrix_builds=0, out_of_window=0, matrix_bytes_max=0, build_seconds=0.0, apply_seconds=0.0)
    n_tx = len(txs)
    if any(len(f) != n_tx for f in frames):
        raise ValueError("every frame needs one RF record per transmit")
    first = frames[0][0]
    if any(rf.fs != first.fs or rf.t0 != first.t0 or rf.samples.shape != first.samples.shape
           for f in frames for rf in f):
        raise ValueError("frames must share fs, t0 and record length")
    for f in frames:
        for rf, tx in zip(f, txs):
            if rf.angle != tx.angle:
                raise ValueError("RF transmit order does not match the transmit list")
    plan = plan_reconstruction(grid.n_points, n_tx, transducer.n_elements, budget, matrix_budget)
    if n_chunks is not None:
        plan = _equal_plan(grid.n_points, n_tx, budget, int(n_chunks))
        if any(plan.estimate(k) > budget for k in range(plan.n_chunks)):
            raise BudgetError("forced chunk count exceeds the memory budget")
    stats["n_chunks"] = plan.n_chunks
    fs, t0, n_samples = first.fs, first.t0, first.samples.shape[0]
    iq = [[rf_to_iq(rf, fc) for rf in f] for f in frames]
    points = grid.points()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    memory_chunks = {}

    def build(pts, tx):
        t = time.perf_counter()
        m = build_delay_matrix(pts, tx, transducer, c, fs, fc, n_samples, t0, f_number, interpolation)
        stats["build_seconds"] += time.perf_counter() - t
        stats["matrix_builds"] += 1
        stats["out_of_window"] += m.out_of_window
        nbytes = m.matrix.data.nbytes + m.matrix.indices.nbytes + m.matrix.indptr.nbytes
        stats["matrix_bytes_max"] = max(stats["matrix_bytes_max"], nbytes)
        return m

    for k, (lo, hi) in enumerate(plan.ranges):
        pts = points[lo:hi]
        acc = np.zeros((hi - lo, len(frames)), np.complex128)
        mats = [build(pts, tx) for tx in txs] if cache_matrices else None
        for j in range(len(frames)):
            for a, tx in enumerate(txs):
                m = mats[a] if cache_matrices else build(pts, tx)
                t = time.perf_counter()
                acc[:, j] += m.apply(iq[j][a])
                stats["apply_seconds"] += time.perf_counter() - t
        acc /= n_tx
        if out_dir is not None:
            write_container(_chunk_path(out_dir, k), {"chunk": k, "start": lo, "stop": hi}, acc)
        else:
            memory_chunks[k] = acc

    if out_dir is not None:
        return assemble_volumes(out_dir, grid, len(frames), plan.n_chunks, n_tx)
    volumes = []
    for j in range(len(frames)):
        flat = np.concatenate([memory_chunks[k][:, j] for k in range(plan.n_chunks)])
        volumes.append(IqVolume(flat.reshape(grid.dims, order="F"), grid.with_data(None), j, n_tx))
    return volumes


def assemble_volumes(out_dir, grid: VoxelGrid, n_frames: int, n_chunks: int, n_tx: int) -> list[IqVolume]:
    """Concatenate IQ_CHUNK_<k> segments in chunk order into one volume per frame; writes Frame_<i>.fqf."""
    out_dir = Path(out_dir)
    chunks = []
    for k in range(n_chunks):
        path = _chunk_path(out_dir, k)
        if not path.exists():
            raise AssemblyError(f"missing chunk file {path}")
        chunks.append(read_container(path)[1])
    volumes = []
    for j in range(n_frames):
        flat = np.concatenate([acc[:, j] for acc in chunks])
        if flat.size != grid.n_points:
            raise AssemblyError("chunk files do not cover the grid")
        vol = IqVolume(flat.reshape(grid.dims, order="F"), grid.with_data(None), j, n_tx)
        vol.save(out_dir / f"Frame_{j}.fqf")
        volumes.append(vol)
    return volumes
