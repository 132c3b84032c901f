"""Clutter filtering, power Doppler and B-mode rendering, projections and image metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .beamform import IqVolume
from .core import VoxelGrid

AXES = {"x": 0, "y": 1, "z": 2}


@dataclass
class CasoratiMatrix:
    """Space x time matrix, one flattened volume per column in frame order."""

    data: np.ndarray
    dims: tuple[int, ...]

    @classmethod
    def from_volumes(cls, volumes: Sequence[IqVolume | np.ndarray]) -> "CasoratiMatrix":
        arrays = [np.asarray(v.data if isinstance(v, IqVolume) else v) for v in volumes]
        dims = arrays[0].shape
        if any(a.shape != dims for a in arrays):
            raise ValueError("ensemble volumes differ in shape")
        return cls(np.stack([a.reshape(-1, order="F") for a in arrays], axis=1), dims)

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    def volumes(self, data: np.ndarray | None = None) -> list[np.ndarray]:
        data = self.data if data is None else data
        return [data[:, j].reshape(self.dims, order="F") for j in range(data.shape[1])]


@dataclass
class SvdReport:
    singular_values: np.ndarray
    correlation: np.ndarray
    keep: tuple[int, int]

    @property
    def energy(self) -> float:
        return float(np.sum(self.singular_values**2))


def mode_correlation(u: np.ndarray, n_modes: int | None = None) -> np.ndarray:
    """Pearson correlation between the magnitudes of left singular vectors.

    A mode with constant magnitude has no defined correlation; it gets 1 on the
    diagonal and 0 elsewhere.
    """
    mag = np.abs(u[:, :n_modes])
    mag = mag - mag.mean(axis=0)
    norm = np.sqrt((mag**2).sum(axis=0))
    flat = norm <= 1e-12 * max(norm.max(), 1e-300)
    norm[flat] = 1.0
    z = mag / norm
    corr = z.T @ z
    corr[flat, :] = 0.0
    corr[:, flat] = 0.0
    np.fill_diagonal(corr, 1.0)
    return (corr + corr.T) / 2


def svd_filter(ensemble: Sequence[IqVolume | np.ndarray], keep: tuple[int, int | None] = (2, None),
               n_modes: int | None = 50) -> tuple[list[np.ndarray], SvdReport]:
    """Rebuild the ensemble from singular components lo..hi (1-based, inclusive)."""
    cas = CasoratiMatrix.from_volumes(ensemble)
    n_vox, n_frames = cas.data.shape
    lo, hi = keep[0], n_frames if keep[1] is None else keep[1]
    if not 2 <= n_frames <= n_vox:
        raise ValueError("need 2 <= frames <= voxels")
    if not 1 <= lo <= hi <= n_frames:
        raise ValueError(f"keep band {keep} outside 1..{n_frames}")
    if not np.any(cas.data):
        raise ValueError("ensemble is all zero")
    u, s, vh = np.linalg.svd(cas.data, full_matrices=False)
    band = slice(lo - 1, hi)
    filtered = (u[:, band] * s[band]) @ vh[band]
    report = SvdReport(s, mode_correlation(u, n_modes), (lo, hi))
    return cas.volumes(filtered), report


def power_doppler(ensemble: Sequence[IqVolume | np.ndarray]) -> np.ndarray:
    if len(ensemble) == 0:
        raise ValueError("empty ensemble")
    arrays = (np.asarray(v.data if isinstance(v, IqVolume) else v) for v in ensemble)
    out = None
    for a in arrays:
        p = np.abs(a) ** 2
        out = p if out is None else out + p
    return out


def render_db(volume, dynamic_range_db: float, power: bool = False) -> np.ndarray:
    """Log-compress to [-DR, 0] dB relative to the peak and map affinely onto [0, 1]."""
    if dynamic_range_db <= 0:
        raise ValueError("dynamic range must be positive")
    mag = np.abs(np.asarray(volume))
    peak = mag.max()
    if not peak > 0:
        raise ValueError("volume is all zero")
    with np.errstate(divide="ignore"):
        db = (10.0 if power else 20.0) * np.log10(mag / peak)
    return (np.clip(db, -dynamic_range_db, 0.0) + dynamic_range_db) / dynamic_range_db


def bmode(iq: IqVolume | np.ndarray, dynamic_range_db: float = 75.0) -> np.ndarray:
    return render_db(np.abs(iq.data if isinstance(iq, IqVolume) else iq), dynamic_range_db)


def pd_image(pd: np.ndarray, dynamic_range_db: float = 60.0) -> np.ndarray:
    return render_db(pd, dynamic_range_db, power=True)


def mip(volume, axis: str | int) -> np.ndarray:
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ValueError("mip needs a 3D volume")
    return volume.max(axis=AXES[axis] if isinstance(axis, str) else axis)


@dataclass
class MetricsReport:
    mse: float
    psnr: float
    ssim: float

    def csv_line(self) -> str:
        return f"{self.mse!r},{self.psnr!r},{self.ssim!r}"

    def to_json(self) -> str:
        # inf has no JSON literal; strings keep the sentinel readable
        return json.dumps({k: (v if math.isfinite(v) else str(v)) for k, v in asdict(self).items()}, sort_keys=True)

    def save(self, stem) -> list[Path]:
        stem = Path(stem)
        csv, js = stem.with_suffix(".csv"), stem.with_suffix(".json")
        csv.write_text("mse,psnr,ssim\n" + self.csv_line() + "\n")
        js.write_text(self.to_json() + "\n")
        return [csv, js]


def mse(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(mse_value: float, peak: float = 1.0) -> float:
    if mse_value == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse_value)


def ssim(a, b, sigma: float = 1.5, radius: int = 5, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean local SSIM with a Gaussian window of half-width ``radius``.

    Local moments use population (biased) variances; the border band the
    window cannot fully cover is excluded from the mean.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if any(n < 2 * radius + 1 for n in a.shape):
        raise ValueError("image smaller than the SSIM window")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2

    def blur(x):
        return ndimage.gaussian_filter(x, sigma, mode="reflect", truncate=radius / sigma)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a**2
    var_b = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    inner = tuple(slice(radius, n - radius) for n in a.shape)
    return float(s[inner].mean())


def metrics(test, reference) -> MetricsReport:
    m = mse(test, reference)
    return MetricsReport(m, psnr(m), ssim(test, reference))


def ground_truth_pd(positions, grid: VoxelGrid, sigma_voxels: float = 1.0) -> np.ndarray:
    """Gaussian-splatted occupancy of blood scatterers over all frames, peak-normalised to [0, 1].

    ``positions`` is one (n, 3) array or a sequence of per-frame arrays.
    """
    if isinstance(positions, np.ndarray) and positions.ndim == 2:
        positions = [positions]
    pts = np.concatenate([np.asarray(p, float).reshape(-1, 3) for p in positions])
    if len(pts) == 0:
        raise ValueError("no positions")
    idx = np.rint((pts - np.asarray(grid.origin)) / np.asarray(grid.spacing)).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(grid.dims)), axis=1)
    counts = np.zeros(grid.dims)
    np.add.at(counts, tuple(idx[inside].T), 1.0)
    img = ndimage.gaussian_filter(counts, sigma_voxels, mode="constant")
    peak = img.max()
    return img / peak if peak > 0 else img


def in_mask_fraction(pd: np.ndarray, mask: np.ndarray) -> float:
    """Share of total power inside ``mask``."""
    total = float(np.sum(pd))
    return float(np.sum(pd[np.asarray(mask, bool)])) / total if total > 0 else 0.0


def save_pgm(path, image: np.ndarray) -> None:
    """8-bit binary graymap of a 2D image in [0, 1]; rows are the first axis."""
    img = np.asarray(image, float)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2D image")
    data = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # header is exactly as written by save_pgm: three newline-terminated lines
    magic, size, maxval, data = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError("not an 8-bit binary PGM")
    w, h = map(int, size.split())
    return np.frombuffer(data[: w * h], np.uint8).reshape(h, w)
