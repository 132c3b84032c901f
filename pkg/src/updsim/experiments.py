"""Reproduction experiments shared by ``scripts/`` and the acceptance suite."""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import beamform as bf
from . import post, rf_sim, tissue, vasc_gen
from .core import VoxelGrid, load_grid, stage_rng
from .pipeline import RunConfig, _transmits, run


# -- tissue motion ----------------------------------------------------------------------


@dataclass
class MotionPoint:
    velocity: float
    db: post.MetricsReport
    linear: post.MetricsReport


def motion_config(base: dict, v_z: float) -> dict:
    d = copy.deepcopy(base)
    d["tissue"]["motion"] = {"kind": "constant", "velocity": [0.0, 0.0, float(v_z)]}
    return d


def motion_trend(base: dict, velocities, out_root) -> list[MotionPoint]:
    """Run the pipeline once per axial tissue velocity and score PD against ground truth.

    Stages upstream of the tissue motion are shared through the stage cache.
    Both metric images are reported; the configured one is what ``metrics``
    writes to disk.
    """
    out = Path(out_root)
    points = []
    for v in velocities:
        cfg = RunConfig.from_dict(motion_config(base, v))
        run(cfg, out=out)
        pd, _ = load_grid(out / "post" / "pd.fqf")
        truth, _ = load_grid(out / "metrics" / "ground_truth.fqf")
        views = {}
        for image in ("db", "linear"):
            cfg.metrics.image = image
            from .pipeline import _metric_view, metric_image

            views[image] = post.metrics(_metric_view(metric_image(pd.data, cfg)), _metric_view(truth.data))
        points.append(MotionPoint(float(v), views["db"], views["linear"]))
    return points


def strictly_monotone(values, increasing: bool) -> bool:
    d = np.diff(np.asarray(values, float))
    return bool(np.all(d > 0) if increasing else np.all(d < 0))


# -- precomputed delay matrices ---------------------------------------------------------------


def _synthetic_frames(cfg: RunConfig, n_frames: int, n_scatterers: int, seed: int):
    """RF of a random cloud inside the reconstruction grid, rescaled per frame so frames differ."""
    from .pipeline import acquisition_window

    tr = cfg.make_transducer()
    txs = _transmits(cfg, tr)
    grid = cfg.recon_grid()
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(grid.origin), grid.upper
    cloud = tissue.ScattererCloud(rng.uniform(lo, hi, (n_scatterers, 3)), rng.normal(size=n_scatterers),
                                  np.zeros(n_scatterers, np.uint8))
    t0, duration = acquisition_window([(lo, hi)], tr, txs, cfg.rf.c, cfg.fs, cfg.rf.margin)
    medium = rf_sim.MediumParams(cfg.rf.c, cfg.rf.attenuation, cfg.memory_budget_bytes)
    base = rf_sim.simulate_rf_chunked(cloud, tr, txs, medium, cfg.fs, duration, t0=t0)
    scale = 1.0 + 0.05 * rng.standard_normal(n_frames)
    return [[rf_sim.RfFrame(s * rf.samples, rf.fs, rf.t0, rf.angle, j) for rf in base]
            for j, s in enumerate(scale)], txs, tr, grid


def matrix_speedup(cfg: RunConfig, n_frames: int = 20, n_scatterers: int = 300, seed: int = 0) -> dict:
    """Wall time of cached per-transmit delay matrices against rebuilding them for every frame."""
    frames, txs, tr, grid = _synthetic_frames(cfg, n_frames, n_scatterers, seed)
    budget = cfg.memory_budget_bytes
    matrix_budget = cfg.beamform.matrix_budget_bytes or budget
    out = {}
    volumes = {}
    for name, cache in (("cached", True), ("rebuild", False)):
        stats = {}
        t = time.perf_counter()
        volumes[name] = bf.das_reconstruct(frames, grid, txs, tr, cfg.rf.c, tr.center_frequency, budget,
                                           f_number=cfg.beamform.f_number, cache_matrices=cache, stats=stats,
                                           matrix_budget=matrix_budget)
        out[f"{name}_seconds"] = time.perf_counter() - t
        out[f"{name}_builds"] = stats["matrix_builds"]
    diff = max(float(np.max(np.abs(a.data - b.data)) / np.max(np.abs(b.data)))
               for a, b in zip(volumes["cached"], volumes["rebuild"]))
    out.update(ratio=out["rebuild_seconds"] / out["cached_seconds"], max_rel_diff=diff, n_frames=n_frames,
               n_voxels=grid.n_points)
    return out


# -- point targets ------------------------------------------------------------------------------


def field_of_view_points(n: int, half_aperture, depth, max_angle_deg: float, wavelength: float,
                         rng: np.random.Generator, margin: float = 0.0) -> np.ndarray:
    """Uniform points fully insonified by every plane wave of a +-max_angle sweep.

    Steering shifts the array footprint laterally by z tan(theta), so the region
    common to all transmits narrows with depth. Within sqrt(wavelength z) of the
    footprint edge the field is a diffraction fringe rather than a plane wave;
    that band is excluded too. ``margin`` keeps points off the depth limits.
    """
    tan = math.tan(math.radians(max_angle_deg))
    out = np.empty((0, 3))
    while len(out) < n:
        p = rng.uniform([-half_aperture[0], -half_aperture[1], depth[0] + margin],
                        [half_aperture[0], half_aperture[1], depth[1] - margin], (8 * n, 3))
        fringe = np.sqrt(wavelength * p[:, 2])
        ok = (np.abs(p[:, 0]) <= half_aperture[0] - p[:, 2] * tan - fringe) & \
             (np.abs(p[:, 1]) <= half_aperture[1] - fringe)
        out = np.vstack([out, p[ok]])
    return out[:n]


def point_targets(n_targets: int = 20, seed: int = 0, transducer: str = "matrix-16x16",
                  angles_deg=(-5.0, 0.0, 5.0), spacing: float = 1e-4) -> dict:
    """Single-scatterer RF reconstructed on a shared grid; argmax offset from the truth in voxels.

    All targets go through one ``das_reconstruct`` call as separate frames, so
    the delay matrices are built once.
    """
    from .pipeline import acquisition_window

    tr = rf_sim.Transducer.preset(transducer)
    c = rf_sim.SOUND_SPEED
    fs = 4 * tr.center_frequency
    txs = [rf_sim.plane_wave_delays(tr, math.radians(a), c) for a in angles_deg]
    half = np.abs(tr.element_centers[:, :2]).max(axis=0) + tr.pitch / 2
    depth = (4e-3, 8e-3)
    lo = np.array([-half[0], -half[1], depth[0]])
    hi = np.array([half[0], half[1], depth[1]])
    grid = VoxelGrid.covering(lo, hi, spacing)
    targets = field_of_view_points(n_targets, half, depth, max(abs(a) for a in angles_deg), c / tr.center_frequency,
                                   stage_rng(seed, "point-targets"), margin=2 * spacing)
    t0, duration = acquisition_window([(np.asarray(grid.origin), grid.upper)], tr, txs, c, fs, 2e-6)
    medium = rf_sim.MediumParams(c)
    frames = []
    for j, p in enumerate(targets):
        cloud = tissue.ScattererCloud(p[None], np.ones(1), np.zeros(1, np.uint8))
        per_tx = rf_sim.simulate_rf(cloud, tr, txs, medium, fs, duration, t0=t0)
        for rf in per_tx:
            rf.frame_index = j
        frames.append(per_tx)
    vols = bf.das_reconstruct(frames, grid, txs, tr, c, tr.center_frequency, 1 << 30)
    found = np.array([np.unravel_index(np.argmax(np.abs(v.data)), grid.dims) for v in vols])
    truth = (targets - np.asarray(grid.origin)) / np.asarray(grid.spacing)
    # distance in whole voxels from the voxel that contains the target
    index_offset = np.abs(found - np.rint(truth)).astype(int)
    return {"targets": targets, "found": found, "offset_voxels": np.abs(found - truth),
            "index_offset": index_offset, "grid": grid}


# -- in-vessel share on the full-scale phantom ----------------------------------------------


FULL_SCALE_REGION = (np.zeros(3), np.array([0.04, 0.015, 0.05]))


def full_scale_share(seed: int = 0, share: float = 0.0016, transducer: str = "L11-4v") -> dict:
    """Uniform cloud over the 4 x 1.5 x 5 cm region with one tube sized to occupy ``share`` of it.

    The tube runs along x through the region centre. The mask is sampled at
    half a wavelength around the tube only; scatterers outside it read as tissue.
    """
    tr = rf_sim.Transducer.preset(transducer)
    lam = rf_sim.SOUND_SPEED / tr.center_frequency
    lo, hi = FULL_SCALE_REGION
    size = hi - lo
    radius = math.sqrt(share * float(np.prod(size)) / (math.pi * size[0]))
    centre = (lo + hi) / 2
    a = np.array([lo[0], centre[1], centre[2]])
    b = np.array([hi[0], centre[1], centre[2]])
    tree = vasc_gen.VesselTree(np.array([a, b]), np.array([0]), np.array([1]), np.array([2 * radius]))
    pad = radius + 1e-3
    mask = vasc_gen.rasterize(tree, VoxelGrid.covering(a - [0, pad, pad], b + [0, pad, pad], lam / 2), "partial")
    cloud = tissue.generate_cloud(lo, hi, lam, stage_rng(seed, "full-scale-phantom"))
    labelled = tissue.classify_in_vessel(cloud, mask)
    blood = labelled.label == tissue.BLOOD
    rad = np.hypot(cloud.positions[:, 1] - centre[1], cloud.positions[:, 2] - centre[2])
    geometric = rad < radius
    return {"n_scatterers": len(cloud), "radius": radius, "share": float(blood.mean()),
            "geometric_share": float(geometric.mean()), "agreement": float(np.mean(blood == geometric))}
