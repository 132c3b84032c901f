"""Stage orchestration: one JSON run configuration, content-hash caching, per-stage manifests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import beamform as bf
from . import hemo, post, rf_sim, tissue, vasc_gen
from .core import VoxelGrid, load_grid, save_grid, stage_rng, write_bundle

log = logging.getLogger(__name__)

STAGES = ("vessel", "flow", "particles", "tissue", "rf", "beamform", "post", "metrics")
UPSTREAM = {
    "vessel": (),
    "flow": ("vessel",),
    "particles": ("flow",),
    "tissue": ("vessel",),
    "rf": ("particles", "tissue"),
    "beamform": ("rf",),
    "post": ("beamform",),
    "metrics": ("post", "particles"),
}
MANIFEST_DIR = ".manifests"
LOCK_NAME = ".lock"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


class LockError(RuntimeError):
    pass


# -- configuration -------------------------------------------------------------------


@dataclass
class VesselConfig:
    kind: str = "lsystem"
    iterations: int = 3
    grammar: dict | None = None
    turtle: dict = field(default_factory=dict)
    start: tuple[float, float, float] = (-2e-3, 0.0, 8e-3)
    end: tuple[float, float, float] = (2e-3, 0.0, 8e-3)
    radius: float = 0.3e-3
    mask_spacing: float = 5e-5


@dataclass
class FlowConfig:
    v_mean: float = 0.01
    spacing: float = 5e-5


@dataclass
class ParticlesConfig:
    count: int = 2000
    n_frames: int = 50
    frame_rate: float = 500.0
    warmup: float = 0.5
    rel_tol: float = 1e-6
    inlet_samples: int = 400


@dataclass
class TissueConfig:
    lo: tuple[float, float, float] = (-3e-3, -3e-3, 4e-3)
    hi: tuple[float, float, float] = (3e-3, 3e-3, 12e-3)
    density: float = 10.0
    law: str = "gaussian"
    slab_wavelengths: float = tissue.SLAB_WAVELENGTHS
    motion: dict = field(default_factory=lambda: {"kind": "constant", "velocity": [0.0, 0.0, 0.0]})
    boundary: str = "wrap"


@dataclass
class RfConfig:
    angles_deg: tuple[float, ...] = (-5.0, 0.0, 5.0)
    fs: float | None = None
    fs_factor: float = 4.0
    blood_contrast_db: float = -20.0
    margin: float = 2e-6
    c: float = rf_sim.SOUND_SPEED
    attenuation: float = rf_sim.DEFAULT_ATTENUATION


@dataclass
class BeamformConfig:
    lo: tuple[float, float, float] = (-2.4e-3, -2.4e-3, 5e-3)
    hi: tuple[float, float, float] = (2.4e-3, 2.4e-3, 11e-3)
    dims: tuple[int, int, int] = (64, 64, 64)
    f_number: float = 1.5
    interpolation: str = "linear"
    matrix_budget_bytes: int | None = None


@dataclass
class PostConfig:
    svd_keep: tuple[int, int | None] = (2, None)
    bmode_dr_db: float = 75.0
    pd_dr_db: float = 60.0


@dataclass
class MetricsConfig:
    sigma_voxels: float = 1.0
    image: str = "db"


SECTIONS = {
    "vessel": VesselConfig,
    "flow": FlowConfig,
    "particles": ParticlesConfig,
    "tissue": TissueConfig,
    "rf": RfConfig,
    "beamform": BeamformConfig,
    "post": PostConfig,
    "metrics": MetricsConfig,
}


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    transducer: str = "matrix-16x16"
    transducer_overrides: dict = field(default_factory=dict)
    memory_budget_bytes: int = 1 << 30
    vessel: VesselConfig = field(default_factory=VesselConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    particles: ParticlesConfig = field(default_factory=ParticlesConfig)
    tissue: TissueConfig = field(default_factory=TissueConfig)
    rf: RfConfig = field(default_factory=RfConfig)
    beamform: BeamformConfig = field(default_factory=BeamformConfig)
    post: PostConfig = field(default_factory=PostConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        top = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - top
        if unknown:
            raise ConfigError(f"unknown field(s): {', '.join(sorted(unknown))}")
        kwargs = {}
        for key, value in d.items():
            if key in SECTIONS:
                kwargs[key] = _section(SECTIONS[key], value, key)
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def check(self) -> None:
        """Schema-level checks; cross-stage consistency lives in ``validate``."""
        try:
            self.make_transducer()
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"transducer: {exc}") from None
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed: must be a non-negative integer")
        if self.memory_budget_bytes <= 0:
            raise ConfigError("memory_budget_bytes: must be positive")
        if self.vessel.kind not in ("lsystem", "tube"):
            raise ConfigError(f"vessel.kind: expected 'lsystem' or 'tube', got {self.vessel.kind!r}")
        if self.particles.count <= 0 or self.particles.n_frames < 2 or self.particles.frame_rate <= 0:
            raise ConfigError("particles: need count > 0, n_frames >= 2, frame_rate > 0")
        if self.beamform.interpolation not in ("linear", "nearest"):
            raise ConfigError(f"beamform.interpolation: unknown {self.beamform.interpolation!r}")
        if any(int(n) < 1 for n in self.beamform.dims):
            raise ConfigError("beamform.dims: must be positive")
        if self.metrics.image not in ("db", "linear"):
            raise ConfigError(f"metrics.image: expected 'db' or 'linear', got {self.metrics.image!r}")
        if self.tissue.boundary not in ("wrap", "freeze"):
            raise ConfigError(f"tissue.boundary: unknown {self.tissue.boundary!r}")
        try:
            tissue.MotionModel.from_dict(self.tissue.motion)
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"tissue.motion: {exc}") from None
        if not self.rf.angles_deg:
            raise ConfigError("rf.angles_deg: need at least one transmit angle")

    def make_transducer(self) -> rf_sim.Transducer:
        return rf_sim.Transducer.preset(self.transducer, **self.transducer_overrides)

    @property
    def fs(self) -> float:
        fc = self.make_transducer().center_frequency
        return self.rf.fs if self.rf.fs is not None else self.rf.fs_factor * fc

    def recon_grid(self) -> VoxelGrid:
        lo = np.asarray(self.beamform.lo, float)
        hi = np.asarray(self.beamform.hi, float)
        dims = tuple(int(n) for n in self.beamform.dims)
        spacing = tuple(float((h - l) / (n - 1)) if n > 1 else 1.0 for l, h, n in zip(lo, hi, dims))
        return VoxelGrid(dims, spacing, tuple(lo.tolist()))


def _section(cls, value, name: str):
    if not isinstance(value, dict):
        raise ConfigError(f"{name}: must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(value) - names
    if unknown:
        raise ConfigError(f"{name}: unknown field(s) {', '.join(f'{name}.{u}' for u in sorted(unknown))}")
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in value:
            v = value[f.name]
            out[f.name] = tuple(v) if isinstance(v, list) and f.name not in ("turtle",) else v
    return cls(**out)


# -- validation ------------------------------------------------------------------------


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def lines(self) -> list[str]:
        return [f"error: {e}" for e in self.errors] + [f"warning: {w}" for w in self.warnings]


def validate(config: RunConfig | dict | str | Path) -> ValidationReport:
    """Schema plus cross-stage checks. Never raises for a bad config; the problems go in the report."""
    report = ValidationReport()
    try:
        cfg = config if isinstance(config, RunConfig) else (
            RunConfig.from_dict(config) if isinstance(config, dict) else RunConfig.load(config))
    except ConfigError as exc:
        report.errors.append(str(exc))
        return report
    tr = cfg.make_transducer()
    fc = tr.center_frequency
    fs = cfg.fs
    if fs <= 2 * fc:
        report.errors.append(f"rf.fs: sampling below Nyquist ({fs:.4g} Hz for a {fc:.4g} Hz center frequency)")
    elif fs < 4 * fc:
        report.errors.append(f"rf.fs: the simulator needs fs >= 4 fc ({4 * fc:.4g} Hz)")
    grid = cfg.recon_grid()
    n_tx = len(cfg.rf.angles_deg)
    if cfg.memory_budget_bytes < 16 * n_tx:
        report.errors.append("memory_budget_bytes: cannot hold one voxel of the beamforming accumulator")
    matrix_budget = cfg.beamform.matrix_budget_bytes or cfg.memory_budget_bytes
    if matrix_budget < bf.matrix_bytes_per_voxel(n_tx, tr.n_elements):
        report.errors.append("beamform.matrix_budget_bytes: cannot hold the delay matrices of one voxel")
    lo, hi = np.asarray(cfg.tissue.lo, float), np.asarray(cfg.tissue.hi, float)
    if np.any(hi <= lo):
        report.errors.append("tissue: hi must exceed lo on every axis")
    g_lo, g_hi = np.asarray(grid.origin), grid.upper
    if np.any(np.asarray(cfg.beamform.hi) < np.asarray(cfg.beamform.lo)):
        report.errors.append("beamform: hi must not be below lo")
    if np.any(g_lo < lo) or np.any(g_hi > hi):
        report.warnings.append("beamform grid extends beyond the tissue region")
    report.warnings.extend(_fov_warnings(grid, tr, cfg.rf.angles_deg))
    keep = cfg.post.svd_keep
    n_frames = cfg.particles.n_frames
    if not 1 <= keep[0] <= (keep[1] or n_frames) <= n_frames:
        report.errors.append(f"post.svd_keep: band {list(keep)} outside 1..{n_frames}")
    small = sorted(grid.dims)
    if small[1] < 11:
        report.errors.append("beamform.dims: SSIM needs at least 11 voxels on two axes")
    elif small[0] < 11:
        report.warnings.append("metrics: SSIM window needs at least 11 voxels per axis; metrics use a central slice")
    return report


def _fov_warnings(grid: VoxelGrid, tr: rf_sim.Transducer, angles_deg) -> list[str]:
    """Plane waves insonify the array footprint swept along the steering directions."""
    e = tr.element_centers
    half = np.abs(e[:, :2]).max(axis=0) + tr.pitch / 2
    corners = np.array([[x, y, z] for x in (grid.origin[0], grid.upper[0]) for y in (grid.origin[1], grid.upper[1])
                        for z in (grid.origin[2], grid.upper[2])])
    out = []
    if np.any(corners[:, 2] <= e[:, 2].max()):
        out.append("beamform grid reaches behind the transducer face")
        return out
    tan = math.tan(math.radians(max(abs(a) for a in angles_deg)))
    reach_x = half[0] + corners[:, 2] * tan
    if np.any(np.abs(corners[:, 0]) > reach_x) or np.any(np.abs(corners[:, 1]) > half[1]):
        out.append("beamform grid lies partly outside the transducer field of view")
    return out


# -- caching ---------------------------------------------------------------------------------


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def tree_digest(root) -> dict[str, str]:
    """sha256 of every file under ``root`` except manifests and the lock file."""
    root = Path(root)
    out = {}
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root)
        if p.is_file() and rel.parts[0] not in (MANIFEST_DIR, LOCK_NAME):
            out[rel.as_posix()] = file_digest(p)
    return out


@dataclass
class StageManifest:
    stage: str
    key: str
    outputs: dict[str, str]
    seconds: float
    info: dict = field(default_factory=dict)

    def save(self, out: Path) -> None:
        d = out / MANIFEST_DIR
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{self.stage}.json").write_text(json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True))

    @classmethod
    def load(cls, out: Path, stage: str) -> "StageManifest | None":
        p = out / MANIFEST_DIR / f"{stage}.json"
        if not p.exists():
            return None
        return cls(**json.loads(p.read_text()))

    def intact(self, out: Path) -> bool:
        return all((out / rel).is_file() and file_digest(out / rel) == digest for rel, digest in self.outputs.items())


def _stage_inputs(cfg: RunConfig, stage: str) -> dict:
    d = cfg.to_dict()
    inputs = {"stage": stage, "section": d[stage], "seed": cfg.seed}
    if stage in ("tissue", "rf", "beamform"):
        inputs["transducer"] = [cfg.transducer, d["transducer_overrides"]]
    if stage in ("rf", "beamform"):
        inputs["memory_budget_bytes"] = cfg.memory_budget_bytes
    if stage in ("tissue", "rf"):
        inputs["particles"] = d["particles"]
    if stage == "beamform":
        inputs["rf"] = d["rf"]
    if stage in ("post", "metrics"):
        inputs["beamform"] = d["beamform"]
    return inputs


def stage_key(cfg: RunConfig, stage: str, out: Path) -> str:
    inputs = _stage_inputs(cfg, stage)
    upstream = {}
    for up in UPSTREAM[stage]:
        m = StageManifest.load(out, up)
        if m is None or not m.intact(out):
            raise StageError(stage, f"missing upstream output from stage {up}")
        upstream[up] = m.outputs
    inputs["upstream"] = upstream
    return hashlib.sha256(json.dumps(inputs, sort_keys=True).encode()).hexdigest()


# -- stages ------------------------------------------------------------------------------------


def _tube_tree(cfg: VesselConfig) -> vasc_gen.VesselTree:
    return vasc_gen.VesselTree(nodes=[cfg.start, cfg.end], parent=[0], child=[1], diameter=[2 * cfg.radius])


def _tree_grid(tree: vasc_gen.VesselTree, spacing: float) -> VoxelGrid:
    r = 0.5 * tree.effective_diameter().max()
    lo = tree.nodes.min(axis=0) - r - 2 * spacing
    hi = tree.nodes.max(axis=0) + r + 2 * spacing
    return VoxelGrid.covering(lo, hi, spacing)


def stage_vessel(cfg: RunConfig, out: Path) -> dict:
    d = out / "vessel"
    info = {}
    if cfg.vessel.kind == "tube":
        tree = _tube_tree(cfg.vessel)
    else:
        grammar = (vasc_gen.LsystemGrammar.from_dict(cfg.vessel.grammar) if cfg.vessel.grammar
                   else vasc_gen.default_grammar(cfg.vessel.iterations))
        params = vasc_gen.TurtleParams.from_dict(cfg.vessel.turtle)
        tree = vasc_gen.generate_tree(grammar, params, stage_rng(cfg.seed, "vessel"))
        report = vasc_gen.validate_tree(tree, params)
        info = {"passed": report.passed, "bifurcations": len(report.bifurcations)}
        (d / "validation.json").write_text(json.dumps({
            "passed": report.passed,
            "angles_deg": [float(a) for a in report.all_angles()],
            "murray_residuals": [float(m) for m in report.murray_residuals()],
        }, indent=1))
    tree.save(d / "tree.fqf")
    mask = vasc_gen.rasterize(tree, _tree_grid(tree, cfg.vessel.mask_spacing), kernel="partial")
    save_grid(d / "mask.fqf", mask)
    info["segments"] = tree.n_segments
    return info


def stage_flow(cfg: RunConfig, out: Path) -> dict:
    tree = vasc_gen.VesselTree.load(out / "vessel" / "tree.fqf")
    flow = hemo.tree_flow_field(tree, _tree_grid(tree, cfg.flow.spacing), cfg.flow.v_mean)
    hemo.export_flow(flow, out / "flow" / "flow.fqf")
    return {"voxels_in_vessel": int(np.count_nonzero(flow.mask.data))}


def stage_particles(cfg: RunConfig, out: Path) -> dict:
    flow = hemo.import_flow(out / "flow" / "flow.fqf")
    p = cfg.particles
    density = hemo.inlet_density(flow, p.inlet_samples)
    ens = hemo.simulate_particles(flow, density, p.count, p.n_frames / p.frame_rate, p.frame_rate,
                                  stage_rng(cfg.seed, "particles"), warmup=p.warmup, rel_tol=p.rel_tol)
    ens.save(out / "particles")
    return {"frames": ens.n_frames, "reinjected": int(ens.reinjected.sum())}


def stage_tissue(cfg: RunConfig, out: Path) -> dict:
    t = cfg.tissue
    tr = cfg.make_transducer()
    cloud = tissue.generate_cloud(t.lo, t.hi, tr.wavelength(), stage_rng(cfg.seed, "tissue"), t.density, t.law,
                                  t.slab_wavelengths)
    mask, _ = load_grid(out / "vessel" / "mask.fqf")
    labelled = tissue.classify_in_vessel(cloud, mask)
    # in-vessel scatterers are replaced by the traced blood particles
    kept = labelled.select(labelled.label == tissue.TISSUE)
    kept.save(out / "tissue" / "cloud.fqf")
    (out / "tissue" / "motion.json").write_text(json.dumps(tissue.MotionModel.from_dict(t.motion).to_dict()))
    return {"generated": len(cloud), "in_vessel": int(len(cloud) - len(kept))}


def acquisition_window(boxes, tr: rf_sim.Transducer, txs, c: float, fs: float, margin: float) -> tuple[float, float]:
    """Record start and length covering every echo from points inside the given boxes."""
    e = tr.element_centers
    early, late = math.inf, 0.0
    for lo, hi in boxes:
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        nearest = np.clip(e, lo, hi)
        d_min = np.sqrt(((e - nearest) ** 2).sum(1)).min()
        d_max = np.sqrt(((corners[:, None] - e[None]) ** 2).sum(-1)).max()
        for tx in txs:
            arr = tx.arrival_time(corners, c)
            early = min(early, arr.min() + d_min / c)
            late = max(late, arr.max() + d_max / c)
    t0 = max(0.0, math.floor((early - margin) * fs) / fs)
    return t0, late + margin - t0


def _transmits(cfg: RunConfig, tr: rf_sim.Transducer) -> list[rf_sim.TxEvent]:
    return [rf_sim.plane_wave_delays(tr, math.radians(a), cfg.rf.c) for a in cfg.rf.angles_deg]


def _rf_path(out: Path, frame: int, tx: int) -> Path:
    return out / "rf" / f"frame_{frame:04d}_tx{tx}.fqf"


def stage_rf(cfg: RunConfig, out: Path) -> dict:
    tr = cfg.make_transducer()
    txs = _transmits(cfg, tr)
    medium = rf_sim.MediumParams(cfg.rf.c, cfg.rf.attenuation, cfg.memory_budget_bytes)
    cloud = tissue.ScattererCloud.load(out / "tissue" / "cloud.fqf")
    motion = tissue.MotionModel.from_dict(json.loads((out / "tissue" / "motion.json").read_text()))
    ens = hemo.ParticleEnsemble.load(out / "particles")
    n_frames = ens.n_frames
    dt = 1.0 / cfg.particles.frame_rate
    region = (np.asarray(cfg.tissue.lo, float), np.asarray(cfg.tissue.hi, float))
    boxes = [region, (ens.positions.reshape(-1, 3).min(0), ens.positions.reshape(-1, 3).max(0))]
    fs = cfg.fs
    t0, duration = acquisition_window(boxes, tr, txs, cfg.rf.c, fs, cfg.rf.margin)

    static = motion.kind == "constant" and not np.any(motion.velocity)
    if static:
        tissue_clouds = cloud
    else:
        tissue_clouds = [cloud] + [tissue.advect(cloud, motion, 0.0, f * dt, region, cfg.tissue.boundary)
                                   for f in range(1, n_frames)]
    refl = tissue.blood_cloud(ens.positions[0], stage_rng(cfg.seed, "blood"), cfg.rf.blood_contrast_db).reflectivity
    flow_clouds = [tissue.ScattererCloud(ens.positions[f], refl, np.full(ens.count, tissue.BLOOD, np.uint8))
                   for f in range(n_frames)]

    def simulate(c):
        return rf_sim.simulate_rf_chunked(c, tr, txs, medium, fs, duration, t0=t0)

    stats = rf_sim.ComposeStats()
    frames = rf_sim.compose_frames(tissue_clouds, flow_clouds, static, simulate, stats)
    for f, per_tx in enumerate(frames):
        for a, rf in enumerate(per_tx):
            rf.frame_index = f
            rf.save(_rf_path(out, f, a))
    return {"t0": t0, "duration": duration, "tissue_calls": stats.tissue_calls, "flow_calls": stats.flow_calls}


def load_rf(out: Path, n_frames: int, n_tx: int) -> list[list[rf_sim.RfFrame]]:
    return [[rf_sim.RfFrame.load(_rf_path(out, f, a)) for a in range(n_tx)] for f in range(n_frames)]


def stage_beamform(cfg: RunConfig, out: Path) -> dict:
    tr = cfg.make_transducer()
    txs = _transmits(cfg, tr)
    frames = load_rf(out, cfg.particles.n_frames, len(txs))
    stats = {}
    bf.das_reconstruct(frames, cfg.recon_grid(), txs, tr, cfg.rf.c, tr.center_frequency, cfg.memory_budget_bytes,
                       out_dir=out / "beamform", f_number=cfg.beamform.f_number,
                       interpolation=cfg.beamform.interpolation, stats=stats,
                       matrix_budget=cfg.beamform.matrix_budget_bytes or cfg.memory_budget_bytes)
    summary = {k: stats[k] for k in ("n_chunks", "matrix_builds", "out_of_window")}
    (out / "beamform" / "summary.json").write_text(json.dumps(summary, sort_keys=True))
    return {**summary, "build_seconds": stats["build_seconds"], "apply_seconds": stats["apply_seconds"]}


def load_volumes(out: Path, n_frames: int) -> list[bf.IqVolume]:
    return [bf.IqVolume.load(out / "beamform" / f"Frame_{j}.fqf") for j in range(n_frames)]


def _save_mips(d: Path, name: str, volume: np.ndarray) -> None:
    for axis in ("x", "y", "z"):
        # rows along depth where the projection keeps it
        img = post.mip(volume, axis)
        post.save_pgm(d / f"{name}_mip_{axis}.pgm", img.T if axis != "z" else img)


def stage_post(cfg: RunConfig, out: Path) -> dict:
    d = out / "post"
    grid = cfg.recon_grid()
    vols = load_volumes(out, cfg.particles.n_frames)
    filtered, report = post.svd_filter(vols, tuple(cfg.post.svd_keep))
    pd = post.power_doppler(filtered)
    save_grid(d / "pd.fqf", grid.with_data(pd))
    pd_img = post.pd_image(pd, cfg.post.pd_dr_db)
    save_grid(d / "pd_image.fqf", grid.with_data(pd_img))
    b = post.bmode(vols[0], cfg.post.bmode_dr_db)
    save_grid(d / "bmode.fqf", grid.with_data(b))
    _save_mips(d, "pd", pd_img)
    _save_mips(d, "bmode", b)
    write_bundle(d / "svd.fqf", {"keep": f"{report.keep[0]},{report.keep[1]}"},
                 {"singular_values": report.singular_values, "correlation": report.correlation})
    return {"keep": list(report.keep)}


def metric_image(pd: np.ndarray, cfg: RunConfig) -> np.ndarray:
    if cfg.metrics.image == "db":
        return post.pd_image(pd, cfg.post.pd_dr_db)
    return pd / pd.max()


def _metric_view(img: np.ndarray) -> np.ndarray:
    # SSIM needs 11 samples per axis; thin grids fall back to their central plane
    if min(img.shape) >= 11:
        return img
    axis = int(np.argmin(img.shape))
    return np.take(img, img.shape[axis] // 2, axis=axis)


def stage_metrics(cfg: RunConfig, out: Path) -> dict:
    d = out / "metrics"
    grid = cfg.recon_grid()
    ens = hemo.ParticleEnsemble.load(out / "particles")
    truth = post.ground_truth_pd(list(ens.positions), grid, cfg.metrics.sigma_voxels)
    save_grid(d / "ground_truth.fqf", grid.with_data(truth))
    _save_mips(d, "ground_truth", truth)
    pd, _ = load_grid(out / "post" / "pd.fqf")
    image = metric_image(pd.data, cfg)
    report = post.metrics(_metric_view(image), _metric_view(truth))
    report.save(d / "metrics")
    return dataclasses.asdict(report)


STAGE_FUNCS: dict[str, Callable[[RunConfig, Path], dict]] = {
    "vessel": stage_vessel,
    "flow": stage_flow,
    "particles": stage_particles,
    "tissue": stage_tissue,
    "rf": stage_rf,
    "beamform": stage_beamform,
    "post": stage_post,
    "metrics": stage_metrics,
}


# -- driver -----------------------------------------------------------------------------------


@dataclass
class RunResult:
    ran: list[str]
    skipped: list[str]
    manifests: dict[str, StageManifest]


class _Lock:
    def __init__(self, out: Path):
        self.path = out / LOCK_NAME

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(f"another run holds {self.path}") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def parse_stages(text: str | None) -> list[str]:
    if not text:
        return list(STAGES)
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in names if s not in STAGES]
    if bad:
        raise ConfigError(f"stages: unknown stage(s) {', '.join(bad)}")
    return [s for s in STAGES if s in names]


def run(cfg: RunConfig, stages=None, out=None, force: bool = False) -> RunResult:
    """Run the selected stages in dependency order, skipping those whose inputs are unchanged."""
    selected = parse_stages(stages) if stages is None or isinstance(stages, str) else parse_stages(",".join(stages))
    out = Path(out if out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    result = RunResult([], [], {})
    with _Lock(out):
        for stage in selected:
            key = stage_key(cfg, stage, out)
            old = StageManifest.load(out, stage)
            if not force and old is not None and old.key == key and old.intact(out):
                log.info("%s: cached", stage)
                result.skipped.append(stage)
                result.manifests[stage] = old
                continue
            stage_dir = out / stage
            if stage_dir.exists():
                shutil.rmtree(stage_dir)
            stage_dir.mkdir(parents=True)
            log.info("%s: running", stage)
            start = time.perf_counter()
            try:
                info = STAGE_FUNCS[stage](cfg, out)
            except (StageError, LockError):
                raise
            except Exception as exc:
                raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
            outputs = {p.relative_to(out).as_posix(): file_digest(p) for p in sorted(stage_dir.rglob("*")) if p.is_file()}
            manifest = StageManifest(stage, key, outputs, time.perf_counter() - start, info)
            manifest.save(out)
            result.ran.append(stage)
            result.manifests[stage] = manifest
            log.info("%s: done in %.1f s", stage, manifest.seconds)
    return result
