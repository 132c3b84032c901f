"""Flow fields, velocity interpolation, inlet injection and scatterer tracing."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import VoxelGrid, fmt_floats, parse_floats, read_bundle, write_bundle
from .vasc_gen import TriangleMesh, VesselTree

log = logging.getLogger(__name__)

BLOOD_DENSITY = 1056.0
BLOOD_VISCOSITY = 3.27e-6


class StepUnderflow(RuntimeError):
    """Adaptive step shrank below the configured minimum."""


@dataclass(frozen=True)
class InletPlane:
    point: np.ndarray
    normal: np.ndarray
    radius: float

    def __post_init__(self):
        n = np.asarray(self.normal, float)
        object.__setattr__(self, "point", np.asarray(self.point, float))
        object.__setattr__(self, "normal", n / np.linalg.norm(n))
        object.__setattr__(self, "radius", float(self.radius))

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.normal
        ref = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = np.cross(n, ref)
        u /= np.linalg.norm(u)
        return u, np.cross(n, u)

    def signed_distance(self, points) -> np.ndarray:
        return (np.asarray(points) - self.point) @ self.normal


@dataclass
class FlowField:
    velocity: VoxelGrid
    mask: VoxelGrid
    inlet: InletPlane
    density: float = BLOOD_DENSITY
    viscosity: float = BLOOD_VISCOSITY
    import_warnings: int = 0
    _vflat: np.ndarray = field(init=False, repr=False)
    _mflat: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.velocity.dims != self.mask.dims or self.velocity.spacing != self.mask.spacing:
            raise ValueError("velocity and mask grids differ in dims/spacing")
        if not np.asarray(self.mask.data).any():
            raise ValueError("vessel mask is empty")
        v = np.asarray(self.velocity.data, float)
        m = np.asarray(self.mask.data) > 0
        # x-fastest flat copies for fast corner gathers
        self._vflat = np.ascontiguousarray(v.transpose(2, 1, 0, 3).reshape(-1, 3))
        self._mflat = np.ascontiguousarray(m.transpose(2, 1, 0).reshape(-1).astype(float))

    @property
    def grid(self) -> VoxelGrid:
        return VoxelGrid(self.velocity.dims, self.velocity.spacing, self.velocity.origin)

    def _corners(self, points):
        g = self.grid
        origin = np.asarray(g.origin)
        spacing = np.asarray(g.spacing)
        dims = np.asarray(g.dims)
        u = (np.atleast_2d(points) - origin) / spacing
        tol = 1e-9
        inb = np.all((u >= -tol) & (u <= dims - 1 + tol), axis=1)
        u = np.clip(u, 0, dims - 1)
        i0 = np.minimum(np.floor(u).astype(np.int64), np.maximum(dims - 2, 0))
        f = u - i0
        step = np.where(dims > 1, 1, 0)
        nx, ny = dims[0], dims[1]
        idx = []
        wts = []
        for cz in (0, 1):
            for cy in (0, 1):
                for cx in (0, 1):
                    ix = i0[:, 0] + cx * step[0]
                    iy = i0[:, 1] + cy * step[1]
                    iz = i0[:, 2] + cz * step[2]
                    idx.append(ix + nx * (iy + ny * iz))
                    wx = f[:, 0] if cx else 1 - f[:, 0]
                    wy = f[:, 1] if cy else 1 - f[:, 1]
                    wz = f[:, 2] if cz else 1 - f[:, 2]
                    wts.append(wx * wy * wz)
        return np.stack(idx, 1), np.stack(wts, 1), inb

    def sample(self, points) -> np.ndarray:
        """Trilinear velocity at many points; zero outside the grid."""
        idx, w, inb = self._corners(points)
        v = np.einsum("nc,ncd->nd", w, self._vflat[idx])
        v[~inb] = 0.0
        return v

    def mask_value(self, points) -> np.ndarray:
        idx, w, inb = self._corners(points)
        m = np.einsum("nc,nc->n", w, self._mflat[idx])
        m[~inb] = 0.0
        return m

    def inside(self, points) -> np.ndarray:
        return self.mask_value(points) >= 0.5

    def in_bounds(self, points) -> np.ndarray:
        return self._corners(points)[2]


def _tube_geometry(points, a, b):
    ab = b - a
    L2 = float(ab @ ab)
    rel = points - a
    t = rel @ ab / L2
    radial = rel - t[:, None] * ab
    return t, np.sqrt(np.einsum("ij,ij->i", radial, radial))


def poiseuille_field(a, b, radius: float, v_max: float, grid: VoxelGrid, **fluid) -> FlowField:
    """Parabolic axial flow v(r) = v_max (1 - r^2/R^2) in the tube from ``a`` to ``b``."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if radius <= 0 or v_max <= 0:
        raise ValueError("radius and v_max must be positive")
    lo, hi = np.asarray(grid.origin), grid.upper
    for p in (a, b):
        if np.any(p < lo - 1e-12) or np.any(p > hi + 1e-12):
            raise ValueError("grid does not contain the tube axis")
    pts = grid.points()
    t, r = _tube_geometry(pts, a, b)
    inside = (t >= 0) & (t <= 1) & (r <= radius)
    axis = (b - a) / np.linalg.norm(b - a)
    speed = np.where(inside, v_max * (1 - (r / radius) ** 2), 0.0)
    vflat = speed[:, None] * axis
    vgrid = VoxelGrid.from_flat(grid.dims, grid.spacing, grid.origin, vflat.T.reshape(-1, order="F"), vector=True)
    mgrid = VoxelGrid.from_flat(grid.dims, grid.spacing, grid.origin, inside.astype(np.uint8))
    return FlowField(vgrid, mgrid, InletPlane(a, axis, radius), **fluid)


def uniform_field(grid: VoxelGrid, velocity, inlet: InletPlane | None = None, mask=None) -> FlowField:
    """Constant velocity over ``mask`` (whole grid by default)."""
    m = np.ones(grid.dims, np.uint8) if mask is None else np.asarray(mask, np.uint8)
    v = np.zeros(grid.dims + (3,))
    v[m > 0] = np.asarray(velocity, float)
    if inlet is None:
        vv = np.asarray(velocity, float)
        n = vv / np.linalg.norm(vv) if np.linalg.norm(vv) > 0 else np.array([0.0, 0.0, 1.0])
        inlet = InletPlane(grid.origin, n, float(np.linalg.norm(grid.upper - grid.origin)))
    return FlowField(grid.with_data(v), grid.with_data(m), inlet)


def rotation_field(grid: VoxelGrid, omega: float, center=(0.0, 0.0, 0.0)) -> FlowField:
    """Solid-body rotation about the z axis through ``center``."""
    pts = grid.points() - np.asarray(center, float)
    vflat = omega * np.stack([-pts[:, 1], pts[:, 0], np.zeros(len(pts))], axis=1)
    vgrid = VoxelGrid.from_flat(grid.dims, grid.spacing, grid.origin, vflat.T.reshape(-1, order="F"), vector=True)
    mask = grid.with_data(np.ones(grid.dims, np.uint8))
    return FlowField(vgrid, mask, InletPlane(center, [1.0, 0.0, 0.0], 1.0))


def tree_flow_field(tree: VesselTree, grid: VoxelGrid, v_mean_root: float) -> FlowField:
    """Per-segment Poiseuille flow through a vessel skeleton.

    Segment flow rates follow Murray's law, Q ~ d^m, so the mean velocity of a
    segment is ``v_mean_root * (d/d_root)^(m-2)``. Segments overwrite earlier
    ones where cylinders overlap; spherical end caps fill remaining gaps at
    joints with the owning segment's profile.
    """
    pts = grid.points()
    n = len(pts)
    vel = np.zeros((n, 3))
    mask = np.zeros(n, bool)
    d_root = tree.diameter[0]
    m = tree.murray_exponent
    radii = 0.5 * tree.effective_diameter()
    origin = np.asarray(grid.origin)
    spacing = np.asarray(grid.spacing)
    dims = np.asarray(grid.dims)

    def _box(a, b, r):
        lo = np.clip(np.floor((np.minimum(a, b) - r - origin) / spacing).astype(int), 0, dims - 1)
        hi = np.clip(np.ceil((np.maximum(a, b) + r - origin) / spacing).astype(int), 0, dims - 1)
        ii = [np.arange(lo[p], hi[p] + 1) for p in range(3)]
        K, J, I = np.meshgrid(ii[2], ii[1], ii[0], indexing="ij")
        return (I + dims[0] * (J + dims[1] * K)).ravel()

    for caps in (False, True):
        for s in range(tree.n_segments):
            a = tree.nodes[tree.parent[s]]
            b = tree.nodes[tree.child[s]]
            R = radii[s]
            v_mean = v_mean_root * (tree.diameter[s] / d_root) ** (m - 2)
            axis = (b - a) / np.linalg.norm(b - a)
            sel = _box(a, b, R)
            t, r = _tube_geometry(pts[sel], a, b)
            if caps:
                ra = np.linalg.norm(pts[sel] - a, axis=1)
                rb = np.linalg.norm(pts[sel] - b, axis=1)
                rr = np.where(t < 0, ra, rb)
                hit = ((t < 0) | (t > 1)) & (rr <= R) & ~mask[sel]
            else:
                rr = r
                hit = (t >= 0) & (t <= 1) & (r <= R)
            idx = sel[hit]
            vel[idx] = (2 * v_mean * (1 - (rr[hit] / R) ** 2))[:, None] * axis
            mask[idx] = True
    vgrid = VoxelGrid.from_flat(grid.dims, grid.spacing, grid.origin, vel.T.reshape(-1, order="F"), vector=True)
    mgrid = VoxelGrid.from_flat(grid.dims, grid.spacing, grid.origin, mask.astype(np.uint8))
    a0 = tree.nodes[tree.parent[0]]
    n0 = tree.nodes[tree.child[0]] - a0
    return FlowField(vgrid, mgrid, InletPlane(a0, n0, radii[0]))


# -- persistence -------------------------------------------------------------------


def export_flow(flow: FlowField, path) -> None:
    header = flow.grid.header()
    header.update(
        {
            "kind": "flow",
            "inlet_point": fmt_floats(flow.inlet.point),
            "inlet_normal": fmt_floats(flow.inlet.normal),
            "inlet_radius": repr(flow.inlet.radius),
            "density": repr(float(flow.density)),
            "viscosity": repr(float(flow.viscosity)),
        }
    )
    write_bundle(
        path,
        header,
        {"velocity": np.asarray(flow.velocity.data, float), "mask": (np.asarray(flow.mask.data) > 0).astype(np.uint8)},
    )


def import_flow(path) -> FlowField:
    """Load a sampled flow field; velocities outside the mask are zeroed with a warning."""
    header, arrays = read_bundle(path)
    vel = arrays["velocity"]
    mask = arrays["mask"]
    if vel.ndim != 4 or vel.shape[3] != 3 or vel.shape[:3] != mask.shape:
        raise ValueError(f"velocity {vel.shape} and mask {mask.shape} dims do not match")
    missing = [k for k in ("inlet_point", "inlet_normal", "inlet_radius") if k not in header]
    if missing:
        raise ValueError(f"missing inlet descriptor keys: {missing}")
    grid = VoxelGrid.from_header(header)
    if grid.dims != mask.shape:
        raise ValueError(f"header dims {grid.dims} do not match arrays {mask.shape}")
    outside = (mask == 0) & np.any(vel != 0, axis=-1)
    count = int(outside.sum())
    if count:
        warnings.warn(f"{count} velocity samples outside the vessel mask were zeroed", stacklevel=2)
        vel = vel.copy()
        vel[outside] = 0.0
    inlet = InletPlane(parse_floats(header["inlet_point"]), parse_floats(header["inlet_normal"]), float(header["inlet_radius"]))
    flow = FlowField(
        grid.with_data(vel),
        grid.with_data(mask),
        inlet,
        float(header.get("density", BLOOD_DENSITY)),
        float(header.get("viscosity", BLOOD_VISCOSITY)),
    )
    flow.import_warnings = count
    return flow


def load_stl_ascii(path) -> TriangleMesh:
    tris = []
    current = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if parts and parts[0] == "vertex":
            current.append([float(v) for v in parts[1:4]])
            if len(current) == 3:
                tris.append(current)
                current = []
    if not tris:
        raise ValueError(f"{path}: no facets found")
    return TriangleMesh(np.array(tris))


# -- sampling ------------------------------------------------------------------------


def sample_velocity(flow: FlowField, point) -> np.ndarray:
    point = np.asarray(point, float).reshape(1, 3)
    if not flow.in_bounds(point)[0]:
        raise ValueError(f"point {point[0]} outside the flow grid")
    return flow.sample(point)[0]


@dataclass
class InletDensity:
    points: np.ndarray
    weights: np.ndarray
    spacing: float
    plane: InletPlane

    def __post_init__(self):
        w = np.asarray(self.weights, float)
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
            raise ValueError("inlet weights must be non-negative and sum to 1")

    def draw(self, rng: np.random.Generator, n: int, jitter: bool = True) -> np.ndarray:
        idx = rng.choice(len(self.weights), size=n, p=self.weights)
        pts = self.points[idx].copy()
        if jitter and self.spacing > 0:
            u, w = self.plane.basis()
            off = rng.uniform(-0.5, 0.5, size=(n, 2)) * self.spacing
            pts += off[:, :1] * u + off[:, 1:] * w
        return pts


def inlet_density(flow: FlowField, n_samples: int) -> InletDensity:
    """Flux-weighted injection density on a square lattice over the inlet disk."""
    plane = flow.inlet
    R = plane.radius
    s = R * np.sqrt(np.pi / max(n_samples, 1))
    k = int(np.ceil(R / s))
    ii = np.arange(-k, k + 1) * s
    A, B = np.meshgrid(ii, ii, indexing="ij")
    keep = A**2 + B**2 <= R * R * (1 + 1e-12)
    u, w = plane.basis()
    pts = plane.point + A[keep][:, None] * u + B[keep][:, None] * w
    flux = np.maximum(0.0, flow.sample(pts) @ plane.normal)
    total = flux.sum()
    if total <= 0:
        raise ValueError("zero total flux through the inlet")
    return InletDensity(pts, flux / total, s, plane)


# -- integration -----------------------------------------------------------------------

# Bogacki-Shampine 3(2): third-order propagation, embedded second-order estimate
_BS_ERR = np.array([-5 / 72, 1 / 12, 1 / 9, -1 / 8])


def rk23(
    f: Callable[[np.ndarray, np.ndarray], np.ndarray],
    y0,
    durations,
    rtol: float = 1e-6,
    atol: float = 1e-9,
    min_step: float = 1e-9,
    h0=None,
    stop: Callable | None = None,
    record: bool = False,
    fixed_step: float | None = None,
):
    """Integrate ``dy/dt = f(y, t)`` for a batch of points with per-point adaptive steps.

    ``stop(y_old, y_new, idx)`` may return a boolean mask of points to halt after an
    accepted step, plus replacement positions for them (or None).
    Returns (y, t, stopped) and, with ``record``, a list of (t, y) snapshots
    of every accepted step for the first point.
    """
    y = np.array(y0, float, copy=True).reshape(-1, 3)
    n = len(y)
    T = np.broadcast_to(np.asarray(durations, float), (n,)).copy()
    t = np.zeros(n)
    stopped = np.zeros(n, bool)
    active = T > 0
    if fixed_step is not None:
        h = np.full(n, float(fixed_step))
    elif h0 is None:
        h = T.copy()
    else:
        h = np.broadcast_to(np.asarray(h0, float), (n,)).copy()
    k1 = np.zeros_like(y)
    if active.any():
        k1[active] = f(y[active], t[active])
    history = [(0.0, y[0].copy())] if record and n else None
    while active.any():
        idx = np.flatnonzero(active)
        yi, ti, k1i = y[idx], t[idx], k1[idx]
        remaining = T[idx] - ti
        last = h[idx] >= remaining
        hh = np.where(last, remaining, h[idx])[:, None]
        k2 = f(yi + 0.5 * hh * k1i, ti + 0.5 * hh[:, 0])
        k3 = f(yi + 0.75 * hh * k2, ti + 0.75 * hh[:, 0])
        ynew = yi + hh * (2 / 9 * k1i + 1 / 3 * k2 + 4 / 9 * k3)
        k4 = f(ynew, ti + hh[:, 0])
        if fixed_step is not None:
            accept = np.ones(len(idx), bool)
            factor = np.ones(len(idx))
        else:
            err = hh * (_BS_ERR[0] * k1i + _BS_ERR[1] * k2 + _BS_ERR[2] * k3 + _BS_ERR[3] * k4)
            scale = atol + rtol * np.maximum(np.linalg.norm(yi, axis=1), np.linalg.norm(ynew, axis=1))[:, None]
            enorm = np.max(np.abs(err) / scale, axis=1)
            accept = enorm <= 1.0
            with np.errstate(divide="ignore"):
                factor = np.clip(0.9 * np.where(enorm > 0, enorm, 1e-30) ** (-1 / 3), 0.2, 5.0)
        acc = idx[accept]
        ta = np.where(last[accept], T[acc], ti[accept] + hh[accept, 0])
        y_old = y[acc]
        y[acc] = ynew[accept]
        t[acc] = ta
        k1[acc] = k4[accept]
        if fixed_step is None:
            h[idx] = hh[:, 0] * factor
            rej = idx[~accept]
            if len(rej) and np.any(h[rej] < min_step):
                raise StepUnderflow(f"step size fell below {min_step:g} s")
        if stop is not None and len(acc):
            halt, repl = stop(y_old, y[acc], acc)
            if halt is not None and halt.any():
                hit = acc[halt]
                stopped[hit] = True
                if repl is not None:
                    y[hit] = repl[halt]
                active[hit] = False
        done = t >= T
        active &= ~done
        if history is not None and 0 in acc:
            history.append((float(t[0]), y[0].copy()))
    if record:
        return y, t, stopped, history
    return y, t, stopped


@dataclass
class Trajectory:
    times: np.ndarray
    positions: np.ndarray
    exited: bool
    exit_time: float | None


def integrate_trajectory(
    flow: FlowField,
    p0,
    duration: float,
    rel_tol: float = 1e-6,
    abs_tol: float = 1e-9,
    min_step: float = 1e-9,
    fixed_step: float | None = None,
) -> Trajectory:
    """Adaptive RK2(3) pathline from ``p0``; stops at ``duration`` or on leaving the mask."""
    p0 = np.asarray(p0, float).reshape(1, 3)
    if not flow.inside(p0)[0]:
        raise ValueError("start point lies outside the vessel mask")

    def stop(_old, new, _idx):
        return ~flow.inside(new), None

    y, t, stopped, hist = rk23(
        lambda p, _t: flow.sample(p), p0, duration, rel_tol, abs_tol, min_step,
        stop=stop, record=True, fixed_step=fixed_step,
    )
    times = np.array([h[0] for h in hist])
    pos = np.array([h[1] for h in hist])
    return Trajectory(times, pos, bool(stopped[0]), float(t[0]) if stopped[0] else None)


@dataclass
class BackpropResult:
    points: np.ndarray
    times: np.ndarray
    seed_index: np.ndarray
    dropped: int


def backpropagate_inlet(
    flow: FlowField,
    seeds,
    max_time: float | None = None,
    rel_tol: float = 1e-6,
    abs_tol: float = 1e-9,
) -> BackpropResult:
    """Trace seeds upstream (dp/dt = -v) to their inlet-plane crossings."""
    seeds = np.asarray(seeds, float).reshape(-1, 3)
    plane = flow.inlet
    vmax = float(np.max(np.linalg.norm(flow.velocity.data, axis=-1)))
    if max_time is None:
        diag = float(np.linalg.norm(flow.grid.upper - np.asarray(flow.grid.origin)))
        max_time = 50.0 * diag / vmax if vmax > 0 else 0.0
    crossing = np.full(len(seeds), np.nan)

    def stop(old, new, idx):
        s_old = plane.signed_distance(old)
        s_new = plane.signed_distance(new)
        crossed = (s_old > 0) & (s_new <= 0)
        frac = np.where(crossed, s_old / np.where(crossed, s_old - s_new, 1.0), 0.0)
        point = old + frac[:, None] * (new - old)
        left = ~crossed & ~flow.inside(new)
        crossing[idx[crossed]] = 1.0
        return crossed | left, np.where(crossed[:, None], point, new)

    y, t, _ = rk23(lambda p, _t: -flow.sample(p), seeds, max_time, rel_tol, abs_tol, stop=stop)
    ok = crossing == 1.0
    return BackpropResult(y[ok], t[ok], np.flatnonzero(ok), int((~ok).sum()))


def filter_inlet_points(points, plane: InletPlane, distance_tol: float) -> np.ndarray:
    points = np.asarray(points, float).reshape(-1, 3)
    sd = plane.signed_distance(points)
    radial = points - plane.point - sd[:, None] * plane.normal
    keep = (np.abs(sd) <= distance_tol) & (np.linalg.norm(radial, axis=1) <= plane.radius)
    return points[keep]


# -- particle ensembles -----------------------------------------------------------------------


@dataclass
class ParticleEnsemble:
    positions: np.ndarray  # (n_frames, n, 3)
    frame_interval: float
    radius: np.ndarray | None = None
    reinjected: np.ndarray | None = None  # (n_frames, n) bool

    @property
    def count(self) -> int:
        return self.positions.shape[1]

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    def save(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, frame in enumerate(self.positions):
            path = directory / f"particles_{i:04d}.fqf"
            arrays = {"positions": frame}
            if self.radius is not None:
                arrays["radius"] = self.radius
            write_bundle(path, {"kind": "particles", "frame": str(i), "time": repr(i * self.frame_interval),
                                "frame_interval": repr(self.frame_interval)}, arrays)
            paths.append(path)
        return paths

    @classmethod
    def load(cls, directory) -> "ParticleEnsemble":
        paths = sorted(Path(directory).glob("particles_*.fqf"))
        if not paths:
            raise FileNotFoundError(f"no particle frames in {directory}")
        frames = []
        radius = None
        interval = 0.0
        for p in paths:
            header, arrays = read_bundle(p)
            frames.append(arrays["positions"])
            radius = arrays.get("radius")
            interval = float(header["frame_interval"])
        return cls(np.stack(frames), interval, radius)


def simulate_particles(
    flow: FlowField,
    density: InletDensity,
    n: int,
    duration: float,
    frame_rate: float,
    seed: int | np.random.Generator,
    warmup: float = 0.0,
    jitter: bool = True,
    rel_tol: float = 1e-6,
    abs_tol: float = 1e-9,
    radius_range: tuple[float, float] | None = None,
) -> ParticleEnsemble:
    """Track ``n`` scatterers frame by frame, re-injecting exits at the inlet.

    With ``warmup > 0`` each particle is first advanced for a random time in
    ``[0, warmup]`` so the vessel starts populated instead of empty.
    """
    if n <= 0 or frame_rate <= 0:
        raise ValueError("n and frame_rate must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_frames = max(1, int(round(duration * frame_rate)))
    dt = 1.0 / frame_rate

    def inject(count):
        pts = density.draw(rng, count, jitter)
        for _ in range(10):
            bad = ~flow.inside(pts)
            if not bad.any() or not jitter:
                break
            pts[bad] = density.draw(rng, int(bad.sum()), jitter)
        return pts

    def stop(_old, new, _idx):
        return ~flow.inside(new), None

    def velocity(p, _t):
        return flow.sample(p)

    def advance(pos, durations):
        y, _, exited = rk23(velocity, pos, durations, rel_tol, abs_tol, stop=stop)
        if exited.any():
            y[exited] = inject(int(exited.sum()))
        return y, exited

    pos = inject(n)
    if warmup > 0:
        pos, _ = advance(pos, rng.uniform(0.0, warmup, size=n))
    frames = [pos.copy()]
    flags = [np.zeros(n, bool)]
    for _ in range(1, n_frames):
        pos, exited = advance(pos, dt)
        frames.append(pos.copy())
        flags.append(exited)
    radius = None
    if radius_range is not None:
        radius = rng.uniform(*radius_range, size=n)
    return ParticleEnsemble(np.stack(frames), dt, radius, np.stack(flags))
