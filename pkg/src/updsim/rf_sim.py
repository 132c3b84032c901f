"""Frequency-domain RF channel data from point scatterers.

Every scatterer is a monopole. For each frequency bin the echo on receive
element m is

    R_s * [sum_n W_n e^{ikr_n}/r_n D(theta_n, k) E(y, r_n, k) e^{i w dtau_n}]
        * sum_{mu in m} e^{ikr_mu}/r_mu D(theta_mu, k) E(y, r_mu, k)

with n and mu running over sub-elements, D the azimuth sinc directivity and E
the elevation factor. Spectra are weighted by a Gaussian pulse and inverted
with one real FFT per element.
"""

from __future__ import annotations

import cmath
import functools
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Sequence

import numba
import numpy as np
from scipy.optimize import brentq

from .core import read_container, write_container
from .tissue import ScattererCloud

SOUND_SPEED = 1540.0
DEFAULT_ATTENUATION = 0.5  # dB / (cm MHz)
DEFAULT_BUDGET = 2 * 1024**3
# elevation lens: two Gaussian beams with fixed amplitude split and width ratio
ELEVATION_AMPLITUDES = (0.8, 0.2)
ELEVATION_WIDTH_RATIO = 4.0


class BudgetExceeded(MemoryError):
    pass


class RfInstability(FloatingPointError):
    pass


@functools.lru_cache(maxsize=None)
def elevation_widths(amplitudes: tuple[float, ...] = ELEVATION_AMPLITUDES,
                     ratio: float = ELEVATION_WIDTH_RATIO) -> tuple[float, ...]:
    """Gaussian widths B_g (ratios 1, ratio, ratio^2, ...) whose focal -6 dB width is F*lambda/H.

    At the focus the factor is proportional to sum_g A_g B_g^-1/2 exp(-u^2 / B_g)
    with u = k H y / (4 F); the target width puts the half-amplitude point at u = pi/4.
    """
    amps = np.asarray(amplitudes, float)
    rel = ratio ** np.arange(len(amps))

    def excess(beta):
        b = beta * rel
        w = amps / np.sqrt(b)
        return float(np.sum(w * np.exp(-((math.pi / 4) ** 2) / b)) - 0.5 * np.sum(w))

    beta = brentq(excess, 1e-3, 1e3, xtol=1e-14)
    return tuple(float(beta * r) for r in rel)


@dataclass(frozen=True)
class Transducer:
    name: str
    element_centers: np.ndarray
    element_width: float
    element_height: float
    pitch: float
    center_frequency: float
    bandwidth: float = 0.6
    subelements: int = 4
    elevation: str = "sinc"
    elevation_focus: float = math.inf
    elevation_amplitudes: tuple[float, ...] = ELEVATION_AMPLITUDES
    elevation_width_ratio: float = ELEVATION_WIDTH_RATIO

    def __post_init__(self):
        centers = np.asarray(self.element_centers, float).reshape(-1, 3)
        object.__setattr__(self, "element_centers", centers)
        if self.subelements < 1:
            raise ValueError("subelements must be >= 1")
        if self.element_width <= 0 or self.element_height <= 0:
            raise ValueError("element dimensions must be positive")
        if self.center_frequency <= 0 or self.bandwidth <= 0:
            raise ValueError("center frequency and bandwidth must be positive")
        if self.elevation not in ("lens", "sinc"):
            raise ValueError(f"unknown elevation model {self.elevation!r}")
        if self.elevation == "lens" and not self.elevation_focus > 0:
            raise ValueError("lens elevation needs a positive focus")

    @property
    def n_elements(self) -> int:
        return len(self.element_centers)

    @property
    def half_width(self) -> float:
        return 0.5 * self.element_width

    def wavelength(self, c: float = SOUND_SPEED) -> float:
        return c / self.center_frequency

    def subelement_centers(self) -> np.ndarray:
        """Sub-element centres tiled uniformly across each element's width, element-major."""
        v = self.subelements
        offsets = ((np.arange(v) + 0.5) / v - 0.5) * self.element_width
        sub = np.repeat(self.element_centers, v, axis=0)
        sub[:, 0] += np.tile(offsets, self.n_elements)
        return sub

    @classmethod
    def linear(cls, n: int, pitch: float, width: float, center_frequency: float, bandwidth: float = 0.6,
               elevation_height: float = 5e-3, elevation_focus: float = math.inf, subelements: int = 4,
               name: str = "linear", elevation: str | None = None) -> "Transducer":
        x = (np.arange(n) - (n - 1) / 2) * pitch
        centers = np.column_stack([x, np.zeros(n), np.zeros(n)])
        if elevation is None:
            elevation = "lens" if math.isfinite(elevation_focus) else "sinc"
        return cls(name, centers, width, elevation_height, pitch, center_frequency, bandwidth, subelements,
                   elevation, elevation_focus)

    @classmethod
    def matrix(cls, nx: int, ny: int, pitch: float, width: float, center_frequency: float,
               bandwidth: float = 0.6, subelements: int = 4, name: str = "matrix") -> "Transducer":
        x = (np.arange(nx) - (nx - 1) / 2) * pitch
        y = (np.arange(ny) - (ny - 1) / 2) * pitch
        X, Y = np.meshgrid(x, y, indexing="xy")
        # element index = ix + nx * iy
        centers = np.column_stack([X.ravel(), Y.ravel(), np.zeros(nx * ny)])
        return cls(name, centers, width, width, pitch, center_frequency, bandwidth, subelements, "sinc")

    @classmethod
    def from_dict(cls, d: dict) -> "Transducer":
        d = dict(d)
        kind = d.pop("kind")
        name = d.pop("name", kind)
        if kind == "linear":
            return cls.linear(d["n_elements"], d["pitch"], d["element_width"], d["center_frequency"],
                              d.get("bandwidth", 0.6), d.get("elevation_height", 5e-3),
                              d.get("elevation_focus", math.inf), d.get("subelements", 4), name,
                              d.get("elevation"))
        if kind == "matrix":
            return cls.matrix(d["nx"], d["ny"], d["pitch"], d["element_width"], d["center_frequency"],
                              d.get("bandwidth", 0.6), d.get("subelements", 4), name)
        raise ValueError(f"unknown transducer kind {kind!r}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "Transducer":
        try:
            text = resources.files("updsim.presets").joinpath(f"{name}.json").read_text()
        except FileNotFoundError:
            raise ValueError(f"unknown transducer preset {name!r}") from None
        d = json.loads(text)
        d.update(overrides)
        return cls.from_dict(d)


@dataclass(frozen=True)
class TxEvent:
    angle: tuple[float, float]
    delays: np.ndarray
    apodization: np.ndarray
    direction: np.ndarray
    offset: float

    def arrival_time(self, points, c: float) -> np.ndarray:
        """Plane-wave arrival time at ``points`` measured from the first element firing."""
        return (np.asarray(points, float).reshape(-1, 3) @ self.direction - self.offset) / c


def plane_wave_delays(transducer: Transducer, angle: float, c: float = SOUND_SPEED, angle_y: float = 0.0,
                      apodization=None) -> TxEvent:
    """Steered plane wave: delays affine in element position, shifted so min delay is 0."""
    if abs(angle) >= math.pi / 2 or abs(angle_y) >= math.pi / 2:
        raise ValueError("steering angle must lie in (-pi/2, pi/2)")
    u = np.array([math.sin(angle) * math.cos(angle_y), math.sin(angle_y), math.cos(angle) * math.cos(angle_y)])
    proj = transducer.element_centers @ u
    offset = float(proj.min())
    delays = (proj - offset) / c
    apod = np.ones(transducer.n_elements) if apodization is None else np.asarray(apodization, float)
    if apod.shape != (transducer.n_elements,):
        raise ValueError("apodization must have one weight per element")
    return TxEvent((float(angle), float(angle_y)), delays, apod, u, offset)


@dataclass(frozen=True)
class MediumParams:
    c: float = SOUND_SPEED
    attenuation: float = DEFAULT_ATTENUATION
    memory_budget: int = DEFAULT_BUDGET

    def __post_init__(self):
        if self.c <= 0 or self.attenuation < 0:
            raise ValueError("need c > 0 and attenuation >= 0")

    @property
    def alpha(self) -> float:
        """Amplitude attenuation in nepers per metre per hertz."""
        return self.attenuation * math.log(10) / 20 * 100 / 1e6


def directivity(theta, k, b) -> np.ndarray:
    """Unnormalised sinc sin(x)/x with x = k b sin(theta)."""
    x = np.asarray(k * b * np.sin(theta), float)
    safe = np.where(x == 0, 1.0, x)
    return np.where(x == 0, 1.0, np.sin(safe) / safe)


def pulse_spectrum(f, center_frequency: float, bandwidth: float) -> np.ndarray:
    """Gaussian magnitude, -6 dB points at fc (1 +- bandwidth/2)."""
    sigma = bandwidth * center_frequency / (2 * math.sqrt(2 * math.log(2)))
    return np.exp(-((np.asarray(f, float) - center_frequency) ** 2) / (2 * sigma**2))


def elevation_factor(y, r, k, transducer: Transducer) -> np.ndarray:
    """Elevation factor E(y, r, k) of the transducer (lens model or elevation sinc)."""
    y, r, k = np.broadcast_arrays(*(np.asarray(a, float) for a in (y, r, k)))
    if transducer.elevation == "sinc":
        return directivity(np.arcsin(np.clip(y / r, -1, 1)), k, 0.5 * transducer.element_height).astype(complex)
    amps = transducer.elevation_amplitudes
    widths = elevation_widths(tuple(amps), transducer.elevation_width_ratio)
    h, f = transducer.element_height, transducer.elevation_focus
    curv = 0.5 * k * (1.0 / f - 1.0 / r)
    val = np.zeros(y.shape, complex)
    for a, b in zip(amps, widths):
        p = 4.0 * b / h**2 + 1j * curv
        val += a * np.sqrt(k / (2j * r * p)) * np.exp(-((k * y) ** 2) / (4.0 * p * r * r))
    return val


@dataclass(frozen=True)
class FrequencyPlan:
    n_samples: int
    fs: float
    bins: np.ndarray
    pulse: np.ndarray

    @property
    def df(self) -> float:
        return self.fs / self.n_samples

    @property
    def freqs(self) -> np.ndarray:
        return self.bins * self.df


def frequency_plan(transducer: Transducer, fs: float, duration: float, cutoff_db: float = -40.0) -> FrequencyPlan:
    n = int(math.ceil(duration * fs - 1e-9))
    f = np.arange(n // 2 + 1) * fs / n
    p = pulse_spectrum(f, transducer.center_frequency, transducer.bandwidth)
    keep = np.flatnonzero((p >= 10 ** (cutoff_db / 20)) & (f > 0))
    if len(keep) == 0:
        raise ValueError("no frequency bins inside the pulse band; increase duration or fs")
    return FrequencyPlan(n, fs, keep, p[keep])


@dataclass
class RfFrame:
    samples: np.ndarray
    fs: float
    t0: float
    angle: tuple[float, float]
    frame_index: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.samples)):
            raise RfInstability("RF samples contain non-finite values")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.samples.shape[0]) / self.fs

    def __add__(self, other: "RfFrame") -> "RfFrame":
        if other.samples.shape != self.samples.shape or other.fs != self.fs or other.t0 != self.t0:
            raise ValueError("frames differ in layout")
        return RfFrame(self.samples + other.samples, self.fs, self.t0, self.angle, self.frame_index)

    def save(self, path) -> None:
        write_container(path, {"fs": repr(self.fs), "t0": repr(self.t0), "angle": f"{self.angle[0]!r},{self.angle[1]!r}",
                               "frame": self.frame_index}, self.samples.astype(np.float32))

    @classmethod
    def load(cls, path) -> "RfFrame":
        header, data = read_container(path)
        ax, ay = (float(v) for v in header["angle"].split(","))
        return cls(data.astype(float), float(header["fs"]), float(header["t0"]), (ax, ay), int(header["frame"]))


# ---------------------------------------------------------------------------
# kernel


@numba.njit(cache=True)
def _lens(y, r, k, amps, widths, height, focus):
    val = 0j
    curv = 0.5 * k * (1.0 / focus - 1.0 / r)
    for g in range(amps.shape[0]):
        p = complex(4.0 * widths[g] / (height * height), curv)
        val += amps[g] * cmath.sqrt(k / (2j * r * p)) * cmath.exp(-(k * y) ** 2 / (4.0 * p * r * r))
    return val


@numba.njit(cache=True, fastmath=True)
def _accumulate(r, sx, dy, refl, wr, wi, k0, dk, alpha_f0, alpha_df, bx, by, lens, amps, widths, height, focus,
                n_el, v, outr, outi):
    """Add every scatterer's echo spectrum to ``out[tx, bin, element]`` (real and imaginary parts apart).

    Bins are the inner loop over sub-elements so the phase, azimuth and
    elevation phasors advance by one multiplication per bin.
    """
    ns, nsub = r.shape
    n_tx, nf, _ = wr.shape
    inv_k = np.empty(nf)
    for j in range(nf):
        inv_k[j] = 1.0 / (k0 + j * dk)
    phr = np.empty(nsub)
    phi = np.empty(nsub)
    str_ = np.empty(nsub)
    sti = np.empty(nsub)
    pxr = np.empty(nsub)
    pxi = np.empty(nsub)
    qxr = np.empty(nsub)
    qxi = np.empty(nsub)
    pyr = np.empty(nsub)
    pyi = np.empty(nsub)
    qyr = np.empty(nsub)
    qyi = np.empty(nsub)
    cx = np.empty(nsub)
    cy = np.empty(nsub)
    ox = np.empty(nsub)
    oy = np.empty(nsub)
    gr = np.empty(nsub)
    gi = np.empty(nsub)
    rxr = np.empty(n_el)
    rxi = np.empty(n_el)
    for s in range(ns):
        for n in range(nsub):
            rr = r[s, n]
            ax = bx * sx[s, n]
            ay = by * dy[s, n] / rr
            amp = math.exp(-alpha_f0 * rr) / rr
            phr[n] = amp * math.cos(k0 * rr)
            phi[n] = amp * math.sin(k0 * rr)
            damp = math.exp(-alpha_df * rr)
            str_[n] = damp * math.cos(dk * rr)
            sti[n] = damp * math.sin(dk * rr)
            pxr[n] = math.cos(k0 * ax)
            pxi[n] = math.sin(k0 * ax)
            qxr[n] = math.cos(dk * ax)
            qxi[n] = math.sin(dk * ax)
            pyr[n] = math.cos(k0 * ay)
            pyi[n] = math.sin(k0 * ay)
            qyr[n] = math.cos(dk * ay)
            qyi[n] = math.sin(dk * ay)
            # sinc(k a) = Im(e^{ika}) / (k a); a zero argument takes the constant 1
            if ax != 0.0:
                cx[n] = 1.0 / ax
                ox[n] = 0.0
            else:
                cx[n] = 0.0
                ox[n] = 1.0
            if lens or ay == 0.0:
                cy[n] = 0.0
                oy[n] = 1.0
            else:
                cy[n] = 1.0 / ay
                oy[n] = 0.0
        for j in range(nf):
            ik = inv_k[j]
            for n in range(nsub):
                amp = (pxi[n] * ik * cx[n] + ox[n]) * (pyi[n] * ik * cy[n] + oy[n])
                gr[n] = phr[n] * amp
                gi[n] = phi[n] * amp
                t = phr[n] * str_[n] - phi[n] * sti[n]
                phi[n] = phr[n] * sti[n] + phi[n] * str_[n]
                phr[n] = t
                t = pxr[n] * qxr[n] - pxi[n] * qxi[n]
                pxi[n] = pxr[n] * qxi[n] + pxi[n] * qxr[n]
                pxr[n] = t
                t = pyr[n] * qyr[n] - pyi[n] * qyi[n]
                pyi[n] = pyr[n] * qyi[n] + pyi[n] * qyr[n]
                pyr[n] = t
            if lens:
                k = k0 + j * dk
                for n in range(nsub):
                    e = _lens(dy[s, n], r[s, n], k, amps, widths, height, focus)
                    t = gr[n] * e.real - gi[n] * e.imag
                    gi[n] = gr[n] * e.imag + gi[n] * e.real
                    gr[n] = t
            if v == 1:
                for m in range(n_el):
                    rxr[m] = gr[m]
                    rxi[m] = gi[m]
            else:
                for m in range(n_el):
                    sr = 0.0
                    si = 0.0
                    for mu in range(v):
                        sr += gr[m * v + mu]
                        si += gi[m * v + mu]
                    rxr[m] = sr
                    rxi[m] = si
            for a in range(n_tx):
                tr = 0.0
                ti = 0.0
                for n in range(nsub):
                    tr += wr[a, j, n] * gr[n] - wi[a, j, n] * gi[n]
                    ti += wr[a, j, n] * gi[n] + wi[a, j, n] * gr[n]
                tr *= refl[s]
                ti *= refl[s]
                for m in range(n_el):
                    outr[a, j, m] += tr * rxr[m] - ti * rxi[m]
                    outi[a, j, m] += tr * rxi[m] + ti * rxr[m]


def bytes_per_scatterer(transducer: Transducer) -> int:
    """Working set of the per-block geometry: four float64 arrays per sub-element plus the scatterer itself."""
    return 4 * 8 * transducer.n_elements * transducer.subelements + 4 * 8


def spectrum_bytes(transducer: Transducer, n_tx: int, plan: FrequencyPlan) -> int:
    """Split real/imaginary block accumulators, their complex merge and the running total."""
    return 3 * 16 * n_tx * transducer.n_elements * len(plan.bins)


def _block_spectrum(positions, refl, transducer: Transducer, txs: Sequence[TxEvent], medium: MediumParams,
                    plan: FrequencyPlan) -> np.ndarray:
    sub = transducer.subelement_centers()
    ns, nsub = len(positions), len(sub)
    out = np.zeros((len(txs), transducer.n_elements, len(plan.bins)), np.complex128)
    if ns == 0:
        return out
    r = np.empty((ns, nsub))
    sx = np.empty((ns, nsub))
    dy = np.empty((ns, nsub))
    tmp = np.empty((ns, nsub))
    np.subtract(positions[:, 0:1], sub[None, :, 0], out=sx)
    np.subtract(positions[:, 1:2], sub[None, :, 1], out=dy)
    np.subtract(positions[:, 2:3], sub[None, :, 2], out=tmp)
    np.square(tmp, out=r)
    np.square(sx, out=tmp)
    r += tmp
    np.square(dy, out=tmp)
    r += tmp
    del tmp
    np.sqrt(r, out=r)
    if np.any(r == 0):
        raise ValueError("a scatterer coincides with a transducer sub-element")
    sx /= r

    freqs = plan.freqs
    omega = 2 * np.pi * freqs
    weights = np.empty((len(txs), len(freqs), nsub), np.complex128)
    for a, tx in enumerate(txs):
        d = np.repeat(tx.delays, transducer.subelements)
        w = np.repeat(tx.apodization, transducer.subelements)
        weights[a] = w[None, :] * np.exp(1j * omega[:, None] * d[None, :])
    k0 = omega[0] / medium.c
    dk = 2 * np.pi * plan.df / medium.c
    alpha = medium.alpha
    lens = transducer.elevation == "lens"
    widths = np.asarray(elevation_widths(tuple(transducer.elevation_amplitudes), transducer.elevation_width_ratio))
    outr = np.zeros((len(txs), len(freqs), transducer.n_elements))
    outi = np.zeros_like(outr)
    _accumulate(r, sx, dy, np.ascontiguousarray(refl, float), np.ascontiguousarray(weights.real),
                np.ascontiguousarray(weights.imag), k0, dk, alpha * freqs[0], alpha * plan.df,
                transducer.element_width / (2 * transducer.subelements), 0.5 * transducer.element_height, lens,
                np.asarray(transducer.elevation_amplitudes, float), widths, transducer.element_height,
                transducer.elevation_focus, transducer.n_elements, transducer.subelements, outr, outi)
    return (outr + 1j * outi).transpose(0, 2, 1)


def _to_time(spectrum, plan: FrequencyPlan, t0: float) -> np.ndarray:
    full = np.zeros((plan.n_samples // 2 + 1, spectrum.shape[0]), np.complex128)
    shift = np.exp(-2j * np.pi * plan.freqs * t0)
    full[plan.bins] = (spectrum * (plan.pulse * shift)[None, :]).T
    return np.fft.irfft(np.conj(full), n=plan.n_samples, axis=0) * plan.n_samples * plan.df


def _check_window(cloud: ScattererCloud, transducer: Transducer, txs, c: float, t0: float, duration: float):
    if len(cloud) == 0:
        raise ValueError("scatterer cloud is empty")
    p = cloud.positions
    e = transducer.element_centers
    # farthest element per scatterer bounds the receive path
    far = np.zeros(len(p))
    for chunk in range(0, len(p), 4096):
        q = p[chunk:chunk + 4096]
        far[chunk:chunk + 4096] = np.sqrt(((q[:, None, :] - e[None, :, :]) ** 2).sum(-1)).max(1)
    latest = max(float(np.max(tx.arrival_time(p, c) + far / c)) for tx in txs)
    if t0 + duration < latest:
        raise ValueError(f"record ends at {t0 + duration:.3g} s before the last echo at {latest:.3g} s")


def _frames(spectrum, plan, txs, t0):
    return [RfFrame(_to_time(spectrum[a], plan, t0), plan.fs, t0, tx.angle) for a, tx in enumerate(txs)]


def _as_list(tx):
    return [tx] if isinstance(tx, TxEvent) else list(tx)


def simulate_rf(cloud: ScattererCloud, transducer: Transducer, tx: TxEvent | Sequence[TxEvent],
                medium: MediumParams, fs: float, duration: float, t0: float = 0.0,
                min_fs_ratio: float = 4.0) -> RfFrame | list[RfFrame]:
    """RF for one transmit (or a list of transmits sharing the geometry pass), all scatterers at once.

    Raises BudgetExceeded when the geometry working set exceeds ``medium.memory_budget``;
    use ``simulate_rf_chunked`` then.
    """
    txs = _as_list(tx)
    if fs < min_fs_ratio * transducer.center_frequency:
        raise ValueError(f"fs must be at least {min_fs_ratio} x the center frequency")
    plan = frequency_plan(transducer, fs, duration)
    need = len(cloud) * bytes_per_scatterer(transducer) + spectrum_bytes(transducer, len(txs), plan)
    if need > medium.memory_budget:
        raise BudgetExceeded(f"{need} bytes needed, budget {medium.memory_budget}")
    _check_window(cloud, transducer, txs, medium.c, t0, duration)
    spec = _block_spectrum(cloud.positions, cloud.reflectivity, transducer, txs, medium, plan)
    frames = _frames(spec, plan, txs, t0)
    return frames[0] if isinstance(tx, TxEvent) else frames


def block_count(n_scatterers: int, transducer: Transducer, n_tx: int, plan: FrequencyPlan, budget: int) -> int:
    """NW = ceil(N_s * bytes_per_scatterer / (budget - spectrum storage))."""
    free = budget - spectrum_bytes(transducer, n_tx, plan)
    per = bytes_per_scatterer(transducer)
    if free < per:
        raise BudgetExceeded("budget cannot hold even one scatterer")
    return max(1, math.ceil(n_scatterers * per / free))


def simulate_rf_chunked(cloud: ScattererCloud, transducer: Transducer, tx: TxEvent | Sequence[TxEvent],
                        medium: MediumParams, fs: float, duration: float, budget: int | None = None,
                        n_blocks: int | None = None, t0: float = 0.0,
                        min_fs_ratio: float = 4.0) -> RfFrame | list[RfFrame]:
    """Split scatterers into NW contiguous blocks that fit ``budget``, sum block spectra in
    block order, then inverse-transform once. ``n_blocks`` forces NW."""
    txs = _as_list(tx)
    if fs < min_fs_ratio * transducer.center_frequency:
        raise ValueError(f"fs must be at least {min_fs_ratio} x the center frequency")
    plan = frequency_plan(transducer, fs, duration)
    budget = medium.memory_budget if budget is None else budget
    nw = block_count(len(cloud), transducer, len(txs), plan, budget) if n_blocks is None else int(n_blocks)
    _check_window(cloud, transducer, txs, medium.c, t0, duration)
    total = np.zeros((len(txs), transducer.n_elements, len(plan.bins)), np.complex128)
    for idx in np.array_split(np.arange(len(cloud)), nw):
        if len(idx) == 0:
            continue
        sl = slice(idx[0], idx[-1] + 1)
        total += _block_spectrum(cloud.positions[sl], cloud.reflectivity[sl], transducer, txs, medium, plan)
    frames = _frames(total, plan, txs, t0)
    return frames[0] if isinstance(tx, TxEvent) else frames


@dataclass
class ComposeStats:
    tissue_calls: int = 0
    flow_calls: int = 0


def compose_frames(tissue_clouds: ScattererCloud | Sequence[ScattererCloud], flow_clouds: Sequence[ScattererCloud],
                   static_tissue: bool, simulate: Callable[[ScattererCloud], list[RfFrame]],
                   stats: ComposeStats | None = None) -> list[list[RfFrame]]:
    """Per-frame RF (one entry per transmit) = tissue RF + flow RF.

    With ``static_tissue`` the tissue RF comes from the first tissue cloud only and is reused.
    """
    stats = stats if stats is not None else ComposeStats()
    n_frames = len(flow_clouds)
    if isinstance(tissue_clouds, ScattererCloud):
        if not static_tissue:
            raise ValueError("moving tissue needs one cloud per frame")
        tissue_clouds = [tissue_clouds]
    elif not static_tissue and len(tissue_clouds) != n_frames:
        raise ValueError("tissue and flow frame counts differ")
    out = []
    tissue_rf = None
    for i in range(n_frames):
        if tissue_rf is None or not static_tissue:
            tissue_rf = simulate(tissue_clouds[0 if static_tissue else i])
            stats.tissue_calls += 1
        flow_rf = simulate(flow_clouds[i])
        stats.flow_calls += 1
        frame = []
        for t, f in zip(tissue_rf, flow_rf):
            total = t + f
            total.frame_index = i
            frame.append(total)
        out.append(frame)
    return out
