"""Synthetic wide-field ODMR image stacks of NV ensembles in strained diamond.

Stacks are stored as float32 photon counts with shape
``(n_freq, n_z, n_y, n_x)``; pixel ``(iy, ix)`` covers
``[ix, ix+1) * pixel_size`` along x and likewise along y.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.ndimage import convolve1d

from .errors import InvalidSceneError
from .spin_model import (
    DEFAULT_CONSTANTS,
    MHZ,
    NV_AXES,
    PhysicalConstants,
    high_field_resonances,
    nv_orientations,
)

TENSILE = "tensile"
COMPRESSIVE = "compressive"


@dataclass(frozen=True)
class GrainBoundaryModel:
    """Single straight boundary whose trace may shift and rotate with depth.

    At depth ``z`` the boundary passes through ``point + shift_per_um * z``
    with in-plane direction ``angle_deg + rotation_per_um * z`` (degrees from
    the x axis). Strain above the far-field level decays as
    ``exp(-d / relaxation_length)``, multiplied by ``exp(-z / depth_decay_length)``
    for the non-axial part and ``exp(-z / axial_depth_decay_length)`` for the
    axial part.
    """
    point: tuple[float, float] = (0.0, 0.0)  # um
    angle_deg: float = 90.0
    shift_per_um: tuple[float, float] = (0.0, 0.0)
    rotation_per_um: float = 0.0  # deg per um of depth
    peak_axial_strain: float = 6e-4
    peak_nonaxial_strain: float = 1.8e-4
    relaxation_length: float = 24.0  # um
    sign: str = TENSILE
    far_field_axial: float = 0.0
    far_field_nonaxial: float = 0.0
    depth_decay_length: float = math.inf  # um, non-axial
    axial_depth_decay_length: float = math.inf  # um

    def __post_init__(self):
        if not self.relaxation_length > 0:
            raise InvalidSceneError("relaxation_length must be positive")
        if not (self.depth_decay_length > 0 and self.axial_depth_decay_length > 0):
            raise InvalidSceneError("depth decay lengths must be positive")
        for name in ("peak_axial_strain", "peak_nonaxial_strain", "far_field_axial", "far_field_nonaxial"):
            if not abs(getattr(self, name)) < 5e-3:
                raise InvalidSceneError(f"|{name}| must stay below 5e-3")
        if self.peak_nonaxial_strain < 0 or self.far_field_nonaxial < 0:
            raise InvalidSceneError("non-axial strain is a magnitude and must be >= 0")
        if self.sign not in (TENSILE, COMPRESSIVE):
            raise InvalidSceneError(f"sign must be {TENSILE!r} or {COMPRESSIVE!r}")

    def trace(self, z: float) -> tuple[np.ndarray, float]:
        """(point on boundary, direction angle in radians) at depth z."""
        p = np.asarray(self.point, float) + np.asarray(self.shift_per_um, float) * z
        return p, math.radians(self.angle_deg + self.rotation_per_um * z)

    def distance(self, position) -> np.ndarray:
        pos = np.atleast_2d(np.asarray(position, dtype=float))
        z = pos[:, 2] if pos.shape[1] > 2 else np.zeros(len(pos))
        x0 = self.point[0] + self.shift_per_um[0] * z
        y0 = self.point[1] + self.shift_per_um[1] * z
        th = np.radians(self.angle_deg + self.rotation_per_um * z)
        return np.abs(-(pos[:, 0] - x0) * np.sin(th) + (pos[:, 1] - y0) * np.cos(th))


def strain_at(m: GrainBoundaryModel, position) -> tuple:
    """(axial, nonaxial) strain at one position or an (N, 3) array of positions, um.

    Axial strain is signed like the frequency shift it produces: tensile
    strain lowers the zero-field splitting and is returned negative.
    """
    pos = np.atleast_2d(np.asarray(position, dtype=float))
    z = pos[:, 2] if pos.shape[1] > 2 else np.zeros(len(pos))
    decay = np.exp(-m.distance(pos) / m.relaxation_length)
    zp = np.maximum(z, 0.0)
    dec_a = decay * np.exp(-zp / m.axial_depth_decay_length)
    dec_n = decay * np.exp(-zp / m.depth_decay_length)
    sgn = -1.0 if m.sign == TENSILE else 1.0
    axial = sgn * (m.far_field_axial + (m.peak_axial_strain - m.far_field_axial) * dec_a)
    nonaxial = m.far_field_nonaxial + (m.peak_nonaxial_strain - m.far_field_nonaxial) * dec_n
    if np.ndim(position) == 1:
        return float(axial[0]), float(nonaxial[0])
    return axial, nonaxial


@dataclass(frozen=True)
class BackgroundModel:
    """Frequency-flat fluorescence, in units of single-NV brightness per um^2."""
    ribbon_width: float = 0.5  # um, Gaussian sigma across the boundary
    ribbon_brightness: float = 0.0
    uniform_level: float = 0.0


@dataclass(frozen=True)
class Optics:
    numerical_aperture: float = 1.3
    wavelength: float = 670.0  # nm
    psf_enabled: bool = True
    rayleigh_range: float = 0.5  # um, defocus blur scale
    depth_of_field: float = 0.5  # um, NVs further from focus are not imaged

    def __post_init__(self):
        if not 0 < self.numerical_aperture < 2:
            raise InvalidSceneError("numerical aperture must lie in (0, 2)")
        if not self.wavelength > 0 or not self.rayleigh_range > 0 or not self.depth_of_field >= 0:
            raise InvalidSceneError("invalid optics parameters")

    @property
    def sigma_nm(self) -> float:
        return 0.21 * self.wavelength / self.numerical_aperture


@dataclass(frozen=True, eq=False)
class Scene:
    extent: tuple[float, float, float]  # um (x, y, z)
    nv_positions: np.ndarray  # (N, 3) um
    nv_classes: np.ndarray  # (N,) int in 0..3
    nv_brightness: np.ndarray  # (N,) relative
    strain_model: GrainBoundaryModel = GrainBoundaryModel()
    background: BackgroundModel = BackgroundModel()
    optics: Optics = Optics()
    pixel_size: float = 80.0  # nm
    z_slices: tuple[float, ...] = (0.0,)  # focal depths, um
    line_hwhm: float = 0.5  # MHz
    line_depth: float = 0.02
    hyperfine: bool = False
    class_nonaxial_scale: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    merge_unresolved: bool = True
    constants: PhysicalConstants = DEFAULT_CONSTANTS

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.nv_positions, dtype=float)).reshape(-1, 3)
        cls = np.asarray(self.nv_classes, dtype=np.int64).reshape(-1)
        bri = np.asarray(self.nv_brightness, dtype=float).reshape(-1)
        if not (len(pos) == len(cls) == len(bri)):
            raise InvalidSceneError("NV arrays must have equal length")
        if not self.pixel_size > 0:
            raise InvalidSceneError("pixel_size must be positive")
        ext = np.asarray(self.extent, float)
        if len(pos) and (np.any(pos < -1e-9) or np.any(pos[:, :2] > ext[:2] + 1e-9)
                         or np.any(pos[:, 2] > ext[2] + 1e-9)):
            raise InvalidSceneError("all NVs must lie within the scene extent")
        if len(cls) and (cls.min() < 0 or cls.max() > 3):
            raise InvalidSceneError("NV class index must be in 0..3")
        if np.any(bri < 0):
            raise InvalidSceneError("NV brightness must be non-negative")
        if not (0 < self.line_depth < 1 and self.line_hwhm > 0):
            raise InvalidSceneError("invalid line shape")
        if len(set(self.z_slices)) != len(self.z_slices) or not self.z_slices:
            raise InvalidSceneError("z_slices must be distinct and non-empty")
        for name, v in (("nv_positions", pos), ("nv_classes", cls), ("nv_brightness", bri)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def shape(self) -> tuple[int, int]:
        """(n_y, n_x) raw pixel grid."""
        nx = int(round(self.extent[0] * 1e3 / self.pixel_size))
        ny = int(round(self.extent[1] * 1e3 / self.pixel_size))
        return ny, nx

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(y, x) pixel-center coordinates in um."""
        ny, nx = self.shape
        p = self.pixel_size * 1e-3
        return (np.arange(ny) + 0.5) * p, (np.arange(nx) + 0.5) * p

    def strain_grid(self, z: float = 0.0, pixel_size: Optional[float] = None):
        """Ground-truth (axial, nonaxial) strain sampled at pixel centers."""
        p = (pixel_size or self.pixel_size) * 1e-3
        ny = int(round(self.extent[1] / p))
        nx = int(round(self.extent[0] / p))
        yy, xx = np.meshgrid((np.arange(ny) + 0.5) * p, (np.arange(nx) + 0.5) * p, indexing="ij")
        pos = np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)], axis=1)
        ax, nonax = strain_at(self.strain_model, pos)
        return ax.reshape(ny, nx), nonax.reshape(ny, nx)


    def imaged_strain_grid(self, z: float = 0.0, pixel_size: Optional[float] = None):
        """Brightness-weighted mean (axial, nonaxial) strain of the NVs imaged at focus ``z``.

        Only NVs within the depth of field count; pixels without one are NaN.
        This is what an unbiased fit of a PSF-free stack would report.
        """
        p = (pixel_size or self.pixel_size) * 1e-3
        ny = int(round(self.extent[1] / p))
        nx = int(round(self.extent[0] / p))
        pos = self.nv_positions
        sel = np.abs(pos[:, 2] - z) <= self.optics.depth_of_field + 1e-12
        ax, nonax = strain_at(self.strain_model, pos[sel])
        nonax = nonax * np.asarray(self.class_nonaxial_scale, float)[self.nv_classes[sel]]
        ix = np.clip((pos[sel, 0] / p).astype(np.int64), 0, nx - 1)
        iy = np.clip((pos[sel, 1] / p).astype(np.int64), 0, ny - 1)
        pix = iy * nx + ix
        w = self.nv_brightness[sel]
        wsum = np.bincount(pix, weights=w, minlength=ny * nx)
        with np.errstate(invalid="ignore", divide="ignore"):
            a = np.bincount(pix, weights=w * ax, minlength=ny * nx) / wsum
            n = np.bincount(pix, weights=w * nonax, minlength=ny * nx) / wsum
        a[wsum == 0] = np.nan
        n[wsum == 0] = np.nan
        return a.reshape(ny, nx), n.reshape(ny, nx)

def random_nvs(extent, density: float, seed: int, class_fractions=(0.25, 0.25, 0.25, 0.25),
               class_regions: Optional[Sequence[tuple[float, int]]] = None,
               brightness_spread: float = 0.0, z_range: Optional[tuple[float, float]] = None):
    """Uniformly scattered NVs, ``density`` per um^2 of the x-y extent.

    ``class_regions`` is a list of ``(x_max, class)`` bands that overrides
    ``class_fractions``: an NV belongs to the first band whose ``x_max``
    exceeds its x coordinate.
    """
    rng = np.random.default_rng(seed)
    ex, ey, ez = extent
    n = int(rng.poisson(density * ex * ey))
    z_lo, z_hi = z_range if z_range is not None else (0.0, 0.0)
    pos = np.column_stack([rng.uniform(0, ex, n), rng.uniform(0, ey, n), rng.uniform(z_lo, z_hi, n)])
    if class_regions:
        cls = np.full(n, class_regions[-1][1], dtype=np.int64)
        for x_max, c in reversed(class_regions):
            cls[pos[:, 0] < x_max] = c
    else:
        fr = np.asarray(class_fractions, float)
        cls = rng.choice(4, size=n, p=fr / fr.sum())
    bri = np.exp(brightness_spread * rng.standard_normal(n)) if brightness_spread > 0 else np.ones(n)
    return pos, cls, bri


@dataclass(eq=False)
class ImageStack:
    data: np.ndarray  # (n_freq, n_z, n_y, n_x) float32 photon counts
    frequency_axis: np.ndarray  # GHz
    z_offsets: tuple[float, ...]  # um
    pixel_size: float  # nm
    total_time: float  # s
    photon_rate: float  # photons / s per unit-brightness NV
    seed: Optional[int]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frequency_axis = np.asarray(self.frequency_axis, dtype=float)
        self.z_offsets = tuple(float(z) for z in self.z_offsets)
        if self.data.ndim != 4:
            raise InvalidSceneError("stack data must be 4-D (freq, z, y, x)")
        if self.data.shape[0] != len(self.frequency_axis) or self.data.shape[1] != len(self.z_offsets):
            raise InvalidSceneError("stack dims inconsistent with axes")
        if not np.all(np.diff(self.frequency_axis) > 0):
            raise InvalidSceneError("frequency axis must be strictly ascending")
        if np.any(self.data < 0):
            raise InvalidSceneError("photon counts must be non-negative")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(n_freq, n_y, n_x, n_z)."""
        nf, nz, ny, nx = self.data.shape
        return nf, ny, nx, nz

    def spectrum(self, iy: int, ix: int, iz: int = 0) -> np.ndarray:
        return np.asarray(self.data[:, iz, iy, ix], dtype=float)


def psf_kernel(optics: Optics, pixel_size: float, defocus: float = 0.0) -> np.ndarray:
    """Normalised 2-D Gaussian PSF sampled on the pixel grid, truncated at 3 sigma.

    ``defocus`` (um) widens sigma as ``sigma0 * (1 + |defocus| / rayleigh_range)``.
    """
    sigma = optics.sigma_nm * (1.0 + abs(defocus) / optics.rayleigh_range) / pixel_size
    k1 = _gauss1d(sigma)
    k2 = np.outer(k1, k1)
    return k2 / k2.sum()


def _gauss1d(sigma_px: float) -> np.ndarray:
    half = max(int(math.ceil(3.0 * sigma_px)), 0)
    k = np.arange(-half, half + 1, dtype=float)
    w = np.exp(-0.5 * (k / sigma_px) ** 2) if sigma_px > 0 else (k == 0).astype(float)
    return w / w.sum()


def _blur(img: np.ndarray, sigma_px: float) -> np.ndarray:
    k = _gauss1d(sigma_px)
    if k.size == 1:
        return img
    out = convolve1d(img, k, axis=-1, mode="constant")
    return convolve1d(out, k, axis=-2, mode="constant")


def _check_acquisition(scene, freq_axis, total_time, photon_rate):
    if len(scene.nv_positions) == 0:
        raise InvalidSceneError("scene contains no NVs")
    if not (total_time > 0 and photon_rate > 0):
        raise InvalidSceneError("photon budget must be positive")
    f = np.asarray(freq_axis, dtype=float)
    if f.ndim != 1 or f.size < 8 or not np.all(np.diff(f) > 0):
        raise InvalidSceneError("frequency axis needs >= 8 strictly ascending points")
    return f


def _lines_low_field(scene: Scene, e_z, e_perp):
    """Per-emitter line centers (GHz) and weights for the zero-field spectrum."""
    c = scene.constants
    center = c.d_gs_splitting + e_z * MHZ
    if not scene.hyperfine:
        half = e_perp * MHZ
        return [(center - half, 1.0), (center + half, 1.0)]
    lines = []
    a = c.hyperfine_splitting * MHZ
    for m_i in (-1, 0, 1):
        half = np.hypot(e_perp * MHZ, m_i * a)
        lines += [(center - half, 1.0 / 3.0), (center + half, 1.0 / 3.0)]
    return lines


def _merge_groups(keys, e_z, e_perp, bri, tol_mhz):
    """Brightness-weighted averaging of unresolved emitters sharing a key.

    A group is merged only if every member's resonances sit within ``tol_mhz``
    of the group mean; other groups keep their members individually.
    """
    uniq, inv = np.unique(keys, return_inverse=True)
    wsum = np.bincount(inv, weights=bri, minlength=len(uniq))
    safe = np.where(wsum > 0, wsum, 1.0)
    mz = np.bincount(inv, weights=bri * e_z, minlength=len(uniq)) / safe
    mp = np.bincount(inv, weights=bri * e_perp, minlength=len(uniq)) / safe
    dev = np.abs(e_z - mz[inv]) + np.abs(e_perp - mp[inv])
    worst = np.zeros(len(uniq))
    np.maximum.at(worst, inv, dev)
    merged = worst[inv] < tol_mhz
    keep = ~merged
    grp = np.flatnonzero(worst < tol_mhz)
    return (np.concatenate([uniq[grp], keys[keep]]),
            np.concatenate([mz[grp], e_z[keep]]),
            np.concatenate([mp[grp], e_perp[keep]]),
            np.concatenate([wsum[grp], bri[keep]]))


def _deposit(n_freq, n_pix, pix, weights_fn, contrast_fn, chunk=8192):
    """Sum per-emitter spectra onto the flattened pixel grid -> (n_freq, n_pix)."""
    out = np.zeros((n_pix, n_freq))
    for s0 in range(0, len(pix), chunk):
        sl = slice(s0, s0 + chunk)
        p = pix[sl]
        scatter = sparse.csr_matrix((weights_fn(sl), (p, np.arange(len(p)))), shape=(n_pix, len(p)))
        out += scatter @ contrast_fn(sl)
    return out.T


def _background(scene: Scene, z: float) -> np.ndarray:
    bg = scene.background
    yc, xc = scene.pixel_centers()
    yy, xx = np.meshgrid(yc, xc, indexing="ij")
    level = np.full(xx.shape, bg.uniform_level)
    if bg.ribbon_brightness > 0:
        d = scene.strain_model.distance(np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)], axis=1))
        level += bg.ribbon_brightness * np.exp(-0.5 * (d / bg.ribbon_width) ** 2).reshape(xx.shape)
    return level * (scene.pixel_size * 1e-3) ** 2


def _expected_slice(scene: Scene, f, z, frame_photons, line_fn):
    """Noise-free expected counts (n_freq, n_y, n_x) for one focal plane."""
    ny, nx = scene.shape
    n_pix = ny * nx
    pos = scene.nv_positions
    dz = np.abs(pos[:, 2] - z)
    sel = np.flatnonzero(dz <= scene.optics.depth_of_field + 1e-12)
    p = scene.pixel_size * 1e-3
    ix = np.clip((pos[sel, 0] / p).astype(np.int64), 0, nx - 1)
    iy = np.clip((pos[sel, 1] / p).astype(np.int64), 0, ny - 1)
    pix = iy * nx + ix
    # defocus bins of 0.1 um; in-focus emitters share bin 0
    dz_bin = np.rint(dz[sel] / 0.1).astype(np.int64) if scene.optics.psf_enabled else np.zeros(len(sel), np.int64)
    out = np.zeros((len(f), ny, nx))
    for b in np.unique(dz_bin):
        m = sel[dz_bin == b]
        acc = line_fn(m, pix[dz_bin == b], f, n_pix).reshape(len(f), ny, nx)
        if scene.optics.psf_enabled:
            sigma = scene.optics.sigma_nm * (1.0 + b * 0.1 / scene.optics.rayleigh_range) / scene.pixel_size
            acc = _blur(acc, sigma)
        out += acc
    out *= frame_photons
    out += frame_photons * _background(scene, z)[None, :, :]
    return out


def _low_field_line_fn(scene: Scene, z: float):
    c = scene.constants
    scale = np.asarray(scene.class_nonaxial_scale, float)

    def fn(idx, pix, f, n_pix):
        ax, nonax = strain_at(scene.strain_model, scene.nv_positions[idx])
        e_z = ax * c.axial_susceptibility * 1e3
        e_perp = nonax * scale[scene.nv_classes[idx]] * c.transverse_susceptibility * 1e3
        bri = scene.nv_brightness[idx]
        keys = pix
        if scene.merge_unresolved:
            keys, e_z, e_perp, bri = _merge_groups(pix, e_z, e_perp, bri, 2.0 * scene.line_hwhm)
        lines = _lines_low_field(scene, e_z, e_perp)
        g = scene.line_hwhm * MHZ

        def contrast(sl):
            dips = np.zeros((len(bri[sl]), len(f)))
            for centers, w in lines:
                u = f[None, :] - centers[sl][:, None]
                dips += scene.line_depth * w * g * g / (u * u + g * g)
            return 1.0 - dips

        return _deposit(len(f), n_pix, keys, lambda sl: bri[sl], contrast)

    return fn


def _high_field_line_fn(scene: Scene, b_lab, resolution):
    c = scene.constants
    lines = high_field_resonances(b_lab, nv_orientations(), c, resolution)
    upper = np.array([ln.upper for ln in lines.lines])
    lower = np.array([ln.lower for ln in lines.lines])
    g = scene.line_hwhm * MHZ

    def fn(idx, pix, f, n_pix):
        cls = scene.nv_classes[idx]
        bri = scene.nv_brightness[idx]

        def contrast(sl):
            dips = np.zeros((len(bri[sl]), len(f)))
            for centers in (upper[cls[sl]], lower[cls[sl]]):
                u = f[None, :] - centers[:, None]
                dips += scene.line_depth * g * g / (u * u + g * g)
            return 1.0 - dips

        return _deposit(len(f), n_pix, pix, lambda sl: bri[sl], contrast)

    return fn, lines


def _frame_rng(seed: int, iz: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), iz, k]))


def _sample(expected: np.ndarray, seed: Optional[int], iz: int, noise: bool,
            n_threads: int) -> np.ndarray:
    if not noise:
        return expected.astype(np.float32)
    out = np.empty(expected.shape, dtype=np.float32)

    def one(k):
        out[k] = _frame_rng(seed, iz, k).poisson(expected[k])

    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as ex:
            list(ex.map(one, range(expected.shape[0])))
    else:
        for k in range(expected.shape[0]):
            one(k)
    return out


def _threads(n_threads):
    if n_threads is not None:
        return max(1, int(n_threads))
    env = os.environ.get("NVSTRAIN_THREADS")
    return max(1, int(env)) if env else 1


def _render(scene, f, total_time, photon_rate, seed, noise, n_threads, line_fn_for_z, meta):
    if noise and seed is None:
        raise InvalidSceneError("a seed is required for noisy rendering")
    frame_photons = photon_rate * total_time / len(f)
    ny, nx = scene.shape
    data = np.empty((len(f), len(scene.z_slices), ny, nx), dtype=np.float32)
    for iz, z in enumerate(scene.z_slices):
        expected = _expected_slice(scene, f, z, frame_photons, line_fn_for_z(z))
        data[:, iz] = _sample(expected, seed, iz, noise, _threads(n_threads))
    return ImageStack(data, f, scene.z_slices, scene.pixel_size, total_time, photon_rate,
                      seed, dict(meta, noise=bool(noise)))


def render_stack(scene: Scene, freq_axis, total_time: float, photon_rate: float,
                 seed: Optional[int], noise: bool = True,
                 n_threads: Optional[int] = None) -> ImageStack:
    """Zero-field ODMR stack of the scene, one slice per focal depth.

    ``photon_rate`` is the detected rate of a unit-brightness NV off
    resonance; each frequency frame receives ``total_time / n_freq`` seconds.
    Noise for frame ``k`` of slice ``iz`` comes from its own generator seeded
    with ``(seed, iz, k)``, so threaded and serial renders agree bit for bit.
    """
    f = _check_acquisition(scene, freq_axis, total_time, photon_rate)
    return _render(scene, f, total_time, photon_rate, seed, noise, n_threads,
                   lambda z: _low_field_line_fn(scene, z), {"mode": "low-field"})


def render_high_field_stack(scene: Scene, b_lab, freq_axis, total_time: float,
                            photon_rate: float, seed: Optional[int], noise: bool = True,
                            resolution: float = 1e-3,
                            n_threads: Optional[int] = None) -> ImageStack:
    """Stack under a bias field ``b_lab`` (gauss, lab frame); strain is neglected."""
    f = _check_acquisition(scene, freq_axis, total_time, photon_rate)
    fn, lines = _high_field_line_fn(scene, b_lab, resolution)
    meta = {"mode": "high-field", "b_lab": [float(v) for v in b_lab]}
    return _render(scene, f, total_time, photon_rate, seed, noise, n_threads, lambda z: fn, meta)


def expected_total_photons(stack: ImageStack) -> float:
    return float(np.sum(stack.data, dtype=np.float64))
