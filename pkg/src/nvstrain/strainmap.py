"""Fit grids to calibrated strain maps, precision/sensitivity layers and 3-D volumes."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidParameterError
from .fitting import CONVERGED, DEGENERATE, FitGrid
from .simulator import ImageStack
from .spin_model import DEFAULT_CONSTANTS, PhysicalConstants


def bin_stack(stack: ImageStack, factor: int) -> ImageStack:
    """Sum photon counts over ``factor x factor`` blocks; trailing pixels are dropped."""
    nf, nz, ny, nx = stack.data.shape
    if factor < 1:
        raise InvalidParameterError("bin factor must be >= 1")
    if factor > ny or factor > nx:
        raise InvalidParameterError(f"bin factor {factor} exceeds image size {ny}x{nx}")
    if factor == 1:
        return replace(stack, data=stack.data.copy(), meta=dict(stack.meta))
    by, bx = ny // factor, nx // factor
    core = stack.data[:, :, : by * factor, : bx * factor].astype(np.float64)
    summed = core.reshape(nf, nz, by, factor, bx, factor).sum(axis=(3, 5))
    meta = dict(stack.meta)
    meta["bin_factor"] = meta.get("bin_factor", 1) * factor
    meta["dropped_pixels"] = [ny - by * factor, nx - bx * factor]
    return replace(stack, data=summed.astype(np.float32), pixel_size=stack.pixel_size * factor,
                   meta=meta)


def smooth_map(grid: np.ndarray, mask: np.ndarray, neighbors: int = 4) -> np.ndarray:
    """Mean of each valid pixel and its valid nearest neighbours.

    ``neighbors`` is 4 (edge-sharing) or 8 (including diagonals). Invalid
    pixels contribute to neither sum nor count and are returned as NaN.
    """
    if neighbors not in (4, 8):
        raise InvalidParameterError("neighbors must be 4 or 8")
    mask = np.asarray(mask, dtype=bool)
    vals = np.where(mask, grid, 0.0).astype(float)
    w = mask.astype(float)
    pv = np.pad(vals, 1)
    pw = np.pad(w, 1)
    offsets = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)]
    if neighbors == 8:
        offsets += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    ny, nx = grid.shape
    s = np.zeros((ny, nx))
    n = np.zeros((ny, nx))
    for dy, dx in offsets:
        s += pv[1 + dy: 1 + dy + ny, 1 + dx: 1 + dx + nx]
        n += pw[1 + dy: 1 + dy + ny, 1 + dx: 1 + dx + nx]
    out = np.full(grid.shape, np.nan)
    out[mask] = s[mask] / n[mask]
    return out


@dataclass
class StrainMap:
    axial: np.ndarray
    nonaxial: np.ndarray
    precision_axial: np.ndarray
    precision_nonaxial: np.ndarray
    validity_mask: np.ndarray
    pixel_size: float  # nm
    z_offset: float  # um
    measurement_time: float  # s
    reference_d: float  # GHz
    ci_resonance: Optional[np.ndarray] = None  # GHz, per-pixel mean of the two resonance CIs

    def __post_init__(self):
        shapes = {a.shape for a in (self.axial, self.nonaxial, self.precision_axial,
                                    self.precision_nonaxial, self.validity_mask)}
        if len(shapes) != 1:
            raise InvalidParameterError("strain map layers must share one shape")

    def smoothed(self, neighbors: int = 4) -> "StrainMap":
        return replace(self, axial=smooth_map(self.axial, self.validity_mask, neighbors),
                       nonaxial=smooth_map(self.nonaxial, self.validity_mask, neighbors))


def to_strain(fits: FitGrid, c: PhysicalConstants = DEFAULT_CONSTANTS,
              reference_d: Optional[float] = None, pixel_size: float = 320.0,
              z_offset: float = 0.0, measurement_time: float = 150.0) -> StrainMap:
    """Strain from a 2-D fit grid.

    Axial strain is the resonance-center shift from ``reference_d`` over the
    axial susceptibility, non-axial strain the half-splitting over the
    transverse one. Pixels at the splitting floor carry non-axial strain 0.
    """
    if len(fits.shape) != 2:
        raise InvalidParameterError("to_strain expects a 2-D fit grid; slice 3-D grids per z first")
    ref = c.d_gs_splitting if reference_d is None else reference_d
    status = fits.status
    valid = (status == CONVERGED) | (status == DEGENERATE)
    center = 0.5 * (fits.omega_plus + fits.omega_minus)
    half = 0.5 * (fits.omega_plus - fits.omega_minus)
    axial = np.where(valid, (center - ref) / c.axial_susceptibility, np.nan)
    nonaxial = np.where(status == DEGENERATE, 0.0, half / c.transverse_susceptibility)
    nonaxial = np.where(valid, nonaxial, np.nan)
    ci = np.where(valid, fits.ci_resonance, np.nan)
    return StrainMap(axial, nonaxial, ci / c.axial_susceptibility, ci / c.transverse_susceptibility,
                     valid, pixel_size, z_offset, measurement_time, ref, ci)


def fit_slice(fits: FitGrid, iz: int) -> FitGrid:
    """2-D view of one z-slice of a ``(n_z, n_y, n_x)`` fit grid."""
    names = ("omega_plus", "omega_minus", "ci_plus", "ci_minus", "ci_center", "ci_half",
             "status", "params", "covariance", "residual_norm")
    return FitGrid(fits.shape[1:], *(getattr(fits, n)[iz] for n in names), meta=fits.meta)


@dataclass
class SensitivityReport:
    median_ci: float  # GHz
    sensitivity_axial: np.ndarray  # strain / sqrt(Hz)
    sensitivity_nonaxial: np.ndarray
    median_sensitivity_axial: float
    median_sensitivity_nonaxial: float
    median_precision_axial: float
    median_precision_nonaxial: float
    hist_edges: np.ndarray  # GHz
    hist_counts: np.ndarray
    valid_fraction: float


def sensitivity_report(m: StrainMap, bins: int = 40) -> SensitivityReport:
    if not m.measurement_time > 0:
        raise InvalidParameterError("measurement_time must be positive")
    root_t = math.sqrt(m.measurement_time)
    sens_a = m.precision_axial * root_t
    sens_n = m.precision_nonaxial * root_t
    v = m.validity_mask & np.isfinite(m.precision_axial)
    ci = m.ci_resonance if m.ci_resonance is not None else m.precision_axial * DEFAULT_CONSTANTS.axial_susceptibility
    civ = ci[v]
    med = lambda a: float(np.median(a[v])) if v.any() else float("nan")
    if civ.size:
        counts, edges = np.histogram(civ, bins=bins)
    else:
        counts, edges = np.zeros(bins, dtype=int), np.linspace(0, 1, bins + 1)
    return SensitivityReport(float(np.median(civ)) if civ.size else float("nan"), sens_a, sens_n,
                             med(sens_a), med(sens_n), med(m.precision_axial),
                             med(m.precision_nonaxial), edges, counts,
                             float(v.mean()) if v.size else 0.0)


@dataclass
class BoundaryTrace:
    z: np.ndarray  # um, per slice
    row_positions: list  # per slice, boundary x (um) per row, NaN where undetermined
    position: np.ndarray  # um, per-slice median x position


@dataclass
class StrainVolume:
    slices: list  # StrainMap, sorted by z
    z: np.ndarray

    @property
    def axial(self) -> np.ndarray:
        return np.stack([s.axial for s in self.slices])

    @property
    def nonaxial(self) -> np.ndarray:
        return np.stack([s.nonaxial for s in self.slices])

    @property
    def spacing(self) -> np.ndarray:
        return np.diff(self.z)

    def boundary_trace(self, method: str = "gradient-jump", window: float = 2.0,
                       smooth_passes: int = 3) -> BoundaryTrace:
        """Boundary x position per row in every slice.

        ``"gradient"`` takes the argmax of |d(axial)/dx|. ``"gradient-jump"``
        takes the argmax of the change in gradient across the pixel,
        ``|a(x+w) - 2 a(x) + a(x-w)|`` with ``w`` = ``window`` um, which peaks
        at a strain cusp even when the decay length is many pixels long and
        the plain gradient is flat there. Maps are pre-smoothed
        ``smooth_passes`` times with the 4-neighbour mean.
        """
        if method not in ("gradient", "gradient-jump"):
            raise InvalidParameterError(f"unknown boundary method {method!r}")
        rows_all, med = [], []
        for s in self.slices:
            ax = np.where(s.validity_mask, s.axial, np.nan)
            for _ in range(smooth_passes):
                ax = smooth_map(ax, s.validity_mask)
            if method == "gradient":
                score, offset = np.abs(np.diff(ax, axis=1)), 1.0
            else:
                w = max(1, int(round(window * 1e3 / s.pixel_size)))
                score = np.abs(ax[:, 2 * w:] - 2 * ax[:, w:-w] + ax[:, : -2 * w])
                offset = w + 0.5
            pos = np.full(ax.shape[0], np.nan)
            for r in range(ax.shape[0]):
                g = score[r]
                if np.isfinite(g).any():
                    pos[r] = (np.nanargmax(g) + offset) * s.pixel_size * 1e-3
            rows_all.append(pos)
            med.append(float(np.nanmedian(pos)) if np.isfinite(pos).any() else float("nan"))
        return BoundaryTrace(self.z.copy(), rows_all, np.asarray(med))


def assemble_3d(maps: Sequence[StrainMap]) -> StrainVolume:
    if len(maps) < 2:
        raise InvalidParameterError("a volume needs at least two slices")
    zs = [m.z_offset for m in maps]
    if len(set(zs)) != len(zs):
        raise InvalidParameterError("duplicate z offsets")
    if len({m.axial.shape for m in maps}) != 1:
        raise InvalidParameterError("slices must share one grid shape")
    ordered = sorted(maps, key=lambda m: m.z_offset)
    return StrainVolume(list(ordered), np.array([m.z_offset for m in ordered]))


@dataclass
class OrientationMaps:
    class_maps: dict  # class index -> contrast grid
    frequencies: dict  # class index -> GHz
    groups: list  # lists of class indices sharing one line
    detected: list  # groups (by first class index) with significant contrast
    n_distinct: int
    threshold: float


def orientation_contrast_maps(stack: ImageStack, resonances: Sequence[tuple[int, float]],
                              iz: int = 0, threshold: Optional[float] = None,
                              min_fraction: float = 0.005,
                              resolution: float = 1e-3,
                              guard: float = 10e-3) -> OrientationMaps:
    """Per-class ODMR contrast maps and the number of populated, distinct lines.

    Contrast is ``(baseline - on_resonance) / baseline``. The baseline is the
    per-pixel median over frames more than ``guard`` GHz from every listed
    resonance (all frames if none qualify); the on-resonance counts average
    the three frames nearest the line. A line group is detected when at least
    ``min_fraction`` of pixels exceed ``threshold`` (default: five times the
    shot-noise level of the contrast).
    """
    f = stack.frequency_axis
    counts = stack.data[:, iz].astype(np.float64)
    nf = len(f)
    step = float(np.median(np.diff(f)))
    for _, w in resonances:
        if not (f[0] - 0.5 * step <= w <= f[-1] + 0.5 * step):
            raise InvalidParameterError(f"resonance {w} GHz lies outside the frequency axis")
    far = np.ones(nf, dtype=bool)
    for _, w in resonances:
        far &= np.abs(f - w) > guard
    base = np.median(counts[far] if far.any() else counts, axis=0)
    safe = np.where(base > 0, base, 1.0)
    maps, freqs = {}, {}
    for idx, w in resonances:
        k = int(np.argmin(np.abs(f - w)))
        ks = [j for j in (k - 1, k, k + 1) if 0 <= j < nf]
        on = counts[ks].mean(axis=0)
        maps[idx] = np.where(base > 0, (base - on) / safe, 0.0)
        freqs[idx] = float(w)
    if threshold is None:
        noise = np.sqrt(safe / 3.0) / safe
        threshold = float(max(5.0 * np.median(noise), 1e-3))
    order = sorted(freqs, key=lambda i: freqs[i])
    groups: list[list[int]] = []
    for i in order:
        if groups and freqs[i] - freqs[groups[-1][-1]] < resolution:
            groups[-1].append(i)
        else:
            groups.append([i])
    detected = [g[0] for g in groups if np.mean(maps[g[0]] > threshold) >= min_fraction]
    return OrientationMaps(maps, freqs, groups, detected, len(detected), threshold)
