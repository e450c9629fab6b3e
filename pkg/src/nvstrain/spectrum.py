"""Continuous-wave ODMR spectra built from Lorentzian dips."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import InvalidParameterError
from .spin_model import MHZ, ResonancePair

CONTRAST = "contrast"
COUNTS = "counts"


@dataclass(frozen=True, eq=False)
class OdmrSpectrum:
    frequencies: np.ndarray  # GHz, strictly ascending
    values: np.ndarray
    unit: str = CONTRAST

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if f.ndim != 1 or f.shape != v.shape:
            raise InvalidParameterError("frequencies and values must be equal-length 1-D arrays")
        if f.size < 8:
            raise InvalidParameterError(f"need at least 8 samples, got {f.size}")
        if not np.all(np.diff(f) > 0):
            raise InvalidParameterError("frequencies must be strictly ascending")
        if self.unit == CONTRAST:
            if not np.all((v > 0) & (v <= 1.05)):
                raise InvalidParameterError("contrast values must lie in (0, 1.05]")
        elif self.unit == COUNTS:
            if not np.all(v >= 0):
                raise InvalidParameterError("counts must be non-negative")
        else:
            raise InvalidParameterError(f"unknown unit {self.unit!r}")
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class LineShapeParams:
    center: float  # GHz
    hwhm: float  # MHz
    depth: float  # fractional contrast at line center

    def __post_init__(self):
        if not (math.isfinite(self.center) and self.hwhm > 0 and 0 < self.depth < 1):
            raise InvalidParameterError(f"invalid line shape {self!r}")


def lorentzian_dip(f, p: LineShapeParams):
    """Peak-normalised Lorentzian: ``depth`` at the center, half of it at center +/- hwhm."""
    g = p.hwhm * MHZ
    x = np.asarray(f, dtype=float) - p.center
    return p.depth * g * g / (x * x + g * g)


def expand_hyperfine(lines: Iterable[LineShapeParams], splitting: float) -> list[LineShapeParams]:
    """Replace each line by an equal-weight triplet spaced by ``splitting`` MHz."""
    out = []
    for ln in lines:
        for k in (-1, 0, 1):
            out.append(LineShapeParams(ln.center + k * splitting * MHZ, ln.hwhm, ln.depth / 3.0))
    return out


def dip_area(lines: Iterable[LineShapeParams]) -> float:
    """Integrated dip area over the whole real line, GHz."""
    return math.fsum(math.pi * ln.depth * ln.hwhm * MHZ for ln in lines)


def pair_lines(pair: ResonancePair, hwhm: float, depth: float) -> list[LineShapeParams]:
    return [LineShapeParams(pair.omega_minus, hwhm, depth), LineShapeParams(pair.omega_plus, hwhm, depth)]


def cw_spectrum(freq_axis, lines: Sequence[LineShapeParams],
                hyperfine: Optional[float] = None) -> OdmrSpectrum:
    """Contrast spectrum ``1 - sum(dips)``.

    ``hyperfine`` (MHz) splits every line into a 14N triplet with the total
    depth shared equally.
    """
    if not lines:
        raise InvalidParameterError("need at least one line")
    if hyperfine:
        lines = expand_hyperfine(lines, hyperfine)
    f = np.asarray(freq_axis, dtype=float)
    dips = np.zeros_like(f)
    for ln in lines:
        dips += lorentzian_dip(f, ln)
    return OdmrSpectrum(f, 1.0 - dips, CONTRAST)


def apply_shot_noise(s: OdmrSpectrum, photons_per_point: float, seed: int) -> OdmrSpectrum:
    """Poisson photon counts with mean ``photons_per_point * contrast``."""
    if not photons_per_point > 0:
        raise InvalidParameterError("photons_per_point must be positive")
    rng = np.random.default_rng(seed)
    counts = rng.poisson(photons_per_point * s.values).astype(float)
    return OdmrSpectrum(s.frequencies, counts, COUNTS)
