"""Ground-state spin-1 model of the NV center.

Frequencies are GHz unless a name says otherwise; effective-field energies
(``e_x``, ``e_y``, ``e_z``) are MHz; magnetic fields are gauss. The spin
basis is ordered m_s = (+1, 0, -1).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidEnsembleError, InvalidParameterError, NumericalError

MHZ = 1e-3  # GHz per MHz


@dataclass(frozen=True)
class PhysicalConstants:
    d_gs_splitting: float = 2.87  # GHz
    gyromagnetic_ratio: float = 2.8031  # MHz/G, g*mu_B/h with g = 2.003
    axial_susceptibility: float = 9.38  # GHz per unit strain
    transverse_susceptibility: float = 20.6  # GHz per unit strain
    hyperfine_splitting: float = 2.16  # MHz, 14N axial

    def __post_init__(self):
        for name in ("d_gs_splitting", "gyromagnetic_ratio", "axial_susceptibility",
                     "transverse_susceptibility", "hyperfine_splitting"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidParameterError(f"{name} must be finite and > 0, got {value!r}")

    @property
    def gamma_ghz(self) -> float:
        """Gyromagnetic ratio in GHz/G."""
        return self.gyromagnetic_ratio * MHZ


DEFAULT_CONSTANTS = PhysicalConstants()


@dataclass(frozen=True)
class SpinParameters:
    d_gs: float = 2.87
    e_x: float = 0.0
    e_y: float = 0.0
    e_z: float = 0.0
    b_field: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        b = tuple(float(v) for v in self.b_field)
        if len(b) != 3:
            raise InvalidParameterError("b_field must have three components")
        object.__setattr__(self, "b_field", b)
        values = (self.d_gs, self.e_x, self.e_y, self.e_z) + b
        if not all(math.isfinite(v) for v in values):
            raise InvalidParameterError(f"non-finite spin parameter in {self!r}")

    @property
    def e_perp(self) -> float:
        return math.hypot(self.e_x, self.e_y)

    @classmethod
    def from_strain(cls, axial: float, nonaxial: float,
                    c: PhysicalConstants = DEFAULT_CONSTANTS,
                    b_field=(0.0, 0.0, 0.0), angle: float = 0.0) -> "SpinParameters":
        """Build parameters from dimensionless strain using the scalar susceptibilities.

        ``angle`` orients the transverse component in the NV x-y plane.
        """
        e_z = axial * c.axial_susceptibility * 1e3
        e_perp = nonaxial * c.transverse_susceptibility * 1e3
        return cls(d_gs=c.d_gs_splitting, e_x=e_perp * math.cos(angle),
                   e_y=e_perp * math.sin(angle), e_z=e_z, b_field=b_field)


@dataclass(frozen=True)
class OrientationClass:
    index: int
    axis: tuple[float, float, float]
    fraction: float = 0.25

    def __post_init__(self):
        axis = tuple(float(v) for v in self.axis)
        if len(axis) != 3 or abs(math.sqrt(sum(v * v for v in axis)) - 1.0) > 1e-12:
            raise InvalidParameterError(f"orientation axis must be a unit 3-vector, got {axis}")
        if not 0.0 <= self.fraction <= 1.0:
            raise InvalidParameterError(f"fraction must lie in [0, 1], got {self.fraction}")
        object.__setattr__(self, "axis", axis)


_S3 = 1.0 / math.sqrt(3.0)
NV_AXES: tuple[tuple[float, float, float], ...] = (
    (_S3, _S3, _S3),
    (_S3, -_S3, -_S3),
    (-_S3, _S3, -_S3),
    (-_S3, -_S3, _S3),
)


def nv_orientations(fractions: Sequence[float] = (0.25, 0.25, 0.25, 0.25)) -> list[OrientationClass]:
    """The four <111> orientation classes with the given population fractions."""
    if len(fractions) != 4:
        raise InvalidParameterError("need one fraction per (111) class")
    return [OrientationClass(i, NV_AXES[i], float(f)) for i, f in enumerate(fractions)]


@dataclass(frozen=True)
class ResonancePair:
    omega_plus: float
    omega_minus: float

    def __post_init__(self):
        if self.omega_plus < self.omega_minus:
            raise InvalidParameterError("omega_plus must be >= omega_minus")

    @property
    def center(self) -> float:
        return 0.5 * (self.omega_plus + self.omega_minus)

    @property
    def splitting(self) -> float:
        return self.omega_plus - self.omega_minus


class Regime(str, enum.Enum):
    HIGH_FIELD = "high-field"
    LOW_FIELD = "low-field"
    INTERMEDIATE = "intermediate"


# Spin-1 operators, basis (+1, 0, -1).
_SZ = np.diag([1.0, 0.0, -1.0]).astype(complex)
_SX = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=complex) / math.sqrt(2.0)
_SY = np.array([[0, -1j, 0], [1j, 0, -1j], [0, 1j, 0]], dtype=complex) / math.sqrt(2.0)


def build_hamiltonian(p: SpinParameters, c: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """H/h in GHz for the spin-1 ground state, basis (+1, 0, -1)."""
    ex, ey, ez = p.e_x * MHZ, p.e_y * MHZ, p.e_z * MHZ
    bx, by, bz = p.b_field
    g = c.gamma_ghz
    h = ((p.d_gs + ez) * (_SZ @ _SZ)
         - ex * (_SX @ _SX - _SY @ _SY)
         + ey * (_SX @ _SY + _SY @ _SX)
         + g * (bx * _SX + by * _SY + bz * _SZ))
    return 0.5 * (h + h.conj().T)


def transition_frequencies_exact(p: SpinParameters,
                                 c: PhysicalConstants = DEFAULT_CONSTANTS) -> ResonancePair:
    """Transition frequencies from exact diagonalization.

    The m_s = 0-like state is the eigenvector with the largest weight on |0>;
    strain and transverse fields mix the bare states so energy ordering alone
    is not a reliable label.
    """
    try:
        evals, evecs = np.linalg.eigh(build_hamiltonian(p, c))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigen-decomposition failed for {p!r}") from exc
    if not np.all(np.isfinite(evals)):
        raise NumericalError(f"non-finite eigenvalues for {p!r}")
    k0 = int(np.argmax(np.abs(evecs[1, :]) ** 2))
    others = np.delete(evals, k0) - evals[k0]
    lo, hi = sorted(float(v) for v in others)
    return ResonancePair(hi, lo)


def transition_frequencies_approx(p: SpinParameters,
                                  c: PhysicalConstants = DEFAULT_CONSTANTS) -> ResonancePair:
    """Closed-form resonances, exact when the transverse magnetic field vanishes."""
    center = p.d_gs + p.e_z * MHZ
    half = math.hypot(p.e_perp * MHZ, c.gamma_ghz * p.b_field[2])
    return ResonancePair(center + half, center - half)


def classify_regime(p: SpinParameters, ratio_threshold: float = 10.0,
                    c: PhysicalConstants = DEFAULT_CONSTANTS) -> Regime:
    if not ratio_threshold > 1:
        raise InvalidParameterError("ratio_threshold must exceed 1")
    zeeman = c.gyromagnetic_ratio * abs(p.b_field[2])  # MHz
    strain = p.e_perp
    if zeeman > ratio_threshold * strain:
        return Regime.HIGH_FIELD
    if strain > ratio_threshold * zeeman:
        return Regime.LOW_FIELD
    return Regime.INTERMEDIATE


def project_to_nv_frame(b_lab, o: OrientationClass) -> tuple[float, float]:
    """Split a lab-frame field into components along and across the NV axis."""
    b = np.asarray(b_lab, dtype=float)
    b_z = float(b @ np.asarray(o.axis))
    b_perp = math.sqrt(max(float(b @ b) - b_z * b_z, 0.0))
    return b_z, b_perp


@dataclass(frozen=True)
class ClassLine:
    index: int
    upper: float  # GHz, D + gamma*|B.axis|
    lower: float  # GHz, D - gamma*|B.axis|
    group: int
    merged: bool


@dataclass(frozen=True)
class HighFieldLines:
    lines: tuple[ClassLine, ...]
    n_distinct: int

    @property
    def resonances(self) -> list[tuple[int, float]]:
        return [(ln.index, ln.upper) for ln in self.lines]

    def group_members(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for ln in self.lines:
            out.setdefault(ln.group, []).append(ln.index)
        return out


def high_field_resonances(b_lab, orientations: Sequence[OrientationClass],
                          c: PhysicalConstants = DEFAULT_CONSTANTS,
                          resolution: float = 1e-3) -> HighFieldLines:
    """Per-class Zeeman-shifted resonances with coincident lines merged.

    Lines closer than ``resolution`` (GHz) are chained into one group, so
    ``n_distinct`` counts the spectrally separable lines.
    """
    if not orientations:
        raise InvalidParameterError("need at least one orientation class")
    shifts = []
    for o in orientations:
        b_z, _ = project_to_nv_frame(b_lab, o)
        shifts.append((o.index, c.gamma_ghz * abs(b_z)))
    order = sorted(range(len(shifts)), key=lambda k: shifts[k][1])
    group_of = {}
    group = 0
    for rank, k in enumerate(order):
        if rank and shifts[k][1] - shifts[order[rank - 1]][1] >= resolution:
            group += 1
        group_of[k] = group
    sizes = {g: list(group_of.values()).count(g) for g in set(group_of.values())}
    lines = tuple(
        ClassLine(idx, c.d_gs_splitting + s, c.d_gs_splitting - s, group_of[k], sizes[group_of[k]] > 1)
        for k, (idx, s) in enumerate(shifts)
    )
    return HighFieldLines(lines, group + 1)


def _check_fractions(fractions: Sequence[float]) -> None:
    total = math.fsum(fractions)
    if abs(total - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise InvalidEnsembleError(f"ensemble fractions must be non-negative and sum to 1, got {total!r}")


def ensemble_resonances(members: Sequence[tuple[OrientationClass, SpinParameters]],
                        c: PhysicalConstants = DEFAULT_CONSTANTS) -> ResonancePair:
    """Fraction-weighted mean resonances of spectrally unresolved orientation classes."""
    if not members:
        raise InvalidEnsembleError("empty ensemble")
    _check_fractions([o.fraction for o, _ in members])
    plus = math.fsum(o.fraction * transition_frequencies_approx(p, c).omega_plus for o, p in members)
    minus = math.fsum(o.fraction * transition_frequencies_approx(p, c).omega_minus for o, p in members)
    return ResonancePair(max(plus, minus), min(plus, minus))


def observed_strain_components(r: ResonancePair,
                               c: PhysicalConstants = DEFAULT_CONSTANTS) -> tuple[float, float]:
    """(e_z_obs, e_perp_obs) in MHz from a zero-field resonance pair."""
    e_z = (0.5 * (r.omega_plus + r.omega_minus) - c.d_gs_splitting) / MHZ
    e_perp = 0.5 * (r.omega_plus - r.omega_minus) / MHZ
    return e_z, e_perp


def hyperfine_resolved_pairs(p: SpinParameters,
                             c: PhysicalConstants = DEFAULT_CONSTANTS) -> list[tuple[ResonancePair, float]]:
    """Resonance pairs for the three 14N projections, each with weight 1/3.

    The nuclear spin acts as an extra axial field of m_I * A, so at zero
    applied field the m_I = +1 and m_I = -1 pairs coincide while the m_I = 0
    pair is split by strain alone.
    """
    center = p.d_gs + p.e_z * MHZ
    zeeman = c.gamma_ghz * p.b_field[2]
    out = []
    for m_i in (-1, 0, 1):
        half = math.hypot(p.e_perp * MHZ, zeeman + m_i * c.hyperfine_splitting * MHZ)
        out.append((ResonancePair(center + half, center - half), 1.0 / 3.0))
    return out
