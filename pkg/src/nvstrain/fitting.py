"""Per-pixel double-Lorentzian fitting with covariance-based 68% intervals.

All pixels are fitted in lockstep: the damped Gauss-Newton iteration runs on
stacked arrays, one row per spectrum, with every row evolving independently
of the others. Inside the solver frequencies are MHz offsets from the middle
of the frequency axis and counts are divided by the seed baseline, which
keeps the normal matrix well scaled.
"""

from __future__ import annotations

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import convolve1d
from scipy.special import erf
from scipy.stats import chi2

from .errors import InvalidParameterError
from .spectrum import OdmrSpectrum

PARAM_NAMES = ("baseline", "depth_minus", "depth_plus", "center", "half_splitting",
               "hwhm_minus", "hwhm_plus")
N_PARAMS = len(PARAM_NAMES)
_B, _A1, _A2, _C, _H, _G1, _G2 = range(N_PARAMS)


class FitStatus(str, enum.Enum):
    CONVERGED = "converged"
    MAX_ITER = "max-iter"
    DEGENERATE = "degenerate-single-dip"
    REJECTED = "rejected-low-snr"

    @property
    def code(self) -> int:
        return _STATUS_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "FitStatus":
        return _STATUS_ORDER[int(code)]


_STATUS_ORDER = (FitStatus.CONVERGED, FitStatus.MAX_ITER, FitStatus.DEGENERATE, FitStatus.REJECTED)
_STATUS_CODES = {s: i for i, s in enumerate(_STATUS_ORDER)}
CONVERGED, MAX_ITER, DEGENERATE, REJECTED = range(4)


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 200
    gradient_tolerance: float = 1e-10
    step_tolerance: float = 1e-9
    snr_reject_threshold: float = 3.0
    splitting_floor: float = 0.3  # MHz
    seed_strategy: str = "multi"  # smooth3 | matched | multi
    hwhm_guess: float = 0.5  # MHz, matched-filter width and fallback line width
    hwhm_min: float = 0.0  # MHz, line-width floor; the frequency step is always a floor
    window: Optional[tuple[float, float]] = None  # GHz, fit only inside

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InvalidParameterError("max_iterations must be >= 1")
        for name in ("gradient_tolerance", "step_tolerance", "snr_reject_threshold", "hwhm_guess"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be positive")
        if self.hwhm_min < 0:
            raise InvalidParameterError("hwhm_min must be >= 0")
        if self.splitting_floor < 0:
            raise InvalidParameterError("splitting_floor must be >= 0")
        if self.seed_strategy not in ("smooth3", "matched", "multi"):
            raise InvalidParameterError(f"unknown seed_strategy {self.seed_strategy!r}")
        if self.window is not None:
            lo, hi = self.window
            if not hi > lo:
                raise InvalidParameterError("window must be (low, high) with high > low")
            object.__setattr__(self, "window", (float(lo), float(hi)))


@dataclass
class FitResult:
    omega_plus: float  # GHz
    omega_minus: float  # GHz
    depths: tuple[float, float]  # (minus, plus)
    hwhms: tuple[float, float]  # MHz, (minus, plus)
    baseline: float  # counts
    covariance: np.ndarray  # PARAM_NAMES order; GHz for center/half-splitting
    ci68: dict[str, float]
    residual_norm: float
    status: FitStatus

    @property
    def ci_omega_plus(self) -> float:
        return self.ci68["omega_plus"]

    @property
    def ci_omega_minus(self) -> float:
        return self.ci68["omega_minus"]

    @property
    def ci_resonance(self) -> float:
        """Mean 68% half-width of the two resonance frequencies, GHz."""
        return 0.5 * (self.ci68["omega_plus"] + self.ci68["omega_minus"])


@dataclass
class Seeds:
    """Initial guesses in solver units plus a rejection flag per spectrum."""
    params: np.ndarray  # (P, 7)
    rejected: np.ndarray  # (P,) bool
    baseline: np.ndarray  # (P,) counts used for normalisation


# --------------------------------------------------------------------------
# model

def _model_and_jacobian(x, theta, want_jac=True):
    b, a1, a2, c, h, g1, g2 = (theta[:, k:k + 1] for k in range(N_PARAMS))
    u1 = x - (c - h)
    u2 = x - (c + h)
    d1 = u1 * u1 + g1 * g1
    d2 = u2 * u2 + g2 * g2
    l1 = g1 * g1 / d1
    l2 = g2 * g2 / d2
    shape = 1.0 - a1 * l1 - a2 * l2
    m = b * shape
    if not want_jac:
        return m, None
    l1u = -2.0 * u1 * g1 * g1 / (d1 * d1)
    l2u = -2.0 * u2 * g2 * g2 / (d2 * d2)
    jac = np.empty(m.shape + (N_PARAMS,))
    jac[..., _B] = shape
    jac[..., _A1] = -b * l1
    jac[..., _A2] = -b * l2
    jac[..., _C] = b * (a1 * l1u + a2 * l2u)
    jac[..., _H] = -b * (a1 * l1u - a2 * l2u)
    jac[..., _G1] = -b * a1 * 2.0 * g1 * u1 * u1 / (d1 * d1)
    jac[..., _G2] = -b * a2 * 2.0 * g2 * u2 * u2 / (d2 * d2)
    return m, jac


def double_lorentzian(f, baseline, depth_minus, depth_plus, omega_minus, omega_plus,
                      hwhm_minus, hwhm_plus):
    """Counts model ``baseline * (1 - dip(omega_minus) - dip(omega_plus))``; widths MHz."""
    f = np.asarray(f, dtype=float)
    g1, g2 = hwhm_minus * 1e-3, hwhm_plus * 1e-3
    l1 = g1 * g1 / ((f - omega_minus) ** 2 + g1 * g1)
    l2 = g2 * g2 / ((f - omega_plus) ** 2 + g2 * g2)
    return baseline * (1.0 - depth_minus * l1 - depth_plus * l2)


# --------------------------------------------------------------------------
# seeding

def _noise_sd(y):
    d = np.diff(y, axis=-1)
    mad = np.median(np.abs(d - np.median(d, axis=-1, keepdims=True)), axis=-1)
    return mad / (0.6744897501960817 * np.sqrt(2.0))


def _smooth3(y):
    return convolve1d(y, np.full(3, 1.0 / 3.0), axis=-1, mode="nearest")


def _matched(y, step_mhz, hwhm):
    g = max(hwhm / step_mhz, 0.5)
    half = int(np.ceil(4 * g))
    k = np.arange(-half, half + 1, dtype=float)
    kernel = g * g / (k * k + g * g)
    return convolve1d(y, kernel / kernel.sum(), axis=-1, mode="nearest")


def _two_deepest_minima(s, min_gap):
    """Indices of the two deepest interior local minima, second = -1 if absent."""
    n = s.shape[-1]
    interior = np.zeros_like(s, dtype=bool)
    interior[:, 1:-1] = (s[:, 1:-1] < s[:, :-2]) & (s[:, 1:-1] <= s[:, 2:])
    depth = np.where(interior, s, np.inf)
    first = np.argmin(depth, axis=1)
    none = ~np.isfinite(depth[np.arange(len(s)), first])
    first = np.where(none, np.argmin(s, axis=1), first)
    idx = np.arange(n)[None, :]
    blocked = np.abs(idx - first[:, None]) < max(min_gap, 1)
    depth2 = np.where(blocked, np.inf, depth)
    second = np.argmin(depth2, axis=1)
    has2 = np.isfinite(depth2[np.arange(len(s)), second])
    return first, np.where(has2, second, -1)


def _seed_from_smoothed(x, y_norm, s, min_gap, cfg, hwhm):
    first, second = _two_deepest_minima(s, min_gap)
    rows = np.arange(len(s))
    h_min = 0.5 * cfg.splitting_floor
    x1, x2 = x[first], np.where(second >= 0, x[np.maximum(second, 0)], x[first])
    single = second < 0
    lo, hi = np.minimum(x1, x2), np.maximum(x1, x2)
    c = 0.5 * (lo + hi)
    h = np.maximum(0.5 * (hi - lo), h_min)
    c = np.where(single, x1, c)
    h = np.where(single, h_min, h)
    base = np.ones(len(s))
    dep1 = np.clip(1.0 - s[rows, first], 1e-4, 0.9)
    dep2 = np.clip(1.0 - s[rows, np.maximum(second, 0)], 1e-4, 0.9)
    d_lo = np.where(x1 <= x2, dep1, dep2)
    d_hi = np.where(x1 <= x2, dep2, dep1)
    d_lo = np.where(single, 0.5 * dep1, d_lo)
    d_hi = np.where(single, 0.5 * dep1, d_hi)
    theta = np.stack([base, d_lo, d_hi, c, h, hwhm, hwhm], axis=1)
    return theta


def _prepare(freqs, counts, cfg):
    counts = np.atleast_2d(np.asarray(counts, dtype=float))
    freqs = np.asarray(freqs, dtype=float)
    if cfg.window is not None:
        keep = (freqs >= cfg.window[0]) & (freqs <= cfg.window[1])
        freqs, counts = freqs[keep], counts[:, keep]
    if freqs.size < N_PARAMS + 5:
        raise InvalidParameterError(f"need at least {N_PARAMS + 5} spectral samples, got {freqs.size}")
    f_mid = 0.5 * (freqs[0] + freqs[-1])
    x = (freqs - f_mid) * 1e3
    return freqs, counts, f_mid, x


def _seed_estimate_batch(x, counts, cfg, strategy):
    n = counts.shape[1]
    q = np.sort(counts, axis=1)[:, (3 * n) // 4:]
    b0 = np.median(q, axis=1)
    ok = b0 > 0
    b0 = np.where(ok, b0, 1.0)
    y = counts / b0[:, None]
    step = float(np.median(np.diff(x)))
    sigma = _noise_sd(y)
    hwhm = np.full(len(y), cfg.hwhm_guess)
    if strategy == "smooth3":
        s = _smooth3(y)
        theta = _seed_from_smoothed(x, y, s, 1, cfg, hwhm)
        noise = sigma / np.sqrt(3.0)
    else:
        s = _matched(y, step, cfg.hwhm_guess)
        gap = int(np.ceil(cfg.hwhm_guess / step))
        theta = _seed_from_smoothed(x, y, s, gap, cfg, hwhm)
        g = max(cfg.hwhm_guess / step, 0.5)
        half = int(np.ceil(4 * g))
        k = np.arange(-half, half + 1, dtype=float)
        w = g * g / (k * k + g * g)
        noise = sigma * np.sqrt(np.sum(w * w)) / w.sum()
    # the deepest of n_eff independent smoothed samples is an extreme value:
    # add the look-elsewhere margin so pure noise is reliably rejected, while
    # any dip the final significance test could accept still passes
    n_eff = max(n * float(np.median((noise / np.maximum(sigma, 1e-300)) ** 2)), 2.0)
    top = np.median(np.sort(s, axis=1)[:, (3 * n) // 4:], axis=1)
    dip = top - s.min(axis=1)
    gate = (cfg.snr_reject_threshold + np.sqrt(2.0 * np.log(n_eff))) * noise
    rejected = ~ok | (dip <= gate) | ~np.isfinite(dip)
    return Seeds(theta, rejected, b0)


def seed_estimate(s: OdmrSpectrum, cfg: FitConfig = FitConfig()) -> Seeds:
    """Initial guess from the two deepest minima of the 3-point-smoothed spectrum.

    Centers and half-splitting are returned in MHz relative to the middle of
    the (windowed) frequency axis; use :func:`seed_frequencies` for GHz.
    """
    _, counts, _, x = _prepare(s.frequencies, s.values, cfg)
    return _seed_estimate_batch(x, counts, cfg, "smooth3")


def seed_frequencies(s: OdmrSpectrum, seeds: Seeds, cfg: FitConfig = FitConfig()) -> tuple[float, float]:
    """(omega_minus, omega_plus) seed positions in GHz for a single spectrum."""
    freqs, _, f_mid, _ = _prepare(s.frequencies, s.values, cfg)
    c, h = seeds.params[0, _C], seeds.params[0, _H]
    return f_mid + (c - h) * 1e-3, f_mid + (c + h) * 1e-3


# --------------------------------------------------------------------------
# damped least squares

def _bounds(x, cfg):
    span = x[-1] - x[0]
    step = float(np.median(np.diff(x)))
    g_min = max(step, cfg.hwhm_min)
    lo = np.array([1e-6, 0.0, 0.0, x[0], 0.5 * cfg.splitting_floor, g_min, g_min])
    hi = np.array([np.inf, 0.99, 0.99, x[-1], 0.5 * span, span, span])
    return lo, hi


def _tie_jacobian(jac, tied):
    """Fold the partner columns of tied rows into depth_minus / hwhm_minus."""
    if not tied.any():
        return jac
    jac = jac.copy()
    for keep, drop in ((_A1, _A2), (_G1, _G2)):
        jac[tied, :, keep] += jac[tied, :, drop]
        jac[tied, :, drop] = 0.0
    return jac


def _tie_params(theta, tied):
    theta[tied, _A2] = theta[tied, _A1]
    theta[tied, _G2] = theta[tied, _G1]
    return theta


def _solve_lm(x, y, theta0, cfg, lo, hi, tied=None):
    """Projected Levenberg-Marquardt; returns (theta, cost, status, n_iter).

    Damping follows Nielsen's gain-ratio update. A trial step is kept only if
    it lowers the cost, so each row's accepted cost sequence is non-increasing.
    Rows flagged in ``tied`` share one depth and one width between both dips.
    """
    p_count = len(theta0)
    tied = np.zeros(p_count, dtype=bool) if tied is None else np.asarray(tied, dtype=bool)
    lo = np.broadcast_to(lo, theta0.shape)
    hi = np.broadcast_to(hi, theta0.shape)
    theta = _tie_params(np.clip(theta0, lo, hi), tied)
    m, _ = _model_and_jacobian(x, theta, want_jac=False)
    cost = 0.5 * np.sum((m - y) ** 2, axis=1)
    lam = np.full(p_count, 1e-3)
    nu = np.full(p_count, 2.0)
    status = np.full(p_count, MAX_ITER)
    active = np.ones(p_count, dtype=bool)
    iters = np.zeros(p_count, dtype=int)
    eye = np.eye(N_PARAMS)
    for _ in range(cfg.max_iterations):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        th = theta[rows]
        c0 = cost[rows]
        mr, jac = _model_and_jacobian(x, th)
        tr = tied[rows]
        jac = _tie_jacobian(jac, tr)
        r = mr - y[rows]
        jt = np.swapaxes(jac, 1, 2)
        jtj = jt @ jac
        grad = (jt @ r[:, :, None])[:, :, 0]
        # freeze parameters pinned at a bound with the gradient pushing outward
        lo_r, hi_r = lo[rows], hi[rows]
        frozen = ((th <= lo_r) & (grad > 0)) | ((th >= hi_r) & (grad < 0)) | (lo_r == hi_r)
        frozen[:, _A2] |= tr
        frozen[:, _G2] |= tr
        pgrad = np.where(frozen, 0.0, grad)
        scale = np.maximum(np.abs(th), 1.0)
        done_g = np.max(np.abs(pgrad) * scale, axis=1) <= cfg.gradient_tolerance * np.maximum(c0, 1e-30)
        damp = lam[rows][:, None] * np.maximum(np.einsum("pii->pi", jtj), 1e-12)
        a = jtj + damp[:, :, None] * eye
        free = ~frozen
        a = np.where(free[:, :, None] & free[:, None, :], a, 0.0) + np.where(frozen[:, :, None], eye, 0.0)
        delta = -np.linalg.solve(a, pgrad[:, :, None])[:, :, 0]
        trial = _tie_params(np.clip(th + delta, lo_r, hi_r), tr)
        step_taken = trial - th
        mt, _ = _model_and_jacobian(x, trial, want_jac=False)
        tcost = 0.5 * np.sum((mt - y[rows]) ** 2, axis=1)
        accept = np.isfinite(tcost) & (tcost < c0)
        predicted = -(np.sum(step_taken * pgrad, axis=1)
                      + 0.5 * np.einsum("pi,pij,pj->p", step_taken, jtj, step_taken))
        rho = (c0 - tcost) / np.where(predicted > 0, predicted, np.inf)
        theta[rows] = np.where(accept[:, None], trial, th)
        cost[rows] = np.where(accept, tcost, c0)
        lam_acc = lam[rows] * np.maximum(1.0 / 3.0, 1.0 - (2.0 * np.clip(rho, 0, 1) - 1.0) ** 3)
        lam[rows] = np.where(accept, np.maximum(lam_acc, 1e-15), lam[rows] * nu[rows])
        nu[rows] = np.where(accept, 2.0, nu[rows] * 2.0)
        iters[rows] += 1
        small_step = np.max(np.abs(step_taken) / scale, axis=1) <= cfg.step_tolerance
        small_drop = (c0 - tcost) <= cfg.step_tolerance * c0
        # an RMS residual of 1e-10 of the baseline is exact-data territory
        exact = cost[rows] <= 0.5 * x.size * 1e-20
        done = done_g | (accept & (small_step | small_drop)) | (lam[rows] > 1e16) | exact
        status[rows[done]] = CONVERGED
        active[rows[done]] = False
    return theta, cost, status, iters


def _covariance(x, y, theta, cost, lo, hi, tied=None):
    tied = np.zeros(len(theta), dtype=bool) if tied is None else tied
    _, jac = _model_and_jacobian(x, theta)
    jac = _tie_jacobian(jac, tied)
    jtj = np.swapaxes(jac, 1, 2) @ jac
    n = y.shape[1]
    lo = np.broadcast_to(lo, theta.shape)
    at_floor = theta[:, _H] <= lo[:, _H] * (1 + 1e-9) + 1e-12
    free = np.ones_like(theta, dtype=bool)
    free[:, _H] = ~at_floor
    free[:, _A2] = ~tied
    free[:, _G2] = ~tied
    mask = free[:, :, None] & free[:, None, :]
    eye = np.eye(N_PARAMS)
    # pinned parameters get a unit diagonal so the batch stays invertible
    a = np.where(mask, jtj, 0.0) + np.where(~free[:, :, None], eye, 0.0)
    d = np.sqrt(np.maximum(np.einsum("pii->pi", a), 1e-300))
    a_s = a / d[:, :, None] / d[:, None, :]
    singular = ~np.isfinite(a_s).all(axis=(1, 2))
    a_s = np.where(singular[:, None, None], eye, a_s)
    singular |= np.linalg.cond(a_s) > 1e12
    inv = np.linalg.pinv(a_s, rcond=1e-13, hermitian=True) / d[:, :, None] / d[:, None, :]
    dof = n - free.sum(axis=1)
    s2 = 2.0 * cost / dof
    cov = np.where(mask, inv, 0.0) * s2[:, None, None]
    # a tied partner is an exact copy of its twin
    for keep, drop in ((_A1, _A2), (_G1, _G2)):
        cov[tied, drop, :] = cov[tied, keep, :]
        cov[tied, :, drop] = cov[tied, :, keep]
    return cov, at_floor, singular


# --------------------------------------------------------------------------
# public fitting API

@dataclass
class FitGrid:
    """Struct-of-arrays fit results over a spatial grid of shape ``shape``."""
    shape: tuple[int, ...]
    omega_plus: np.ndarray
    omega_minus: np.ndarray
    ci_plus: np.ndarray
    ci_minus: np.ndarray
    ci_center: np.ndarray
    ci_half: np.ndarray
    status: np.ndarray  # int codes, see FitStatus
    params: np.ndarray  # (..., 7) physical units
    covariance: np.ndarray  # (..., 7, 7)
    residual_norm: np.ndarray
    meta: dict = field(default_factory=dict)

    def __getitem__(self, idx) -> FitResult:
        p = self.params[idx]
        cov = self.covariance[idx]
        sd = np.sqrt(np.clip(np.diag(cov), 0, None))
        ci = {name: float(v) for name, v in zip(PARAM_NAMES, sd)}
        ci["omega_plus"] = float(self.ci_plus[idx])
        ci["omega_minus"] = float(self.ci_minus[idx])
        return FitResult(float(self.omega_plus[idx]), float(self.omega_minus[idx]),
                         (float(p[_A1]), float(p[_A2])), (float(p[_G1]), float(p[_G2])),
                         float(p[_B]), cov, ci, float(self.residual_norm[idx]),
                         FitStatus.from_code(self.status[idx]))

    @property
    def valid(self) -> np.ndarray:
        return (self.status == CONVERGED) | (self.status == DEGENERATE)

    @property
    def ci_resonance(self) -> np.ndarray:
        return 0.5 * (self.ci_plus + self.ci_minus)

    def median_ci(self) -> float:
        v = self.valid
        return float(np.median(self.ci_resonance[v])) if v.any() else float("nan")


def _dip_significance(theta, cost, n):
    """Observed dip depth at each fitted center over the per-point noise floor.

    The noise floor is the residual RMS in baseline-normalised units; the
    observed depth at one center includes the other line's tail.
    """
    a1, a2 = theta[:, _A1], theta[:, _A2]
    floor = np.maximum(np.sqrt(2.0 * cost / max(n - N_PARAMS, 1)), 1e-300)
    h2, g1, g2 = (2 * theta[:, _H]) ** 2, theta[:, _G1] ** 2, theta[:, _G2] ** 2
    dip_minus = a1 + a2 * g2 / (h2 + g2)
    dip_plus = a2 + a1 * g1 / (h2 + g1)
    return np.minimum(dip_minus, dip_plus) / floor, (a1 + a2) / floor


def _single_dip_refit(x, y, th, cfg, lo, hi, from_strong):
    """Refit rows as one unresolved dip: splitting pinned at the floor, both
    components sharing depth and width."""
    if from_strong:
        strong_minus = th[:, _A1] >= th[:, _A2]
        c0 = np.where(strong_minus, th[:, _C] - th[:, _H], th[:, _C] + th[:, _H])
        g0 = np.where(strong_minus, th[:, _G1], th[:, _G2])
        a0 = 0.5 * np.maximum(th[:, _A1], th[:, _A2])
    else:
        w1, w2 = th[:, _A1] * th[:, _G1], th[:, _A2] * th[:, _G2]
        c0 = th[:, _C] + th[:, _H] * (w2 - w1) / np.maximum(w1 + w2, 1e-300)
        g0 = 0.5 * (th[:, _G1] + th[:, _G2]) + th[:, _H]
        a0 = 0.5 * np.maximum(th[:, _A1] + th[:, _A2], 1e-4)
    a0 = np.minimum(a0, hi[_A1])
    g0 = np.clip(g0, lo[_G1], hi[_G1])
    seed = np.column_stack([th[:, _B], a0, a0, c0, np.full(len(th), lo[_H]), g0, g0])
    lo_s = np.tile(lo, (len(th), 1))
    hi_s = np.tile(hi, (len(th), 1))
    hi_s[:, _H] = lo[_H]
    th_s, cost_s, st_s, _ = _solve_lm(x, y, seed, cfg, lo_s, hi_s, np.ones(len(th), dtype=bool))
    return th_s, cost_s, st_s


def _pair_evidence_threshold(snr_threshold):
    """Chi-square (3 extra parameters) quantile at the k-sigma two-sided level."""
    return float(chi2.ppf(erf(snr_threshold / np.sqrt(2.0)), 3))


def _splitting_upper_bound(x, y, theta, cost, cfg, lo, hi, iterations=12):
    """One-sided 68% bound on the half-splitting of unresolved (tied) rows.

    The half-splitting is pinned at trial values above the floor and the
    remaining single-dip parameters refitted; the bound is where the cost has
    risen by half the residual variance (delta chi-square = 1), found by
    bisection in log h. Near h = 0 the profile is quartic, so the curvature
    at the floor says nothing about how large an unresolved splitting can be.
    """
    p_count, n = y.shape
    s2 = 2.0 * cost / max(n - 4, 1)
    target = cost + 0.5 * s2
    step = float(np.median(np.diff(x)))
    h_lo = np.full(p_count, max(lo[_H], 1e-3 * step))
    h_hi = np.full(p_count, hi[_H])
    tied = np.ones(p_count, dtype=bool)
    quick = FitConfig(max_iterations=min(cfg.max_iterations, 60), hwhm_guess=cfg.hwhm_guess)
    work = theta.copy()

    def profile(h):
        th = work.copy()
        th[:, _H] = h
        lo_p = np.tile(lo, (p_count, 1))
        hi_p = np.tile(hi, (p_count, 1))
        lo_p[:, _H] = hi_p[:, _H] = h
        th_p, c_p, _, _ = _solve_lm(x, y, th, quick, lo_p, hi_p, tied)
        return th_p, c_p

    _, c_top = profile(h_hi)
    open_top = c_top <= target
    for _ in range(iterations):
        mid = np.sqrt(h_lo * h_hi)
        th_p, c_mid = profile(mid)
        above = c_mid > target
        h_hi = np.where(above, mid, h_hi)
        h_lo = np.where(above, h_lo, mid)
        work = np.where(above[:, None], work, th_p)
    bound = np.where(open_top, hi[_H], h_hi)
    exact = s2 <= 1e-20
    return np.where(exact, lo[_H], bound)


def fit_spectra(freqs, counts, cfg: FitConfig = FitConfig()) -> FitGrid:
    """Fit every row of ``counts`` (shape (P, n_freq)) independently."""
    freqs, counts, f_mid, x = _prepare(freqs, counts, cfg)
    n_pix, n = counts.shape
    lo, hi = _bounds(x, cfg)
    strategies = {"smooth3": ["smooth3"], "matched": ["matched"],
                  "multi": ["matched", "smooth3"]}[cfg.seed_strategy]
    seeds = [_seed_estimate_batch(x, counts, cfg, s) for s in strategies]
    b0 = seeds[0].baseline
    y = counts / b0[:, None]
    rejected = np.logical_and.reduce([s.rejected for s in seeds])
    best_theta = None
    for sd in seeds:
        th, cost, st, _ = _solve_lm(x, y, sd.params, cfg, lo, hi)
        if best_theta is None:
            best_theta, best_cost, best_status = th, cost, st
        else:
            better = cost < best_cost
            best_theta = np.where(better[:, None], th, best_theta)
            best_cost = np.where(better, cost, best_cost)
            best_status = np.where(better, st, best_status)
    theta, cost, status = best_theta, best_cost, best_status.copy()

    # one significant dip plus a sub-threshold partner is a single unresolved
    # line: refit with the splitting pinned at the floor
    sig_each, sig_sum = _dip_significance(theta, cost, n)
    thr = cfg.snr_reject_threshold
    above = theta[:, _H] > lo[_H] * (1 + 1e-9)
    single = np.flatnonzero((sig_each < thr) & (sig_sum >= thr) & above)
    tied = np.zeros(n_pix, dtype=bool)
    if single.size:
        theta[single], cost[single], status[single] = _single_dip_refit(
            x, y[single], theta[single], cfg, lo, hi, from_strong=True)
        tied[single] = True

    # a component within 1.5x of the line-width floor spans fewer than three
    # samples at half maximum: keep such a pair only if it beats one dip by a
    # likelihood-ratio margin at the same significance level as the depth
    # test, otherwise it is a noise spike beside a single line
    spike = np.minimum(theta[:, _G1], theta[:, _G2]) <= 1.5 * lo[_G1]
    overlap = np.flatnonzero((theta[:, _H] > lo[_H] * (1 + 1e-9)) & spike & ~tied)
    if overlap.size:
        th_s, cost_s, st_s = _single_dip_refit(x, y[overlap], theta[overlap], cfg, lo, hi,
                                               from_strong=False)
        dof = max(n - N_PARAMS, 1)
        dchi2 = (cost_s - cost[overlap]) * dof / np.maximum(cost[overlap], 1e-300)
        keep_one = dchi2 < _pair_evidence_threshold(thr)
        rows = overlap[keep_one]
        theta[rows], cost[rows], status[rows] = th_s[keep_one], cost_s[keep_one], st_s[keep_one]
        tied[rows] = True

    # any remaining pair at the floor or with a singular normal matrix is one
    # unresolved dip as well
    _, at_floor, singular = _covariance(x, y, theta, cost, lo, hi, tied)
    redo = np.flatnonzero((at_floor | singular) & ~tied)
    if redo.size:
        theta[redo], cost[redo], status[redo] = _single_dip_refit(
            x, y[redo], theta[redo], cfg, lo, hi, from_strong=False)
        tied[redo] = True

    cov_n, at_floor, singular = _covariance(x, y, theta, cost, lo, hi, tied)
    # an unresolved splitting is known only up to its profile bound: widen the
    # half-splitting interval of tied rows accordingly
    if tied.any():
        rows = np.flatnonzero(tied)
        h_up = _splitting_upper_bound(x, y[rows], theta[rows], cost[rows], cfg, lo, hi)
        cov_n[rows, _H, :] = 0.0
        cov_n[rows, :, _H] = 0.0
        cov_n[rows, _H, _H] = (h_up - lo[_H]) ** 2
    var = np.einsum("pii->pi", cov_n)
    sd = np.sqrt(np.clip(var, 0, None))
    # resonance variances from the (center, half-splitting) block
    v_c, v_h, c_ch = cov_n[:, _C, _C], cov_n[:, _H, _H], cov_n[:, _C, _H]
    ci_plus = np.sqrt(np.clip(v_c + v_h + 2 * c_ch, 0, None)) * 1e-3
    ci_minus = np.sqrt(np.clip(v_c + v_h - 2 * c_ch, 0, None)) * 1e-3

    thr = cfg.snr_reject_threshold
    sig_each, sig_sum = _dip_significance(theta, cost, n)
    degenerate = at_floor | singular | tied
    weak = np.where(degenerate, sig_sum < thr, sig_each < thr)
    converged = status == CONVERGED
    status = np.where(converged & degenerate, DEGENERATE, status)
    bad_ci = ~(np.isfinite(ci_plus) & np.isfinite(ci_minus)) | ((ci_plus <= 0) | (ci_minus <= 0)) & ~degenerate
    status = np.where(rejected | weak | bad_ci, REJECTED, status)

    params = theta.copy()
    params[:, _B] *= b0
    params[:, _C] = f_mid + theta[:, _C] * 1e-3
    params[:, _H] = theta[:, _H] * 1e-3
    conv = np.array([1.0, 1.0, 1.0, 1e-3, 1e-3, 1.0, 1.0])
    conv_b = np.stack([np.where(k == _B, b0, conv[k]) for k in range(N_PARAMS)], axis=1)
    cov = cov_n * conv_b[:, :, None] * conv_b[:, None, :]
    omega_plus = params[:, _C] + params[:, _H]
    omega_minus = params[:, _C] - params[:, _H]
    return FitGrid(
        shape=(n_pix,),
        omega_plus=omega_plus, omega_minus=omega_minus,
        ci_plus=ci_plus, ci_minus=ci_minus,
        ci_center=sd[:, _C] * 1e-3, ci_half=sd[:, _H] * 1e-3,
        status=status.astype(np.int8), params=params, covariance=cov,
        residual_norm=np.sqrt(2.0 * cost) * b0,
        meta={"f_mid": f_mid},
    )


def fit_double_lorentzian(s: OdmrSpectrum, cfg: FitConfig = FitConfig()) -> FitResult:
    """Fit one spectrum; see :func:`fit_spectra`."""
    return fit_spectra(s.frequencies, s.values[None, :], cfg)[0]


def _thread_count(n_threads: Optional[int]) -> int:
    if n_threads is not None:
        return max(1, int(n_threads))
    env = os.environ.get("NVSTRAIN_THREADS")
    return max(1, int(env)) if env else 1


def _concat(grids: list[FitGrid]) -> FitGrid:
    cat = lambda name: np.concatenate([getattr(g, name) for g in grids])
    return FitGrid((sum(g.shape[0] for g in grids),),
                   *(cat(n) for n in ("omega_plus", "omega_minus", "ci_plus", "ci_minus",
                                      "ci_center", "ci_half", "status", "params",
                                      "covariance", "residual_norm")),
                   meta=dict(grids[0].meta))


def fit_stack(stack, cfg: FitConfig = FitConfig(), chunk: int = 4096,
              n_threads: Optional[int] = None) -> FitGrid:
    """Fit every spatial pixel of an image stack.

    The result has shape ``(n_z, n_y, n_x)``. Pixels are processed in fixed
    chunks; since rows never interact, the output does not depend on chunk
    size, thread count or pixel order.
    """
    data = np.asarray(stack.data, dtype=float)  # (n_freq, n_z, n_y, n_x)
    spatial = data.shape[1:]
    flat = data.reshape(data.shape[0], -1).T
    starts = list(range(0, flat.shape[0], chunk))
    work = lambda s0: fit_spectra(stack.frequency_axis, flat[s0:s0 + chunk], cfg)
    threads = _thread_count(n_threads)
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(work, starts))
    else:
        parts = [work(s0) for s0 in starts]
    g = _concat(parts)
    reshape = lambda a: a.reshape(spatial + a.shape[1:])
    return FitGrid(spatial, *(reshape(getattr(g, n)) for n in (
        "omega_plus", "omega_minus", "ci_plus", "ci_minus", "ci_center", "ci_half",
        "status", "params", "covariance", "residual_norm")), meta=g.meta)
