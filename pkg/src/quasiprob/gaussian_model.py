"""Displaced, squeezed, lossy single-mode Gaussian states.

Quadrature convention: vacuum variance 1. A sample recorded at local-oscillator
phase ``phi`` has mean ``2 sqrt(eta) |alpha0| cos(phi - arg alpha0)`` and variance
``eta (V_min cos^2(phi - phi_s) + V_max sin^2(phi - phi_s)) + 1 - eta``. With this
labelling of the LO phase the normally ordered characteristic function reads

    Phi(beta) = exp(|beta|^2/2) E[exp(i |beta| x(theta - pi/2))],  beta = |beta| e^{i theta},

and the pattern-function argument is xi = x - 2|alpha| cos(arg alpha - phi), so a
coherent displacement alpha0 shows up at alpha = alpha0 in phase space.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numba
import numpy as np

from .errors import ConvergenceError, ScheduleError, ValidationError
from .filters import FilterSpec, FilterTable, build_filter_table

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class GaussianStateParams:
    """Single-mode Gaussian state as seen by the detector."""

    squeezing_db: float = 0.0
    squeeze_angle: float = 0.0
    displacement: complex = 0j
    efficiency: float = 1.0
    angle_jitter_deg: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "displacement", complex(self.displacement))
        for name in ("squeezing_db", "squeeze_angle", "efficiency", "angle_jitter_deg"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValidationError(f"{name} must be finite", f"state.{name}")
            object.__setattr__(self, name, value)
        if self.squeezing_db < 0:
            raise ValidationError("squeezing_db must be >= 0", "state.squeezing_db")
        if not 0.0 <= self.squeeze_angle < math.pi:
            raise ValidationError("squeeze_angle must lie in [0, pi)", "state.squeeze_angle")
        if not 0.0 < self.efficiency <= 1.0:
            raise ValidationError("efficiency must lie in (0, 1]", "state.efficiency")
        if self.angle_jitter_deg < 0:
            raise ValidationError("angle_jitter_deg must be >= 0", "state.angle_jitter_deg")
        if not np.isfinite(self.displacement):
            raise ValidationError("displacement must be finite", "state.displacement")

    @classmethod
    def from_squeeze_parameter(cls, r: float, **kwargs) -> "GaussianStateParams":
        """State with squeeze parameter |zeta| = r, i.e. V_min = exp(-2 r)."""
        return cls(squeezing_db=20.0 * r / math.log(10.0), **kwargs)

    @property
    def v_min(self) -> float:
        return 10.0 ** (-self.squeezing_db / 10.0)

    @property
    def v_max(self) -> float:
        return 1.0 / self.v_min

    def to_dict(self) -> dict:
        return {
            "squeezing_db": self.squeezing_db,
            "squeeze_angle": self.squeeze_angle,
            "displacement_re": self.displacement.real,
            "displacement_im": self.displacement.imag,
            "efficiency": self.efficiency,
            "angle_jitter_deg": self.angle_jitter_deg,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianStateParams":
        known = {"squeezing_db", "squeeze_angle", "displacement_re", "displacement_im",
                 "efficiency", "angle_jitter_deg", "squeeze_parameter"}
        extra = set(data) - known
        if extra:
            raise ValidationError(f"unknown state fields {sorted(extra)}", f"state.{sorted(extra)[0]}")
        kw = dict(
            squeeze_angle=float(data.get("squeeze_angle", 0.0)),
            displacement=complex(float(data.get("displacement_re", 0.0)), float(data.get("displacement_im", 0.0))),
            efficiency=float(data.get("efficiency", 1.0)),
            angle_jitter_deg=float(data.get("angle_jitter_deg", 0.0)),
        )
        if "squeeze_parameter" in data:
            if "squeezing_db" in data:
                raise ValidationError("give squeezing_db or squeeze_parameter, not both", "state.squeezing_db")
            return cls.from_squeeze_parameter(float(data["squeeze_parameter"]), **kw)
        return cls(squeezing_db=float(data.get("squeezing_db", 0.0)), **kw)


def _variance(params: GaussianStateParams, phi, squeeze_angle=None):
    angle = params.squeeze_angle if squeeze_angle is None else squeeze_angle
    c2 = np.cos(phi - angle) ** 2
    pure = params.v_min * c2 + params.v_max * (1.0 - c2)
    return params.efficiency * pure + (1.0 - params.efficiency)


def _mean(params: GaussianStateParams, phi):
    a0 = params.displacement
    return 2.0 * math.sqrt(params.efficiency) * abs(a0) * np.cos(phi - np.angle(a0))


def quadrature_moments(params: GaussianStateParams, phi):
    """Mean and variance of the quadrature recorded at LO phase ``phi``."""
    phi = np.asarray(phi, dtype=float)
    if not np.all(np.isfinite(phi)):
        raise ValidationError("phase must be finite")
    mean, var = _mean(params, phi), _variance(params, phi)
    if mean.ndim == 0:
        return float(mean), float(var)
    return mean, var


# -- phase schedules -------------------------------------------------------------------

@dataclass(frozen=True)
class UniformRandom:
    """Phases i.i.d. uniform on [0, 2 pi)."""

    def describe(self) -> dict:
        return {"kind": "uniform"}


@dataclass(frozen=True)
class LockedPhases:
    """``k`` equidistant locked phases covering [0, span] endpoints included."""

    k: int = 21
    span: float = math.pi

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 2:
            raise ScheduleError("locked schedule needs k >= 2 phases", "schedule.k")
        if not 0 < self.span <= TWO_PI:
            raise ScheduleError("locked span must lie in (0, 2 pi]", "schedule.span")

    @property
    def phases(self) -> np.ndarray:
        return np.linspace(0.0, self.span, int(self.k))

    def describe(self) -> dict:
        return {"kind": "locked", "k": int(self.k), "span": self.span}


@dataclass(frozen=True)
class PolynomialSweep:
    """phi(t) = g t^4 + f t^3 + e t^2 + d t + c sampled on a uniform clock over [t_start, t_stop]."""

    coefficients: tuple  # (c, d, e, f, g)
    t_start: float = 0.0
    t_stop: float = 1.0

    def __post_init__(self):
        coeffs = tuple(float(v) for v in self.coefficients)
        if len(coeffs) != 5:
            raise ScheduleError("polynomial sweep needs five coefficients (c, d, e, f, g)", "schedule.coefficients")
        object.__setattr__(self, "coefficients", coeffs)
        if not self.t_stop > self.t_start:
            raise ScheduleError("sweep needs t_stop > t_start", "schedule.t_stop")
        if not polynomial_is_monotone(coeffs, self.t_start, self.t_stop):
            raise ScheduleError("polynomial phase sweep is not monotone on its time range", "schedule.coefficients")

    def phase(self, t):
        return phase_polynomial(self.coefficients, t)

    def describe(self) -> dict:
        return {"kind": "sweep", "coefficients": list(self.coefficients),
                "t_start": self.t_start, "t_stop": self.t_stop}


PhaseSchedule = Union[UniformRandom, LockedPhases, PolynomialSweep]


def phase_polynomial(coefficients, t):
    c, d, e, f, g = coefficients
    t = np.asarray(t, dtype=float)
    return (((g * t + f) * t + e) * t + d) * t + c


def polynomial_is_monotone(coefficients, t0: float, t1: float) -> bool:
    """True when phi'(t) keeps one strict sign on [t0, t1] (isolated zeros allowed)."""
    c, d, e, f, g = coefficients
    deriv = np.polynomial.Polynomial([d, 2 * e, 3 * f, 4 * g])
    probes = [t0, t1]
    for root in deriv.roots():
        if abs(root.imag) < 1e-12 and t0 < root.real < t1:
            probes.append(root.real)
    probes = np.sort(np.array(probes))
    mids = 0.5 * (probes[1:] + probes[:-1])
    signs = np.sign(deriv(mids))
    return bool(np.all(signs > 0) or np.all(signs < 0))


def schedule_from_dict(data: dict) -> PhaseSchedule:
    kind = data.get("kind", "uniform")
    if kind == "uniform":
        return UniformRandom()
    if kind == "locked":
        return LockedPhases(int(data.get("k", 21)), float(data.get("span", math.pi)))
    if kind == "sweep":
        return PolynomialSweep(tuple(data["coefficients"]), float(data.get("t_start", 0.0)),
                               float(data.get("t_stop", 1.0)))
    raise ScheduleError(f"unknown schedule kind {kind!r}", "schedule.kind")


# -- datasets -------------------------------------------------------------------------

@dataclass(eq=False)
class QuadratureDataset:
    """Quadrature samples ``x`` with LO phases ``phi`` in [0, 2 pi) and optional timestamps."""

    x: np.ndarray
    phi: np.ndarray
    t: Optional[np.ndarray] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=float)
        self.phi = np.ascontiguousarray(self.phi, dtype=float)
        if self.x.ndim != 1 or self.x.shape != self.phi.shape:
            raise ValidationError("x and phi must be 1-D arrays of equal length")
        if not np.all(np.isfinite(self.x)):
            raise ValidationError("quadrature values must be finite")
        if np.any(~(self.phi >= 0.0) | ~(self.phi < TWO_PI)):
            raise ValidationError("phases must lie in [0, 2 pi)")
        if self.t is not None:
            self.t = np.ascontiguousarray(self.t, dtype=float)
            if self.t.shape != self.x.shape:
                raise ValidationError("timestamps must match the number of samples")

    def __len__(self):
        return self.x.size

    def __eq__(self, other):
        if not isinstance(other, QuadratureDataset):
            return NotImplemented
        same_t = (self.t is None and other.t is None) or (
            self.t is not None and other.t is not None and np.array_equal(self.t, other.t))
        return (np.array_equal(self.x, other.x) and np.array_equal(self.phi, other.phi)
                and same_t and self.provenance == other.provenance)

    def subset(self, index, **provenance) -> "QuadratureDataset":
        t = None if self.t is None else self.t[index]
        return QuadratureDataset(self.x[index], self.phi[index], t, {**self.provenance, **provenance})

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.x.tobytes())
        h.update(self.phi.tobytes())
        if self.t is not None:
            h.update(self.t.tobytes())
        return h.hexdigest()

    @staticmethod
    def concatenate(parts) -> "QuadratureDataset":
        parts = list(parts)
        with_t = all(p.t is not None for p in parts)
        return QuadratureDataset(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.phi for p in parts]),
            np.concatenate([p.t for p in parts]) if with_t else None,
            {"source": "concatenation", "parts": len(parts)},
        )


def wrap_phase(phi):
    out = np.mod(phi, TWO_PI)
    # mod can round up to exactly 2 pi for tiny negative inputs
    return np.where(out >= TWO_PI, 0.0, out)


def sample_dataset(params: GaussianStateParams, schedule: PhaseSchedule, n: int, seed: int) -> QuadratureDataset:
    """Draw ``n`` quadrature samples; reproducible from ``seed``."""
    if int(n) != n or n < 1:
        raise ValidationError("n must be a positive integer", "n")
    n = int(n)
    rng = np.random.default_rng(seed)
    t = None
    if isinstance(schedule, UniformRandom):
        phi = rng.uniform(0.0, TWO_PI, n)
    elif isinstance(schedule, LockedPhases):
        phi = np.resize(schedule.phases, n)
    elif isinstance(schedule, PolynomialSweep):
        t = np.linspace(schedule.t_start, schedule.t_stop, n)
        phi = schedule.phase(t)
    else:
        raise ScheduleError(f"unsupported schedule {schedule!r}", "schedule")
    phi = wrap_phase(phi)
    angle = params.squeeze_angle
    if params.angle_jitter_deg > 0:
        angle = angle + rng.normal(0.0, math.radians(params.angle_jitter_deg), n)
    mean = _mean(params, phi)
    std = np.sqrt(_variance(params, phi, angle))
    x = mean + std * rng.standard_normal(n)
    provenance = {"source": "simulated", "state": params.to_dict(), "schedule": schedule.describe(),
                  "n": n, "seed": seed}
    return QuadratureDataset(x, phi, t, provenance)


# -- analytic oracles -----------------------------------------------------------------

def normally_ordered_cf(params: GaussianStateParams, beta):
    """Closed-form normally ordered characteristic function Phi(beta)."""
    beta = np.asarray(beta, dtype=complex)
    if not np.all(np.isfinite(beta)):
        raise ValidationError("beta must be finite")
    r = np.abs(beta)
    phi = np.angle(beta) - 0.5 * math.pi
    out = np.exp(0.5 * r * r * (1.0 - _variance(params, phi)) + 1j * r * _mean(params, phi))
    return out if out.ndim else complex(out)


def _gl(lo, hi, panels, order=16):
    x, wt = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    return (mid[:, None] + half[:, None] * x).ravel(), (half[:, None] * wt).ravel()


def _radial_extent(params, spec: FilterSpec, table: Optional[FilterTable]) -> float:
    """Radius beyond which the filtered integrand is below 1e-16 of its peak."""
    if spec.analytic:
        return spec.support
    growth = 0.5 * (1.0 - _variance(params, params.squeeze_angle))
    with np.errstate(under="ignore"):
        envelope = table.values * table.nodes * np.exp(growth * table.nodes ** 2)
    keep = np.flatnonzero(envelope > 1e-16 * envelope.max())
    return float(table.nodes[min(keep.max() + 1, table.values.size - 1)])


def _radial_rule(spec: FilterSpec, table: Optional[FilterTable], panels: int, end: float):
    """Radii and weights (including r dr and the filter) for the polar oracle."""
    if spec.analytic:
        psi, wpsi = _gl(0.0, 0.5 * math.pi, panels)
        r = 2.0 * spec.w * np.cos(psi)
        omega = (2.0 * psi - np.sin(2.0 * psi)) / math.pi
        return r, wpsi * 2.0 * spec.w * np.sin(psi) * r * omega
    r, wr = _gl(0.0, end, panels)
    return r, wr * r * table(r)


@numba.njit(cache=True)
def _polar_kernel(r, amp, base, cos_t, sin_t, re, im):
    out_re = np.empty(re.size)
    out_im = np.empty(re.size)
    for a in range(re.size):
        sr = 0.0
        si = 0.0
        for k in range(cos_t.size):
            g = 2.0 * (im[a] * cos_t[k] - re[a] * sin_t[k])
            for i in range(r.size):
                ph = base[i, k] + r[i] * g
                sr += amp[i, k] * math.cos(ph)
                si += amp[i, k] * math.sin(ph)
        out_re[a] = sr
        out_im[a] = si
    return out_re, out_im


def _polar_sum(params, spec, table, alphas, panels, n_theta, end):
    r, wr = _radial_rule(spec, table, panels, end)
    theta = np.arange(n_theta) * (TWO_PI / n_theta)
    phi = theta - 0.5 * math.pi
    # Phi(beta) Omega(r) r dr dtheta on the (r, theta) grid; alpha adds 2 r (Im a cos th - Re a sin th)
    amp = (wr[:, None] * (TWO_PI / n_theta)) * np.exp(0.5 * np.outer(r * r, 1.0 - _variance(params, phi)))
    base = np.outer(r, _mean(params, phi))
    re, im = _polar_kernel(r, amp, base, np.cos(theta), np.sin(theta),
                           np.ascontiguousarray(alphas.real), np.ascontiguousarray(alphas.imag))
    scale = float(np.sum(np.abs(amp)))
    return (re + 1j * im) / math.pi ** 2, scale / math.pi ** 2


def analytic_p_omega(params: GaussianStateParams, spec: FilterSpec, alpha, tol: float = 1e-6,
                     table: Optional[FilterTable] = None, max_level: int = 6):
    """Regularized P function by polar quadrature of the filtered characteristic function.

    The radial rule uses Gauss-Legendre panels (for q = inf in the angle psi with
    r = 2w cos psi, which makes the closed-form filter smooth); the angular rule is
    the periodic trapezoid. Both are doubled until successive results agree to
    ``tol`` relative to the L1 norm of the integrand; otherwise
    :class:`ConvergenceError` is raised. The imaginary residual must also stay
    below ``tol`` in the same scale.
    """
    if not tol > 0:
        raise ValidationError("tolerance must be positive")
    alpha_arr = np.atleast_1d(np.asarray(alpha, dtype=complex))
    flat = alpha_arr.ravel()
    if table is None and not spec.analytic:
        table = build_filter_table(spec)
    r_max = _radial_extent(params, spec, table)
    # the angular integrand oscillates with 2 r |alpha - sqrt(eta) alpha0|; size the starting rules on that
    shift = math.sqrt(params.efficiency) * params.displacement
    a_top = float(np.max(np.abs(flat - shift), initial=0.0))
    panels = max(8, math.ceil(r_max * (1.0 + a_top) / 2.0))
    n_theta = max(64, 2 ** math.ceil(math.log2(8 + 4 * r_max * (1.0 + a_top))))
    prev, scale = _polar_sum(params, spec, table, flat, panels, n_theta, r_max)
    for _ in range(max_level):
        panels *= 2
        n_theta *= 2
        cur, scale = _polar_sum(params, spec, table, flat, panels, n_theta, r_max)
        if np.max(np.abs(cur - prev)) <= tol * scale:
            resid = float(np.max(np.abs(cur.imag)))
            if resid > tol * scale:
                raise ConvergenceError(f"oracle has imaginary residual {resid:.3g}")
            out = cur.real.reshape(alpha_arr.shape)
            return out if np.ndim(alpha) else float(out[0])
        prev = cur
    raise ConvergenceError(f"P_Omega oracle did not reach tol={tol} within {max_level} refinements")
