"""Continuous-phase recovery, phase uniformization and the phase-locked baseline.

A DC interference trace i(t) = a sin(phi(t)) + b with a quartic phase
phi(t) = g t^4 + f t^3 + e t^2 + d t + c (t measured from the trace start) is
fitted by damped Gauss-Newton; the fitted phase is then assigned to quadrature
samples on the shared clock.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import stats

from .errors import FitError, ScheduleError, UniformizeError, ValidationError
from .gaussian_model import (GaussianStateParams, LockedPhases, QuadratureDataset, TWO_PI,
                             _mean, _variance, phase_polynomial, polynomial_is_monotone, wrap_phase)

AC_PER_DC = 200
DC_RATE = 1e5
FIT_BUDGET = 200
DEFAULT_TOLERANCE = math.pi / 1e4
KS_CONSTANT = 1.63
UNIFORMIZE_FILL = 0.8  # fraction of the sparsest-region supply requested as targets


@dataclass(eq=False)
class DcTrace:
    """Uniformly sampled DC current on one monotone slope of the drive.

    ``direction`` is +1 when the phase increases along the slope and -1 otherwise.
    """

    t: np.ndarray
    current: np.ndarray
    slope: int = 0
    direction: int = 1

    def __post_init__(self):
        self.t = np.ascontiguousarray(self.t, dtype=float)
        self.current = np.ascontiguousarray(self.current, dtype=float)
        if self.t.ndim != 1 or self.t.shape != self.current.shape or self.t.size < 2:
            raise ValidationError("trace needs matching 1-D time and current arrays of length >= 2", "trace")
        if not (np.all(np.isfinite(self.t)) and np.all(np.isfinite(self.current))):
            raise ValidationError("trace values must be finite", "trace")
        dt = np.diff(self.t)
        if not np.all(dt > 0):
            raise ValidationError("trace times must be strictly increasing", "trace.t")
        if np.max(np.abs(dt - dt.mean())) > 1e-6 * dt.mean():
            raise ValidationError("trace times must be uniformly spaced", "trace.t")
        if self.direction not in (1, -1):
            raise ValidationError("direction must be +1 or -1", "trace.direction")

    def __len__(self):
        return self.t.size

    @property
    def dt(self) -> float:
        return float((self.t[-1] - self.t[0]) / (self.t.size - 1))

    def __eq__(self, other):
        if not isinstance(other, DcTrace):
            return NotImplemented
        return (np.array_equal(self.t, other.t) and np.array_equal(self.current, other.current)
                and self.slope == other.slope and self.direction == other.direction)


@dataclass
class PhaseFit:
    """i(t) = a sin(phi(t - t0)) + b with phi(s) = g s^4 + f s^3 + e s^2 + d s + c."""

    a: float
    b: float
    coefficients: tuple  # (c, d, e, f, g)
    t0: float = 0.0
    t1: float | None = None
    residual_variance: float = float("nan")
    r2: float = float("nan")
    iterations: int = 0
    costs: list = field(default_factory=list, repr=False)
    monotone: bool = True

    def __post_init__(self):
        self.coefficients = tuple(float(v) for v in self.coefficients)
        if len(self.coefficients) != 5:
            raise ValidationError("phase fit needs five coefficients (c, d, e, f, g)", "fit.coefficients")

    def phase(self, t):
        return phase_polynomial(self.coefficients, np.asarray(t, dtype=float) - self.t0)

    def model(self, t):
        return self.a * np.sin(self.phase(t)) + self.b

    def to_dict(self) -> dict:
        c, d, e, f, g = self.coefficients
        return {"a": self.a, "b": self.b, "c": c, "d": d, "e": e, "f": f, "g": g, "t0": self.t0,
                "t1": self.t1, "residual_variance": self.residual_variance, "r2": self.r2,
                "iterations": self.iterations, "monotone": self.monotone}

    @classmethod
    def from_dict(cls, data: dict) -> "PhaseFit":
        return cls(float(data["a"]), float(data["b"]), tuple(float(data[k]) for k in "cdefg"),
                   float(data.get("t0", 0.0)), None if data.get("t1") is None else float(data["t1"]),
                   float(data.get("residual_variance", "nan")), float(data.get("r2", "nan")),
                   int(data.get("iterations", 0)), monotone=bool(data.get("monotone", True)))


# -- DC traces ------------------------------------------------------------------------

def simulate_dc_trace(truth: PhaseFit, noise_sd: float, duration: float, seed: int, rate: float = DC_RATE,
                      slope: int = 0) -> DcTrace:
    """Synthetic DC trace sampled at ``rate`` over ``[t0, t0 + duration)``."""
    if not rate > 0 or not duration > 0:
        raise ValidationError("rate and duration must be positive", "trace")
    if not noise_sd >= 0:
        raise ValidationError("noise_sd must be >= 0", "trace.noise_sd")
    if not polynomial_is_monotone(truth.coefficients, 0.0, duration):
        raise ScheduleError("truth phase polynomial is not monotone over the trace", "truth.coefficients")
    n = int(round(duration * rate))
    t = truth.t0 + np.arange(n) / rate
    current = truth.model(t)
    if noise_sd > 0:
        current = current + np.random.default_rng(seed).normal(0.0, noise_sd, n)
    return DcTrace(t, current, slope, _phase_rate_sign(truth, duration))


def _phase_rate_sign(fit: PhaseFit, duration: float) -> int:
    c, d, e, f, g = fit.coefficients
    mid = 0.5 * duration
    return int(np.sign(d + 2 * e * mid + 3 * f * mid ** 2 + 4 * g * mid ** 3))


def _zero_crossings(t, y, band):
    """Crossings of zero with hysteresis: y must move from below -band to above +band (or back)."""
    state = np.where(y > band, 1, np.where(y < -band, -1, 0))
    idx = np.flatnonzero(state)
    if idx.size == 0:
        return np.empty(0), np.empty(0, dtype=bool)
    change = np.flatnonzero(state[idx[1:]] != state[idx[:-1]])
    times, rising = [], []
    for c in change:
        lo, hi = idx[c], idx[c + 1]
        seg = y[lo:hi + 1]
        # last sign change inside the transition segment
        k = np.flatnonzero(np.signbit(seg[1:]) != np.signbit(seg[:-1]))
        j = lo + k[-1] if k.size else lo
        frac = y[j] / (y[j] - y[j + 1]) if y[j] != y[j + 1] else 0.0
        times.append(t[j] + frac * (t[j + 1] - t[j]))
        rising.append(state[hi] > 0)
    return np.array(times), np.array(rising, dtype=bool)


def _initial_guess(trace: DcTrace, tau):
    b = float(np.mean(trace.current))
    a = math.sqrt(2.0) * float(np.std(trace.current))
    width = max(1, min(len(trace) // 200, 25))
    smooth = np.convolve(trace.current, np.ones(width) / width, mode="valid")
    # crossings are located against the midrange, which the mean misses when cycles are incomplete
    level = 0.5 * (smooth.max() + smooth.min())
    band = 0.25 * (smooth.max() - smooth.min())
    shift = (width - 1) / 2.0 * (tau[1] - tau[0])
    zt, rising = _zero_crossings(tau[:smooth.size] + shift, smooth - level, band)
    if zt.size < 2:
        raise FitError("trace spans less than one sine oscillation; the phase fit is underdetermined")
    # consecutive zeros are pi apart; with phase increasing, a rising zero sits at 0 mod 2 pi
    n = np.arange(zt.size) * math.pi + (0.0 if rising[0] else math.pi)
    deg = 2 if zt.size >= 3 else 1
    k = np.polynomial.polynomial.polyfit(zt, n, deg)
    k = np.concatenate([k, np.zeros(5 - k.size)])
    if abs(np.polynomial.polynomial.polyval(1.0, k) - k[0]) < 0.95 * TWO_PI:
        raise FitError("trace spans less than one sine oscillation; the phase fit is underdetermined")
    return np.concatenate([[a, b], k])


def _residual(p, tau, y):
    phi = (((p[6] * tau + p[5]) * tau + p[4]) * tau + p[3]) * tau + p[2]
    return p[0] * np.sin(phi) + p[1] - y, phi


def _jacobian(p, tau, phi):
    cos_term = p[0] * np.cos(phi)
    cols = [np.sin(phi), np.ones_like(tau)]
    power = np.ones_like(tau)
    for _ in range(5):
        cols.append(cos_term * power)
        power = power * tau
    return np.column_stack(cols)


def _levenberg_marquardt(p, tau, y, budget):
    r, phi = _residual(p, tau, y)
    cost = float(r @ r)
    costs = [cost]
    lam = 1e-3
    for it in range(1, budget + 1):
        J = _jacobian(p, tau, phi)
        g = J.T @ r
        scale = np.linalg.norm(J) * math.sqrt(cost) + 1e-300
        if cost == 0.0 or np.linalg.norm(g) <= 1e-10 * scale:
            return p, costs, it - 1, True
        A = J.T @ J
        diag = np.diag(A).copy()
        while True:
            try:
                step = np.linalg.solve(A + lam * np.diag(np.maximum(diag, 1e-30)), -g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None:
                trial = p + step
                r_new, phi_new = _residual(trial, tau, y)
                cost_new = float(r_new @ r_new)
                if cost_new < cost:
                    break
            lam *= 4.0
            if lam > 1e16:
                return p, costs, it, True  # no descent direction left: at a minimum to working precision
        small = np.linalg.norm(step) <= 1e-12 * (np.linalg.norm(p) + 1e-300)
        p, r, phi, cost = trial, r_new, phi_new, cost_new
        costs.append(cost)
        lam = max(lam / 3.0, 1e-15)
        if small:
            return p, costs, it, True
    return p, costs, budget, False


def fit_dc_phase(trace: DcTrace, init: PhaseFit | None = None, budget: int = FIT_BUDGET) -> PhaseFit:
    """Least-squares fit of a sin(quartic phase) + b to a DC trace.

    The initial guess comes from zero crossings (mean offset, sqrt(2) std amplitude,
    quadratic phase through the crossing times) unless ``init`` is given. The result
    is canonical: a > 0, phase running in ``trace.direction``, c in [0, 2 pi).
    """
    t0 = float(trace.t[0])
    span = float(trace.t[-1] - t0)
    tau = (trace.t - t0) / span
    if init is None:
        p = _initial_guess(trace, tau)
    else:
        k = np.array(init.coefficients) * span ** np.arange(5)
        p = np.concatenate([[init.a, init.b], k])
    p, costs, iters, ok = _levenberg_marquardt(p.astype(float), tau, trace.current, budget)
    if not ok:
        raise FitError(f"phase fit did not converge within {budget} iterations")
    a, b, k = float(p[0]), float(p[1]), p[2:].copy()
    if a < 0:
        a, k[0] = -a, k[0] + math.pi
    # a sin(phi) = a sin(pi - phi): pick the branch that runs in the slope's direction
    rate = np.polynomial.polynomial.polyval(0.5, np.polynomial.polynomial.polyder(k))
    if np.sign(rate) != trace.direction:
        k = -k
        k[0] += math.pi
    k[0] = float(np.mod(k[0], TWO_PI))
    coeffs = tuple(k / span ** np.arange(5))
    resid = trace.current - (a * np.sin(phase_polynomial(coeffs, trace.t - t0)) + b)
    v_f = float(np.var(resid))
    v_t = float(np.var(trace.current))
    return PhaseFit(a, b, coeffs, t0, float(trace.t[-1]), v_f, 1.0 - v_f / v_t if v_t > 0 else float("nan"),
                    iters, costs, polynomial_is_monotone(coeffs, 0.0, span))


def synthetic_clock(trace: DcTrace, ratio: int = AC_PER_DC) -> np.ndarray:
    """Quadrature timestamps with ``ratio`` AC samples per DC sample over the trace."""
    if int(ratio) != ratio or ratio < 1:
        raise ValidationError("clock ratio must be a positive integer", "ratio")
    return trace.t[0] + np.arange((len(trace) - 1) * int(ratio) + 1) * (trace.dt / ratio)


@dataclass
class AssignedPhases:
    """Phases for the accepted timestamps; ``index`` points into the input."""

    phi: np.ndarray
    index: np.ndarray
    rejected: int


def assign_phases(fit: PhaseFit, timestamps) -> AssignedPhases:
    """Evaluate the fitted phase at quadrature timestamps, reduced into [0, 2 pi).

    Timestamps outside the fitted slope are rejected and counted.
    """
    ts = np.asarray(timestamps, dtype=float)
    t1 = fit.t1 if fit.t1 is not None else math.inf
    ok = (ts >= fit.t0) & (ts <= t1)
    index = np.flatnonzero(ok)
    return AssignedPhases(wrap_phase(fit.phase(ts[index])), index, int(ts.size - index.size))


# -- uniformization -----------------------------------------------------------------

def uniformity_check(data) -> tuple:
    """Kolmogorov distance between the phase CDF and phi / 2 pi; passes below 1.63 / sqrt(N)."""
    phi = data.phi if isinstance(data, QuadratureDataset) else np.asarray(data, dtype=float)
    if phi.size < 100:
        raise ValidationError("uniformity check needs at least 100 phases", "dataset")
    ks = float(stats.kstest(phi / TWO_PI, "uniform").statistic)
    return ks, bool(ks < KS_CONSTANT / math.sqrt(phi.size))


@numba.njit(cache=True)
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@numba.njit(cache=True)
def _match_targets(sorted_phi, targets, tol):
    """Nearest unused sorted phase within ``tol`` (circular) for each target in order; -1 if none."""
    n = sorted_phi.size
    # right[i]: smallest unused index >= i (n = none); left[i + 1]: largest unused index <= i, shifted by one
    right = np.arange(n + 1)
    left = np.arange(n + 1)
    out = np.full(targets.size, -1)
    two_pi = 2.0 * math.pi
    for t in range(targets.size):
        x = targets[t]
        pos = np.searchsorted(sorted_phi, x)
        best = -1
        best_d = tol
        for cand in (pos, 0):
            j = _find(right, cand)
            if j < n:
                d = sorted_phi[j] - x
                if cand == 0:
                    d = d + two_pi  # wrap: past 2 pi onto the start
                if d <= best_d:
                    best, best_d = j, d
        for cand in (pos, n):
            j = _find(left, cand) - 1
            if j >= 0:
                d = x - sorted_phi[j]
                if cand == n:
                    d = d + two_pi
                if d < best_d or (d == best_d and best == -1):
                    best, best_d = j, d
        if best >= 0:
            out[t] = best
            right[best] = best + 1
            left[best + 1] = best
    return out


def _target_count(phi, bins: int = 64) -> int:
    counts, _ = np.histogram(phi, bins=bins, range=(0.0, TWO_PI))
    return int(UNIFORMIZE_FILL * phi.size * counts.min() / counts.mean())


def uniformize(dataset: QuadratureDataset, seed: int, tolerance: float = DEFAULT_TOLERANCE,
               targets: int | None = None, min_fraction: float = 0.1, source: str = "prng") -> QuadratureDataset:
    """Select a uniformly distributed phase subset by random coincidences.

    Uniform targets on [0, 2 pi) (``source="prng"``, or ``"vacuum"`` to map simulated
    vacuum quadratures through the normal CDF) are matched in draw order to the
    nearest unused point within ``tolerance``; unmatched targets are skipped. The
    default target count is ``UNIFORMIZE_FILL`` N times the sparsest-to-mean ratio of
    a 64-bin phase histogram, leaving spare points where the data are thinnest so
    that skips stay rare and unbiased.
    """
    n = len(dataset)
    if not tolerance > 0:
        raise ValidationError("tolerance must be positive", "uniformize.tolerance")
    if not 0 <= min_fraction <= 1:
        raise ValidationError("min_fraction must lie in [0, 1]", "uniformize.min_fraction")
    m = _target_count(dataset.phi) if targets is None else int(targets)
    rng = np.random.default_rng(seed)
    if source == "prng":
        u = rng.random(m)
    elif source == "vacuum":
        u = stats.norm.cdf(rng.standard_normal(m))
    else:
        raise ValidationError(f"unknown target source {source!r}", "uniformize.source")
    order = np.argsort(dataset.phi, kind="stable")
    match = _match_targets(dataset.phi[order], np.minimum(u * TWO_PI, np.nextafter(TWO_PI, 0)), tolerance)
    chosen = order[match[match >= 0]]
    diagnostics = {"input": n, "targets": m, "kept": int(chosen.size), "skipped": int(m - chosen.size),
                   "tolerance": tolerance, "seed": seed, "source": source}
    if chosen.size == 0 or chosen.size < min_fraction * n:
        raise UniformizeError(f"uniformize kept {chosen.size} of {n} points, below min_fraction={min_fraction}",
                              diagnostics)
    return dataset.subset(np.sort(chosen), uniformized=diagnostics)


# -- phase-locked baseline ----------------------------------------------------------

@dataclass
class PlmData:
    """Locked-phase data and the phases fed to the sampling formula."""

    data: QuadratureDataset
    estimator_phases: np.ndarray
    locked: np.ndarray


def _nearest_locked(psi, locked):
    idx = np.searchsorted(locked, psi)
    idx = np.clip(idx, 1, locked.size - 1)
    left, right = locked[idx - 1], locked[idx]
    return np.where(psi - left <= right - psi, idx - 1, idx)


def plm_baseline(source, k: int = 21, n: int | None = None, seed: int = 0, span: float = math.pi) -> PlmData:
    """Phase-locked data with nearest-phase interpolation.

    The sampling formula needs uniform phases. Each event gets a uniform phase psi on
    [0, span); its quadrature is the one recorded at the locked phase nearest to psi.
    From ``GaussianStateParams`` the quadratures are simulated at the locked phases;
    from a dataset each point keeps its x and is snapped to the nearest locked phase,
    with psi drawn uniformly in that phase's cell.
    """
    schedule = LockedPhases(k, span)
    locked = schedule.phases
    rng = np.random.default_rng(seed)
    if isinstance(source, GaussianStateParams):
        if n is None or int(n) != n or n < 1:
            raise ValidationError("simulated baseline needs a positive sample count", "n")
        psi = rng.uniform(0.0, span, int(n))
        phi = locked[_nearest_locked(psi, locked)]
        angle = source.squeeze_angle
        if source.angle_jitter_deg > 0:
            angle = angle + rng.normal(0.0, math.radians(source.angle_jitter_deg), psi.size)
        x = _mean(source, phi) + np.sqrt(_variance(source, phi, angle)) * rng.standard_normal(psi.size)
        prov = {"source": "simulated", "state": source.to_dict(), "schedule": schedule.describe(),
                "n": int(n), "seed": seed, "interpolation": "nearest"}
        data = QuadratureDataset(x, wrap_phase(phi), None, prov)
        return PlmData(data, psi, locked)
    if not isinstance(source, QuadratureDataset):
        raise ValidationError("plm_baseline needs state parameters or a dataset", "source")
    cell = _nearest_locked(np.mod(source.phi, span), locked)
    edges = np.concatenate([[0.0], 0.5 * (locked[1:] + locked[:-1]), [span]])
    psi = rng.uniform(edges[cell], edges[cell + 1])
    psi = np.minimum(psi, np.nextafter(span, 0))
    flip = source.phi >= span  # x(phi + pi) = -x(phi) folds the upper half circle for span = pi
    x = np.where(flip & (span == math.pi), -source.x, source.x)
    data = QuadratureDataset(x, wrap_phase(locked[cell]), None,
                             {**source.provenance, "locked": schedule.describe(), "interpolation": "nearest"})
    return PlmData(data, psi, locked)
