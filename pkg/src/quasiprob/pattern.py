"""Pattern-function kernel chi(xi; w) sampled at Nyquist nodes.

chi(xi) = (2/pi) * integral_0^{b_c} b exp(b^2/2) Omega_w(b) cos(b xi) db

Its spectrum lives on [-b_c, b_c], so the samples chi(pi m / b_c) determine it
exactly through the sinc series. The pattern function of a quadrature sample
(x, phi) at phase-space point alpha is chi evaluated at
xi = x - 2 |alpha| cos(arg(alpha) - phi).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .errors import ConvergenceError, TableRangeError, ValidationError
from .filters import FilterSpec, FilterTable, build_filter_table, cache_root

CHI_RTOL = 1e-8
GUARD = 0.10
GL_ORDER = 16
MAX_NODES = 200_001  # refuse tables beyond this; |xi| that large means corrupt data or a wrong grid
DENSE_PHASE_STEP = 0.02  # dense grid: b_max * h <= 0.02 rad keeps cubic error ~1e-8 relative


@numba.njit(cache=True)
def _sinc_sum(samples, m_max, u):
    # sum_m samples[m + m_max] * sinc(u - m); exact node hits return the sample itself
    out = np.empty(u.size)
    for p in range(u.size):
        n = int(round(u[p]))
        d = u[p] - n
        if d == 0.0 and abs(n) <= m_max:
            out[p] = samples[n + m_max]
            continue
        s = math.sin(math.pi * d)
        if n % 2 != 0:
            s = -s
        acc = 0.0
        sign = 1.0 if m_max % 2 == 0 else -1.0  # (-1)**m at m = -m_max
        for k in range(samples.size):
            m = k - m_max
            if m != n:
                acc += sign * samples[k] / (u[p] - m)
            sign = -sign
        out[p] = acc * s / math.pi
        if abs(n) <= m_max:
            # nearest node separately: sample / d would overflow for tiny d
            x = math.pi * d
            sinc = 1.0 - x * x / 6.0 if abs(x) < 1e-4 else math.sin(x) / x
            out[p] += samples[n + m_max] * sinc
    return out


def _panels(lo, hi, count, order=GL_ORDER):
    x, wt = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(lo, hi, count + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    return (mid[:, None] + half[:, None] * x).ravel(), (half[:, None] * wt).ravel()


def _kernel_nodes(spec: FilterSpec, table: FilterTable, panels: int):
    """Quadrature nodes ``b`` and weights for the non-oscillating factor b e^{b^2/2} Omega(b)."""
    if spec.analytic:
        # b = 2w cos(psi) removes the (2w - b)^{3/2} edge singularity of the closed-form filter
        psi, wpsi = _panels(0.0, 0.5 * np.pi, panels)
        b = 2.0 * spec.w * np.cos(psi)
        omega = (2.0 * psi - np.sin(2.0 * psi)) / np.pi
        jac = 2.0 * spec.w * np.sin(psi)
        return b, wpsi * b * np.exp(0.5 * b * b) * omega * jac
    end = _filter_end(table)
    b, wb = _panels(0.0, end, panels)
    return b, wb * b * np.exp(0.5 * b * b) * table(b)


def _filter_end(table: FilterTable) -> float:
    nz = np.flatnonzero(table.values > 0.0)
    return float(table.nodes[min(nz.max() + 1, table.values.size - 1)])


def _chi_at(xi, b, weights, chunk=256):
    out = np.empty(xi.size)
    for s in range(0, xi.size, chunk):
        out[s:s + chunk] = np.cos(np.outer(xi[s:s + chunk], b)) @ weights
    return out * (2.0 / np.pi)


def chi_direct(spec: FilterSpec, xi, table: FilterTable | None = None, rtol: float = CHI_RTOL,
               max_panels: int = 1 << 16) -> np.ndarray:
    """chi(xi) by composite Gauss-Legendre quadrature, refined until two levels agree.

    The tolerance is relative to ``(2/pi) * integral |b e^{b^2/2} Omega(b)| db``,
    which bounds |chi| everywhere.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    table = table if table is not None else build_filter_table(spec)
    span = spec.support if spec.analytic else _filter_end(table)
    xi_top = float(np.max(np.abs(xi))) if xi.size else 0.0
    # panel width <= min(0.1 w, pi / (4 xi)); for q = inf measured in psi, where b' <= 2w
    width = min(0.1 * spec.w, math.pi / (4.0 * max(xi_top, 1e-12)))
    if spec.analytic:
        panels = max(8, math.ceil(0.5 * math.pi * 2.0 * spec.w / width))
    else:
        panels = max(8, math.ceil(span / width))
    b, wts = _kernel_nodes(spec, table, panels)
    prev = _chi_at(xi, b, wts)
    while True:
        panels *= 2
        b, wts = _kernel_nodes(spec, table, panels)
        scale = (2.0 / np.pi) * np.sum(np.abs(wts))
        cur = _chi_at(xi, b, wts)
        if np.max(np.abs(cur - prev), initial=0.0) <= rtol * scale:
            return cur
        if panels >= max_panels:
            raise ConvergenceError(f"chi quadrature for {spec} did not reach rtol={rtol}")
        prev = cur


@dataclass(eq=False)
class PatternTable:
    """chi sampled at xi_m = pi m / b_c for m = -M..M.

    ``xi_limit`` is the largest |xi| that may be queried; the nodes extend
    further so that truncating the sinc series is harmless inside the limit.
    """

    spec: FilterSpec
    b_cut: float
    samples: np.ndarray
    xi_limit: float
    _dense: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=float)
        if self.samples.size % 2 != 1:
            raise ValidationError("pattern table needs an odd number of samples (m = -M..M)")
        if self.xi_limit > self.m_max * self.step:
            raise ValidationError("xi_limit exceeds the tabulated node range")

    @property
    def m_max(self) -> int:
        return (self.samples.size - 1) // 2

    @property
    def step(self) -> float:
        return math.pi / self.b_cut

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(-self.m_max, self.m_max + 1) * self.step

    @property
    def chi0(self) -> float:
        return float(self.samples[self.m_max])

    def sample(self, m: int) -> float:
        return float(self.samples[m + self.m_max])

    def __eq__(self, other):
        return (
            isinstance(other, PatternTable)
            and self.spec == other.spec
            and self.b_cut == other.b_cut
            and self.xi_limit == other.xi_limit
            and np.array_equal(self.samples, other.samples)
        )

    def covers(self, xi_abs: float) -> bool:
        return xi_abs <= self.xi_limit

    def dense(self, xi_abs: float | None = None):
        """Dense resampling of the band-limited chi for bulk evaluation.

        Returns ``(xi0, h, values)``: chi on ``xi0 + h * k`` computed by the full
        sinc series, covering ``[-xi_abs, xi_abs]`` (default: the whole limit).
        Callers interpolate locally with a cubic; see ``DENSE_PHASE_STEP``.
        """
        xi_abs = self.xi_limit if xi_abs is None else min(float(xi_abs), self.xi_limit)
        for (lim, grid) in self._dense.items():
            if lim >= xi_abs:
                return grid
        h = DENSE_PHASE_STEP / self._spectral_extent()
        k = math.ceil(xi_abs / h) + 3
        xi = np.arange(-k, k + 1) * h
        values = _sinc_sum(self.samples, self.m_max, xi / self.step)
        grid = (float(xi[0]), h, values)
        self._dense = {xi_abs: grid}
        return grid

    def _spectral_extent(self) -> float:
        if self.spec.analytic:
            return 2.0 * self.spec.w
        return _filter_end(build_filter_table(self.spec))

    def summary(self) -> str:
        return (
            f"pattern table {self.spec}: chi(0)={self.chi0:.12g}, b_c={self.b_cut:.6g}, "
            f"nodes={self.samples.size} (|m|<={self.m_max}, spacing pi/b_c={self.step:.6g}), "
            f"query range |xi|<={self.xi_limit:.6g}, node range |xi|<={self.m_max * self.step:.6g}"
        )

    def save(self, path):
        path = Path(path)
        if path.suffix == ".npz":
            np.savez(path, q=self.spec.q, w=self.spec.w, b_cut=self.b_cut,
                     xi_limit=self.xi_limit, samples=self.samples)
            return
        m = np.arange(-self.m_max, self.m_max + 1)
        header = (f"pattern {self.spec} b_cut={self.b_cut!r} xi_limit={self.xi_limit!r}\n"
                  "m,xi,chi")
        np.savetxt(path, np.column_stack([m, self.nodes, self.samples]), delimiter=",",
                   header=header, fmt=["%d", "%.17g", "%.17g"])

    @classmethod
    def load(cls, path) -> "PatternTable":
        path = Path(path)
        if path.suffix == ".npz":
            with np.load(path) as z:
                return cls(FilterSpec(float(z["q"]), float(z["w"])), float(z["b_cut"]),
                           np.array(z["samples"]), float(z["xi_limit"]))
        with open(path) as fh:
            head = fh.readline().lstrip("# ").split()
        data = np.loadtxt(path, delimiter=",", ndmin=2)
        return cls(FilterSpec.parse(head[1]), float(head[2].split("=")[1]),
                   data[:, 2].copy(), float(head[3].split("=")[1]))


def _node_range(xi_limit: float, chi0: float) -> float:
    # chi ~ -2 / (pi xi^2) far out; keep nodes until that is below 1e-3 |chi(0)| and well past the limit
    decay = math.sqrt(2.0 / (math.pi * 1e-3 * max(abs(chi0), 1e-12)))
    return max(2.0 * xi_limit, xi_limit + 40.0, decay)


def compute_chi_samples(spec: FilterSpec, xi_max: float, filter_table: FilterTable | None = None,
                        guard: float = GUARD, rtol: float = CHI_RTOL, cache_dir=None) -> PatternTable:
    """Tabulate chi at Nyquist nodes covering ``|xi| <= xi_max * (1 + guard)``."""
    if not (xi_max > 0 and math.isfinite(xi_max)):
        raise ValidationError(f"xi_max must be positive and finite, got {xi_max}", "pattern.xi_max")
    xi_limit = float(xi_max) * (1.0 + guard)
    root = cache_root(cache_dir)
    key = None
    if root is not None:
        key = hashlib.sha1(f"{spec.q!r}|{spec.w!r}|{xi_limit!r}|{rtol!r}".encode()).hexdigest()[:12]
        path = root / f"pattern-{key}.npz"
        if path.exists():
            return PatternTable.load(path)
    table = filter_table if filter_table is not None else build_filter_table(spec, cache_dir=cache_dir)
    chi0 = float(chi_direct(spec, [0.0], table, rtol)[0])
    b_cut = spec.b_cut
    m_max = math.ceil(_node_range(xi_limit, chi0) * b_cut / math.pi)
    if 2 * m_max + 1 > MAX_NODES:
        raise ValidationError(f"xi range {xi_max:.6g} needs {2 * m_max + 1} nodes (limit {MAX_NODES}); "
                              "check the data scale and the grid", "pattern.xi_max")
    half = chi_direct(spec, np.arange(m_max + 1) * (math.pi / b_cut), table, rtol)
    samples = np.concatenate([half[:0:-1], half])  # even by construction
    out = PatternTable(spec, b_cut, samples, xi_limit)
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        out.save(root / f"pattern-{key}.npz")
    return out


def chi_eval(table: PatternTable, xi):
    """chi(xi) from the full sinc series over all tabulated nodes."""
    arr = np.asarray(xi, dtype=float)
    flat = arr.ravel()
    bad = ~(np.abs(flat) <= table.xi_limit)
    if bad.any():
        raise TableRangeError(
            f"xi={flat[bad][0]!r} outside tabulated range |xi|<={table.xi_limit:.6g}",
            offending=float(flat[bad][0]),
        )
    u = flat / table.step
    n = np.rint(u)
    hit = (n * table.step == flat) & (np.abs(n) <= table.m_max)  # queries at node m * step hit exactly
    u[hit] = n[hit]
    out = _sinc_sum(table.samples, table.m_max, u).reshape(arr.shape)
    return out if out.ndim else float(out)


def xi_of(x, phi, alpha):
    """Reduced argument xi = x - 2 |alpha| cos(arg(alpha) - phi)."""
    alpha = np.asarray(alpha, dtype=complex)
    return np.asarray(x) - 2.0 * np.abs(alpha) * np.cos(np.angle(alpha) - np.asarray(phi))


def pattern_eval(table: PatternTable, x, phi, alpha):
    """Pattern function f_Omega(x, phi, alpha; w) = chi(xi)."""
    xi = xi_of(x, phi, alpha)
    try:
        return chi_eval(table, xi)
    except TableRangeError as exc:
        raise TableRangeError(f"{exc} for (x, phi, alpha)=({x}, {phi}, {alpha})",
                              offending=(x, phi, alpha)) from None


def required_xi(x, alphas) -> float:
    """Smallest xi range that covers every sample against every alpha."""
    x = np.asarray(x, dtype=float)
    return float(np.max(np.abs(x), initial=0.0) + 2.0 * np.max(np.abs(np.asarray(alphas)), initial=0.0))
