"""Monte-Carlo sampling of regularized P functions on phase-space grids.

P(alpha) is the empirical mean of pattern values chi(xi_j(alpha)) over the data,
sigma its standard error (Bessel-corrected sample deviation over sqrt(N)) and
S = -P / sigma the significance of a negative value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .errors import TableRangeError, ValidationError
from .filters import FilterSpec, FilterTable, build_filter_table
from .gaussian_model import QuadratureDataset
from .pattern import PatternTable, chi_eval, compute_chi_samples

DEFAULT_EXTENT = 6.0
DEFAULT_STEP = 0.1


@dataclass(frozen=True)
class GridSpec:
    """Rectangular grid of alpha nodes; arrays are indexed ``[i_re, i_im]``."""

    re_min: float
    re_max: float
    im_min: float
    im_max: float
    step: float

    def __post_init__(self):
        vals = [float(v) for v in (self.re_min, self.re_max, self.im_min, self.im_max, self.step)]
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError("grid bounds must be finite", "grid")
        for name, v in zip(("re_min", "re_max", "im_min", "im_max", "step"), vals):
            object.__setattr__(self, name, v)
        if not self.step > 0:
            raise ValidationError("grid step must be positive", "grid.step")
        if self.re_max < self.re_min or self.im_max < self.im_min:
            raise ValidationError("grid bounds must satisfy min <= max", "grid")

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        parts = text.split(",")
        if len(parts) != 5:
            raise ValidationError(f"grid needs remin,remax,immin,immax,step; got {text!r}", "grid")
        try:
            return cls(*(float(p) for p in parts))
        except ValueError:
            raise ValidationError(f"grid entries must be numbers; got {text!r}", "grid") from None

    @classmethod
    def around(cls, center: complex = 0j, extent: float = DEFAULT_EXTENT, step: float = DEFAULT_STEP) -> "GridSpec":
        """Square grid of half-width ``extent`` centred on the nearest step multiple to ``center``."""
        c = complex(center)
        cr, ci = round(c.real / step) * step, round(c.imag / step) * step
        return cls(cr - extent, cr + extent, ci - extent, ci + extent, step)

    def __str__(self):
        return ",".join(repr(v) for v in (self.re_min, self.re_max, self.im_min, self.im_max, self.step))

    def _count(self, lo, hi):
        return int(math.floor((hi - lo) / self.step + 1e-9)) + 1

    @property
    def shape(self):
        return self._count(self.re_min, self.re_max), self._count(self.im_min, self.im_max)

    @property
    def re_nodes(self) -> np.ndarray:
        return self.re_min + self.step * np.arange(self.shape[0])

    @property
    def im_nodes(self) -> np.ndarray:
        return self.im_min + self.step * np.arange(self.shape[1])

    @property
    def alphas(self) -> np.ndarray:
        return self.re_nodes[:, None] + 1j * self.im_nodes[None, :]

    @property
    def size(self) -> int:
        n_re, n_im = self.shape
        return n_re * n_im

    def corners(self) -> np.ndarray:
        re, im = self.re_nodes, self.im_nodes
        return np.array([complex(r, i) for r in (re[0], re[-1]) for i in (im[0], im[-1])])


@dataclass(eq=False)
class QuasiprobGrid:
    """Sampled P, its standard error and significance on one or more (multi-mode) grids.

    For ``n`` modes the arrays have shape ``(n_re1, n_im1, ..., n_ren, n_imn)``.
    """

    grids: tuple
    P: np.ndarray
    sigma: np.ndarray
    specs: tuple
    n: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.grids, GridSpec):
            self.grids = (self.grids,)
        if isinstance(self.specs, FilterSpec):
            self.specs = (self.specs,)
        self.grids, self.specs = tuple(self.grids), tuple(self.specs)
        shape = tuple(s for g in self.grids for s in g.shape)
        self.P = np.asarray(self.P, dtype=float).reshape(shape)
        self.sigma = np.asarray(self.sigma, dtype=float).reshape(shape)

    @property
    def grid(self) -> GridSpec:
        return self.grids[0]

    @property
    def spec(self) -> FilterSpec:
        return self.specs[0]

    @property
    def modes(self) -> int:
        return len(self.grids)

    @property
    def S(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return -self.P / self.sigma

    @property
    def alphas(self) -> np.ndarray:
        return self.grid.alphas

    def node(self, flat_index: int) -> tuple:
        """Joint alpha node (one complex per mode) of a row-major flat index."""
        idx = np.unravel_index(flat_index, self.P.shape)
        return tuple(complex(g.re_nodes[idx[2 * m]], g.im_nodes[idx[2 * m + 1]])
                     for m, g in enumerate(self.grids))

    def __eq__(self, other):
        if not isinstance(other, QuasiprobGrid):
            return NotImplemented
        return (self.grids == other.grids and self.specs == other.specs and self.n == other.n
                and np.array_equal(self.P, other.P) and np.array_equal(self.sigma, other.sigma, equal_nan=True)
                and self.provenance == other.provenance)


@dataclass
class SignificanceSweep:
    """Maximal significance along one parameter axis (``w``, ``q`` or ``N``)."""

    axis: str
    values: np.ndarray
    sigma_max: np.ndarray
    argmax: np.ndarray
    label: str = ""
    slope: float | None = None

    def __post_init__(self):
        if self.axis not in ("w", "q", "N"):
            raise ValidationError(f"sweep axis must be w, q or N; got {self.axis!r}", "sweep.axis")
        self.values = np.asarray(self.values, dtype=float)
        self.sigma_max = np.asarray(self.sigma_max, dtype=float)
        self.argmax = np.asarray(self.argmax, dtype=complex)


# -- pattern tables -----------------------------------------------------------------

def _xi_extremes(x, phi, grid: GridSpec) -> np.ndarray:
    """Per-sample max |xi| over the grid (xi is linear in alpha, so corners suffice)."""
    c2, s2 = 2.0 * np.cos(phi), 2.0 * np.sin(phi)
    out = np.zeros(x.shape)
    for a in grid.corners():
        np.maximum(out, np.abs(x - a.real * c2 - a.imag * s2), out=out)
    return out


def required_range(dataset: QuadratureDataset, grid: GridSpec, phases=None) -> float:
    """Largest |xi| that ``dataset`` induces on ``grid``."""
    phi = dataset.phi if phases is None else phases
    return float(np.max(_xi_extremes(dataset.x, phi, grid), initial=0.0))


def pattern_table_for(spec: FilterSpec, datasets, grids, filter_table: FilterTable | None = None,
                      cache_dir=None) -> PatternTable:
    """Pattern table whose query range covers every dataset on its grid."""
    if isinstance(datasets, QuadratureDataset):
        datasets = [datasets]
    if isinstance(grids, GridSpec):
        grids = [grids] * len(datasets)
    xi_max = max(required_range(d, g) for d, g in zip(datasets, grids))
    table = filter_table if filter_table is not None else build_filter_table(spec, cache_dir=cache_dir)
    return compute_chi_samples(spec, max(xi_max, 1.0), table, cache_dir=cache_dir)


# -- kernels ----------------------------------------------------------------------------

@numba.njit(inline="always")
def _cubic(values, xi0, inv_h, xi):
    # 4-point Lagrange interpolation on the uniform dense grid (xi > xi0 always holds)
    u = (xi - xi0) * inv_h
    m = int(u)
    t = u - m
    a = t * (t - 1.0)
    b = (t + 1.0) * (t - 2.0)
    return ((a * (t + 1.0) * values[m + 2] - a * (t - 2.0) * values[m - 1]) * (1.0 / 6.0)
            + (b * (t - 1.0) * values[m] - b * t * values[m + 1]) * 0.5)


@numba.njit(cache=True)
def _grid_sums(x, cphi, sphi, re2, im2, xi0, inv_h, values):
    n_re, n_im = re2.size, im2.size
    shift = np.empty((n_re, n_im))
    acc = np.zeros((n_re, n_im))
    acc2 = np.zeros((n_re, n_im))
    for i in range(n_re):
        a = x[0] - re2[i] * cphi[0]
        for k in range(n_im):
            shift[i, k] = _cubic(values, xi0, inv_h, a - im2[k] * sphi[0])
    for j in range(1, x.size):
        c, s = cphi[j], sphi[j]
        for i in range(n_re):
            a = x[j] - re2[i] * c
            for k in range(n_im):
                d = _cubic(values, xi0, inv_h, a - im2[k] * s) - shift[i, k]
                acc[i, k] += d
                acc2[i, k] += d * d
    return shift, acc, acc2


@numba.njit(cache=True)
def _sample_totals(x, cphi, sphi, re2, im2, xi0, inv_h, values):
    out = np.empty(x.size)
    for j in range(x.size):
        c, s = cphi[j], sphi[j]
        tot = 0.0
        for i in range(re2.size):
            a = x[j] - re2[i] * c
            for k in range(im2.size):
                tot += _cubic(values, xi0, inv_h, a - im2[k] * s)
        out[j] = tot
    return out


def _check_range(dataset: QuadratureDataset, phases, table: PatternTable, grid: GridSpec) -> float:
    ext = _xi_extremes(dataset.x, phases, grid)
    bad = np.flatnonzero(~(ext <= table.xi_limit))
    if bad.size:
        j = int(bad[0])
        c2, s2 = 2.0 * math.cos(phases[j]), 2.0 * math.sin(phases[j])
        corner = max(grid.corners(), key=lambda a: abs(dataset.x[j] - a.real * c2 - a.imag * s2))
        raise TableRangeError(
            f"sample {j} (x={dataset.x[j]!r}, phi={phases[j]!r}) at alpha={corner!r} needs "
            f"|xi|={ext[j]:.6g} beyond the table range {table.xi_limit:.6g}",
            offending=(float(dataset.x[j]), float(phases[j]), corner),
        )
    return float(np.max(ext, initial=0.0))


def _moments(dataset, table, grid, phases, exact):
    """Shift, shifted sum and shifted sum of squares of pattern values per node."""
    xi_top = _check_range(dataset, phases, table, grid)
    re2, im2 = 2.0 * grid.re_nodes, 2.0 * grid.im_nodes
    if not exact:
        xi0, h, values = table.dense(xi_top)
        return _grid_sums(dataset.x, np.cos(phases), np.sin(phases), re2, im2, xi0, 1.0 / h, values)
    alphas = grid.alphas.ravel()
    shift = chi_eval(table, dataset.x[0] - re2.repeat(im2.size) * math.cos(phases[0])
                     - np.tile(im2, re2.size) * math.sin(phases[0]))
    acc = np.zeros(alphas.size)
    acc2 = np.zeros(alphas.size)
    for j in range(1, len(dataset)):
        xi = dataset.x[j] - 2.0 * (alphas.real * math.cos(phases[j]) + alphas.imag * math.sin(phases[j]))
        d = chi_eval(table, xi) - shift
        acc += d
        acc2 += d * d
    return (shift.reshape(grid.shape), acc.reshape(grid.shape), acc2.reshape(grid.shape))


def _finish(shift, acc, acc2, n):
    mean_d = acc / n
    P = shift + mean_d
    if n < 2:
        return P, np.full(P.shape, np.nan)
    var = np.maximum(acc2 - n * mean_d * mean_d, 0.0) / (n - 1)
    return P, np.sqrt(var / n)


def estimate_grid(dataset: QuadratureDataset, table: PatternTable, grid: GridSpec, *,
                  exact: bool = False, phases=None) -> QuasiprobGrid:
    """Sample P on ``grid`` from ``dataset``.

    The bulk path evaluates chi by local cubic interpolation of a dense resampling
    of the sinc series (``PatternTable.dense``); ``exact=True`` sums the full sinc
    series for every value instead. ``phases`` overrides the phases fed to the
    estimator (the recorded ``dataset.phi`` by default).
    """
    n = len(dataset)
    if n == 0:
        raise ValidationError("dataset is empty", "dataset")
    phases = dataset.phi if phases is None else np.ascontiguousarray(phases, dtype=float)
    if phases.shape != dataset.x.shape:
        raise ValidationError("phase override must match the dataset length", "phases")
    shift, acc, acc2 = _moments(dataset, table, grid, phases, exact)
    P, sigma = _finish(shift, acc, acc2, n)
    prov = {"dataset": dataset.provenance, "dataset_sha256": dataset.digest(), "exact": bool(exact)}
    return QuasiprobGrid((grid,), P, sigma, (table.spec,), n, prov)


def estimate_multimode(datasets: Sequence[QuadratureDataset], tables: Sequence[PatternTable],
                       grids, chunk: int = 4096) -> QuasiprobGrid:
    """Joint P of independent-mode data: mean over events of the product of per-mode pattern values."""
    datasets, tables = list(datasets), list(tables)
    if isinstance(grids, GridSpec):
        grids = [grids] * len(datasets)
    grids = list(grids)
    if not (len(datasets) == len(tables) == len(grids)) or not datasets:
        raise ValidationError("need one table and one grid per mode", "modes")
    if len(datasets) == 1:
        return estimate_grid(datasets[0], tables[0], grids[0])
    n = len(datasets[0])
    if any(len(d) != n for d in datasets):
        raise ValidationError("all modes need the same number of joint events", "datasets")
    if n == 0:
        raise ValidationError("dataset is empty", "dataset")
    for d, t, g in zip(datasets, tables, grids):
        _check_range(d, d.phi, t, g)
    shape = tuple(s for g in grids for s in g.shape)

    def joint_values(lo, hi):
        out = np.ones((hi - lo, 1))
        for d, t, g in zip(datasets, tables, grids):
            a = g.alphas.ravel()
            xi = d.x[lo:hi, None] - 2.0 * (np.cos(d.phi[lo:hi, None]) * a.real + np.sin(d.phi[lo:hi, None]) * a.imag)
            xi0, h, values = t.dense(float(np.max(np.abs(xi))))
            f = _dense_lookup(values, xi0, h, xi)
            out = (out[:, :, None] * f[:, None, :]).reshape(hi - lo, -1)
        return out

    shift = joint_values(0, 1)[0]
    acc = np.zeros_like(shift)
    acc2 = np.zeros_like(shift)
    for lo in range(1, n, chunk):
        d = joint_values(lo, min(n, lo + chunk)) - shift
        acc += d.sum(axis=0)
        acc2 += (d * d).sum(axis=0)
    P, sigma = _finish(shift, acc, acc2, n)
    prov = {"datasets": [d.provenance for d in datasets], "dataset_sha256": [d.digest() for d in datasets]}
    return QuasiprobGrid(tuple(grids), P.reshape(shape), sigma.reshape(shape),
                         tuple(t.spec for t in tables), n, prov)


@numba.njit(cache=True)
def _dense_lookup_flat(values, xi0, inv_h, xi):
    out = np.empty(xi.size)
    for p in range(xi.size):
        out[p] = _cubic(values, xi0, inv_h, xi[p])
    return out


def _dense_lookup(values, xi0, h, xi):
    return _dense_lookup_flat(values, xi0, 1.0 / h, np.ascontiguousarray(xi).ravel()).reshape(xi.shape)


# -- significance -------------------------------------------------------------------

def max_significance(grid: QuasiprobGrid):
    """Largest significance and its node; ties go to the first node in row-major order."""
    if grid.n < 2:
        raise ValidationError("significance needs N >= 2 samples", "dataset")
    S = grid.S.ravel()
    if np.all(np.isnan(S)):
        raise ValidationError("significance undefined at every node", "grid")
    k = int(np.nanargmax(S))
    node = grid.node(k)
    return float(S[k]), node[0] if grid.modes == 1 else node


def normalization(dataset: QuadratureDataset, table: PatternTable, grid: GridSpec, phases=None):
    """Riemann-sum integral of sampled P over ``grid`` and its standard error.

    Returns ``(integral, stderr)``. The sum is exact for band-limited P when the
    step is below pi / b_max; the residual is the mass outside the grid.
    """
    n = len(dataset)
    if n < 2:
        raise ValidationError("normalization error needs N >= 2", "dataset")
    phases = dataset.phi if phases is None else np.ascontiguousarray(phases, dtype=float)
    xi_top = _check_range(dataset, phases, table, grid)
    xi0, h, values = table.dense(xi_top)
    totals = _sample_totals(dataset.x, np.cos(phases), np.sin(phases), 2.0 * grid.re_nodes,
                            2.0 * grid.im_nodes, xi0, 1.0 / h, values) * grid.step ** 2
    return float(np.mean(totals)), float(np.std(totals, ddof=1) / math.sqrt(n))


# -- sweeps ---------------------------------------------------------------------------

def _sweep_point(dataset, spec, grid, filter_table=None, cache_dir=None):
    table = pattern_table_for(spec, dataset, grid, filter_table, cache_dir)
    return max_significance(estimate_grid(dataset, table, grid))


def sweep_width(dataset: QuadratureDataset, qs, ws, grid: GridSpec, cache_dir=None) -> list:
    """One width sweep per q: Sigma(w) maximised over ``grid``."""
    specs = [[FilterSpec(q, w) for w in ws] for q in qs]  # validates everything up front
    out = []
    for q, row in zip(qs, specs):
        res = [_sweep_point(dataset, s, grid, cache_dir=cache_dir) for s in row]
        out.append(SignificanceSweep("w", list(ws), [r[0] for r in res], [r[1] for r in res],
                                     label=f"q={FilterSpec(q, 1.0).q:g}"))
    return out


def sweep_q(dataset: QuadratureDataset, qs, w: float, grid: GridSpec, cache_dir=None) -> SignificanceSweep:
    """Sigma at fixed width across filter exponents."""
    specs = [FilterSpec(q, w) for q in qs]
    res = [_sweep_point(dataset, s, grid, cache_dir=cache_dir) for s in specs]
    return SignificanceSweep("q", [s.q for s in specs], [r[0] for r in res], [r[1] for r in res],
                             label=f"w={w:g}")


def subsample(dataset: QuadratureDataset, size: int, seed: int) -> QuadratureDataset:
    """First ``size`` points of a seeded permutation (sampling without replacement)."""
    if not 1 <= size <= len(dataset):
        raise ValidationError(f"subsample size {size} outside [1, {len(dataset)}]", "sizes")
    order = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.subset(order[:size], subsample_seed=seed, subsample_size=int(size))


def sweep_datasize(dataset: QuadratureDataset, sizes, table: PatternTable, grid: GridSpec,
                   seed: int) -> SignificanceSweep:
    """Sigma versus subsample size with the log-log slope of the trend."""
    sizes = [int(s) for s in sizes]
    if any(not 2 <= s <= len(dataset) for s in sizes):
        raise ValidationError(f"subsample sizes must lie in [2, {len(dataset)}]", "sizes")
    order = np.random.default_rng(seed).permutation(len(dataset))
    res = [max_significance(estimate_grid(dataset.subset(order[:s]), table, grid)) for s in sizes]
    sig = np.array([r[0] for r in res])
    slope = None
    if len(sizes) >= 2 and np.all(sig > 0):
        slope = float(np.polyfit(np.log(sizes), np.log(sig), 1)[0])
    return SignificanceSweep("N", sizes, sig, [r[1] for r in res], label=str(table.spec), slope=slope)
