"""Command-line entry point: ``quasiprob <subcommand> [options]``.

Every run writes its outputs plus ``manifest.json`` (config echo, input and output
hashes, version) into ``--out``. Errors print a JSON record to stderr and exit
nonzero (2 for invalid input, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import QuasiprobError, ValidationError
from .estimator import (GridSpec, estimate_grid, max_significance, normalization, pattern_table_for,
                        sweep_datasize, sweep_width)
from .filters import FilterSpec, build_filter_table, cache_root
from .gaussian_model import QuadratureDataset, UniformRandom, analytic_p_omega, sample_dataset
from .pattern import compute_chi_samples
from .phase_pipeline import (DEFAULT_TOLERANCE, PhaseFit, assign_phases, fit_dc_phase, plm_baseline,
                             simulate_dc_trace, uniformity_check, uniformize)


def _floats(text: str, field: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"{field} must be a comma separated list of numbers, got {text!r}", field) from None


def _count(text: str, field: str = "n") -> int:
    try:
        value = float(text)
    except ValueError:
        raise ValidationError(f"{field} must be a count, got {text!r}", field) from None
    if value != int(value) or value < 1:
        raise ValidationError(f"{field} must be a positive integer, got {text!r}", field)
    return int(value)


def _filter(text: str) -> FilterSpec:
    try:
        return FilterSpec.parse(text)
    except ValidationError as exc:
        exc.field = exc.field or "filter"
        raise


def _grid_for(args, dataset: QuadratureDataset) -> GridSpec:
    if args.grid:
        return GridSpec.parse(args.grid)
    # centre on the displacement estimate mean(x e^{i phi}), which is where P peaks
    return GridSpec.around(complex(np.mean(dataset.x * np.exp(1j * dataset.phi))))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "cache")}


# -- subcommands ---------------------------------------------------------------------

def cmd_simulate(args):
    state, schedule = io.load_state(args.state)
    ds = sample_dataset(state, schedule, _count(args.n), args.seed)
    path = _out(args) / "dataset.csv"
    io.write_dataset(path, ds)
    return [], [path], {"N": len(ds)}


def cmd_simulate_trace(args):
    c = _floats(args.coefficients, "coefficients")
    if len(c) != 5:
        raise ValidationError("coefficients needs five values c,d,e,f,g", "coefficients")
    truth = PhaseFit(args.amplitude, args.offset, tuple(c))
    trace = simulate_dc_trace(truth, args.noise, args.duration, args.seed, rate=args.rate)
    path = _out(args) / "trace.csv"
    io.write_trace(path, trace)
    return [], [path], {"samples": len(trace)}


def cmd_filter_table(args):
    spec = _filter(args.filter)
    table = build_filter_table(spec, nodes=args.nodes, cache_dir=args.cache)
    path = _out(args) / "filter_table.csv"
    table.save(path)
    return [], [path], {"filter": str(spec), "b_cut": table.b_cut}


def cmd_pattern_table(args):
    spec = _filter(args.filter)
    table = compute_chi_samples(spec, args.xi_max, build_filter_table(spec, cache_dir=args.cache),
                                cache_dir=args.cache)
    path = _out(args) / "pattern_table.csv"
    table.save(path)
    print(table.summary())
    return [], [path], {"chi0": table.chi0, "nodes": int(table.samples.size)}


def cmd_sample(args):
    ds = io.read_dataset(args.data)
    spec = _filter(args.filter)
    grid = _grid_for(args, ds)
    table = pattern_table_for(spec, ds, grid, cache_dir=args.cache)
    result = estimate_grid(ds, table, grid)
    summary = {"grid": str(grid), "filter": str(spec), "N": len(ds)}
    if len(ds) >= 2:
        sig, node = max_significance(result)
        summary.update(Sigma=sig, argmax=[node.real, node.imag])
        if args.normalization:
            value, err = normalization(ds, table, grid)
            summary.update(normalization=value, normalization_stderr=err)
    path = _out(args) / "grid.csv"
    io.write_grid(path, result, {"summary": summary})
    print(json.dumps(summary, sort_keys=True))
    return [args.data], [path, path.with_suffix(".json")], summary


def cmd_sweep_w(args):
    ds = io.read_dataset(args.data)
    grid = _grid_for(args, ds)
    qs = [math.inf if v.strip() in ("inf", "oo") else float(v) for v in args.q.split(",")]
    sweeps = sweep_width(ds, qs, _floats(args.w, "w"), grid, cache_dir=args.cache)
    out = _out(args)
    paths = []
    for s in sweeps:
        path = out / f"sweep_w_{s.label.replace('=', '')}.csv"
        io.write_sweep(path, s)
        paths.append(path)
    return [args.data], paths, {"grid": str(grid)}


def cmd_sweep_n(args):
    ds = io.read_dataset(args.data)
    spec = _filter(args.filter)
    grid = _grid_for(args, ds)
    sizes = [int(v) for v in _floats(args.sizes, "sizes")]
    table = pattern_table_for(spec, ds, grid, cache_dir=args.cache)
    sweep = sweep_datasize(ds, sizes, table, grid, args.seed)
    path = _out(args) / "sweep_n.csv"
    io.write_sweep(path, sweep)
    print(json.dumps({"slope": sweep.slope, "Sigma": sweep.sigma_max.tolist()}))
    return [args.data], [path], {"slope": sweep.slope}


def cmd_phase_fit(args):
    trace = io.read_trace(args.trace, args.direction)
    fit = fit_dc_phase(trace)
    out = _out(args)
    path = out / "fit.json"
    io.write_fit(path, fit)
    inputs, outputs = [args.trace], [path]
    summary = {"r2": fit.r2, "iterations": fit.iterations, "monotone": fit.monotone}
    if args.data:
        ds = io.read_dataset(args.data)
        if ds.t is None:
            raise ValidationError("phase assignment needs a dataset with timestamps (x,phi,t)", "data")
        assigned = assign_phases(fit, ds.t)
        phased = QuadratureDataset(ds.x[assigned.index], assigned.phi, ds.t[assigned.index],
                                   {**ds.provenance, "phases": "fitted", "rejected": assigned.rejected})
        dpath = out / "dataset.csv"
        io.write_dataset(dpath, phased)
        inputs.append(args.data)
        outputs.append(dpath)
        summary["rejected"] = assigned.rejected
    print(json.dumps(summary, sort_keys=True))
    return inputs, outputs, summary


def cmd_uniformize(args):
    ds = io.read_dataset(args.data)
    out = uniformize(ds, args.seed, args.tolerance, min_fraction=args.min_fraction, source=args.source)
    path = _out(args) / "dataset.csv"
    io.write_dataset(path, out)
    ks, ok = uniformity_check(out)
    summary = {**out.provenance["uniformized"], "ks": ks, "uniform": ok}
    print(json.dumps(summary, sort_keys=True))
    return [args.data], [path], summary


def cmd_uniformity_check(args):
    ds = io.read_dataset(args.data)
    ks, ok = uniformity_check(ds)
    path = _out(args) / "uniformity.json"
    result = {"N": len(ds), "ks": ks, "threshold": 1.63 / math.sqrt(len(ds)), "uniform": ok}
    path.write_text(io.dumps(result))
    print(json.dumps(result, sort_keys=True))
    return [args.data], [path], result


def cmd_plm_compare(args):
    state, _ = io.load_state(args.state)
    spec = _filter(args.filter)
    n = _count(args.n)
    grid = GridSpec.parse(args.grid) if args.grid else GridSpec.around(
        math.sqrt(state.efficiency) * state.displacement, 3.0, 0.2)
    cpm = sample_dataset(state, UniformRandom(), n, args.seed)
    plm = plm_baseline(state, args.k, n, args.seed + 1)
    probe = QuadratureDataset(plm.data.x, plm.estimator_phases)
    table = pattern_table_for(spec, [cpm, probe], grid, cache_dir=args.cache)
    oracle = analytic_p_omega(state, spec, grid.alphas)
    out = _out(args)
    summary, paths = {"grid": str(grid), "filter": str(spec), "N": n, "k": args.k}, []
    for name, data, phases in (("cpm", cpm, None), ("plm", plm.data, plm.estimator_phases)):
        result = estimate_grid(data, table, grid, phases=phases)
        sig, node = max_significance(result)
        violations = int(np.sum(np.abs(result.P - oracle) > 5.0 * result.sigma))
        summary[name] = {"Sigma": sig, "argmax": [node.real, node.imag], "oracle_5sigma_violations": violations}
        path = out / f"grid_{name}.csv"
        io.write_grid(path, result)
        paths += [path, path.with_suffix(".json")]
    print(json.dumps(summary, sort_keys=True))
    spath = out / "compare.json"
    spath.write_text(io.dumps(summary))
    return [], paths + [spath], summary


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quasiprob", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add(name, func, help_text, data=False, filt=False, grid=False, seed=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--cache", default=None, help="cache directory (default: $QUASIPROB_CACHE)")
        if data:
            p.add_argument("--data", required=True, help="dataset file (x,phi[,t])")
        if filt:
            p.add_argument("--filter", default="q=8,w=1.3", help="filter spec, e.g. q=8,w=1.3 or q=inf,w=1.3")
        if grid:
            p.add_argument("--grid", default=None, help="remin,remax,immin,immax,step")
        if seed:
            p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        return p

    p = add("simulate", cmd_simulate, "simulate a homodyne dataset", seed=True)
    p.add_argument("--state", required=True, help="state config file or inline key=value list")
    p.add_argument("--n", required=True)

    p = add("simulate-trace", cmd_simulate_trace, "simulate a DC interference trace", seed=True)
    p.add_argument("--coefficients", required=True, help="c,d,e,f,g of the phase polynomial")
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--offset", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--duration", type=float, default=0.1)
    p.add_argument("--rate", type=float, default=1e5)

    p = add("filter-table", cmd_filter_table, "tabulate the radial filter", filt=True)
    p.add_argument("--nodes", type=int, default=4096)

    p = add("pattern-table", cmd_pattern_table, "tabulate chi at Nyquist nodes", filt=True)
    p.add_argument("--xi-max", type=float, required=True)

    p = add("sample", cmd_sample, "sample P, sigma and S on a grid", data=True, filt=True, grid=True)
    p.add_argument("--normalization", action="store_true", help="also integrate P over the grid")

    p = add("sweep-w", cmd_sweep_w, "maximal significance versus filter width", data=True, grid=True)
    p.add_argument("--q", default="4,8,inf")
    p.add_argument("--w", default="0.6,0.8,1.0,1.3,1.6,1.8")

    p = add("sweep-n", cmd_sweep_n, "maximal significance versus data size", data=True, filt=True, grid=True,
            seed=True)
    p.add_argument("--sizes", required=True)

    p = add("phase-fit", cmd_phase_fit, "fit the DC trace phase and assign phases")
    p.add_argument("--trace", required=True)
    p.add_argument("--data", default=None, help="timestamped dataset to receive fitted phases")
    p.add_argument("--direction", type=int, choices=(1, -1), default=None)

    p = add("uniformize", cmd_uniformize, "select a uniform-phase subset", data=True, seed=True)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--min-fraction", type=float, default=0.1)
    p.add_argument("--source", choices=("prng", "vacuum"), default="prng")

    add("uniformity-check", cmd_uniformity_check, "KS test of the phase distribution", data=True)

    p = add("plm-compare", cmd_plm_compare, "continuous versus phase-locked reconstruction", filt=True, grid=True,
            seed=True)
    p.add_argument("--state", required=True)
    p.add_argument("--n", required=True)
    p.add_argument("--k", type=int, default=21)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.cache is None:
        root = cache_root()
        args.cache = str(root) if root is not None else None
    try:
        inputs, outputs, summary = args.func(args)
        io.write_manifest(args.out, args.subcommand, {**_config(args), "summary": summary}, inputs, outputs)
        return 0
    except (QuasiprobError, OSError, ValueError) as exc:
        record = io.error_record(exc)
        record["subcommand"] = args.subcommand
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        try:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "error.json").write_text(io.dumps(record))
        except OSError:
            pass
        return 2 if isinstance(exc, ValidationError) else 1


if __name__ == "__main__":
    sys.exit(main())
