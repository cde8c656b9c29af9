"""Text formats for datasets, grids, sweeps, traces, configs and run manifests.

Numbers are written with ``%.17g`` so every file re-parses to identical floats.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__
from .errors import QuasiprobError, ValidationError
from .estimator import GridSpec, QuasiprobGrid, SignificanceSweep
from .filters import FilterSpec
from .gaussian_model import GaussianStateParams, QuadratureDataset, schedule_from_dict
from .phase_pipeline import DcTrace, PhaseFit

FMT = "%.17g"


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_jsonable) + "\n"


def _jsonable(obj):
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _normalise(obj):
    """Round-trip through JSON so provenance compares equal after re-reading."""
    return json.loads(json.dumps(obj, sort_keys=True, default=_jsonable))


# -- datasets ------------------------------------------------------------------------

def write_dataset(path, ds: QuadratureDataset) -> None:
    cols = [ds.x, ds.phi] + ([ds.t] if ds.t is not None else [])
    names = "x,phi" + (",t" if ds.t is not None else "")
    header = "provenance " + json.dumps(ds.provenance, sort_keys=True, default=_jsonable) + "\n" + names
    np.savetxt(path, np.column_stack(cols), delimiter=",", fmt=FMT, header=header)


def read_dataset(path) -> QuadratureDataset:
    path = Path(path)
    provenance, names = {}, None
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            body = line[1:].strip()
            if body.startswith("provenance "):
                provenance = json.loads(body[len("provenance "):])
            elif body:
                names = [n.strip() for n in body.split(",")]
    if names is None:
        raise ValidationError(f"{path}: missing column header (x,phi[,t])", "data")
    if names[:2] != ["x", "phi"] or len(names) > 3 or (len(names) == 3 and names[2] != "t"):
        raise ValidationError(f"{path}: columns must be x,phi[,t]; got {names}", "data")
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    if data.shape[1] != len(names):
        raise ValidationError(f"{path}: expected {len(names)} columns, found {data.shape[1]}", "data")
    t = data[:, 2].copy() if len(names) == 3 else None
    if not provenance:
        provenance = {"source": "file", "path": path.name}
    return QuadratureDataset(data[:, 0].copy(), data[:, 1].copy(), t, provenance)


# -- grids ---------------------------------------------------------------------------

def _sidecar(path) -> Path:
    return Path(path).with_suffix(".json")


def write_grid(path, grid: QuasiprobGrid, extra: dict | None = None) -> None:
    """Grid rows in row-major node order plus a JSON sidecar with the metadata."""
    cols, names = [], []
    mesh = np.meshgrid(*[ax for g in grid.grids for ax in (g.re_nodes, g.im_nodes)], indexing="ij")
    for m in range(grid.modes):
        suffix = "" if grid.modes == 1 else f"_{m + 1}"
        names += [f"re_alpha{suffix}", f"im_alpha{suffix}"]
        cols += [mesh[2 * m].ravel(), mesh[2 * m + 1].ravel()]
    names += ["P", "sigma", "S"]
    cols += [grid.P.ravel(), grid.sigma.ravel(), grid.S.ravel()]
    np.savetxt(path, np.column_stack(cols), delimiter=",", fmt=FMT, header=",".join(names))
    meta = {"filters": [str(s) for s in grid.specs], "grids": [str(g) for g in grid.grids], "N": grid.n,
            "provenance": grid.provenance, **(extra or {})}
    _sidecar(path).write_text(_dumps(meta))


def read_grid(path) -> QuasiprobGrid:
    meta = json.loads(_sidecar(path).read_text())
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    grids = tuple(GridSpec.parse(g) for g in meta["grids"])
    specs = tuple(FilterSpec.parse(s) for s in meta["filters"])
    return QuasiprobGrid(grids, data[:, -3], data[:, -2], specs, int(meta["N"]), meta["provenance"])


# -- sweeps --------------------------------------------------------------------------

def write_sweep(path, sweep: SignificanceSweep) -> None:
    header = (f"sweep axis={sweep.axis} label={sweep.label} slope={sweep.slope!r}\n"
              "axis_value,Sigma,argmax_re,argmax_im")
    np.savetxt(path, np.column_stack([sweep.values, sweep.sigma_max, sweep.argmax.real, sweep.argmax.imag]),
               delimiter=",", fmt=FMT, header=header)


def read_sweep(path) -> SignificanceSweep:
    with open(path) as fh:
        head = fh.readline()[1:].split()
    fields = dict(item.split("=", 1) for item in head[1:])
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    slope = None if fields["slope"] == "None" else float(fields["slope"])
    return SignificanceSweep(fields["axis"], data[:, 0], data[:, 1], data[:, 2] + 1j * data[:, 3],
                             fields["label"], slope)


# -- traces and fits -----------------------------------------------------------------

def write_trace(path, trace: DcTrace) -> None:
    header = f"trace slope={trace.slope} direction={trace.direction}\nt,i"
    np.savetxt(path, np.column_stack([trace.t, trace.current]), delimiter=",", fmt=FMT, header=header)


def read_trace(path, direction: int | None = None) -> DcTrace:
    slope, found = 0, 1
    with open(path) as fh:
        first = fh.readline()
    if first.startswith("# trace"):
        fields = dict(item.split("=", 1) for item in first[1:].split()[1:])
        slope, found = int(fields.get("slope", 0)), int(fields.get("direction", 1))
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    if data.shape[1] != 2:
        raise ValidationError(f"{path}: DC trace needs two columns t,i", "trace")
    return DcTrace(data[:, 0].copy(), data[:, 1].copy(), slope, found if direction is None else direction)


def write_fit(path, fit: PhaseFit) -> None:
    Path(path).write_text(_dumps(fit.to_dict()))


def read_fit(path) -> PhaseFit:
    return PhaseFit.from_dict(json.loads(Path(path).read_text()))


# -- key-value configs ----------------------------------------------------------------

def parse_key_values(text: str, where: str = "config") -> dict:
    """``key = value`` pairs, one per line or comma separated; ``#`` starts a comment."""
    out = {}
    for raw in text.replace(",", "\n").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{where}: expected key=value, got {line!r}", where)
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _number(value: str, field: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ValidationError(f"{field} must be a number, got {value!r}", field) from None


def load_state(spec: str):
    """State parameters and phase schedule from a key-value file path or inline text.

    Keys: squeezing_db | squeeze_parameter, squeeze_angle, displacement_re,
    displacement_im, efficiency, angle_jitter_deg, and schedule (uniform | locked |
    sweep) with schedule.k, schedule.span, schedule.coefficients (space separated
    c d e f g), schedule.t_start, schedule.t_stop.
    """
    path = Path(spec)
    text = path.read_text() if path.exists() else spec
    kv = parse_key_values(text, "state")
    sched = {"kind": kv.pop("schedule", "uniform")}
    for key in [k for k in kv if k.startswith("schedule.")]:
        name = key.split(".", 1)[1]
        value = kv.pop(key)
        sched[name] = [_number(v, key) for v in value.split()] if name == "coefficients" else _number(value, key)
    state = {k: _number(v, f"state.{k}") for k, v in kv.items()}
    return GaussianStateParams.from_dict(state), schedule_from_dict(sched)


# -- manifests and errors ---------------------------------------------------------------

def write_manifest(out_dir, subcommand: str, config: dict, inputs, outputs) -> Path:
    out_dir = Path(out_dir)
    manifest = {
        "tool": "quasiprob",
        "version": __version__,
        "subcommand": subcommand,
        "config": config,
        "inputs": {Path(p).name: file_sha256(p) for p in inputs},
        "outputs": {Path(p).name: file_sha256(p) for p in outputs},
    }
    path = out_dir / "manifest.json"
    path.write_text(_dumps(manifest))
    return path


def error_record(exc: BaseException) -> dict:
    record = {"error": type(exc).__name__, "message": str(exc)}
    if getattr(exc, "field", None):
        record["field"] = exc.field
    if isinstance(exc, QuasiprobError) and getattr(exc, "offending", None) is not None:
        record["offending"] = _normalise(exc.offending)
    if getattr(exc, "diagnostics", None):
        record["diagnostics"] = _normalise(exc.diagnostics)
    return record


def dumps(obj) -> str:
    return _dumps(obj)
