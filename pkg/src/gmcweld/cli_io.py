"""Command line entry point, run configuration and artifact writers.

Config files are flat ``key = value`` text, one entry per line, with dotted
sections (``beltrami.tol = 1e-10``) and ``#`` comments.  Command line flags
override the file.  Every artifact carries the effective config, the seed,
the grid resolutions and the code version.

Exit status: 0 success, 1 a pipeline stage failed, 2 bad configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from fractions import Fraction
from pathlib import Path

from . import __version__

CSV_SCHEMA = "gmcweld-csv/1"
JSON_SCHEMA = "gmcweld-report/1"
GRID_SCHEMA = "gmcweld-gridfield/1"

SUBCOMMANDS = ("sample", "weld", "events", "walk", "covcheck", "moments")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# parsing of single values

def _real(text):
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"not a number: {text!r}") from None


def _int(text):
    v = _real(text)
    if not float(v).is_integer():
        raise ConfigError(f"not an integer: {text!r}")
    return int(v)


def _reals(text):
    return [_real(p) for p in str(text).split(",") if p.strip()]


def _ints(text):
    return [_int(p) for p in str(text).split(",") if p.strip()]


def _str(text):
    return str(text).strip()


def _pow2(v):
    return v >= 2 and v & (v - 1) == 0


# key: (parser, default, check, message)
SCHEMA = {
    "gamma": (_real, "0.2", lambda v: 0 <= v and v * v < 2, "gamma must lie in [0, sqrt 2)"),
    "rho": (_real, "1/16", lambda v: 0 < v < 1, "rho must lie in (0, 1)"),
    "grid_m": (_int, "4096", _pow2, "grid_m must be a power of two >= 2"),
    "depth": (_int, "10", lambda v: v >= 1, "depth must be >= 1"),
    "seed": (_int, "0", lambda v: v >= 0, "seed must be >= 0"),
    "out_dir": (_str, "out", bool, "out_dir must be non-empty"),
    "sample.replicas": (_int, "4", lambda v: v >= 1, "sample.replicas must be >= 1"),
    "moments.replicas": (_int, "200", lambda v: v >= 2, "moments.replicas must be >= 2"),
    "moments.p": (_reals, "1,2", lambda v: len(v) > 0, "moments.p must list at least one order"),
    "moments.levels": (_ints, "4,5,6,7,8,9,10", lambda v: len(v) >= 2 and min(v) >= 0,
                       "moments.levels must list >= 2 dyadic levels"),
    "covcheck.replicas": (_int, "2000", lambda v: v >= 2, "covcheck.replicas must be >= 2"),
    "covcheck.offsets": (_int, "48", lambda v: v >= 1, "covcheck.offsets must be >= 1"),
    "covcheck.batch": (_int, "500", lambda v: v >= 1, "covcheck.batch must be >= 1"),
    "beltrami.box": (_reals, "-1.5,1.5,-1.5,1.5",
                     lambda v: len(v) == 4 and v[1] > v[0] and v[3] > v[2] and abs((v[1] - v[0]) - (v[3] - v[2])) < 1e-12,
                     "beltrami.box must be a square x0,x1,y0,y1"),
    "beltrami.grid": (_int, "128", lambda v: v >= 8, "beltrami.grid must be >= 8"),
    "beltrami.field_n": (_int, "256", lambda v: v >= 8, "beltrami.field_n must be >= 8"),
    "beltrami.n_list": (_ints, "1,2,4,8,16", lambda v: len(v) > 0 and min(v) >= 1,
                        "beltrami.n_list must list positive truncation orders"),
    "beltrami.tol": (_real, "1e-10", lambda v: v > 0, "beltrami.tol must be > 0"),
    "beltrami.max_iter": (_int, "2000", lambda v: v >= 1, "beltrami.max_iter must be >= 1"),
    "weld.boundary_samples": (_int, "1024", lambda v: v >= 16, "weld.boundary_samples must be >= 16"),
    "weld.gamma_max": (_real, "0.3", lambda v: 0 <= v and v * v < 2, "weld.gamma_max must lie in [0, sqrt 2)"),
    "events.N": (_int, "1", lambda v: v >= 1, "events.N must be >= 1"),
    "events.replicas": (_int, "100", lambda v: v >= 100, "events.replicas must be >= 100"),
    "events.list": (_str, "Shape1,Shape2,Size,Match,Upp,Frac,ShapeRed1", bool, "events.list must be non-empty"),
    "events.t": (_real, "1", lambda v: v >= 0, "events.t must be >= 0"),
    "events.s": (_real, "1", lambda v: v >= 0, "events.s must be >= 0"),
    "events.n": (_int, "1", lambda v: v >= 1, "events.n must be >= 1"),
    "walk.mode": (_str, "abstract", lambda v: v in ("abstract", "field"), "walk.mode must be abstract or field"),
    "walk.N": (_int, "200", lambda v: v >= 1, "walk.N must be >= 1"),
    "walk.steps": (_int, "400", lambda v: v >= 1, "walk.steps must be >= 1"),
    "walk.replicas": (_int, "1000", lambda v: v >= 100, "walk.replicas must be >= 100"),
    "walk.delta_prime": (_real, "0.05", lambda v: 0 < v <= 1, "walk.delta_prime must lie in (0, 1]"),
    "walk.init": (_str, "default", bool, "walk.init must be 'default' or a number"),
    "walk.field_m": (_int, "64", _pow2, "walk.field_m must be a power of two"),
}

CONSTANT_PREFIX = "events.constants."


def _constant_key(key):
    from .event_stats import DEFAULT_CONSTANTS
    parts = key[len(CONSTANT_PREFIX):].split(".")
    if len(parts) != 2 or parts[0] not in DEFAULT_CONSTANTS or parts[1] not in DEFAULT_CONSTANTS[parts[0]]:
        raise ConfigError(f"unknown key {key!r}")
    return parts


def read_config_text(text: str, source: str = "<config>") -> dict:
    """Raw key -> string pairs from flat config text."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        k, v = (p.strip() for p in line.split("=", 1))
        if not k:
            raise ConfigError(f"{source}:{n}: empty key")
        out[k] = v
    return out


def validate(raw: dict) -> dict:
    """Defaults merged with raw strings, each parsed and range checked."""
    cfg = {}
    for k, (parse, default, check, msg) in SCHEMA.items():
        v = parse(raw.get(k, default))
        if not check(v):
            raise ConfigError(f"{msg} (got {v!r})")
        cfg[k] = v
    for k, v in raw.items():
        if k in SCHEMA:
            continue
        if k.startswith(CONSTANT_PREFIX):
            _constant_key(k)
            cfg[k] = _real(v)
            continue
        raise ConfigError(f"unknown key {k!r}")
    if cfg["walk.init"] != "default":
        cfg["walk.init"] = _real(cfg["walk.init"])
    from .event_stats import EVENT_NAMES
    for name in cfg["events.list"].split(","):
        if name.strip() not in EVENT_NAMES:
            raise ConfigError(f"unknown event {name.strip()!r}")
    return cfg


def parse_config(path=None, overrides: dict | None = None) -> dict:
    """Effective config: defaults, then the file at `path`, then `overrides` (raw strings)."""
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw.update(read_config_text(p.read_text(), str(p)))
    raw.update({k: str(v) for k, v in (overrides or {}).items()})
    return validate(raw)


def constant_overrides(cfg: dict) -> dict:
    out = {}
    for k, v in cfg.items():
        if k.startswith(CONSTANT_PREFIX):
            g, name = _constant_key(k)
            out.setdefault(g, {})[name] = v
    return out


# ---------------------------------------------------------------------------
# writers

def _plain(obj):
    """Recursively convert numpy scalars and arrays; non-finite floats become None."""
    import numpy as np
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, complex):
        return [_plain(obj.real), _plain(obj.imag)]
    if isinstance(obj, Fraction):
        return float(obj)
    return obj


def stamp(cfg: dict, grid: dict) -> dict:
    return {"version": __version__, "config": _plain(cfg), "seed": cfg["seed"], "grid": _plain(grid)}


def dumps_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, command: str, cfg: dict, grid: dict, result: dict, files=()):
    doc = {"schema": JSON_SCHEMA, "command": command, **stamp(cfg, grid), "result": result,
           "files": sorted(str(Path(f).name) for f in files)}
    Path(path).write_text(dumps_json(doc))
    return path


def write_csv(path, header, rows, cfg: dict, grid: dict):
    """CSV with two leading '#' lines: schema/version and the run stamp as JSON."""
    buf = io.StringIO()
    buf.write(f"# {CSV_SCHEMA} version={__version__}\n")
    buf.write("# " + json.dumps(_plain(stamp(cfg, grid)), sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])
    Path(path).write_text(buf.getvalue())
    return path


def read_csv(path):
    """Header and rows of a CSV written by write_csv (comment lines skipped)."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def svg_path(points) -> str:
    """Single closed path through complex points, y axis flipped, coordinates rounded to 1e-9."""
    import numpy as np
    z = np.asarray(points, dtype=complex)
    xs = np.round(z.real, 9)
    ys = np.round(-z.imag, 9)
    cmd = [f"M {xs[0]:.9f} {ys[0]:.9f}"] + [f"L {x:.9f} {y:.9f}" for x, y in zip(xs[1:], ys[1:])]
    return " ".join(cmd) + " Z"


def write_svg(path, points, cfg: dict, grid: dict, pad: float = 0.05):
    import numpy as np
    z = np.asarray(points, dtype=complex)
    x0, x1 = float(z.real.min()), float(z.real.max())
    y0, y1 = float((-z.imag).min()), float((-z.imag).max())
    span = max(x1 - x0, y1 - y0, 1e-12)
    m = pad * span
    vb = f"{x0 - m:.9f} {y0 - m:.9f} {x1 - x0 + 2 * m:.9f} {y1 - y0 + 2 * m:.9f}"
    meta = json.dumps(_plain(stamp(cfg, grid)), sort_keys=True).replace("&", "&amp;").replace("<", "&lt;")
    text = (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{vb}">\n'
        f"<metadata>{meta}</metadata>\n"
        f'<path d="{svg_path(z)}" fill="none" stroke="black" stroke-width="{span / 500:.9f}"/>\n'
        "</svg>\n"
    )
    Path(path).write_text(text)
    return path


def write_gridfield(path, g, cfg: dict, grid: dict, meta: dict | None = None):
    """GridField binary (see GridField.to_bytes) plus a JSON sidecar `path + '.json'`."""
    Path(path).write_bytes(g.to_bytes())
    side = {"schema": GRID_SCHEMA, "box": list(g.box), "h": g.h, "shape": list(g.values.shape),
            "layout": "header <8s5d3q (magic, x0, x1, y0, y1, h, ny, nx, has_mask); "
                      "row-major little-endian float64 (re, im) pairs; uint8 mask if has_mask",
            **stamp(cfg, grid)}
    if meta:
        side["solver"] = meta
    Path(str(path) + ".json").write_text(dumps_json(side))
    return path


def read_gridfield(path):
    from .homeo_extension import GridField
    side = json.loads(Path(str(path) + ".json").read_text())
    return GridField.from_bytes(Path(path).read_bytes()), side


# ---------------------------------------------------------------------------
# subcommands

def _out(cfg):
    d = Path(cfg["out_dir"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_sample(cfg):
    import numpy as np
    from .gmc_measures import build_measure
    from .whitenoise_fields import sample_field_stack
    R = cfg["sample.replicas"]
    st = sample_field_stack(cfg["grid_m"], cfg["rho"], cfg["depth"], cfg["seed"], replicas=R)
    tau = build_measure(st, cfg["gamma"])
    grid = {"M": cfg["grid_m"], "depth": cfg["depth"], "layers_H": st.n_steps + 1, "layers_V": st.n_steps}
    d = _out(cfg)
    rows = ((r, i, float(m)) for r in range(R) for i, m in enumerate(tau.masses[r]))
    f1 = write_csv(d / "sample_masses.csv", ["replica", "cell", "mass"], rows, cfg, grid)
    tot = tau.total
    result = {"total_mass": tot, "total_mass_mean": float(tot.mean()),
              "total_mass_se": float(tot.std(ddof=1) / np.sqrt(R)) if R > 1 else None,
              "G": st.G, "variance": tau.normalization["var"]}
    write_json(d / "sample.json", "sample", cfg, grid, result, [f1])
    return result


def cmd_moments(cfg):
    from .gmc_measures import build_measure, ensemble_rows, moment_slope, zeta_p
    from .whitenoise_fields import sample_field_stack
    M = cfg["grid_m"]
    levels = cfg["moments.levels"]
    if max(levels) > int(math.log2(M)):
        raise ConfigError(f"moments.levels exceed log2(grid_m) = {int(math.log2(M))}")
    deltas = [2.0**-k for k in levels]
    st = sample_field_stack(M, cfg["rho"], cfg["depth"], cfg["seed"], replicas=cfg["moments.replicas"], with_v=False)
    masses = build_measure(st, cfg["gamma"]).masses
    fits = []
    for p in cfg["moments.p"]:
        est = moment_slope(masses, p, deltas, cfg["gamma"], seed=cfg["seed"])
        fits.append({"p": p, "slope": est.slope, "ci": est.ci, "zeta_p": zeta_p(p, cfg["gamma"]),
                     "log_moments": est.log_moments, "heavy_tail": est.heavy_tail})
    grid = {"M": M, "depth": cfg["depth"]}
    d = _out(cfg)
    f1 = write_csv(d / "moments_ensemble.csv", ["replica", "scale", "interval", "mass"],
                   ensemble_rows(masses, deltas), cfg, grid)
    result = {"deltas": deltas, "fits": fits}
    write_json(d / "moments.json", "moments", cfg, grid, result, [f1])
    return result


def cmd_covcheck(cfg):
    from .whitenoise_fields import covariance_check, default_offsets
    M = cfg["grid_m"]
    offs = default_offsets(M, cfg["covcheck.offsets"])
    res = covariance_check(M, cfg["rho"], cfg["depth"], cfg["seed"], cfg["covcheck.replicas"], offs,
                           batch=cfg["covcheck.batch"])
    grid = {"M": M, "depth": cfg["depth"]}
    d = _out(cfg)
    rows = [("H", r["offset"], r["dist"], r["oracle"], r["empirical"], r["se"], r["z"], int(r["pass"]))
            for r in res["H"]]
    rows += [("V", r["offset"], r["dist"], r["closed_form"], r["empirical"], r["se"], r["z"], int(r["pass"]))
             for r in res.get("V", [])]
    f1 = write_csv(d / "covcheck.csv", ["kind", "offset", "dist", "analytic", "empirical", "se", "z", "pass"],
                   rows, cfg, grid)
    write_json(d / "covcheck.json", "covcheck", cfg, grid, res, [f1])
    return res


def _weld_config(cfg):
    from .welding_pipeline import WeldingConfig
    return WeldingConfig(gamma=cfg["gamma"], rho=cfg["rho"], M=cfg["grid_m"], depth=cfg["depth"],
                         nx=cfg["beltrami.grid"], n_list=tuple(cfg["beltrami.n_list"]), tol=cfg["beltrami.tol"],
                         max_iter=cfg["beltrami.max_iter"], boundary_samples=cfg["weld.boundary_samples"],
                         gamma_max=cfg["weld.gamma_max"])


def strip_solution_field(sol, rows_per_chunk: int = 32):
    """F at the strip lattice nodes (x_i, y_j) as a GridField over the cell-centred box."""
    import numpy as np
    from .homeo_extension import GridField
    g = sol.grid
    vals = np.empty((g.ny, g.nx), dtype=complex)
    x = g.x
    for a in range(0, g.ny, rows_per_chunk):
        ys = g.y[a:a + rows_per_chunk]
        X, Y = np.meshgrid(x, ys)
        vals[a:a + len(ys)] = sol.F_at_w(X, Y)
    y0 = float(g.y[0])
    return GridField((0.0, 1.0, y0, y0 + 2 * g.Y), g.dy, vals)


def cmd_weld(cfg):
    import numpy as np
    from .homeo_extension import dilatation_field
    from .welding_pipeline import run_welding
    wc = _weld_config(cfg)
    res = run_welding(wc, cfg["seed"])
    grid = {"M": wc.M, "depth": wc.depth, "strip_nx": wc.nx, "strip_ny": 4 * wc.nx,
            "boundary_samples": wc.boundary_samples, "field_n": cfg["beltrami.field_n"]}
    d = _out(cfg)
    curve = res.curve[:-1]
    theta = 2 * np.pi * np.arange(curve.size) / curve.size
    f1 = write_svg(d / "weld_curve.svg", curve, cfg, grid)
    f2 = write_csv(d / "weld_curve.csv", ["theta", "re", "im"],
                   ((float(t), float(z.real), float(z.imag)) for t, z in zip(theta, curve)), cfg, grid)
    mu, _ = dilatation_field(*res.homeos, box=tuple(cfg["beltrami.box"]), n=cfg["beltrami.field_n"])
    f3 = write_gridfield(d / "weld_mu.bin", mu, cfg, grid)
    top = res.solutions[max(wc.n_list)]
    meta = {"n": top.n, "tol": top.tol, "iterations": top.iterations, "residual": top.residual_l2,
            "flagged": top.flagged, "coordinates": "node (x_i, y_j) holds F(exp(2 pi i (x_i + i y_j)))"}
    f4 = write_gridfield(d / "weld_solution.bin", strip_solution_field(top), cfg, grid, meta)
    result = {**res.report(), "radial_deviation": float(np.max(np.abs(np.abs(curve) - 1)))}
    write_json(d / "weld.json", "weld", cfg, grid, result, [f1, f2, f3, f4])
    return result


EVENT_PARAMS = {
    "Shape1": ("t",), "Shape2": ("t",), "ShapeRed1": ("t",), "ShapeRed2": ("t",), "Size": ("t", "s"),
    "Centre": ("N",), "Match": ("N",), "AnnPrime": ("t", "s", "N"), "SizeRed": ("t", "s", "N"),
    "Upp": ("n",), "Frac": ("n",), "Low": ("n",), "Scal": ("N",),
}


def event_worlds(cfg, substeps: int = 4):
    """Lazily built worlds; world r uses replica streams 2r and 2r + 1 of the seed."""
    from .event_stats import World
    from .gmc_measures import build_measure
    from .whitenoise_fields import sample_field_stack
    for r in range(cfg["events.replicas"]):
        st = tuple(sample_field_stack(cfg["grid_m"], cfg["rho"], cfg["depth"], cfg["seed"], substeps=substeps,
                                      first_replica=2 * r + j) for j in (0, 1))
        yield World(tuple(build_measure(s, cfg["gamma"]) for s in st), st, cfg["gamma"], cfg["rho"])


def cmd_events(cfg):
    import numpy as np
    from .event_stats import EventSpec, constants_table, evaluate_event, wilson_ci
    consts = constants_table(constant_overrides(cfg))
    names = [n.strip() for n in cfg["events.list"].split(",")]
    specs = []
    for n in names:
        params = {k: cfg[f"events.{k}"] for k in EVENT_PARAMS[n]}
        specs.append(EventSpec(n, params, consts))
    R = cfg["events.replicas"]
    hits = np.zeros((R, len(specs)), dtype=bool)
    for r, w in enumerate(event_worlds(cfg)):
        for c, sp in enumerate(specs):
            hits[r, c] = evaluate_event(sp, w)
    rows = []
    for c, sp in enumerate(specs):
        k = int(hits[:, c].sum())
        rows.append({"event": sp.name, "params": sp.params, "rate": k / R, "ci": wilson_ci(k, R), "replicas": R,
                     "constants": consts.get(sp.name.rstrip("12"), {})})
    grid = {"M": cfg["grid_m"], "depth": cfg["depth"], "substeps": 4}
    d = _out(cfg)
    f1 = write_csv(d / "events_indicators.csv", ["replica"] + names,
                   ([r] + [int(v) for v in hits[r]] for r in range(R)), cfg, grid)
    result = {"events": rows}
    write_json(d / "events.json", "events", cfg, grid, result, [f1])
    return result


def cmd_walk(cfg):
    from .oscillating_walk import WalkParams, branch_moments, expected_moments, occupation_stats, run_walk
    from .whitenoise_fields import sample_field_stack
    p = WalkParams(cfg["gamma"], cfg["rho"], cfg["walk.N"], cfg["walk.mode"])
    steps = cfg["walk.steps"]
    R = cfg["walk.replicas"]
    init = None if cfg["walk.init"] == "default" else cfg["walk.init"]
    grid = {"N": p.N, "steps": steps}
    if p.mode == "field":
        need = p.N + 2 * steps + 1
        M = cfg["walk.field_m"]
        if R * need * M > 2e8:
            raise ConfigError("field-driven walk too large: reduce walk.replicas, walk.steps, walk.N or walk.field_m")
        stacks = tuple(sample_field_stack(M, p.rho, need, cfg["seed"], replicas=R, first_replica=j * R)
                       for j in (0, 1))
        batch = run_walk(p, init, steps, seed=cfg["seed"], stacks=stacks)
        grid.update({"M": M, "depth": need})
    else:
        batch = run_walk(p, init, steps, n_traces=R, seed=cfg["seed"])
    exp = expected_moments(p)
    result = {"d": p.d, "sigma2": p.sigma2, "mode": p.mode,
              "occupation": occupation_stats(batch, delta_prime=cfg["walk.delta_prime"]),
              "branch_moments": branch_moments(batch),
              "expected_moments": {k: {"mean": m, "var": v} for k, (m, v) in exp.items()}}
    d = _out(cfg)
    tr = batch.trace(0)
    f1 = write_csv(d / "walk_trace.csv", ["m", "Y", "i", "j", "branch"], tr.rows(), cfg, grid)
    write_json(d / "walk.json", "walk", cfg, grid, result, [f1])
    return result


COMMANDS = {"sample": cmd_sample, "weld": cmd_weld, "events": cmd_events, "walk": cmd_walk,
            "covcheck": cmd_covcheck, "moments": cmd_moments}


def dispatch(command: str, cfg: dict) -> int:
    if command not in COMMANDS:
        raise ConfigError(f"unknown subcommand {command!r}")
    COMMANDS[command](cfg)
    return 0


# ---------------------------------------------------------------------------
# entry point

def _threads():
    v = os.environ.get("GMCWELD_THREADS")
    if v is None:
        return None
    try:
        n = int(v)
    except ValueError:
        raise ConfigError(f"GMCWELD_THREADS must be a positive integer (got {v!r})") from None
    if n < 1:
        raise ConfigError(f"GMCWELD_THREADS must be a positive integer (got {v!r})")
    return n


def apply_thread_cap(n):
    """Cap BLAS / OpenMP pools; effective only before numpy is first imported."""
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--gamma")
    common.add_argument("--rho")
    common.add_argument("--grid-m", dest="grid_m")
    common.add_argument("--depth")
    common.add_argument("--seed")
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="any config key, e.g. --set beltrami.tol=1e-8 (repeatable)")
    parser = argparse.ArgumentParser(prog="gmcweld", description="GMC welding experiments")
    parser.add_argument("--version", action="version", version=f"gmcweld {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def overrides_from_args(args) -> dict:
    out = {}
    for k in ("gamma", "rho", "grid_m", "depth", "seed", "out_dir"):
        v = getattr(args, k)
        if v is not None:
            out[k] = v
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE (got {item!r})")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        apply_thread_cap(_threads())
        cfg = parse_config(args.config, overrides_from_args(args))
    except ConfigError as err:
        print(f"gmcweld: config error: {err}", file=sys.stderr)
        return 2
    try:
        return dispatch(args.command, cfg)
    except ConfigError as err:
        print(f"gmcweld: config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - any stage failure maps to status 1
        print(f"gmcweld: {args.command} failed: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
