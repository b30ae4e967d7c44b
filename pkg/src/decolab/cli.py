"""Command-line driver: ``decolab <subcommand> --config <path> [--output-dir <path>]``.

Subcommands
-----------
evaluate    sample the closed-form density matrices
evolve      integrate the master equation
compare     both of the above, with the L-infinity deviation per snapshot
timescales  tabulate the decoherence timescales for a separation
sweep       repeat one of the above over a list of parameter values

Exit codes: 0 success, 2 config syntax or schema, 3 config semantics or
stability, 4 numerical instability, 5 I/O.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (CoherenceSeries, InsufficientDecay, coherence_series, fit_decay, moments,
                       pointer_fit, purity, spin_coherence, to_momentum)
from .analytic import exact_position_matrix, spin_coherence_exact, timescales
from .evolve import (IntegratorConfig, MasterEquationSpec, NumericalInstability,
                     StabilityError, evolve, exact_solution_residual, stable_dt)
from .model import (BOLTZMANN_SI, HBAR_SI, Grid, PhysicalParams, SpinSector, TimescaleQuery,
                    gaussian_initial_state, sizing_half_width)

EXIT_OK = 0
EXIT_SYNTAX = 2
EXIT_SEMANTIC = 3
EXIT_NUMERICAL = 4
EXIT_IO = 5

KINDS = ("evaluate", "evolve", "compare", "timescales", "sweep")
ORACLE_TOLERANCE = 1e-4
RESIDUAL_TOLERANCE = 1e-6
TRACE_TOLERANCE = 1e-6
HERMITICITY_TOLERANCE = 1e-8
# order of magnitude commonly quoted for a 1 g body at 300 K and 1 cm
QUOTED_MACROSCOPIC_ORDER = 1e-40


class ConfigSyntaxError(ValueError):
    exit_code = EXIT_SYNTAX


class ConfigSemanticError(ValueError):
    exit_code = EXIT_SEMANTIC


_NUM = (int, float)
# key: (accepted types, default); a default of None means optional
SCHEMA: dict[str, tuple[tuple[type, ...], object]] = {
    "mass": (_NUM, 1.0),
    "coupling": (_NUM, 0.5),
    "damping": (_NUM, 1e-3),
    "thermal_energy": (_NUM, None),
    "temperature": (_NUM, None),
    "packet_width": (_NUM, 1.0),
    "hbar": (_NUM, None),
    "boltzmann": (_NUM, None),
    "cutoff": (_NUM, None),
    "unit_system": ((str,), "natural"),
    "sector": ((str,), "plus"),
    "population": (_NUM, 0.5),
    "grid_points": ((int,), 256),
    "x_min": (_NUM, None),
    "x_max": (_NUM, None),
    "halfwidth": ((int,), None),
    "frame": ((str,), "comoving"),
    "t_final": (_NUM, 1.0),
    "dt": (_NUM, None),
    "stability_factor": (_NUM, 0.1),
    "snapshots": ((int, list), 5),
    "separation_x": (_NUM, None),
    "separation_p": (_NUM, None),
    "cross_reference": ((bool,), False),
    "sweep_parameter": ((str,), None),
    "sweep_values": ((list,), None),
    "sweep_kind": ((str,), "timescales"),
    "write_snapshots": ((bool,), True),
    "seed": ((int,), 0),
}
PARAM_KEYS = ("mass", "coupling", "damping", "thermal_energy", "packet_width", "hbar",
              "boltzmann", "cutoff", "temperature")


def _line_of(text: str, key: str) -> int | None:
    for number, line in enumerate(text.splitlines(), start=1):
        if f'"{key}"' in line:
            return number
    return None


def parse_config(text: str) -> dict:
    """Validate a flat JSON config and fill in defaults.

    Raises :class:`ConfigSyntaxError` for malformed JSON, unknown keys or wrong
    value types, and :class:`ConfigSemanticError` for values that break
    physical or numerical constraints.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigSyntaxError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigSyntaxError("config must be a JSON object")
    config = {}
    for key, value in raw.items():
        if key not in SCHEMA:
            where = _line_of(text, key)
            raise ConfigSyntaxError(f"unknown key {key!r}" + (f" (line {where})" if where else ""))
        types, _ = SCHEMA[key]
        ok = isinstance(value, types) and not (isinstance(value, bool) and bool not in types)
        if value is not None and not ok:
            raise ConfigSyntaxError(f"key {key!r} expects {'/'.join(t.__name__ for t in types)}, "
                                    f"got {type(value).__name__}")
        config[key] = value
    for key, (_, default) in SCHEMA.items():
        config.setdefault(key, default)
    _check_semantics(config)
    return config


def _check_semantics(config: dict):
    try:
        SpinSector(config["sector"])
    except ValueError:
        raise ConfigSemanticError(f"unknown sector {config['sector']!r}") from None
    if config["frame"] not in ("comoving", "lab"):
        raise ConfigSemanticError(f"unknown frame {config['frame']!r}")
    if config["unit_system"] not in ("natural", "si"):
        raise ConfigSemanticError(f"unknown unit system {config['unit_system']!r}")
    if config["sweep_kind"] not in KINDS[:-1]:
        raise ConfigSemanticError(f"sweep_kind must be one of {KINDS[:-1]}")
    if config["thermal_energy"] is not None and config["temperature"] is not None:
        raise ConfigSemanticError("give either thermal_energy or temperature, not both")
    snaps = config["snapshots"]
    if isinstance(snaps, int) and snaps < 2:
        raise ConfigSemanticError("snapshots must be at least 2")
    if isinstance(snaps, list) and not all(isinstance(s, _NUM) for s in snaps):
        raise ConfigSyntaxError("snapshots list must contain numbers")
    if config["t_final"] < 0:
        raise ConfigSemanticError("t_final must be non-negative")
    if config["grid_points"] < 16:
        raise ConfigSemanticError("grid_points must be at least 16")
    for key in ("separation_x", "separation_p"):
        if config[key] is not None and config[key] <= 0:
            raise ConfigSemanticError(f"{key} must be positive")
    # build the parameter object early so its invariants are enforced here
    try:
        params = build_params(config)
    except ValueError as exc:
        raise ConfigSemanticError(str(exc)) from None
    if config["dt"] is not None:
        grid = build_grid(config, params)
        spec = MasterEquationSpec(SpinSector(config["sector"]), params)
        halfwidth = config["halfwidth"] if config["halfwidth"] is not None else grid.n - 1
        bound = stable_dt(spec, grid, halfwidth, config["stability_factor"])
        if config["dt"] > bound:
            raise ConfigSemanticError(
                f"dt = {config['dt']:g} violates the stability bound {bound:g} "
                f"(stability_factor = {config['stability_factor']:g})")


def build_params(config: dict) -> PhysicalParams:
    si = config["unit_system"] == "si"
    hbar = config["hbar"] if config["hbar"] is not None else (HBAR_SI if si else 1.0)
    kB = config["boltzmann"] if config["boltzmann"] is not None else (BOLTZMANN_SI if si else 1.0)
    if config["temperature"] is not None:
        kT = kB * config["temperature"]
    else:
        kT = config["thermal_energy"] if config["thermal_energy"] is not None else 10.0
    return PhysicalParams(
        mass=float(config["mass"]), coupling=float(config["coupling"]),
        damping=float(config["damping"]), thermal_energy=float(kT),
        packet_width=float(config["packet_width"]), hbar=float(hbar), boltzmann=float(kB),
        cutoff=math.inf if config["cutoff"] is None else float(config["cutoff"]),
        unit_system=config["unit_system"])


def build_grid(config: dict, params: PhysicalParams) -> Grid:
    if config["x_min"] is None or config["x_max"] is None:
        half = sizing_half_width(params, config["t_final"])
        lower, upper = -half, half
    else:
        lower, upper = float(config["x_min"]), float(config["x_max"])
    try:
        return Grid(config["grid_points"], lower, upper)
    except ValueError as exc:
        raise ConfigSemanticError(str(exc)) from None


def snapshot_times(config: dict) -> tuple[float, ...]:
    snaps = config["snapshots"]
    if isinstance(snaps, int):
        return tuple(float(t) for t in np.linspace(0.0, config["t_final"], snaps))
    return tuple(float(t) for t in snaps)


# --- output helpers ---------------------------------------------------------------------

def _clean(value):
    """JSON-safe copy: non-finite floats become explicit string sentinels."""
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return [_clean(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "+inf" if v > 0 else "-inf"
        return v
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def report_json(report: dict) -> str:
    return json.dumps(_clean(report), indent=2, sort_keys=True) + "\n"


def write_snapshot_csv(path: Path, rho) -> None:
    """Rows ``i, j, x_i, x_j, re, im`` with 17 significant digits."""
    values = rho.values
    n = rho.n
    x = rho.grid.points
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    with open(path, "w", newline="") as fh:
        fh.write("i,j,x_i,x_j,re,im\n")
        table = np.column_stack([i.ravel(), j.ravel(), x[i.ravel()], x[j.ravel()],
                                 values.real.ravel(), values.imag.ravel()])
        np.savetxt(fh, table, fmt=["%d", "%d", "%.17g", "%.17g", "%.17g", "%.17g"],
                   delimiter=",")


def write_series_csv(path: Path, times, magnitudes, header=("t", "magnitude")) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, np.column_stack([times, magnitudes]), fmt="%.17g", delimiter=",")


def read_snapshot_csv(path: Path) -> np.ndarray:
    table = np.loadtxt(path, delimiter=",", skiprows=1)
    n = int(round(math.sqrt(table.shape[0])))
    return (table[:, 4] + 1j * table[:, 5]).reshape(n, n)


# --- experiments ------------------------------------------------------------------------

@dataclass
class Context:
    config: dict
    params: PhysicalParams
    grid: Grid
    out: Path | None


def _snapshot_summary(t: float, rho, params: PhysicalParams) -> dict:
    entry = {"t": t, "trace": rho.trace().real}
    if rho.sector.is_diagonal:
        mean, var = moments(rho)
        entry.update(mean_x=mean, variance_x=var, purity=purity(rho),
                     hermiticity=rho.hermiticity_error())
        k, b = rho.phase_momenta
        if k == b:
            pm, pv = moments(to_momentum(rho))
            entry.update(mean_p=pm, variance_p=pv)
    else:
        entry["spin_coherence"] = spin_coherence(rho)
    return entry


def _emit_snapshots(ctx: Context, snaps, prefix="snapshot") -> list[str]:
    names = []
    if ctx.out is None or not ctx.config["write_snapshots"]:
        return names
    for index, (_, rho) in enumerate(snaps):
        name = f"{prefix}_{index:04d}.csv"
        write_snapshot_csv(ctx.out / name, rho)
        names.append(name)
    return names


def _run_numeric(ctx: Context):
    params = ctx.params
    cfg = ctx.config
    sector = SpinSector(cfg["sector"])
    spec = MasterEquationSpec(sector, params)
    halfwidth = cfg["halfwidth"] if cfg["halfwidth"] is not None else ctx.grid.n - 1
    dt = cfg["dt"] if cfg["dt"] is not None else stable_dt(spec, ctx.grid, halfwidth,
                                                           cfg["stability_factor"])
    integ = IntegratorConfig(dt=dt, t_final=cfg["t_final"], snapshot_times=snapshot_times(cfg),
                             stability_factor=cfg["stability_factor"], frame=cfg["frame"],
                             halfwidth=halfwidth)
    rho0 = gaussian_initial_state(params, ctx.grid, sector, population=cfg["population"],
                                  halfwidth=halfwidth)
    return evolve(rho0, spec, integ), dt


def _position_fit(ctx: Context, snaps) -> dict | None:
    sep = ctx.config["separation_x"]
    if sep is None or len(snaps) < 4 or not snaps[0][1].sector.is_diagonal:
        return None
    series = coherence_series(snaps, sep)
    if ctx.out is not None:
        write_series_csv(ctx.out / "coherence_x.csv", series.times, series.magnitudes)
    entry = {"separation": sep, "times": series.times, "magnitudes": series.magnitudes}
    try:
        fit = fit_decay(series, "exp_t")
        entry["fit"] = {"model": fit.model, "rate": fit.rate, "residual": fit.residual,
                        "window": fit.window}
        rate = 2 * ctx.params.mass * ctx.params.damping * ctx.params.thermal_energy \
            * sep**2 / ctx.params.hbar**2
        entry["predicted_rate"] = rate
    except InsufficientDecay as exc:
        entry["fit"] = None
        entry["fit_error"] = str(exc)
    return entry


def _spin_fit(ctx: Context, snaps) -> dict:
    times = np.array([t for t, _ in snaps])
    coh = np.array([spin_coherence(rho) for _, rho in snaps])
    entry = {"times": times, "spin_coherence": coh}
    if ctx.out is not None:
        write_series_csv(ctx.out / "spin_coherence.csv", times, coh)
    if ctx.config["cross_reference"]:
        # the zero-temperature coherence is the packet-overlap factor alone; it is
        # known in closed form, and a numeric run at kT = 0 would need a band
        # growing like exp(gamma t)
        quiet = spin_coherence_exact(times, ctx.params.with_values(thermal_energy=0.0))
        bath = coh / quiet
        entry["bath_factor"] = bath
        if ctx.out is not None:
            write_series_csv(ctx.out / "bath_factor.csv", times, bath)
        series = CoherenceSeries(0.0, times, bath / bath[0], "position", "spin")
        try:
            fit = fit_decay(series, "exp_t3")
            entry["fit"] = {"model": fit.model, "rate": fit.rate, "residual": fit.residual,
                            "window": fit.window, "spin_time": fit.timescale}
        except InsufficientDecay as exc:
            entry["fit"] = None
            entry["fit_error"] = str(exc)
    return entry


def _pointer(rho) -> dict | None:
    if not rho.sector.is_diagonal or rho.phase_momenta[0] != rho.phase_momenta[1]:
        return None
    try:
        fit = pointer_fit(rho.to_dense())
    except np.linalg.LinAlgError as exc:
        return {"error": str(exc)}
    return {"center_x": fit.center_x, "center_p": fit.center_p, "width_x": fit.width_x,
            "width_p": fit.width_p, "phase_slope": fit.phase_slope,
            "relative_residual": fit.relative_residual}


def run_evaluate(ctx: Context) -> dict:
    sector = SpinSector(ctx.config["sector"])
    if not sector.is_diagonal:
        raise ConfigSemanticError("closed forms exist only for the plus and minus sectors")
    snaps = [(t, exact_position_matrix(ctx.grid, t, sector, ctx.params,
                                       population=ctx.config["population"]))
             for t in snapshot_times(ctx.config)]
    files = _emit_snapshots(ctx, snaps)
    return {"snapshots": [_snapshot_summary(t, rho, ctx.params) for t, rho in snaps],
            "files": files, "position_coherence": _position_fit(ctx, snaps),
            "pointer_fit": _pointer(snaps[-1][1])}


def run_evolve(ctx: Context) -> dict:
    snaps, dt = _run_numeric(ctx)
    files = _emit_snapshots(ctx, snaps)
    report = {"dt": dt, "snapshots": [_snapshot_summary(t, rho, ctx.params) for t, rho in snaps],
              "files": files}
    traces = np.array([rho.trace() for _, rho in snaps])
    drift = float(np.max(np.abs(traces - traces[0])))
    report["trace_drift"] = drift
    checks = {"numerical_hygiene_trace": drift <= TRACE_TOLERANCE}
    if snaps[0][1].sector.is_diagonal:
        herm = max(rho.hermiticity_error() for _, rho in snaps)
        report["hermiticity"] = herm
        checks["numerical_hygiene_hermiticity"] = herm <= HERMITICITY_TOLERANCE
        report["position_coherence"] = _position_fit(ctx, snaps)
        report["pointer_fit"] = _pointer(snaps[-1][1])
    else:
        report["spin"] = _spin_fit(ctx, snaps)
    report["checks"] = checks
    return report


def run_compare(ctx: Context) -> dict:
    sector = SpinSector(ctx.config["sector"])
    if not sector.is_diagonal:
        raise ConfigSemanticError("compare needs the plus or minus sector")
    snaps, dt = _run_numeric(ctx)
    deviations = []
    for t, rho in snaps:
        exact = exact_position_matrix(rho.grid, t, sector, ctx.params,
                                      population=ctx.config["population"],
                                      phase_momenta=rho.phase_momenta, halfwidth=rho.halfwidth)
        deviations.append(float(np.max(np.abs(exact.data - rho.data))))
    files = _emit_snapshots(ctx, snaps)
    worst = max(deviations)
    checks = {"oracle_equivalence": worst <= ORACLE_TOLERANCE}
    oracle = {"times": [t for t, _ in snaps], "linf": deviations, "max_linf": worst,
              "tolerance": ORACLE_TOLERANCE}
    t_end = ctx.config["t_final"]
    if t_end >= 0.02:
        # how well the closed form itself solves the discretised equation
        residual = exact_solution_residual(t_end, MasterEquationSpec(sector, ctx.params))
        oracle["equation_residual"] = residual
        checks["oracle_residual"] = residual <= RESIDUAL_TOLERANCE
    return {
        "dt": dt,
        "snapshots": [_snapshot_summary(t, rho, ctx.params) for t, rho in snaps],
        "files": files,
        "oracle": oracle,
        "position_coherence": _position_fit(ctx, snaps),
        "pointer_fit": _pointer(snaps[-1][1]),
        "checks": checks,
    }


def run_timescales(ctx: Context) -> dict:
    cfg = ctx.config
    if cfg["separation_x"] is None and cfg["separation_p"] is None:
        raise ConfigSemanticError("timescales needs separation_x and/or separation_p")
    query = TimescaleQuery(ctx.params, cfg["separation_x"], cfg["separation_p"])
    table = timescales(query).as_dict()
    report = {"timescales": table}
    if table["zurek_time"] is not None and ctx.params.damping > 0:
        report["zurek_time_times_damping"] = table["zurek_time"] * ctx.params.damping
        report["quoted_order_of_magnitude"] = QUOTED_MACROSCOPIC_ORDER
    return report


RUNNERS = {"evaluate": run_evaluate, "evolve": run_evolve, "compare": run_compare,
           "timescales": run_timescales}

# expected log-log slope of the fitted spin decoherence time, with tolerance
SCALING = {"damping": (1 / 3, 0.05), "coupling": (-2 / 3, math.log(1.1) / math.log(2))}


def thread_count() -> int:
    raw = os.environ.get("DECOLAB_THREADS")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigSemanticError(f"DECOLAB_THREADS must be an integer, got {raw!r}") from None


def run_sweep(ctx: Context) -> dict:
    cfg = ctx.config
    name, values = cfg["sweep_parameter"], cfg["sweep_values"]
    if name is None or not values:
        raise ConfigSemanticError("sweep needs sweep_parameter and a non-empty sweep_values")
    if name not in SCHEMA or name.startswith("sweep"):
        raise ConfigSemanticError(f"cannot sweep {name!r}")
    kind = cfg["sweep_kind"]

    def point(index_value):
        index, value = index_value
        sub = dict(cfg, **{name: value, "sweep_parameter": None, "sweep_values": None})
        _check_semantics(sub)
        out = None
        if ctx.out is not None:
            out = ctx.out / f"point_{index:03d}"
            out.mkdir(parents=True, exist_ok=True)
        params = build_params(sub)
        sub_ctx = Context(sub, params, build_grid(sub, params), out)
        return {"value": value, "result": RUNNERS[kind](sub_ctx)}

    with ThreadPoolExecutor(max_workers=min(thread_count(), len(values))) as pool:
        points = list(pool.map(point, enumerate(values)))
    report = {"parameter": name, "kind": kind, "points": points}
    spin_times = []
    for p in points:
        fit = (p["result"].get("spin") or {}).get("fit")
        spin_times.append(None if fit is None else fit["spin_time"])
    if all(s is not None for s in spin_times) and len(spin_times) >= 2:
        xs = np.log(np.asarray(values, dtype=float))
        slope = float(np.polyfit(xs, np.log(spin_times), 1)[0])
        report["spin_time_slope"] = slope
        if name in SCALING:
            expected, tol = SCALING[name]
            report["expected_slope"] = expected
            report["checks"] = {"cross_sector_scaling": abs(slope - expected) <= tol}
    return report


def run(kind: str, config: dict, output_dir: Path | None) -> dict:
    params = build_params(config)
    grid = build_grid(config, params)
    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)
    ctx = Context(config, params, grid, output_dir)
    started = time.perf_counter()
    body = run_sweep(ctx) if kind == "sweep" else RUNNERS[kind](ctx)
    derived = params.derived()
    t_final = config["t_final"]
    report = {
        "kind": kind,
        "version": __version__,
        "config": config,
        "derived": {"diffusion": derived.diffusion,
                    "tau_range": [0.0, derived.damping * t_final]},
        "result": body,
        "checks": body.get("checks", {}),
        "wall_clock_seconds": time.perf_counter() - started,
    }
    if output_dir is not None:
        (output_dir / "report.json").write_text(report_json(report))
    return report


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="decolab", description=__doc__.split("\n")[0])
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--config", required=True, type=Path)
    parser.add_argument("--output-dir", type=Path, default=Path("decolab_out"))
    args = parser.parse_args(argv)
    try:
        text = args.config.read_text(encoding="utf-8")
    except OSError as exc:
        print(f"decolab: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        config = parse_config(text)
        report = run(args.kind, config, args.output_dir)
    except (ConfigSyntaxError, ConfigSemanticError) as exc:
        print(f"decolab: config error: {exc}", file=sys.stderr)
        return exc.exit_code
    except StabilityError as exc:
        print(f"decolab: stability: {exc}", file=sys.stderr)
        return EXIT_SEMANTIC
    except NumericalInstability as exc:
        print(f"decolab: numerical instability: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"decolab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"decolab: invalid input: {exc}", file=sys.stderr)
        return EXIT_SEMANTIC
    failed = [name for name, ok in report["checks"].items() if not ok]
    if failed:
        print(f"decolab: checks failed: {', '.join(failed)}", file=sys.stderr)
    print(json.dumps({"kind": args.kind, "output_dir": str(args.output_dir),
                      "checks": report["checks"]}, sort_keys=True))
    return EXIT_OK
