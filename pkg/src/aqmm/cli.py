"""Benchmark front end: case definitions, configuration, orchestration.

Subcommands: `run` (outer adaptive driver), `estimate` (certified estimator
on a stored state), `reference` (pure-QM solve on a large domain), `coeffs`
(build or load the Taylor coefficient cache), `report` (trace CSV to cost
tables).  Configuration is flat `key = value` text; command-line flags
override file values.  All outputs are ASCII with a provenance header.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 resource guard.
"""

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__, adaptive, hybrid, mm, tb
from .adaptive import AdaptiveConfig, TRACE_COLUMNS
from .estimator import default_cutoff, dump_report
from .lattice import (DefectSpec, LatticeSpec, ResourceError, TRI_GENERATOR,
                      build_lattice)

MU_POINT = 1.1591102852190827
MU_SCREW = 1.183008046105479


class UsageError(Exception):
    """Bad invocation or configuration; maps to exit code 1."""


class BenchmarkCase:
    """A named defect benchmark: lattice, chemistry and default radii."""

    def __init__(self, name, defect, r0, mu, k, dim_m, defaults):
        self.name = name
        self.defect = defect
        self.r0 = r0
        self.mu = mu
        self.k = k
        self.dim_m = dim_m
        self.defaults = defaults


def _cases():
    point_radii = dict(R_QM=3.0, R_BUF=5.0, R_MM=10.0, R_Omega=16.0,
                       R_gen=150.0)
    crack_radii = dict(R_QM=4.0, R_BUF=5.0, R_MM=11.0, R_Omega=17.0,
                       R_gen=150.0)
    screw_radii = dict(R_QM=4.0, R_BUF=5.0, R_MM=12.0, R_Omega=18.0,
                       R_gen=100.0)
    return {
        "vacancy": BenchmarkCase("vacancy", DefectSpec.vacancy(), 1.0,
                                 MU_POINT, 2, 2, point_radii),
        "microcrack": BenchmarkCase("microcrack", DefectSpec.microcrack(),
                                    1.0, MU_POINT, 2, 2, crack_radii),
        "screw": BenchmarkCase("screw", DefectSpec.screw(), 1.15,
                               MU_SCREW, 3, 1, screw_radii),
    }


CASES = _cases()


def _parse_bool(raw):
    low = str(raw).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw}")


# every configurable key: converter and global default (None = per case)
KEY_SPECS = {
    "case": (str, "vacancy"),
    "seed": (int, 0),
    "workers": (int, 1),
    "alpha": (float, 2.0),
    "beta": (float, 10.0),
    "mu": (float, None),
    "R_cut": (float, 3.0),
    "taper_width": (float, 1.0),
    "R_stencil": (float, 3.0),
    "R_c": (float, None),
    "eta_tol": (float, 0.2),
    "tau_D": (float, 0.3),
    "tau_est": (float, 0.3),
    "Theta": (float, 0.5),
    "R_QM": (float, None),
    "R_BUF": (float, None),
    "R_MM": (float, None),
    "R_Omega": (float, None),
    "R_gen": (float, None),
    "g_tol": (float, 1e-6),
    "max_outer": (int, 5),
    "max_inner": (int, 40),
    "grade": (float, 0.25),
    "dorfler_squared": (_parse_bool, False),
}

# flag spelling on the command line, e.g. R_QM -> --r-qm
FLAG_KEYS = [k for k in KEY_SPECS if k != "case"]


def parse_config_file(path):
    """Flat `key = value` text; '#' starts a comment; unknown keys fail."""
    values = {}
    try:
        lines = open(path).read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}")
    for lineno, line in enumerate(lines, 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in KEY_SPECS:
            raise UsageError(
                f"{path}:{lineno}: unknown key '{key}'; valid keys: "
                + ", ".join(sorted(KEY_SPECS)))
        values[key] = raw
    return values


def effective_config(args):
    """Layer defaults, config file, and flags into one key -> value dict."""
    raw = {}
    if getattr(args, "config", None):
        raw.update(parse_config_file(args.config))
    name = getattr(args, "case", None) or raw.get("case") \
        or KEY_SPECS["case"][1]
    if name not in CASES:
        raise UsageError(f"unknown case '{name}'; choose from "
                         + ", ".join(sorted(CASES)))
    case = CASES[name]

    cfg = {key: spec[1] for key, spec in KEY_SPECS.items()}
    cfg["case"] = name
    cfg["mu"] = case.mu
    cfg["R_c"] = 8.0 * case.r0
    cfg.update(case.defaults)
    for key, val in raw.items():
        conv = KEY_SPECS[key][0]
        try:
            cfg[key] = conv(val)
        except ValueError as exc:
            raise UsageError(f"invalid value for {key}: {exc}")
    for key in FLAG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return case, cfg


def config_text(cfg):
    """Canonical one-line-per-key rendering used for hashing and echo."""
    parts = []
    for key in sorted(cfg):
        val = cfg[key]
        if isinstance(val, float):
            val = f"{val:.17g}"
        parts.append(f"{key} = {val}")
    return "\n".join(parts) + "\n"


def config_hash(cfg):
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()[:16]


def provenance_lines(cfg):
    return (f"aqmm {__version__}", f"config {config_hash(cfg)}",
            f"case {cfg['case']}")


def materialize(case, cfg, verbose=False):
    """Build the lattice, parameters, coefficients and adaptive config."""
    lat = LatticeSpec(case.r0 * TRI_GENERATOR, r0=case.r0,
                      R_gen=cfg["R_gen"])
    config = build_lattice(lat, case.defect)
    params = tb.TBParams(alpha=cfg["alpha"], beta=cfg["beta"], mu=cfg["mu"],
                         R_cut=cfg["R_cut"], taper_width=cfg["taper_width"])
    coeffs = mm.compute_taylor_coefficients(
        params, R_c=cfg["R_stencil"], k=case.k, generator=lat.generator,
        dim_m=case.dim_m, verbose=verbose)
    try:
        acfg = AdaptiveConfig(
            eta_tol=cfg["eta_tol"], tau_D=cfg["tau_D"],
            tau_est=cfg["tau_est"], Theta=cfg["Theta"], R_QM=cfg["R_QM"],
            R_BUF=cfg["R_BUF"], R_MM=cfg["R_MM"], R_Omega=cfg["R_Omega"],
            R_c=cfg["R_c"], g_tol=cfg["g_tol"], max_outer=cfg["max_outer"],
            max_inner=cfg["max_inner"], grade=cfg["grade"],
            dorfler_squared=cfg["dorfler_squared"])
    except ValueError as exc:
        raise UsageError(str(exc))
    return config, params, coeffs, acfg


# ---------------------------------------------------------------------------
# displacement state files


def save_state(path, config, u, meta):
    """ASCII state: meta comments, then `i j <components>` per nonzero site."""
    u = np.asarray(u, dtype=float)
    cols = u[:, None] if u.ndim == 1 else u
    nz = np.where(np.any(cols != 0.0, axis=1))[0]
    order = nz[np.lexsort((config.coords[nz, 1], config.coords[nz, 0]))]
    with open(path, "w") as fh:
        for key, val in meta.items():
            fh.write(f"# {key} {val}\n")
        fh.write(f"# dim {cols.shape[1]}\n")
        for i in order:
            ci, cj = config.coords[i]
            comps = " ".join(f"{v:.17g}" for v in cols[i])
            fh.write(f"{ci} {cj} {comps}\n")
    return path


def load_state(path, config):
    """Read a state file onto this lattice; returns (u, meta)."""
    meta = {}
    coords = []
    vals = []
    try:
        lines = open(path).read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read state file: {exc}")
    for line in lines:
        if line.startswith("#"):
            parts = line[1:].split(None, 1)
            if len(parts) == 2:
                meta[parts[0]] = parts[1].strip()
            continue
        if not line.strip():
            continue
        fields = line.split()
        coords.append((int(fields[0]), int(fields[1])))
        vals.append([float(v) for v in fields[2:]])
    dim = 1 if config.dim_m == 1 else 2
    u = np.zeros(len(config.sites) if dim == 1 else (len(config.sites), 2))
    if coords:
        idx = config.lookup(np.asarray(coords))
        missing = int((idx < 0).sum())
        if missing:
            print(f"warning: {missing} state rows lie outside the generated "
                  f"lattice and were dropped", file=sys.stderr)
        keep = idx >= 0
        vals = np.asarray(vals)
        if vals.shape[1] != dim:
            raise UsageError(f"state file has {vals.shape[1]} displacement "
                             f"components, case needs {dim}")
        if dim == 1:
            u[idx[keep]] = vals[keep, 0]
        else:
            u[idx[keep]] = vals[keep]
    return u, meta


# ---------------------------------------------------------------------------
# tables


def read_trace(path):
    """Parse a trace CSV back into row dicts (blank fields -> NaN)."""
    rows = []
    header = None
    try:
        lines = open(path).read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read trace file: {exc}")
    for line in lines:
        if line.startswith("#") or not line.strip():
            continue
        if header is None:
            header = line.split(",")
            if tuple(header) != TRACE_COLUMNS:
                raise UsageError(f"{path} is not a run trace (header "
                                 f"mismatch)")
            continue
        fields = line.split(",")
        row = {}
        for col, val in zip(header, fields):
            if col in ("outer_iter", "N_QM", "N_MM", "inner_iters"):
                row[col] = int(val)
            else:
                row[col] = float(val) if val else float("nan")
        rows.append(row)
    return rows


def emit_convergence_table(rows, csv_path, json_path=None, provenance=()):
    """Cost table from a run trace: CSV plus a JSON summary.

    Cost is the analytic model N_QM^3 + N_MM; error columns appear only
    when the trace carries reference errors.
    """
    has_ref = any(np.isfinite(r.get("err_ref", np.nan)) for r in rows)
    if rows and not has_ref:
        print("warning: trace has no reference errors; error columns "
              "omitted", file=sys.stderr)
    cols = ["outer_iter", "R_QM", "R_MM", "N_QM", "N_MM", "cost", "eta_h"]
    if has_ref:
        cols += ["err_ref", "eta_over_err"]
    cols += ["qm_mm_ratio"]

    table = []
    for r in rows:
        out = {c: r[c] for c in ("outer_iter", "R_QM", "R_MM", "N_QM",
                                 "N_MM", "eta_h")}
        out["cost"] = int(r["N_QM"]) ** 3 + int(r["N_MM"])
        out["qm_mm_ratio"] = r["N_QM"] / r["N_MM"]
        if has_ref:
            out["err_ref"] = r["err_ref"]
            out["eta_over_err"] = r["eta_h"] / r["err_ref"]
        table.append(out)

    def fmt(val):
        if isinstance(val, (int, np.integer)):
            return str(int(val))
        return "" if np.isnan(val) else f"{val:.10g}"

    with open(csv_path, "w") as fh:
        for line in provenance:
            fh.write(f"# {line}\n")
        fh.write(",".join(cols) + "\n")
        for out in table:
            fh.write(",".join(fmt(out[c]) for c in cols) + "\n")

    if json_path:
        summary = {"provenance": list(provenance), "n_rows": len(table)}
        if table:
            summary["final"] = table[-1]
            summary["total_cost"] = int(sum(t["cost"] for t in table))
            if has_ref:
                ratios = [t["eta_over_err"] for t in table]
                summary["eta_over_err_range"] = [min(ratios), max(ratios)]
        with open(json_path, "w") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return csv_path


# ---------------------------------------------------------------------------
# subcommands


def _out_path(args, name):
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def cmd_run(args):
    case, cfg = effective_config(args)
    config, params, coeffs, acfg = materialize(case, cfg,
                                               verbose=args.verbose)
    trace = adaptive.run_driver(config, params, coeffs, acfg,
                                workers=cfg["workers"],
                                verbose=args.verbose)
    if args.reference:
        u_ref, meta = load_state(args.reference, config)
        R_norm = float(meta.get("R_domain", 2.0 * trace.rows[-1]["R_MM"]))
        if R_norm < 2.0 * trace.rows[-1]["R_MM"] - 1e-9:
            print(f"warning: reference domain {R_norm:.1f} is below twice "
                  f"the final R_MM", file=sys.stderr)
        adaptive.attach_reference_errors(trace, config, params, u_ref,
                                         R_norm)
    prov = provenance_lines(cfg)
    trace_path = _out_path(args, f"{case.name}_trace.csv")
    adaptive.write_trace(trace, trace_path, provenance=prov)
    state_path = args.save_state or _out_path(args, f"{case.name}_state.txt")
    meta = dict(zip(("version", "config", "case"),
                    (p.split(" ", 1)[1] for p in prov)))
    meta.update(R_QM=trace.decomp.R_QM, R_BUF=trace.decomp.R_BUF,
                R_MM=trace.decomp.R_MM)
    save_state(state_path, config, trace.u, meta)
    for row in trace.rows:
        print(f"outer {row['outer_iter']}: R_QM {row['R_QM']:.2f} "
              f"R_MM {row['R_MM']:.2f} eta_h {row['eta_h']:.6f} "
              f"rho_h {row['rho_h']:.6f} inner {row['inner_iters']}")
    status = "converged" if trace.converged else \
        ("stalled" if trace.stalled else "iteration budget reached")
    print(f"{status}; trace: {trace_path}; state: {state_path}")
    if not trace.converged:
        print(f"warning: eta_h {trace.rows[-1]['eta_h']:.6f} still above "
              f"eta_tol {acfg.eta_tol:g}", file=sys.stderr)
    return 0


def cmd_estimate(args):
    case, cfg = effective_config(args)
    explicit = set()
    if args.config:
        explicit |= set(parse_config_file(args.config))
    explicit |= {k for k in FLAG_KEYS if getattr(args, k, None) is not None}

    # a stored state carries the radii it was computed at; honour them
    # unless the user pinned radii explicitly
    meta_peek = {}
    if args.state:
        try:
            for line in open(args.state):
                if line.startswith("#"):
                    parts = line[1:].split(None, 1)
                    if len(parts) == 2:
                        meta_peek[parts[0]] = parts[1].strip()
                else:
                    break
        except OSError as exc:
            raise UsageError(f"cannot read state file: {exc}")
        for key in ("R_QM", "R_BUF", "R_MM"):
            if key in meta_peek and key not in explicit:
                cfg[key] = float(meta_peek[key])

    config, params, coeffs, acfg = materialize(case, cfg,
                                               verbose=args.verbose)
    if args.state:
        u, _ = load_state(args.state, config)
    else:
        u = config.u0.copy()
    decomp = hybrid.decompose(config, acfg.R_QM, acfg.R_BUF, acfg.R_MM)
    report = adaptive.adaptive_estimate(config, params, u, decomp, acfg,
                                        workers=cfg["workers"],
                                        verbose=args.verbose)
    prov = provenance_lines(cfg)
    json_path = _out_path(args, f"{case.name}_estimate.json")
    dump_report(report, json_path,
                extra={"provenance": list(prov),
                       "inner_iters": report.inner_iters})
    inner_path = _out_path(args, f"{case.name}_inner.csv")
    inner_cols = ("inner_iter", "n_nodes", "n_elements", "eta_h",
                  "rho_mesh", "rho_Omega", "rho_total", "R_Omega")
    with open(inner_path, "w") as fh:
        for line in prov:
            fh.write(f"# {line}\n")
        fh.write(",".join(inner_cols) + "\n")
        for row in report.trace:
            fh.write(",".join(
                str(row[c]) if isinstance(row[c], int) else f"{row[c]:.10g}"
                for c in inner_cols) + "\n")
    print(f"eta_h {report.eta_h:.6f} rho_total {report.rho_total:.6f} "
          f"R_Omega {report.R_Omega:g} nodes {report.n_nodes} "
          f"inner {report.inner_iters}")
    print(f"report: {json_path}; inner trace: {inner_path}")
    if not report.converged:
        print("warning: inner iteration budget reached before the "
              "certification gate", file=sys.stderr)
    return 0


def cmd_reference(args):
    case, cfg = effective_config(args)
    config, params, _, acfg = materialize(case, cfg, verbose=args.verbose)
    R_domain = args.r_domain if args.r_domain is not None \
        else 2.0 * acfg.R_MM
    u_start = None
    if args.state:
        u_start, _ = load_state(args.state, config)
    res = hybrid.reference_solve(config, params, R_domain,
                                 g_tol=cfg["g_tol"], u_start=u_start,
                                 verbose=args.verbose)
    if not res.converged:
        print(f"reference solve did not converge: |g|_inf = "
              f"{res.grad_inf:.3e} after {res.iterations} iterations",
              file=sys.stderr)
        return 2
    prov = provenance_lines(cfg)
    out = args.out or _out_path(args, f"{case.name}_reference.txt")
    meta = dict(zip(("version", "config", "case"),
                    (p.split(" ", 1)[1] for p in prov)))
    meta.update(R_domain=f"{R_domain:.17g}", g_tol=f"{cfg['g_tol']:g}",
                energy=f"{res.energy:.17g}")
    save_state(out, config, res.u, meta)
    print(f"reference: R_domain {R_domain:g} energy {res.energy:.10g} "
          f"iters {res.iterations} -> {out}")
    return 0


def cmd_coeffs(args):
    case, cfg = effective_config(args)
    params = tb.TBParams(alpha=cfg["alpha"], beta=cfg["beta"], mu=cfg["mu"],
                         R_cut=cfg["R_cut"], taper_width=cfg["taper_width"])
    generator = case.r0 * TRI_GENERATOR
    path = mm.coefficients_cache_path(params, cfg["R_stencil"], case.k,
                                      generator, case.dim_m,
                                      cache_dir=args.cache_dir)
    hit = os.path.exists(path)
    coeffs = mm.compute_taylor_coefficients(
        params, R_c=cfg["R_stencil"], k=case.k, generator=generator,
        dim_m=case.dim_m, cache_dir=args.cache_dir, verbose=args.verbose)
    action = "cache hit, zero rebuild" if hit else "built and cached"
    print(f"coefficients for {case.name}: k={case.k} "
          f"stencil={coeffs.n_dof} dof ({action})")
    print(path)
    return 0


def cmd_report(args):
    rows = read_trace(args.trace)
    prov = [line[2:] for line in open(args.trace)
            if line.startswith("# ")]
    if not prov:
        prov = [f"aqmm {__version__}"]
    stem = os.path.splitext(args.trace)[0]
    csv_path = args.out or stem + "_table.csv"
    json_path = os.path.splitext(csv_path)[0] + "_summary.json"
    emit_convergence_table(rows, csv_path, json_path, provenance=prov)
    print(f"table: {csv_path}; summary: {json_path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(sub):
    sub.add_argument("--config", help="flat key = value configuration file")
    sub.add_argument("--case", help="benchmark case: "
                     + ", ".join(sorted(CASES)))
    sub.add_argument("--out-dir", default=".",
                     help="directory for output files")
    sub.add_argument("--verbose", action="store_true")
    for key in FLAG_KEYS:
        flag = "--" + key.lower().replace("_", "-")
        conv, _ = KEY_SPECS[key]
        sub.add_argument(flag, dest=key, type=conv, default=None,
                         help=f"override config key {key}")


def build_parser():
    parser = _Parser(prog="aqmm", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    subs = parser.add_subparsers(dest="command", required=True)

    run = subs.add_parser("run", help="outer adaptive driver")
    _add_common(run)
    run.add_argument("--reference", help="reference state file for error "
                     "columns")
    run.add_argument("--save-state", help="path for the final displacement "
                     "state")
    run.set_defaults(handler=cmd_run)

    est = subs.add_parser("estimate", help="certified estimator on a state")
    _add_common(est)
    est.add_argument("--state", help="displacement state file (default: "
                     "far-field predictor)")
    est.set_defaults(handler=cmd_estimate)

    ref = subs.add_parser("reference", help="pure-QM reference solve")
    _add_common(ref)
    ref.add_argument("--r-domain", type=float, default=None,
                     help="free-site radius (default: 2 R_MM)")
    ref.add_argument("--state", help="warm-start displacement state")
    ref.add_argument("--out", help="output state path")
    ref.set_defaults(handler=cmd_reference)

    cf = subs.add_parser("coeffs", help="build or load Taylor coefficients")
    _add_common(cf)
    cf.add_argument("--cache-dir", help="coefficient cache directory")
    cf.set_defaults(handler=cmd_coeffs)

    rep = subs.add_parser("report", help="trace CSV to cost tables")
    rep.add_argument("--trace", required=True, help="run trace CSV")
    rep.add_argument("--out", help="output table path")
    rep.set_defaults(handler=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ResourceError as exc:
        print(f"resource guard: {exc}", file=sys.stderr)
        return 3
    except (RuntimeError, ValueError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
