"""Command line entry point ``mtlab``.

Every subcommand reads an optional YAML config (``--config``), applies
``--override key=value`` pairs (dotted keys reach nested mappings) and writes
its reports into ``--out``. Exit status: 0 on success, 1 when a checked
invariant fails (the invariant is named on stderr), 2 on usage or
configuration errors.

Report columns
--------------
run/sweep   one row per scenario item; see ``list-scenarios`` for each
            scenario's columns
extend      R, n, N, norm2, max_abs, max_slice_err
xray        value, coarse_value, n_lines, point_*, direction_*
afunc       R, rho, a_value, tube_power_value, n_tubes, piece_density_sup, tube_mass_sup
mt          scenario, n, R, rho, lhs, rhs_<variant>, ratio_<variant>
wavepacket  one row per packet (packets.csv) and one summary row
decouple    refined: k, ratio; slab: ratio, lhs, rhs, nu, n_caps; flake: MT columns
cex         int_w, int_total, xray, ratio, frac_large, R, n, n_balls, m, n_caps, seed, L_max, T_max, certified
fit         column, slope, intercept, max_abs_residual
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys

import numpy as np
import scipy.fft

from .errors import ConfigError, InvariantError, MTLabError
from .scenarios import (
    CATALOG,
    ExperimentConfig,
    apply_overrides,
    build_density,
    build_patch,
    build_weight,
    get_scenario,
    random_slabs,
    stacked_flakes,
)

log = logging.getLogger("mtlab")

COMMANDS = ("run", "sweep", "list-scenarios", "extend", "xray", "afunc", "mt",
            "wavepacket", "decouple", "cex", "fit")


# ---------------------------------------------------------------- output helpers


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    return v


def write_rows(path, rows):
    """CSV with columns in first-seen order; floats written with ``repr``."""
    cols = []
    for row in rows:
        cols += [c for c in row if c not in cols]
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols)
        wr.writeheader()
        for row in rows:
            wr.writerow({k: _fmt(v) for k, v in row.items()})


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=1, sort_keys=True)
        fh.write("\n")


def plot_sweep(path, rows, x, ys, title=""):
    """Deterministic log-log SVG of the columns ``ys`` against ``x``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "mtlab"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    groups = {}
    for r in rows:
        groups.setdefault(r.get("seed", None), []).append(r)
    for seed, rs in sorted(groups.items(), key=lambda kv: str(kv[0])):
        for y in ys:
            pts = [(r[x], r[y]) for r in rs if y in r and r[y] is not None and r[y] > 0]
            if pts:
                X, Y = zip(*sorted(pts))
                label = y if seed is None else f"{y} (seed {seed})"
                ax.loglog(X, Y, "o-", label=label)
    ax.set_xlabel(x)
    ax.set_title(title)
    if ax.lines:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# ---------------------------------------------------------------- config


def load_config(args, scenario=None):
    doc = {}
    if args.config:
        try:
            with open(args.config) as fh:
                import yaml

                doc = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        except Exception as exc:  # yaml.YAMLError
            raise ConfigError(f"malformed config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a mapping")
    name = scenario or args.scenario or doc.get("scenario")
    base = dict(get_scenario(name).defaults) if name else {}
    merged = {**base, **doc}
    if name:
        merged["scenario"] = name
    if args.seed is not None:
        merged["seed"] = args.seed
    if args.out is not None:
        merged["out"] = args.out
    if args.threads is not None:
        merged["threads"] = args.threads
    merged = apply_overrides(merged, args.override)
    return ExperimentConfig.from_mapping(merged)


def _outdir(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


def _R(cfg, default):
    return float(cfg.R if cfg.R is not None else default)


def _caps_from_cfg(cfg, R, patch):
    from .geometry import Cap

    centers = cfg.param("caps", [[0.0] * patch.d])
    return [Cap(tuple(np.atleast_1d(c).astype(float)), R**-0.5) for c in centers]


# ---------------------------------------------------------------- commands


def cmd_list(args):
    for name, sc in CATALOG.items():
        print(f"{name:20s} {sc.description}")
        if args.verbose:
            print(f"{'':20s} columns: {sc.columns}")
    return 0


def _finish(cfg, name, result, extra=None):
    out = _outdir(cfg)
    write_rows(os.path.join(out, f"{name}.csv"), result.rows)
    # the output location is not an experimental parameter; leaving it out keeps reruns byte-identical
    conf = {k: v for k, v in cfg.to_mapping().items() if k != "out"}
    doc = {"config": conf, "fits": result.fits,
           "checks": {k: {"passed": ok, "detail": d} for k, (ok, d) in result.checks.items()}}
    if extra:
        doc.update(extra)
    write_json(os.path.join(out, f"{name}.json"), doc)
    if result.x:
        plot_sweep(os.path.join(out, f"{name}.svg"), result.rows, result.x, result.y or [], name)
    for k, (ok, d) in result.checks.items():
        log.info("%s %s: %s", "PASS" if ok else "FAIL", k, d)
    if result.failed:
        raise InvariantError(", ".join(result.failed))
    return 0


def cmd_run(args):
    cfg = load_config(args)
    if not cfg.scenario:
        raise ConfigError("run needs --scenario or a scenario key in the config")
    sc = get_scenario(cfg.scenario)
    return _finish(cfg, sc.name, sc.run(cfg))


def cmd_sweep(args):
    cfg = load_config(args)
    if cfg.scenario:
        sc = get_scenario(cfg.scenario)
        if "R_list" not in sc.defaults and cfg.R_list is None:
            raise ConfigError(f"scenario '{sc.name}' does not sweep over R")
        return _finish(cfg, sc.name, sc.run(cfg))
    from .inequality_lab import mt_report, sweep

    if not cfg.R_list:
        raise ConfigError("sweep needs R_list")
    patch = build_patch(cfg)

    def gen(R):
        rng = np.random.default_rng(cfg.seed)
        g = build_density(cfg, R, rng, patch)
        w = build_weight(cfg, R, rng)
        return mt_report(g, w, R, rho=float(cfg.rho or 1.0), E=_caps_from_cfg(cfg, R, patch)
                         if cfg.param("caps") else None)

    reports, fits = sweep([float(r) for r in cfg.R_list], gen)
    from .scenarios import ScenarioResult

    rows = [r.row("sweep") for r in reports]
    ys = [k for k in rows[0] if k.startswith("ratio_")]
    return _finish(cfg, "sweep", ScenarioResult(rows, {k: f.to_json() for k, f in fits.items()}, {}, "R", ys))


def cmd_extend(args):
    from .extension import extend_fast_grid
    from .grids import save_array

    cfg = load_config(args)
    R = _R(cfg, 32)
    g = build_density(cfg, R, np.random.default_rng(cfg.seed))
    F = extend_fast_grid(g, R)
    axes = tuple(range(cfg.n - 1))
    e = (np.abs(F.samples) ** 2).sum(axis=axes) * F.grid.spacing ** (cfg.n - 1)
    out = _outdir(cfg)
    save_array(os.path.join(out, "field.mtla"), F.grid, F.samples)
    row = {"R": R, "n": cfg.n, "N": g.N, "norm2": g.norm2(), "max_abs": float(np.abs(F.samples).max()),
           "max_slice_err": float(np.max(np.abs(e / g.norm2() - 1))) if g.norm2() > 0 else 0.0}
    write_rows(os.path.join(out, "extend.csv"), [row])
    return 0


def cmd_xray(args):
    from .tomography import save_weight, xray_sup

    cfg = load_config(args)
    R = _R(cfg, 32)
    w = build_weight(cfg, R, np.random.default_rng(cfg.seed))
    res = xray_sup(w)
    out = _outdir(cfg)
    save_weight(os.path.join(out, "weight.mtla"), w)
    row = {"value": res.value, "coarse_value": res.coarse_value, "n_lines": res.n_lines}
    for i, v in enumerate(res.point or ()):
        row[f"point_{i}"] = v
    for i, v in enumerate(res.direction or ()):
        row[f"direction_{i}"] = v
    write_rows(os.path.join(out, "xray.csv"), [row])
    return 0


def cmd_afunc(args):
    from .tomography import a_functional, tube_power_functional

    cfg = load_config(args)
    R = _R(cfg, 32)
    rho = float(cfg.rho or 1.0)
    patch = build_patch(cfg)
    w = build_weight(cfg, R, np.random.default_rng(cfg.seed))
    E = _caps_from_cfg(cfg, R, patch)
    a = a_functional(w, rho, R, E, patch)
    t = tube_power_functional(w, R, E, patch)
    row = {"R": R, "rho": rho, "a_value": a.value, "tube_power_value": t.value, "n_tubes": a.n_tubes,
           "piece_density_sup": a.piece_density_sup, "tube_mass_sup": a.tube_mass_sup}
    write_rows(os.path.join(_outdir(cfg), "afunc.csv"), [row])
    return 0


def cmd_mt(args):
    from .inequality_lab import mt_report, write_reports

    cfg = load_config(args)
    R = _R(cfg, 32)
    patch = build_patch(cfg)
    rng = np.random.default_rng(cfg.seed)
    g = build_density(cfg, R, rng, patch)
    w = build_weight(cfg, R, rng)
    E = _caps_from_cfg(cfg, R, patch) if cfg.param("caps") else None
    rep = mt_report(g, w, R, rho=float(cfg.rho or 1.0), E=E, stein=bool(cfg.param("stein", False)))
    out = _outdir(cfg)
    write_reports([rep], os.path.join(out, "mt.csv"), os.path.join(out, "mt.json"), cfg.scenario or "mt")
    return 0


def cmd_wavepacket(args):
    from .scenarios import wavepacket_checks
    from .wavepacket import decompose

    cfg = load_config(args)
    R = _R(cfg, 64)
    rng = np.random.default_rng(cfg.seed)
    g = build_density(cfg, R, rng)
    out = _outdir(cfg)
    decompose(g, R, cfg.delta).to_csv(os.path.join(out, "packets.csv"))
    res = wavepacket_checks(g, R, rng, cfg.delta, int(cfg.param("subsets", 20)), int(cfg.param("packets", 10)))
    row = {"R": R, "delta": cfg.delta, "n_packets": res["n_packets"], "reconstruction": res["reconstruction"],
           "orth_min": min(res["orthogonality"]), "orth_max": max(res["orthogonality"]),
           "decay_max": max(res["decay"], default=0.0)}
    write_rows(os.path.join(out, "wavepacket.csv"), [row])
    return 0


def cmd_decouple(args):
    from .inequality_lab import flake_mt_check, refined_decoupling_check, slab_decoupling_check, write_reports

    cfg = load_config(args)
    R = _R(cfg, 128)
    rng = np.random.default_rng(cfg.seed)
    patch = build_patch(cfg)
    g = build_density(cfg, R, rng, patch)
    out = _outdir(cfg)
    kind = args.kind
    if kind == "refined":
        res = refined_decoupling_check(g, R, delta=cfg.delta)
        rows = [{"k": k, "ratio": v} for k, v in sorted(res.ratios.items())]
        c = res.partition
        if c.incidences_ballwise != c.incidences_tubewise:
            raise InvariantError("incidence double count")
    elif kind == "slab":
        rho = float(cfg.rho or 64)
        slabs = random_slabs(rng, R, rho, int(cfg.param("count", 60)), n=cfg.n,
                             normal=tuple(cfg.param("normal", [0.0] * (cfg.n - 1) + [1.0])))
        res = slab_decoupling_check(g, slabs, R, rho, cfg.param("cap_scale", "quarter"))
        rows = [{"ratio": res.ratio, "lhs": res.lhs, "rhs": res.rhs, "nu": res.nu, "n_caps": res.n_caps}]
    else:
        rep = flake_mt_check(g, stacked_flakes(R, int(cfg.param("count", 8)), cfg.n), R, delta=cfg.delta)
        write_reports([rep], os.path.join(out, "decouple.csv"), os.path.join(out, "decouple.json"), "flake")
        return 0
    write_rows(os.path.join(out, "decouple.csv"), rows)
    return 0


def cmd_cex(args):
    from .counterexample import run_cex
    from .tomography import save_weight

    cfg = load_config(args)
    R = _R(cfg, 64)
    fam, st, ev = run_cex(R, cfg.n, seed=cfg.seed, line_cap=int(cfg.param("line_cap", 6)))
    out = _outdir(cfg)
    st.save(os.path.join(out, "cex_state.json"))
    save_weight(os.path.join(out, "cex_weight.mtla"), st.weight())
    write_rows(os.path.join(out, "cex.csv"), [{**ev.row(), "seed": cfg.seed}])
    if not st.certificate.passed:
        log.warning("occupancy certificate failed: L_max=%.3g T_max=%.3g bound=%.3g",
                    st.certificate.L_max, st.certificate.T_max, st.certificate.bound)
    return 0


def cmd_fit(args):
    from .inequality_lab import fit_exponent

    try:
        with open(args.csv, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {args.csv}: {exc}") from None
    if not rows or "R" not in rows[0]:
        raise ConfigError("report CSV needs an R column")
    cols = [c for c in rows[0] if c == "ratio" or c.startswith("ratio_")]
    group = "seed" if "seed" in rows[0] else None
    table = []
    for key in sorted({r[group] for r in rows} if group else {None}):
        sub = [r for r in rows if group is None or r[group] == key]
        for c in cols:
            vals = [(float(r["R"]), float(r[c])) for r in sub if r[c] not in ("", None)]
            if len(vals) < 3 or any(v <= 0 for _, v in vals):
                continue
            f = fit_exponent(*zip(*vals))
            row = {"column": c, "slope": f.slope, "intercept": f.intercept,
                   "max_abs_residual": float(np.max(np.abs(f.residuals)))}
            if group:
                row = {"seed": key, **row}
            table.append(row)
    out = args.out or os.path.dirname(os.path.abspath(args.csv))
    os.makedirs(out, exist_ok=True)
    write_rows(os.path.join(out, "fit.csv"), table)
    for row in table:
        print(", ".join(f"{k}={v}" for k, v in row.items()))
    return 0


# ---------------------------------------------------------------- parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML experiment config")
    common.add_argument("--out", metavar="DIR", help="output directory (default: config 'out' or ./out)")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--threads", type=int, help="FFT worker threads")
    common.add_argument("--scenario", metavar="NAME", help="scenario from list-scenarios")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="set a config key (dotted for nested keys); repeatable")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="mtlab", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "run": "run a catalog scenario and check it",
        "sweep": "sweep a scenario (or an MT report) over R_list and fit exponents",
        "list-scenarios": "print the scenario catalog",
        "extend": "evaluate Eg on the box grid of radius R",
        "xray": "maximal line integral of a weight",
        "afunc": "tube-amalgam functional and tube-maximal functional of a weight",
        "mt": "weighted extension integral against every right-hand side",
        "wavepacket": "wave packet decomposition and its checks",
        "decouple": "refined, slab or flake decoupling check",
        "cex": "build and evaluate the counterexample for one R",
        "fit": "fit exponents to the ratio columns of a report CSV",
    }
    cmds = {}
    for name in COMMANDS:
        cmds[name] = sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
    cmds["decouple"].add_argument("--kind", choices=("refined", "slab", "flake"), default="refined")
    cmds["fit"].add_argument("csv", help="report CSV with an R column")
    return p


HANDLERS = {
    "run": cmd_run, "sweep": cmd_sweep, "list-scenarios": cmd_list, "extend": cmd_extend,
    "xray": cmd_xray, "afunc": cmd_afunc, "mt": cmd_mt, "wavepacket": cmd_wavepacket,
    "decouple": cmd_decouple, "cex": cmd_cex, "fit": cmd_fit,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    threads = args.threads
    ctx = scipy.fft.set_workers(threads) if threads else contextlib.nullcontext()
    try:
        with ctx:
            return HANDLERS[args.command](args)
    except InvariantError as exc:
        print(f"mtlab: invariant failed: {exc}", file=sys.stderr)
        return 1
    except (MTLabError, FileNotFoundError, KeyError) as exc:
        print(f"mtlab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
