"""Command-line front end: experiment orchestration and CSV/JSON emission.

    homoglab <command> <config> [--strict] [--seed N] [--out DIR]
                                [--override-resolution] [--count N]

Commands: corrector, homogenize, rho, rate, lipschitz, w1p, boundary,
flatness, lemma-fuzz.  Exit codes: 1 validation failure, 2 solver failure,
3 acceptance-flag failure under --strict.  CSV output is bit-identical
across repeat runs with a fixed seed.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .campanato import (
    flatness_profile,
    generate_equality_instance,
    lemma_check,
    lemma_log_constant,
)
from .config import ConfigError, load_config
from .corrector import corrector_bounds, save_corrector_set, solve_corrector
from .discrete import KrylovError, ResolutionError
from .expr import ParseError
from .field import RhoSearch, decay_fit, rho_table
from .homogenize import (
    build_modulus_table,
    effective_tensor,
    exact_periodic_cell,
    omega,
)
from .kernels import BACKEND
from .solver import (
    BVPSpec,
    boundary_lipschitz_probe,
    lipschitz_probe,
    rate_sweep,
    solve_bvp,
    w1p_probe,
)

COMMANDS = (
    "corrector", "homogenize", "rho", "rate", "lipschitz", "w1p",
    "boundary", "flatness", "lemma-fuzz",
)

SOLVER_TOL = 1e-9
CORRECTOR_TOL = 1e-9


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _bvp_template(cfg, field, override) -> BVPSpec:
    origin, side, n = cfg.grid_params()
    bc = cfg.bc_type()
    f_expr = cfg.expr_or_none("bc", "f")
    src_expr = cfg.expr_or_none("bc", "F")
    m = field.m

    def wrap(e):
        if e is None:
            return None
        return lambda pts: np.repeat(e(pts)[:, None], m, axis=1) if m > 1 else e(pts)[:, None]

    g = {side_key: wrap(e) for side_key, e in cfg.neumann_sides().items()}
    return BVPSpec(
        field, 1.0, origin, side, n, bc, wrap(f_expr), g or None, wrap(src_expr),
        None, tol=SOLVER_TOL, override_resolution=override,
    )


def _moduli_from_config(cfg, field, seed):
    radii, search_kwargs = cfg.rho_params()
    search_kwargs.setdefault("seed", seed)
    rho_tab = rho_table(field, radii, RhoSearch(**search_kwargs))
    box, n_corr = cfg.corrector_params()
    table, sets = build_modulus_table(
        field, cfg.t_sweep(), cfg.sigma(), rho_tab,
        box_side=box, n=n_corr, tol=CORRECTOR_TOL,
    )
    return table, sets


def _effective_for(cfg, field):
    box, n_corr = cfg.corrector_params()
    if field.period_lattice is not None:
        eff, _ = exact_periodic_cell(field, n_corr)
        return eff
    t_max = max(cfg.t_sweep())
    cs = solve_corrector(field, t_max, box_side=box, n=n_corr, tol=CORRECTOR_TOL)
    return effective_tensor(field, cs)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_rho(cfg, field, out, args):
    radii, search_kwargs = cfg.rho_params()
    search_kwargs.setdefault("seed", args.seed)
    tab = rho_table(field, radii, RhoSearch(**search_kwargs))
    write_csv(
        out / "rho.csv",
        ["R", "rho", "lower", "upper"],
        zip(tab.radii, tab.values, tab.lower, tab.upper),
    )
    slack = (tab.upper - tab.lower).max(initial=0.0)
    monotone = all(
        tab.values[i + 1] <= tab.values[i] + slack + 1e-12
        for i in range(tab.values.size - 1)
    )
    try:
        fit = decay_fit(tab)
    except ValueError as exc:
        fit = {"N": None, "note": str(exc)}
    flags = {"monotone_nonincreasing": bool(monotone)}
    summary = {"decay_fit": {k: v for k, v in fit.items()}}
    return flags, summary, ["rho.csv"]


def cmd_corrector(cfg, field, out, args):
    box, n_corr = cfg.corrector_params()
    sigma = cfg.sigma()
    if not 0 < sigma < 1:
        sigma = 0.5  # the pointwise Holder ratio needs a strict exponent
    rows = []
    flags = {"energy_bound": True, "residuals": True}
    bound = field.mu ** -2 * field.sup_norm() ** 2
    for t in cfg.t_sweep():
        cs = solve_corrector(field, t, box_side=box, n=n_corr, tol=CORRECTOR_TOL)
        b = corrector_bounds(cs, sigma, seed=args.seed)
        res = max(cs.residuals.values())
        if b["energy"] > bound + 1e-8:
            flags["energy_bound"] = False
        if res > CORRECTOR_TOL * 10:
            flags["residuals"] = False
        save_corrector_set(cs, out / f"corrector_T{t:g}")
        rows.append(
            (t, res, cs.periodization_error, b["sup_over_t"], b["lipschitz"],
             b["energy"], bound, b["holder_ratio"])
        )
    write_csv(
        out / "corrector.csv",
        ["T", "residual", "periodization_error", "sup_over_t", "lipschitz",
         "energy", "energy_bound", "holder_ratio"],
        rows,
    )
    return flags, {"sigma": sigma}, ["corrector.csv"]


def cmd_homogenize(cfg, field, out, args):
    table, sets = _moduli_from_config(cfg, field, args.seed)
    eff_rows = []
    for t, cs in sets.items():
        if t == "reference":
            continue
        eff = effective_tensor(field, cs)
        eff_rows.append((t, *eff.entries.reshape(-1).tolist()))
    ref = sets["reference"]
    if math.isinf(ref.T):
        eff = effective_tensor(field, ref)
        eff_rows.append(("inf", *eff.entries.reshape(-1).tolist()))
    d, m = field.d, field.m
    entry_names = [
        f"a_{i + 1}{j + 1}" + (f"_{a + 1}{b + 1}" if m > 1 else "")
        for i in range(d) for j in range(d) for a in range(m) for b in range(m)
    ]
    write_csv(out / "effective.csv", ["T", *entry_names], eff_rows)
    write_csv(
        out / "moduli.csv",
        ["T", "theta_sigma", "psi_distance"],
        zip(table.theta_t, table.theta_values, table.psi_values),
    )
    eps_rows = []
    for eps in cfg.eps_sweep():
        try:
            eps_rows.append((eps, omega(table, cfg.sigma(), eps)))
        except ValueError:
            continue
    write_csv(out / "omega.csv", ["epsilon", "omega"], eps_rows)
    with open(out / "effective.json", "w") as fh:
        json.dump(
            {str(row[0]): list(row[1:]) for row in eff_rows},
            fh, indent=2, sort_keys=True,
        )
    with open(out / "moduli.json", "w") as fh:
        json.dump(
            {
                "sigma": cfg.sigma(),
                "T": table.theta_t.tolist(),
                "theta": table.theta_values.tolist(),
                "psi_distance": table.psi_values.tolist(),
                "omega": {repr(e): v for e, v in eps_rows},
                "rho": {
                    "R": table.rho.radii.tolist(),
                    "value": table.rho.values.tolist(),
                    "lower": table.rho.lower.tolist(),
                    "upper": table.rho.upper.tolist(),
                },
            },
            fh, indent=2, sort_keys=True,
        )
    theta_mono = bool((np.diff(table.theta_values) <= 1e-12).all())
    omega_mono = all(
        eps_rows[i + 1][1] <= eps_rows[i][1] + 1e-12
        for i in range(len(eps_rows) - 1)
        if eps_rows[i + 1][0] < eps_rows[i][0]
    )
    flags = {"theta_nonincreasing": theta_mono, "omega_monotone": bool(omega_mono)}
    return flags, {"sigma": cfg.sigma()}, [
        "effective.csv", "moduli.csv", "omega.csv", "effective.json", "moduli.json",
    ]


def cmd_rate(cfg, field, out, args):
    table, _ = _moduli_from_config(cfg, field, args.seed)
    eff = _effective_for(cfg, field)
    template = _bvp_template(cfg, field, args.override_resolution)
    report = rate_sweep(
        field, cfg.eps_sweep(), template.bc, template, table, eff, cfg.sigma(),
        solver_tol=SOLVER_TOL,
    )
    write_csv(
        out / "rate.csv",
        ["epsilon", "h", "l2_error", "omega", "theory_ratio"],
        report.csv_rows(),
    )
    acc = cfg.accept_params()
    flags = {}
    if report.degenerate:
        flags["degenerate"] = True
    else:
        flags["slope_ok"] = bool(report.slope is not None and report.slope >= acc["slope_min"])
        flags["ratio_bounded"] = bool(
            report.ratio_spread is not None
            and report.ratio_spread <= acc["ratio_spread_max"]
        )
        if template.bc == "neumann":
            errs = [r["l2_error"] for r in report.rows]
            flags["error_monotone"] = all(
                errs[i + 1] <= errs[i] for i in range(len(errs) - 1)
            )
    summary = {"slope": report.slope, "ratio_spread": report.ratio_spread,
               "mode": report.mode}
    return flags, summary, ["rate.csv"]


def cmd_lipschitz(cfg, field, out, args):
    template = _bvp_template(cfg, field, args.override_resolution)
    probe = cfg.probe_params()
    origin, side, _ = cfg.grid_params()
    center = probe["center"] if probe["center"] is not None else origin + side / 2
    result = lipschitz_probe(
        field, cfg.eps_sweep(), template, center, probe["r"]
    )
    write_csv(
        out / "lipschitz.csv",
        ["epsilon", "ratio"],
        [(r["epsilon"], r["ratio"]) for r in result["rows"]],
    )
    acc = cfg.accept_params()
    flags = {"uniform": bool(result["max_ratio"] <= acc["probe_max_ratio"])}
    return flags, {"max_ratio": result["max_ratio"]}, ["lipschitz.csv"]


def cmd_w1p(cfg, field, out, args):
    template = _bvp_template(cfg, field, args.override_resolution)
    probe = cfg.probe_params()
    origin, side, _ = cfg.grid_params()
    center = probe["center"] if probe["center"] is not None else origin + side / 2
    rows = []
    for eps in cfg.eps_sweep():
        ratio = w1p_probe(field, eps, probe["p"], template, center, probe["r"])
        rows.append((eps, ratio))
    write_csv(out / "w1p.csv", ["epsilon", "ratio"], rows)
    vals = [r[1] for r in rows]
    spread = max(vals) / min(vals) if min(vals) > 0 else math.inf
    acc = cfg.accept_params()
    flags = {"uniform": bool(spread <= acc["probe_max_ratio"])}
    return flags, {"max_ratio": spread, "p": probe["p"]}, ["w1p.csv"]


def cmd_boundary(cfg, field, out, args):
    template = _bvp_template(cfg, field, args.override_resolution)
    probe = cfg.probe_params()
    result = boundary_lipschitz_probe(
        field, cfg.eps_sweep(), template.bc, template, probe["r"]
    )
    write_csv(
        out / "boundary.csv",
        ["epsilon", "ratio"],
        [(r["epsilon"], r["ratio"]) for r in result["rows"]],
    )
    acc = cfg.accept_params()
    flags = {"uniform": bool(result["max_ratio"] <= acc["probe_max_ratio"])}
    return flags, {"max_ratio": result["max_ratio"], "mode": template.bc}, ["boundary.csv"]


def cmd_flatness(cfg, field, out, args):
    template = _bvp_template(cfg, field, args.override_resolution)
    probe = cfg.probe_params()
    files = []
    summary = {}
    cross_constants = []
    for k, eps in enumerate(cfg.eps_sweep()):
        spec = BVPSpec(
            field, eps, template.origin, template.side, template.n, template.bc,
            template.f, template.g, template.source, None,
            tol=SOLVER_TOL, override_resolution=args.override_resolution,
        )
        u = solve_bvp(spec)
        prof = flatness_profile(u, eps, probe["theta"], probe["K"])
        name = f"flatness_eps{k}.csv"
        write_csv(out / name, ["j", "r", "F", "p", "contraction"], prof.csv_rows())
        files.append(name)
        if prof.dyadic_t.size:
            from .discrete import l2_avg_ball

            norm_scale = probe["K"] + l2_avg_ball(u, u.grid.origin + u.grid.side / 2, 1.0)
            floor = 2 * eps
            usable = prof.constant_excess[prof.dyadic_t >= floor]
            if usable.size:
                cross_constants.append(float(usable.max() / norm_scale))
        summary[f"eps_{eps:g}"] = {
            "scales": prof.radii.tolist(),
            "F": prof.F.tolist(),
            "truncated": prof.truncated,
        }
    flags = {}
    if len(cross_constants) >= 2 and min(cross_constants) > 0:
        spread = max(cross_constants) / min(cross_constants)
        flags["cross_eps_uniform"] = bool(spread <= cfg.accept_params()["probe_max_ratio"])
        summary["cross_constant_spread"] = spread
    return flags, summary, files


def cmd_lemma_fuzz(cfg, field, out, args):
    pairs = []
    for line in cfg.get_all("lemma", "pair") or ["1 1", "2 0.5", "5 3"]:
        c0, c1 = (float(v) for v in line.split())
        pairs.append((c0, c1))
    rng = np.random.default_rng(args.seed)
    rows = []
    violations = 0
    tamper_missed = 0
    for pi, (c0, c1) in enumerate(pairs):
        witness = lemma_log_constant(c0, c1)
        for i in range(args.count):
            ell = int(rng.integers(4, 40))
            k_val = float(rng.uniform(0, 2))
            inst = generate_equality_instance(ell, c0, c1, k_val, rng)
            res = lemma_check(inst, witness)
            ok = res["hypotheses_ok"] and res["conclusions_ok"]
            if not ok:
                violations += 1
                with open(out / f"lemma_violation_{pi}_{i}.json", "w") as fh:
                    fh.write(inst.to_json())
            rows.append((pi, c0, c1, i, ell, k_val, res["hypotheses_ok"],
                         res["conclusions_ok"]))
        # tampering must always be detected
        for i in range(max(10, args.count // 20)):
            inst = generate_equality_instance(8, c0, c1, 0.5, rng)
            tampered = inst.F.copy()
            tampered[5] *= 10
            bad = lemma_check(
                type(inst)(tampered, inst.p, inst.eta, inst.K, c0, c1), witness
            )
            if bad["hypotheses_ok"]:
                tamper_missed += 1
    write_csv(
        out / "lemma_fuzz.csv",
        ["pair", "C0", "C1", "instance", "ell", "K", "hypotheses_ok", "conclusions_ok"],
        rows,
    )
    flags = {
        "zero_violations": violations == 0,
        "tamper_detected": tamper_missed == 0,
    }
    return flags, {"count": args.count, "pairs": pairs}, ["lemma_fuzz.csv"]


_DISPATCH = {
    "rho": cmd_rho,
    "corrector": cmd_corrector,
    "homogenize": cmd_homogenize,
    "rate": cmd_rate,
    "lipschitz": cmd_lipschitz,
    "w1p": cmd_w1p,
    "boundary": cmd_boundary,
    "flatness": cmd_flatness,
    "lemma-fuzz": cmd_lemma_fuzz,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="homoglab", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("config")
    parser.add_argument("--strict", action="store_true",
                        help="exit 3 when an acceptance flag fails")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="homoglab_out")
    parser.add_argument("--override-resolution", action="store_true")
    parser.add_argument("--count", type=int, default=1000,
                        help="instances per parameter pair (lemma-fuzz)")
    args = parser.parse_args(argv)

    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config)
        field = cfg.validate(seed=args.seed)
    except (ConfigError, ParseError, OSError, ValueError) as exc:
        print(f"homoglab: validation error: {exc}", file=sys.stderr)
        return 1

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        flags, summary, files = _DISPATCH[args.command](cfg, field, out, args)
    except (KrylovError, ResolutionError) as exc:
        print(f"homoglab: solver error: {exc}", file=sys.stderr)
        return 2

    wall = time.perf_counter() - t0
    run_summary = {
        "command": args.command,
        "config_hash": cfg.config_hash(),
        "wall_time_s": wall,
        "pass_flags": flags,
        "summary": summary,
        "outputs": files,
        "reproducibility": {
            "seed": args.seed,
            "solver_tol": SOLVER_TOL,
            "corrector_tol": CORRECTOR_TOL,
            "backend": BACKEND,
            "homoglab": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
    }
    with open(out / "run_summary.json", "w") as fh:
        json.dump(run_summary, fh, indent=2, sort_keys=True, default=str)

    if args.strict and not all(flags.values()):
        print(f"homoglab: acceptance flags failed: {flags}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
