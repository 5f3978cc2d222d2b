"""Config-driven experiment runners.

Subcommands: forward | assimilate | verify-mc | fim.  Experiments are described
by a flat INI file; every run echoes a fully resolved copy of its configuration
so results can be reproduced from the output directory alone.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
from pathlib import Path

import numpy as np

from .assimilate import (OptimizerConfig, damd_assimilate, enkf_assimilate,
                         exact_bayes_inputs, grid_bayes_k)
from .core import ContractError, DegenerateInputError, GaussianDist, Grid2D, empirical_cdf
from .geometry import fim_from_density_fn, fisher_information, kl_gain_profile
from .mdist import ClosureSpec, StatParams, solve_cdf_fv
from .physics import (KField, PhysicsConfig, analytic_state, forcing,
                      empirical_semivariogram, generate_observations, k_field_to_csv,
                      make_rng, sample_k_field)

_PI = np.pi

# section -> key -> (type, default); None default means required when used
SCHEMA = {
    "domain": {"L": (float, 1.0), "u_min": (float, 0.0), "u_max": (float, 1.0),
               "n_x": (int, 200), "n_u": (int, 128), "dt": (float, 0.01),
               "t_end": (float, 0.6)},
    "physics": {"v": (float, 1.0), "u0": (float, 0.4), "ub": (float, 0.5),
                "a": (float, 0.1), "nu": (float, 1.0), "phase": (float, 1.5 * _PI)},
    "truth": {"kind": (str, "constant"), "k_mean": (float, 1.0),
              "k_std": (float, 0.0), "k_corr_len": (float, 0.0),
              "u0": (float, None), "ub": (float, None), "seed": (int, 1)},
    "noise": {"sigma_eps": (float, 0.02), "seed": (int, 1)},
    "measurements": {"xs": (str, "0.1,0.8"),
                     "ts": (str, "0.15,0.2,0.25,0.3,0.35,0.4,0.45,0.5,0.55,0.6")},
    "prior": {"mu0": (float, None), "sigma0": (float, None),
              "mub": (float, None), "sigmab": (float, None),
              "k_mean": (float, None), "k_std": (float, None),
              "k_corr_len": (float, None)},
    "optimizer": {"tol": (float, 1e-3), "max_iters": (int, 200),
                  "initial_simplex_scale": (float, 0.1)},
    "enkf": {"n_ens": (int, 50), "seed": (int, 1)},
    "closure": {"family": (str, "random_constant_k"),
                "sign_convention": (str, "appendix")},
    "mc": {"n_mc": (int, 1000), "xs": (str, "0.8"), "ts": (str, "0.6"),
           "seed": (int, 1)},
    "fim": {"x": (float, 0.5), "t": (float, 0.3), "coords": (str, "k_mean,k_std"),
            "h_rel": (float, 1e-3), "selftest": (str, "false"),
            "mean": (float, 0.0), "std": (float, 1.0)},
}


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case sensitive (e.g. domain.L)
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    cfg = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
    for section, keys in SCHEMA.items():
        cfg[section] = {}
        for key, (typ, default) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    cfg[section][key] = typ(raw)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
            else:
                cfg[section][key] = default
    return cfg


def write_resolved_config(cfg: dict, out_dir: Path):
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section, keys in cfg.items():
        parser[section] = {}
        for key, val in keys.items():
            if val is None:
                continue
            parser[section][key] = f"{val:.17g}" if isinstance(val, float) else str(val)
    with open(out_dir / "resolved_config.ini", "w") as fh:
        parser.write(fh)


def _fmt(v) -> str:
    return f"{v:.17g}" if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _grid(cfg) -> Grid2D:
    d = cfg["domain"]
    return Grid2D(0.0, d["L"], d["n_x"], d["u_min"], d["u_max"], d["n_u"],
                  d["dt"], d["t_end"])


def _physics(cfg, k_field=None, u0=None, ub=None) -> PhysicsConfig:
    p = cfg["physics"]
    return PhysicsConfig(u0=p["u0"] if u0 is None else u0,
                         ub=p["ub"] if ub is None else ub,
                         a=p["a"], nu=p["nu"], phase=p["phase"], v=p["v"],
                         k_field=k_field)


def _prior_params(cfg) -> StatParams:
    pr = {k: v for k, v in cfg["prior"].items() if v is not None}
    return StatParams(**pr)


def _closure(cfg) -> ClosureSpec:
    c = cfg["closure"]
    return ClosureSpec(family=c["family"], sign_convention=c["sign_convention"])


def _floats(s) -> list:
    return [float(tok) for tok in s.split(",") if tok.strip()]


def _locations(cfg) -> list:
    xs = _floats(cfg["measurements"]["xs"])
    ts = _floats(cfg["measurements"]["ts"])
    return [(x, t) for t in ts for x in sorted(xs)]


def _truth_field(cfg, grid) -> KField:
    t = cfg["truth"]
    corr = t["k_corr_len"] if t["k_corr_len"] > 0 else None
    return sample_k_field(t["kind"], t["k_mean"], t["k_std"], corr, grid, t["seed"])


def _observations(cfg, grid):
    truth_kf = _truth_field(cfg, grid)
    phys_truth = _physics(cfg, k_field=truth_kf,
                          u0=cfg["truth"]["u0"], ub=cfg["truth"]["ub"])
    meas = generate_observations(phys_truth, _locations(cfg),
                                 cfg["noise"]["sigma_eps"], cfg["noise"]["seed"],
                                 dx=grid.dx)
    return truth_kf, phys_truth, meas


def cmd_forward(cfg, out_dir: Path) -> int:
    grid = _grid(cfg)
    spec = _closure(cfg)
    phi = _prior_params(cfg)
    phys = _physics(cfg)
    sol = solve_cdf_fv(spec, phi, phys, grid)
    sol.to_csv(out_dir / "cdf_profile.csv")
    rows = []
    final = sol.snapshots[-1]
    us = grid.u_nodes
    for ix, x in enumerate(grid.x_nodes):
        f = final[ix]
        q = [float(np.interp(p, f, us)) for p in (0.25, 0.5, 0.75)]
        rows.append([x, q[1], q[2] - q[0]])
    write_csv(out_dir / "summary_stats.csv", ["x", "median_u", "iqr_u"], rows)
    for w in sol.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def _write_trace(trace, out_dir: Path):
    names = ("k_mean", "k_std", "k_corr_len", "mu0", "sigma0", "mub", "sigmab")
    header = ["step", "x", "t"]
    for n in names:
        header += [f"{n}_before", f"{n}_after"]
    header += ["loss", "iterations", "converged"]
    rows = []
    for s in trace.steps:
        row = [s.index, s.x, s.t]
        for n in names:
            row += [getattr(s.phi_before, n), getattr(s.phi_after, n)]
        row += [s.loss, s.iterations, int(s.converged)]
        rows.append(["" if v is None else v for v in row])
    write_csv(out_dir / "posterior_params.csv", header, rows)


def cmd_assimilate(cfg, mode: str, out_dir: Path) -> int:
    grid = _grid(cfg)
    phys = _physics(cfg)
    truth_kf, phys_truth, meas = _observations(cfg, grid)
    k_field_to_csv(truth_kf, grid, out_dir / "k_field.csv")
    meas.to_csv(out_dir / "measurements.csv")
    opt = OptimizerConfig(**cfg["optimizer"])
    phi0 = _prior_params(cfg)

    family_by_mode = {"inputs": "exact_deterministic_k",
                      "k_const": "random_constant_k",
                      "k_white": "white_noise_k",
                      "k_exp": "exponential_k"}
    if mode not in family_by_mode:
        raise ConfigError(f"unknown assimilation mode {mode!r}")
    spec = ClosureSpec(family=family_by_mode[mode],
                       sign_convention=cfg["closure"]["sign_convention"])
    if mode == "inputs" and phi0.k_mean is None:
        # the deterministic rate of the exact closure comes from the model
        phi0 = phi0.replace(k_mean=cfg["truth"]["k_mean"])

    trace = damd_assimilate(meas, phi0, spec, phys, grid, opt)
    _write_trace(trace, out_dir)
    phi_post = trace.phi_final or phi0

    if mode == "inputs":
        post0, postb = exact_bayes_inputs(
            meas, GaussianDist(phi0.get("mu0"), phi0.get("sigma0")),
            GaussianDist(phi0.get("mub"), phi0.get("sigmab")),
            cfg["truth"]["k_mean"], phys)
        write_csv(out_dir / "bayes_posterior.csv", ["param", "mean", "std"],
                  [["u0", post0.mean, post0.std], ["ub", postb.mean, postb.std]])
    elif mode == "k_const":
        k_nodes = np.linspace(0.0, 4.0, 2001)
        post = grid_bayes_k(meas, GaussianDist(phi0.get("k_mean"), phi0.get("k_std")),
                            phys, k_nodes)
        write_csv(out_dir / "bayes_posterior.csv", ["K", "density"],
                  zip(post.u_nodes, post.densities))
    else:
        corr = phi0.k_corr_len
        trace_e, ens = enkf_assimilate(meas, phi0.get("k_mean"), phi0.get("k_std"),
                                       corr, grid, phys,
                                       cfg["enkf"]["n_ens"], cfg["enkf"]["seed"])
        rows = []
        xs = grid.x_min + (np.arange(grid.n_x) + 0.5) * grid.dx
        for i, member in enumerate(ens.members):
            for x, k in zip(xs, member):
                rows.append([i, x, k])
        write_csv(out_dir / "ensemble_posterior.csv", ["member", "x", "k"], rows)
        if mode == "k_exp":
            fields = [KField("white", 0.0, 0.0, None, m) for m in ens.members]
            lags, gammas = empirical_semivariogram(fields, grid)
            write_csv(out_dir / "variogram.csv", ["lag", "gamma"],
                      zip(lags, gammas))

    xs_kl, dkl = kl_gain_profile(spec, phi0, phi_post, grid.t_end, grid, phys)
    write_csv(out_dir / "kl_profile.csv", ["x", "dkl"], zip(xs_kl, dkl))
    return 0


def _matched_moment_samples(family, mean, std, n, rng):
    """Draws with prescribed mean and std; lognormal parameters come from the
    moment equations, the uniform half-width is sqrt(3) * std."""
    if family == "normal":
        return mean + std * rng.standard_normal(n)
    if family == "lognormal":
        s2 = np.log(1.0 + (std / mean) ** 2)
        mu = np.log(mean) - 0.5 * s2
        return np.exp(mu + np.sqrt(s2) * rng.standard_normal(n))
    if family == "uniform":
        half = np.sqrt(3.0) * std
        return mean + half * (2.0 * rng.random(n) - 1.0)
    raise ConfigError(f"unknown sampling family {family!r}")


def cmd_verify_mc(cfg, out_dir: Path) -> int:
    grid = _grid(cfg)
    phys = _physics(cfg)
    spec = ClosureSpec(family="random_constant_k",
                       sign_convention=cfg["closure"]["sign_convention"])
    phi = _prior_params(cfg)
    mean, std = phi.get("k_mean"), phi.get("k_std")
    n_mc = cfg["mc"]["n_mc"]
    rng = make_rng(cfg["mc"]["seed"], 3)
    # common uniform draws couple the three families sample-by-sample
    base = rng.random(n_mc)
    from scipy.special import ndtri

    samples = {
        "normal": mean + std * ndtri(base),
        "lognormal": None,
        "uniform": mean + np.sqrt(3.0) * std * (2.0 * base - 1.0),
    }
    s2 = np.log(1.0 + (std / mean) ** 2)
    samples["lognormal"] = np.exp(np.log(mean) - 0.5 * s2 + np.sqrt(s2) * ndtri(base))

    probes = [(x, t) for t in _floats(cfg["mc"]["ts"]) for x in _floats(cfg["mc"]["xs"])]
    sol = solve_cdf_fv(spec, phi, phys, grid)
    rows, summary = [], []
    for (x, t) in probes:
        fv = sol.slice_at(x, t)
        mc_cdfs = {}
        for fam, ks in samples.items():
            us = np.array([
                analytic_state(x, t,
                               PhysicsConfig(u0=phys.u0, ub=phys.ub, a=phys.a,
                                             nu=phys.nu, phase=phys.phase, v=phys.v,
                                             k_field=KField.constant(k, grid.n_x)),
                               dx=grid.dx)
                for k in ks
            ])
            mc_cdfs[fam] = empirical_cdf(us, grid.u_nodes)
            for u, f_mc, f_fv in zip(grid.u_nodes, mc_cdfs[fam].f_values, fv.f_values):
                rows.append([fam, x, t, u, f_mc, f_fv])
        for fam, c in mc_cdfs.items():
            sup = float(np.max(np.abs(c.f_values - fv.f_values)))
            summary.append([fam, x, t, sup])
            print(f"{fam:10s} (x={x:g}, t={t:g}): sup|F_mc - F_fv| = {sup:.4f}")
    write_csv(out_dir / "mc_compare.csv", ["family", "x", "t", "U", "F_mc", "F_fv"], rows)
    write_csv(out_dir / "mc_summary.csv", ["family", "x", "t", "sup_norm"], summary)
    return 0


def cmd_fim(cfg, out_dir: Path) -> int:
    from scipy.stats import norm

    fim_cfg = cfg["fim"]
    coords = [c.strip() for c in fim_cfg["coords"].split(",") if c.strip()]
    if fim_cfg["selftest"].lower() in ("true", "1", "yes"):
        mean, std = fim_cfg["mean"], fim_cfg["std"]
        u = np.linspace(mean - 8 * std, mean + 8 * std, 4001)

        def density_fn(theta):
            from .core import DiscretePdf
            dens = norm.pdf(u, theta["mean"], theta["std"])
            return DiscretePdf(u, dens / np.trapezoid(dens, u))

        fim = fim_from_density_fn(density_fn, {"mean": mean, "std": std},
                                  ("mean", "std"), h_rel=fim_cfg["h_rel"])
    else:
        grid = _grid(cfg)
        phys = _physics(cfg)
        fim = fisher_information(_closure(cfg), _prior_params(cfg),
                                 fim_cfg["x"], fim_cfg["t"], coords, phys, grid,
                                 h_rel=fim_cfg["h_rel"])
    rows = []
    for i, ci in enumerate(fim.coords):
        for j, cj in enumerate(fim.coords):
            rows.append([ci, cj, fim.entries[i, j]])
    write_csv(out_dir / "fim.csv", ["coord_i", "coord_j", "g_ij"], rows)
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="damd",
                                 description="CDF-equation forecasting and data assimilation experiments")
    ap.add_argument("command", choices=["forward", "assimilate", "verify-mc", "fim"])
    ap.add_argument("--config", required=True, help="INI experiment file")
    ap.add_argument("--out-dir", default="out", help="artifact directory")
    ap.add_argument("--seed", type=int, default=None, help="override all config seeds")
    ap.add_argument("--mode", default="k_const",
                    choices=["inputs", "k_const", "k_white", "k_exp"],
                    help="assimilation scenario (assimilate command only)")
    args = ap.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            for section in ("truth", "noise", "enkf", "mc"):
                cfg[section]["seed"] = args.seed
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_resolved_config(cfg, out_dir)
        if args.command == "forward":
            return cmd_forward(cfg, out_dir)
        if args.command == "assimilate":
            return cmd_assimilate(cfg, args.mode, out_dir)
        if args.command == "verify-mc":
            return cmd_verify_mc(cfg, out_dir)
        return cmd_fim(cfg, out_dir)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ArithmeticError, DegenerateInputError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
