"""Command-line entry point.

Experiments are defined by JSON config files (documented in the README);
flags only override the seed, output directory and thread count.  Exit
codes: 0 all checks passed, 1 a suite check failed, 2 configuration error.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import reporting
from .densities import GaussianMixture, normalize_to_assumption
from .kernels import PotentialSpec, shipped_specs, verify_log_derivative_bound
from .simulator import SimConfig, run_ensemble

EXIT_OK = 0
EXIT_SUITE_FAILURE = 1
EXIT_CONFIG_ERROR = 2


class ConfigError(ValueError):
    pass


def _mixture_from_config(d: dict) -> GaussianMixture:
    try:
        g = GaussianMixture.from_dict(d)
    except (KeyError, ValueError, np.linalg.LinAlgError) as e:
        raise ConfigError(f"bad mixture config: {e}")
    return g


def _sim_config(d: dict, seed: int) -> SimConfig:
    law = d.get("initial_law")
    mixture = _mixture_from_config(law) if law else None
    if mixture is not None and d.get("normalize_initial", True):
        mixture = normalize_to_assumption(mixture)
    try:
        spec = PotentialSpec(gamma=float(d.get("gamma", 0.0)),
                             epsilon=float(d.get("epsilon", 0.0)),
                             chi=d.get("chi", "capped"))
        return SimConfig(
            n_particles=int(d["n_particles"]), spec=spec,
            dt=float(d["dt"]), t_end=float(d["t_end"]), seed=seed,
            ensemble_size=int(d.get("ensemble", 1)),
            eps_diffusion=float(d.get("eps_diffusion", 0.0)),
            energy_projection=bool(d.get("energy_projection", False)),
            record_every=int(d.get("record_every", 10)),
            initial_law=mixture,
            store_snapshots=bool(d.get("store_snapshots", False)),
            pair_noise_mode=d.get("pair_noise_mode", "antisymmetric"))
    except (KeyError, ValueError) as e:
        raise ConfigError(str(e))


def cmd_simulate(config: dict, out: Path, seed: int, threads: int) -> int:
    cfg = _sim_config(config.get("sim", config), seed)
    result = run_ensemble(cfg, n_threads=threads)
    agg = result.aggregate()
    for r in range(result.n_runs):
        reporting.write_table_csv(out / f"run_{r:03d}.csv", {
            "t": result.times,
            "px": result.momentum[r, :, 0], "py": result.momentum[r, :, 1],
            "pz": result.momentum[r, :, 2], "energy": result.energy[r],
            "m2": result.radial_m2[r], "m4": result.radial_m4[r],
            "pair_stat": result.pair_stat[r]})
    reporting.write_table_csv(out / "aggregate.csv", agg)
    if result.snapshots is not None:
        np.save(out / "snapshots.npy", result.snapshots)
    reporting.figure_trajectory(agg, out / "figures" / "trajectory.png")
    mom_drift = float(np.abs(result.momentum - result.momentum[:, :1]).max())
    reporting.write_json(out / "summary.json", {
        "command": "simulate", "n_runs": result.n_runs,
        "momentum_max_drift": mom_drift,
        "energy_rel_drift": float(np.abs(result.energy - result.energy[:, :1]).max()
                                  / result.energy[:, 0].mean()),
    })
    return EXIT_OK


def cmd_verify_dissipation(config: dict, out: Path, seed: int, threads: int) -> int:
    from .dissipation import SuiteConfig, run_sign_suite
    suite = config.get("suite", {})
    flows = suite.get("flows", ["heat", "landau"])
    n_mixtures = int(suite.get("n_mixtures", 10))
    n_samples = int(suite.get("n_samples", 20000))
    n_list = [int(x) for x in suite.get("n_particles", [2, 3])]
    gammas = [float(x) for x in suite.get("gammas", [-3.0, 0.0])]
    epsilons = [float(x) for x in suite.get("epsilons", [0.25, 1.0])]
    flip = bool(suite.get("flip_sign", False))

    rows = []
    for flow in flows:
        for n_part in n_list:
            if flow == "heat":
                cells = [(None, None)]
            else:
                cells = [(g, e) for g in gammas for e in epsilons]
            per_cell = max(1, n_mixtures // len(cells))
            for (g, e) in cells:
                cfg = SuiteConfig(flow=flow, n_particles=n_part, gamma=g, epsilon=e,
                                  n_mixtures=per_cell, n_samples=n_samples,
                                  flip_sign=flip)
                for rep in run_sign_suite(cfg, seed=seed):
                    rows.append(rep.to_row())
    reporting.write_csv(out / "dissipation.csv", rows)
    reporting.figure_dissipation(rows, out / "figures" / "dissipation.png")
    n_fail = sum(1 for r in rows if not r["sign_ok"])
    reporting.write_json(out / "summary.json", {
        "command": "verify-dissipation", "n_reports": len(rows),
        "n_sign_failures": n_fail, "flip_sign": flip})
    return EXIT_OK if n_fail == 0 else EXIT_SUITE_FAILURE


def cmd_oracle(config: dict, out: Path, seed: int, threads: int) -> int:
    from . import oracles
    which = config.get("oracle", "sphere")
    ok = True
    if which == "sphere":
        prm = config.get("sphere", {})
        spec = PotentialSpec(gamma=float(prm.get("gamma", -3.0)),
                             epsilon=float(prm.get("epsilon", 0.1)))
        rep = oracles.sphere_invariants(
            spec, r0=float(prm.get("r0", 2.0)), dt=float(prm.get("dt", 5e-4)),
            t_end=float(prm.get("t_end", 1.5)), n_runs=int(prm.get("runs", 2048)),
            seed=seed)
        ok = rep.rate_ok() and rep.momentum_max_drift < 1e-10
        reporting.write_csv(out / "sphere.csv", [vars(rep)])
        t = np.linspace(0, float(prm.get("t_end", 1.5)), 40)
        reporting.figure_series(t, np.exp(-rep.rate_fitted * t)[None],
                                out / "figures" / "sphere_autocorr.png",
                                "fitted angular autocorrelation")
        reporting.write_json(out / "summary.json", {"command": "oracle:sphere",
                                                    "ok": bool(ok), **vars(rep)})
    elif which == "maxwell":
        prm = config.get("maxwell", {})
        sigma0 = np.asarray(prm.get("sigma0", [[2, 0, 0], [0, 0.5, 0], [0, 0, 0.5]]),
                            dtype=float)
        law = GaussianMixture([1.0], [np.zeros(3)], [sigma0])
        cfg = SimConfig(n_particles=int(prm.get("n_particles", 64)),
                        spec=PotentialSpec(0.0, 0.0),
                        dt=float(prm.get("dt", 5e-4)), t_end=float(prm.get("t_end", 0.4)),
                        seed=seed, ensemble_size=int(prm.get("runs", 32)),
                        record_every=int(prm.get("record_every", 80)),
                        initial_law=law, store_snapshots=True)
        result = run_ensemble(cfg, n_threads=threads)
        rows = []
        meas = np.zeros((len(result.times), 3))
        ses = np.zeros((len(result.times), 3))
        refs = np.zeros((len(result.times), 3))
        worst = 0.0
        for k, t in enumerate(result.times):
            cov, se = oracles.ensemble_covariance(result, k)
            ref = oracles.maxwell_moment_reference(sigma0, t)
            meas[k] = np.diag(cov)
            ses[k] = np.diag(se)
            refs[k] = np.diag(ref)
            z = np.abs(np.diag(cov) - np.diag(ref)) / np.where(np.diag(se) > 0,
                                                               np.diag(se), np.inf)
            worst = max(worst, float(z.max()))
            rows.append({"t": t, "cov_xx": cov[0, 0], "cov_yy": cov[1, 1],
                         "cov_zz": cov[2, 2], "ref_xx": ref[0, 0],
                         "ref_yy": ref[1, 1], "ref_zz": ref[2, 2],
                         "se_xx": se[0, 0], "se_yy": se[1, 1], "se_zz": se[2, 2]})
        ok = worst <= 3.0
        reporting.write_csv(out / "maxwell_moments.csv", rows)
        reporting.figure_covariance(result.times, meas, ses, refs,
                                    out / "figures" / "maxwell_covariance.png")
        reporting.write_json(out / "summary.json", {
            "command": "oracle:maxwell", "ok": bool(ok), "worst_z": worst})
    elif which == "equilibrium":
        prm = config.get("equilibrium", {})
        cfg = SimConfig(n_particles=int(prm.get("n_particles", 32)),
                        spec=PotentialSpec(float(prm.get("gamma", -3.0)),
                                           float(prm.get("epsilon", 0.25))),
                        dt=float(prm.get("dt", 1e-3)), t_end=float(prm.get("t_end", 1.0)),
                        seed=seed, ensemble_size=int(prm.get("runs", 32)),
                        record_every=int(prm.get("record_every", 100)),
                        store_snapshots=True)
        result = run_ensemble(cfg, n_threads=threads)
        from .oracles import equilibrium_stationarity
        rep = equilibrium_stationarity(result)
        ok = rep.ok()
        reporting.write_csv(out / "equilibrium.csv", [vars(rep)])
        reporting.write_json(out / "summary.json", {"command": "oracle:equilibrium",
                                                    "ok": bool(ok), **vars(rep)})
    else:
        raise ConfigError(f"unknown oracle {which!r}")
    return EXIT_OK if ok else EXIT_SUITE_FAILURE


def cmd_chaos(config: dict, out: Path, seed: int, threads: int) -> int:
    from .estimators import chaos_distance
    prm = config.get("chaos", {})
    n_list = [int(x) for x in prm.get("n_particles", [8, 32])]
    rows = []
    for n_part in n_list:
        d = dict(config.get("sim", {}))
        d["n_particles"] = n_part
        d["store_snapshots"] = True
        cfg = _sim_config(d, seed)
        result = run_ensemble(cfg, n_threads=threads)
        pairs = result.snapshots[:, -1, :2, :]
        val, se = chaos_distance(pairs, seed=seed)
        rows.append({"n_particles": n_part, "t": float(result.times[-1]),
                     "energy_distance": val, "se": se})
    reporting.write_csv(out / "chaos.csv", rows)
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar([r["n_particles"] for r in rows],
                [r["energy_distance"] for r in rows],
                yerr=[3 * r["se"] for r in rows], fmt="o-")
    ax.set_xscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel("pair energy distance")
    fig.tight_layout()
    fig.savefig(out / "figures" / "chaos.png", dpi=130)
    plt.close(fig)
    reporting.write_json(out / "summary.json", {"command": "chaos", "rows": rows})
    return EXIT_OK


def cmd_hierarchy(config: dict, out: Path, seed: int, threads: int) -> int:
    from .estimators import ProductBump, hierarchy_residual
    prm = config.get("hierarchy", {})
    n_list = [int(x) for x in prm.get("n_particles", [16, 64])]
    m = int(prm.get("m", 1))
    if any(m + 1 > n for n in n_list):
        raise ConfigError("need m + 1 <= N for every ladder entry")
    phi = ProductBump.uniform(m, prm.get("center", [0.0, 0.0, 0.0]),
                              float(prm.get("radius", 2.5)))
    rows = []
    for n_part in n_list:
        d = dict(config.get("sim", {}))
        d["n_particles"] = n_part
        d["store_snapshots"] = True
        cfg = _sim_config(d, seed)
        result = run_ensemble(cfg, n_threads=threads)
        for mode in ("bbgky", "landau"):
            rows.append(hierarchy_residual(result, phi, mode).to_row())
    reporting.write_csv(out / "hierarchy.csv", rows)
    reporting.figure_hierarchy(rows, out / "figures" / "hierarchy.png")

    ok = True
    bb = {r["n_particles"]: r for r in rows if r["mode"] == "bbgky"}
    for r in bb.values():
        tol = 3.0 * r["residual_se"]
        ok = ok and abs(r["residual"]) <= tol + float(prm.get("scheme_tol", 0.0))
    summary = {"command": "hierarchy", "m": m, "ok": bool(ok), "rows": rows}
    ld = sorted((r["n_particles"], abs(r["residual"]))
                for r in rows if r["mode"] == "landau")
    if len(ld) >= 2:
        summary["landau_residual_decreasing"] = bool(ld[-1][1] < ld[0][1])
    reporting.write_json(out / "summary.json", summary)
    return EXIT_OK if ok else EXIT_SUITE_FAILURE


def cmd_verify_kernels(config: dict, out: Path, seed: int, threads: int) -> int:
    rows = []
    ok = True
    for spec in shipped_specs():
        val, good = verify_log_derivative_bound(spec)
        ok = ok and good
        rows.append({"gamma": spec.gamma, "epsilon": spec.epsilon,
                     "chi": spec.chi, "max_log_slope": val, "ok": good})
    reporting.write_csv(out / "kernel_bound.csv", rows)
    reporting.write_json(out / "summary.json", {"command": "verify-kernels",
                                                "ok": bool(ok)})
    return EXIT_OK if ok else EXIT_SUITE_FAILURE


COMMANDS = {
    "simulate": cmd_simulate,
    "verify-dissipation": cmd_verify_dissipation,
    "verify-kernels": cmd_verify_kernels,
    "oracle": cmd_oracle,
    "chaos": cmd_chaos,
    "hierarchy": cmd_hierarchy,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="kaclandau",
        description="Pairwise-diffusion particle laboratory: simulation, "
                    "dissipation verification, and hierarchy residuals.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("config", help="path to a JSON experiment config")
    parser.add_argument("--seed", type=int, default=None, help="override root seed")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)

    try:
        config = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    out_dir = args.out if args.out is not None else config.get("out", "out")

    try:
        out = reporting.prepare_output_dir(out_dir, config, seed)
        code = COMMANDS[args.command](config, out, seed, max(1, args.threads))
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    if code == EXIT_SUITE_FAILURE:
        print("suite FAILED (see summary.json)", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
