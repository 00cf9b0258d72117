"""Command-line interface: simulate, fit, report, check.

Every command writes a manifest capturing the resolved configuration, the
package version, and hashes of its inputs, so reruns with the same manifest
reproduce identical numerical outputs. Exit codes: 0 success, 1 usage error,
2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, NumericalError
from . import hmc as hmc_mod
from . import io as io_mod
from . import lattice as lattice_mod
from . import metrics as metrics_mod
from . import model as model_mod
from . import simulate as sim_mod
from . import summary as summary_mod
from . import vb as vb_mod

WORKERS_ENV = "GLMAR_WORKERS"

CONTRAST_PRESETS = {
    "fame": np.array([-1.0, -1.0, 1.0, 1.0, 0.0]) / 2.0,
    "face": np.array([1.0, 1.0, 1.0, 1.0, 0.0]) / 4.0,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: A003 - argparse API
        raise UsageError(message)


def _default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _prepare_out_dir(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)


def _load_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value")
        key, val = line.split("=", 1)
        out[key.strip().replace("-", "_")] = val.strip()
    return out


# ---- simulate ---------------------------------------------------------------

def _scenario_doc(scenario: sim_mod.SimScenario, scale: str) -> dict:
    return {
        "name": scenario.name,
        "scale": scale,
        "T": scenario.T,
        "N": scenario.mask.n_voxels,
        "K": scenario.K,
        "P": scenario.P,
        "n_reps": scenario.n_reps,
        "seed": scenario.seed,
        "alpha": scenario.alpha.tolist(),
        "beta": scenario.beta.tolist(),
        "lambda_spec": list(scenario.lambda_spec),
    }


def cmd_simulate(args) -> int:
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    presets = sim_mod.preset_scenarios(scale=args.scale, seed=args.seed)
    if args.preset not in presets:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(presets)}")
    scenario = presets[args.preset]
    if args.reps is not None:
        scenario = sim_mod.with_overrides(scenario, n_reps=args.reps)

    kernel = sim_mod.scenario_kernel(scenario)
    truth = sim_mod.draw_truth(scenario, kernel)

    io_mod.write_design_csv(scenario.design, out / "design.csv")
    lattice_mod.write_mask(scenario.mask, out / "mask.txt")
    io_mod.write_truth_csv(truth, out / "truth.csv")
    doc = _scenario_doc(scenario, args.scale)
    (out / "scenario.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    for rep in range(scenario.n_reps):
        data = sim_mod.generate_replicate(truth, scenario, rep)
        rep_dir = out / f"rep_{rep:03d}"
        io_mod.write_bundle(rep_dir, data, scenario.mask)
        io_mod.write_truth_csv(truth, rep_dir / "truth.csv")

    io_mod.write_manifest(out, "simulate", {
        "preset": args.preset, "scale": args.scale, "seed": args.seed,
        "reps": scenario.n_reps,
    })
    print(f"wrote {scenario.n_reps} replicate bundles to {out}")
    return 0


# ---- fit --------------------------------------------------------------------

def _hmc_config(args) -> hmc_mod.HmcConfig:
    return hmc_mod.HmcConfig(
        delta0=args.step_size,
        n_leapfrog=args.leapfrog_steps,
        n_iter=args.iters,
        n_burn=args.burn,
        target_accept=args.target_accept,
        adapt_window=args.adapt_window,
        thin=args.thin,
        seed=args.seed,
        pilot_rounds=args.pilot_rounds,
        pilot_iter=args.pilot_iters,
        pilot_burn=args.pilot_burn,
    )


def _vb_config(args) -> vb_mod.VBConfig:
    return vb_mod.VBConfig(max_iter=args.max_iter, tol=args.tol, sweep=args.sweep)


def _fit_bundle(bundle: Path, out: Path, backend: str, args) -> None:
    out.mkdir(parents=True, exist_ok=True)
    timing: dict[str, float] = {}
    t0 = time.perf_counter()
    data, mask = io_mod.read_bundle(bundle)
    kernel = lattice_mod.build_kernel(mask)
    hp = model_mod.HyperPriors()
    timing["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if backend == "hmc":
        cfg = _hmc_config(args)
        store, summary = hmc_mod.run_hmc(data, kernel, hp, cfg)
        timing["sample"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        summary.write_csv(out / "summary.csv")
        if args.save_draws == "w" and summary.w_draws is not None:
            summary_mod.save_array(summary.w_draws, out / "draws_w.bin")
        _write_hmc_diagnostics(store, out, data, cfg)
        timing["write"] = time.perf_counter() - t0
    elif backend == "vb":
        cfg = _vb_config(args)
        q, summary = vb_mod.run_vb(data, kernel, hp, cfg)
        timing["fit"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        summary.write_csv(out / "summary.csv")
        summary_mod.save_array(summary.w_cov, out / "cov_w.bin")
        with open(out / "free_energy.csv", "w") as fh:
            fh.write("iteration,free_energy\n")
            for i, f in enumerate(q.free_energy_trace):
                fh.write(f"{i},{f!r}\n")
        (out / "convergence.txt").write_text(
            f"converged={q.converged}\n"
            f"iterations={q.n_iter_used}\n"
            f"final_rel_change={q.final_rel_change!r}\n"
        )
        timing["write"] = time.perf_counter() - t0
    elif backend == "ols":
        state = model_mod.ols_init(data, kernel)
        summary = summary_mod.PosteriorSummary(
            method="ols",
            w_mean=state.W.copy(), a_mean=state.A.copy(),
            alpha_mean=state.alpha.copy(), beta_mean=state.beta.copy(),
            lambda_mean=state.lam.copy(),
        )
        timing["fit"] = time.perf_counter() - t0
        summary.write_csv(out / "summary.csv")
    else:
        raise UsageError(f"unknown backend {backend!r}")

    io_mod.write_manifest(
        out, "fit",
        {
            "backend": backend, "seed": args.seed, "bundle": str(bundle),
            "iters": args.iters, "burn": args.burn,
            "leapfrog_steps": args.leapfrog_steps, "step_size": args.step_size,
            "pilot_rounds": args.pilot_rounds,
            "max_iter": args.max_iter, "tol": args.tol, "sweep": args.sweep,
        },
        inputs=io_mod.hash_inputs(sorted(bundle.glob("*"))),
    )
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")


def _write_hmc_diagnostics(store: hmc_mod.SampleStore, out: Path,
                           data, cfg: hmc_mod.HmcConfig) -> None:
    with open(out / "diagnostics.csv", "w") as fh:
        fh.write("iteration,accepted,energy_error\n")
        for i, (acc, eh) in enumerate(
            zip(store.accept_trace, store.energy_error_trace)
        ):
            fh.write(f"{i},{int(acc)},{eh!r}\n")
    rng = np.random.default_rng(cfg.seed)
    coords = hmc_mod.default_monitor_coords(data.N, data.K, data.P, rng)
    trace_dir = out / "traces"
    trace_dir.mkdir(exist_ok=True)
    for name, idx in coords.items():
        with open(trace_dir / f"{name}.csv", "w") as fh:
            fh.write("draw,value\n")
            for i, v in enumerate(store.draws[:, idx]):
                fh.write(f"{i},{v!r}\n")
    info = {
        "accept_rate_post_burn": store.post_burn_accept_rate(cfg.n_burn),
        "delta_final": store.delta_final,
        "n_kept": store.n_kept,
    }
    (out / "run_info.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def _fit_one(task: tuple) -> str:
    bundle, out, backend, args_dict = task
    args = argparse.Namespace(**args_dict)
    _fit_bundle(Path(bundle), Path(out), backend, args)
    return str(out)


def cmd_fit(args) -> int:
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    if (args.bundle is None) == (args.scenario is None):
        raise UsageError("provide exactly one of --bundle or --scenario")

    if args.bundle is not None:
        _fit_bundle(Path(args.bundle), out, args.backend, args)
        print(f"fit ({args.backend}) written to {out}")
        return 0

    scen = Path(args.scenario)
    bundles = sorted(p for p in scen.glob("rep_*") if p.is_dir())
    if not bundles:
        raise DataError(f"{scen}: no rep_* bundle directories found")
    tasks = []
    for bundle in bundles:
        rep_args = dict(vars(args))
        rep_args["seed"] = args.seed + int(bundle.name.split("_")[1])
        tasks.append((str(bundle), str(out / bundle.name), args.backend, rep_args))
    workers = min(args.workers, len(tasks))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for done in pool.map(_fit_one, tasks):
                print(f"fit ({args.backend}) written to {done}")
    else:
        for task in tasks:
            print(f"fit ({args.backend}) written to {_fit_one(task)}")
    io_mod.write_manifest(out, "fit-scenario", {
        "backend": args.backend, "scenario": str(scen), "seed": args.seed,
        "reps": len(bundles),
    })
    return 0


# ---- report -------------------------------------------------------------------

def _parse_contrast(text: str, k: int) -> np.ndarray:
    if text in CONTRAST_PRESETS:
        c = CONTRAST_PRESETS[text]
        if c.shape[0] != k:
            raise DataError(
                f"contrast preset {text!r} has length {c.shape[0]}, model has K={k}"
            )
        return c
    try:
        c = np.array([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise UsageError(f"bad contrast {text!r}: {exc}") from exc
    if c.shape[0] != k:
        raise DataError(f"contrast has length {c.shape[0]}, model has K={k}")
    return c


def _parse_gamma_e(text: str):
    if text.startswith("top") and text.endswith("pct"):
        return ("top_quantile", float(text[3:-3]) / 100.0)
    if text.startswith("above-mean-") and text.endswith("pct"):
        return ("above_global_mean", float(text[len("above-mean-"):-3]))
    try:
        return float(text)
    except ValueError as exc:
        raise UsageError(f"bad gamma-e {text!r}") from exc


def _load_replicate_set(fit_dir: Path, label: str, truth, dims) -> metrics_mod.ReplicateSet:
    n, k, p = dims
    rep_dirs = sorted(d for d in fit_dir.glob("rep_*") if d.is_dir())
    if not rep_dirs:
        rep_dirs = [fit_dir]
    summaries = []
    for d in rep_dirs:
        s = summary_mod.PosteriorSummary.read_csv(d / "summary.csv", n, k, p, method=label)
        draws = d / "draws_w.bin"
        cov = d / "cov_w.bin"
        if draws.exists():
            s.w_draws = summary_mod.load_array(draws)
        if cov.exists():
            s.w_cov = summary_mod.load_array(cov)
        summaries.append(s)
    return metrics_mod.ReplicateSet(method=label, summaries=summaries, truth=truth)


def cmd_report(args) -> int:
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    scen = Path(args.truth)
    scen_doc = json.loads((scen / "scenario.json").read_text())
    n, k, p = scen_doc["N"], scen_doc["K"], scen_doc["P"]
    mask = lattice_mod.read_mask(scen / "mask.txt")
    truth = io_mod.read_truth_csv(scen / "truth.csv", n, k, p)
    weights = metrics_mod.MoranWeights.from_mask(mask) if n <= 5000 else None

    sets: dict[str, metrics_mod.ReplicateSet] = {}
    for spec in args.fit:
        if "=" not in spec:
            raise UsageError(f"--fit expects LABEL=DIR, got {spec!r}")
        label, fit_dir = spec.split("=", 1)
        sets[label] = _load_replicate_set(Path(fit_dir), label, truth, (n, k, p))

    counts = {label: s.n_reps for label, s in sets.items()}
    if len(set(counts.values())) > 1:
        raise DataError(f"replicate counts differ between methods: {counts}")

    for label, rep_set in sets.items():
        doc = metrics_mod.write_stats_table(
            rep_set, out / f"stats_{label}.csv", weights=weights
        )
        metrics_mod.write_json(doc, out / f"stats_{label}.json")

    if args.compare:
        a, b = args.compare.split(",")
        if a not in sets or b not in sets:
            raise UsageError(f"--compare labels must be among {sorted(sets)}")
        rep = metrics_mod.compare_report(sets[a], sets[b], weights=weights)
        doc = {
            "method_a": rep.method_a, "method_b": rep.method_b,
            "amse_ratio": rep.amse_ratio,
            "mean_amse_ratio": rep.mean_amse_ratio,
            "estimate_correlation": rep.estimate_correlation,
            "moran_a": rep.moran_a, "moran_b": rep.moran_b,
        }
        metrics_mod.write_json(doc, out / f"compare_{a}_vs_{b}.json")
        with open(out / f"compare_{a}_vs_{b}.csv", "w") as fh:
            fh.write("block,amse_ratio,estimate_correlation\n")
            for name in rep.amse_ratio:
                fh.write(
                    f"{name},{rep.amse_ratio[name]!r},"
                    f"{rep.estimate_correlation[name]!r}\n"
                )
            fh.write(f"mean,{rep.mean_amse_ratio!r},\n")
        for name, lr in rep.var_log_ratio.items():
            grid = metrics_mod.image_to_grid(lr, mask)
            metrics_mod.write_grid_csv(grid, out / f"varlogratio_{name}.csv")
            if mask.ndim == 2:
                metrics_mod.write_pgm(grid, out / f"varlogratio_{name}.pgm")
        print(f"mean AMSE ratio {a}/{b}: {rep.mean_amse_ratio:.3f}")

    if args.ppm:
        contrast = metrics_mod.Contrast(
            c=_parse_contrast(args.contrast, k),
            gamma_e=_parse_gamma_e(args.gamma_e),
            gamma_p=args.gamma_p,
        )
        truth_active = metrics_mod.true_activation(truth, contrast)
        for label, rep_set in sets.items():
            probs = []
            sens = []
            for s in rep_set.summaries:
                result = metrics_mod.ppm(s, contrast)
                probs.append(result.probabilities)
                sens.append(
    metrics_mod.sensitivity_curve(result.probabilities, truth_active)
                )
            mean_prob = np.mean(probs, axis=0)
            grid = metrics_mod.image_to_grid(mean_prob, mask)
            metrics_mod.write_grid_csv(grid, out / f"ppm_{label}.csv")
            if mask.ndim == 2:
                metrics_mod.write_pgm(grid, out / f"ppm_{label}.pgm")
            curve = np.mean(sens, axis=0)
            with open(out / f"sensitivity_{label}.csv", "w") as fh:
                fh.write("threshold,sensitivity\n")
                for t, v in curve:
                    fh.write(f"{t!r},{v!r}\n")

    for label, rep_set in sets.items():
        _, kk, pp = rep_set.dims
        for block in rep_set.blocks():
            img = rep_set.estimates(block).mean(axis=0)
            grid = metrics_mod.image_to_grid(img, mask)
            name = f"{block[0]}{block[1] + 1}"
            metrics_mod.write_grid_csv(grid, out / f"mean_{label}_{name}.csv")
            if mask.ndim == 2:
                metrics_mod.write_pgm(grid, out / f"mean_{label}_{name}.pgm")

    io_mod.write_manifest(out, "report", {
        "truth": str(scen), "fits": list(args.fit),
        "compare": args.compare, "ppm": args.ppm,
        "contrast": args.contrast, "gamma_e": args.gamma_e, "gamma_p": args.gamma_p,
    })
    print(f"report written to {out}")
    return 0


# ---- check --------------------------------------------------------------------

def _direct_log_likelihood(state, data) -> float:
    """Slow time-loop evaluation of the data term, for self-checks."""
    total = 0.0
    resid = data.Y - data.Xfull @ state.W
    for n in range(data.N):
        acc = 0.0
        for t in range(data.P, data.T):
            pred = float(state.A[:, n] @ resid[t - data.P:t, n][::-1])
            acc += (resid[t, n] - pred) ** 2
        total += -0.5 * state.lam[n] * acc + 0.5 * (data.T - data.P) * np.log(state.lam[n])
    return total


def cmd_check(args) -> int:
    rng = np.random.default_rng(7)
    failures = []

    def report(name: str, ok: bool, detail: str = ""):
        print(f"{'ok' if ok else 'FAIL'}: {name}" + (f" ({detail})" if detail else ""))
        if not ok:
            failures.append(name)

    inside = rng.random((6, 7)) < 0.8
    inside[3, 4] = True
    mask = lattice_mod.Mask((6, 7), inside)
    kernel = lattice_mod.build_kernel(mask)
    dense = kernel.S.toarray()
    report("lattice precision equals dense product",
           bool(np.array_equal(kernel.StS.toarray(), dense.T @ dense)))
    eigmin = float(np.linalg.eigvalsh(kernel.StS.toarray()).min())
    report("lattice precision positive definite", eigmin > 0, f"min eig {eigmin:.3f}")

    t, n, k, p = 24, mask.n_voxels, 3, 2
    data = model_mod.Dataset(Y=rng.standard_normal((t, n)),
                             Xfull=rng.standard_normal((t, k)), P=p)
    stats = model_mod.precompute_suffstats(data)
    hp = model_mod.HyperPriors()
    state = model_mod.ParamState(
        W=rng.standard_normal((k, n)), A=0.3 * rng.standard_normal((p, n)),
        lam=rng.gamma(5, 0.5, n), alpha=rng.gamma(5, 0.5, k), beta=rng.gamma(5, 0.5, p),
    )
    fast = model_mod.log_likelihood(state, stats)
    direct = _direct_log_likelihood(state, data)
    rel = abs(fast - direct) / (1 + abs(direct))
    report("fast likelihood matches direct evaluation", rel < 1e-10, f"rel {rel:.2e}")

    grad = model_mod.grad_log_posterior(state, stats, kernel, hp)
    x0 = state.flatten()
    h = 1e-5
    idx = rng.choice(x0.size, size=25, replace=False)
    worst = 0.0
    for i in idx:
        xp, xm = x0.copy(), x0.copy()
        xp[i] += h
        xm[i] -= h
        fd = (
            model_mod.log_posterior(model_mod.ParamState.unflatten(xp, n, k, p), stats, kernel, hp)
            - model_mod.log_posterior(model_mod.ParamState.unflatten(xm, n, k, p), stats, kernel, hp)
        ) / (2 * h)
        worst = max(worst, abs(fd - grad[i]) / (1 + abs(fd)))
    report("gradient matches finite differences", worst < 1e-4, f"max rel {worst:.2e}")

    target = model_mod.PosteriorTarget(stats, kernel, hp)
    xi = rng.standard_normal(x0.size)
    mass = np.ones(x0.size)
    x1, xi1, ok = hmc_mod.leapfrog(x0, xi, 1e-6, 5, mass, target)
    x2, xi2, ok2 = hmc_mod.leapfrog(x1, -xi1, 1e-6, 5, mass, target)
    rev = float(np.max(np.abs(x2 - x0))) if ok and ok2 else np.inf
    report("leapfrog reversibility", rev < 1e-10, f"max err {rev:.2e}")

    cfg = vb_mod.VBConfig(max_iter=3, tol=1e-12)
    init = model_mod.ols_init(data, kernel)
    fit = vb_mod.MeanFieldFit(stats, kernel, hp, cfg, init)
    for _ in range(3):
        fit.sweep()
        fit.free_energy_trace.append(fit.free_energy())
    diffs = np.diff(fit.free_energy_trace)
    report("variational free energy non-decreasing", bool(np.all(diffs > -1e-8)),
           f"min step {diffs.min():.2e}")

    weights = metrics_mod.MoranWeights.from_mask(mask)
    img = rng.standard_normal(n)
    fast_i = metrics_mod.morans_i(img, weights)
    z = img - img.mean()
    num = sum(
        weights.phi[i, j] * z[i] * z[j]
        for i in range(n) for j in range(n)
    )
    brute = (n / weights.phi.sum()) * num / float(z @ z)
    report("Moran's I matches brute force", abs(fast_i - brute) < 1e-12)

    if failures:
        raise NumericalError(f"self-check failures: {failures}")
    print("all self-checks passed")
    return 0


# ---- main ----------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="glmar", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate replicate datasets")
    sim.add_argument("--preset", required=True, help="study1 | study2 | study3")
    sim.add_argument("--scale", default="desk", choices=["desk", "full"])
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--reps", type=int, default=None, help="override replicate count")
    sim.add_argument("--out", required=True)
    sim.add_argument("--force", action="store_true")
    sim.set_defaults(func=cmd_simulate)

    fit = sub.add_parser("fit", help="fit one bundle or a whole scenario")
    fit.add_argument("--bundle", default=None, help="dataset bundle directory")
    fit.add_argument("--scenario", default=None, help="scenario directory of rep_* bundles")
    fit.add_argument("--backend", default="hmc", choices=["hmc", "vb", "ols"])
    fit.add_argument("--out", required=True)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--config", default=None, help="key=value config file; flags win")
    fit.add_argument("--iters", type=int, default=3000)
    fit.add_argument("--burn", type=int, default=2000)
    fit.add_argument("--leapfrog-steps", type=int, default=250)
    fit.add_argument("--step-size", type=float, default=2e-5)
    fit.add_argument("--target-accept", type=float, default=0.65)
    fit.add_argument("--adapt-window", type=int, default=50)
    fit.add_argument("--thin", type=int, default=1)
    fit.add_argument("--pilot-rounds", type=int, default=0)
    fit.add_argument("--pilot-iters", type=int, default=600)
    fit.add_argument("--pilot-burn", type=int, default=400)
    fit.add_argument("--save-draws", default="w", choices=["none", "w"])
    fit.add_argument("--max-iter", type=int, default=200)
    fit.add_argument("--tol", type=float, default=1e-6)
    fit.add_argument("--sweep", default="sequential", choices=["sequential", "colored"])
    fit.add_argument("--workers", type=int, default=_default_workers())
    fit.add_argument("--force", action="store_true")
    fit.set_defaults(func=cmd_fit)

    rep = sub.add_parser("report", help="metrics tables, maps, comparisons")
    rep.add_argument("--truth", required=True, help="scenario directory with truth.csv")
    rep.add_argument("--fit", action="append", required=True,
                     help="LABEL=FITDIR (repeatable)")
    rep.add_argument("--out", required=True)
    rep.add_argument("--compare", default=None, help="LABEL_A,LABEL_B")
    rep.add_argument("--ppm", action="store_true")
    rep.add_argument("--contrast", default="fame")
    rep.add_argument("--gamma-e", default="top10pct")
    rep.add_argument("--gamma-p", type=float, default=0.9)
    rep.add_argument("--force", action="store_true")
    rep.set_defaults(func=cmd_report)

    chk = sub.add_parser("check", help="run built-in invariant self-tests")
    chk.set_defaults(func=cmd_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if "--config" in argv:
            cfg_path = argv[argv.index("--config") + 1]
            file_defaults = _load_config_file(cfg_path)
            known = {a.dest for a in parser._actions}
            for subparser in (parser._subparsers._group_actions[0].choices or {}).values():
                known |= {a.dest for a in subparser._actions}
            typed: dict = {}
            for key, val in file_defaults.items():
                if key not in known:
                    raise UsageError(f"unknown config key {key!r}")
                typed[key] = val
            for subparser in parser._subparsers._group_actions[0].choices.values():
                for action in subparser._actions:
                    if action.dest in typed and action.type is not None:
                        typed[action.dest] = action.type(typed[action.dest])
                subparser.set_defaults(**{
                    k: v for k, v in typed.items()
                    if k in {a.dest for a in subparser._actions}
                })
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
