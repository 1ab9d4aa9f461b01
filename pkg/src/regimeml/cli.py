"""Command-line interface.

Exit codes: 0 success, 1 verification failure, 2 usage, configuration or I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, checks, doa, inference_exact, mcem
from .switching_model import (
    ObservationSeries,
    SwitchingArModel,
    ThetaVector,
    load_model,
    model_to_dict,
    param_names,
    simulate,
)

log = logging.getLogger("regimeml")

THETA_STAR = (0.25, 0.64, 0.36)
DEFAULT_SEED = 2004
DOA_NAMES = ["sigma_eta_sq", "sigma_s_sq", "sigma_eps_sq"]


class UsageError(Exception):
    pass


# -- small I/O helpers --

def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


def _manifest(args, out: Path, outputs: list[str], extra: dict | None = None) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func",)}
    rec = {
        "command": args.command,
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "config": cfg,
        "outputs": outputs,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra:
        rec.update(extra)
    _write_json(out / "manifest.json", rec)


def _read_series_csv(path, s: int) -> ObservationSeries:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    if not rows or rows[0] != ["y"]:
        raise UsageError(f"{path}: expected a single header column 'y'")
    vals = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != 1:
            raise UsageError(f"{path}: row {i} has {len(row)} columns, expected 1")
        try:
            vals.append(float(row[0]))
        except ValueError:
            raise UsageError(f"{path}: row {i}, column 1: cannot parse {row[0]!r} as a number") from None
    if len(vals) <= s:
        raise UsageError(f"{path}: need more than s={s} values")
    return ObservationSeries(np.array(vals), s)


def _read_snapshots(path) -> np.ndarray:
    try:
        return doa.read_snapshots_csv(path)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _parse_triple(text: str, name: str) -> doa.DoaParams:
    try:
        vals = [float(v) for v in str(text).split(",")]
        if len(vals) != 3:
            raise ValueError("expected three comma-separated values")
        return doa.DoaParams(*vals)
    except ValueError as exc:
        raise UsageError(f"--{name}: {exc}") from None


def _n_jobs() -> int:
    return inference_exact._worker_count()


# -- commands --

def cmd_simulate(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    out = _out_dir(args)
    if args.doa:
        if args.d < 2:
            raise UsageError("--d must be >= 2")
        try:
            params = doa.DoaParams(args.sigma_eta_sq, args.sigma_s_sq, args.sigma_eps_sq)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        data = doa.simulate_doa(params, args.n, args.d, w0=args.w0, seed=args.seed)
        doa.write_snapshots_csv(out / "snapshots.csv", data.snapshots)
        doa.write_angles_csv(out / "angles.csv", data.angles)
        outputs = ["snapshots.csv", "angles.csv"]
    else:
        if not args.model:
            raise UsageError("give --model FILE or --doa")
        try:
            model = load_model(args.model)
        except (OSError, ValueError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot load model {args.model}: {exc}") from None
        if not 0 <= args.x0 < model.d_x:
            raise UsageError(f"--x0 must be in [0, {model.d_x})")
        xs, series = simulate(model, args.n, int(args.x0), seed=args.seed)
        with open(out / "observations.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["y"])
            wr.writerows([[repr(float(v))] for v in series.values])
        with open(out / "regimes.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["x"])
            wr.writerows([[int(v)] for v in xs])
        outputs = ["observations.csv", "regimes.csv"]
    _manifest(args, out, outputs)
    print(f"wrote {', '.join(outputs)} to {out}")
    return 0


def _template(args) -> SwitchingArModel:
    if args.model_init:
        try:
            return load_model(args.model_init)
        except (OSError, ValueError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot load model {args.model_init}: {exc}") from None
    d, s = args.d_x, args.s
    q = np.full((d, d), 0.2 / max(d - 1, 1)) + np.eye(d) * (0.8 - 0.2 / max(d - 1, 1))
    return SwitchingArModel(q, np.zeros((d, s + 1)), np.ones(d))


def cmd_fit_exact(args) -> int:
    out = _out_dir(args)
    template = _template(args)
    y = _read_series_csv(args.data, template.s)
    if not 0 <= args.x0 < template.d_x:
        raise UsageError(f"--x0 must be in [0, {template.d_x})")
    best, fits = inference_exact.mle_fit_multistart(template, y, args.x0, n_starts=args.starts, seed=args.seed)
    report = {"fit": best.report(), "model": model_to_dict(best.model),
              "parameters": param_names(template.d_x, template.s),
              "starts": [f.report() for f in fits]}
    info = inference_exact.observed_information_louis(best.model, args.x0, y)
    report["information"] = {"matrix": info.matrix, "provenance": info.provenance,
                             "min_eigenvalue": info.min_eigenvalue}
    try:
        ci = inference_exact.confidence_intervals(best.theta, info, args.level)
        tv = ThetaVector(best.theta, template.d_x, template.s)
        ci_nat = inference_exact.confidence_intervals(
            best.theta, info, args.level, transform=lambda v: ThetaVector(v, template.d_x, template.s).constrained(),
            jacobian=lambda v: ThetaVector(v, template.d_x, template.s).constrained_jacobian())
        report["intervals"] = {"level": args.level, "unconstrained": ci,
                               "natural": ci_nat, "natural_estimate": tv.constrained(),
                               "natural_parameters": param_names(template.d_x, template.s, constrained=True)}
    except np.linalg.LinAlgError as exc:
        report["intervals"] = None
        report["interval_error"] = str(exc)
    _write_json(out / "report.json", report)
    _manifest(args, out, ["report.json"])
    print(f"loglik={best.loglik:.6f} grad_inf_norm={best.grad_inf_norm:.2e} converged={best.converged}")
    return 0


def _mcem_config(args) -> mcem.McemConfig:
    try:
        return mcem.McemConfig(iterations=args.iterations, mh_samples=args.mh_samples, burn_in=args.burn_in,
                               eta_thin=args.eta_thin, seed=args.seed, warm_start=not args.fresh_start,
                               sample_growth=args.sample_growth, info_burn_in=args.info_burn_in,
                               info_samples=args.info_samples)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _summarize_doa(params: doa.DoaParams, y, x0, config, rng, theta_star, level):
    """Information, intervals and the optional chi-square test at ``params``."""
    res = mcem.mc_observed_information(params, y, x0, config.info_burn_in, config.info_samples, rng=rng)
    out = {"theta_tilde": params.as_array(), "parameters": DOA_NAMES,
           "information": {"matrix": res.info.matrix, "provenance": res.info.provenance,
                           "min_eigenvalue": res.info.min_eigenvalue},
           "information_accept_rate": res.accept_rate}
    try:
        ci = inference_exact.confidence_intervals(params.as_array(), res.info, level)
        out["intervals"] = {"level": level, "bounds": ci}
        out["covariance"] = np.linalg.inv(res.info.matrix)
    except np.linalg.LinAlgError as exc:
        out["intervals"] = None
        out["interval_error"] = str(exc)
    if theta_star is not None:
        chi = inference_exact.chi_square_test(params.as_array(), theta_star.as_array(), res.info)
        out["chi_square"] = {"theta_star": theta_star.as_array(), "statistic": chi.statistic,
                             "df": chi.df, "p_value": chi.p_value}
        if out["intervals"] is not None:
            b = out["intervals"]["bounds"]
            out["intervals"]["covers_theta_star"] = [bool(lo <= t <= hi) for (lo, hi), t in
                                                     zip(b, theta_star.as_array())]
    return out


def cmd_fit_mcem(args) -> int:
    out = _out_dir(args)
    y = _read_snapshots(args.data)
    config = _mcem_config(args)
    rng = np.random.default_rng(args.seed)
    init = (_parse_triple(args.init, "init") if args.init
            else doa.DoaParams.from_array(rng.uniform(0, 1, 3)))
    theta_star = _parse_triple(args.theta_star, "theta-star") if args.theta_star else None
    if args.tail < 1:
        raise UsageError("--tail must be >= 1")
    traj = mcem.mcem_fit(y, args.x0, init, config, rng=rng)
    traj.to_csv(out / "trajectory.csv")
    traj.diagnostics_jsonl(out / "diagnostics.jsonl")
    outputs = ["trajectory.csv", "diagnostics.jsonl"]
    report = {"init": init.as_array(), "iterations": config.iterations, "tail": args.tail}
    if config.iterations > 0:
        tilde = traj.tail_mean(args.tail)
        report.update(_summarize_doa(tilde, y, args.x0, config, rng, theta_star, args.level))
    _write_json(out / "report.json", report)
    outputs.append("report.json")
    _manifest(args, out, outputs, {"mcem_config": mcem.config_dict(config)})
    print(f"wrote {', '.join(outputs)} to {out}")
    return 0


def cmd_verify(args) -> int:
    try:
        results = []
        for name in args.only or list(checks.CHECKS):
            res = checks.run_checks([name], seed=args.seed)[0]
            print(res.line(), flush=True)
            results.append(res)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if args.out:
        out = _out_dir(args)
        _write_json(out / "verify.json", [vars(r) | {"margin": r.margin} for r in results])
        _manifest(args, out, ["verify.json"])
    return 1 if failed else 0


def _mcem_start(y, x0, init, config, seed):
    return mcem.mcem_fit(y, x0, init, config, rng=np.random.default_rng(seed))


def agreement_metric(trajectories, tail: int = 25) -> float:
    """Largest pairwise Euclidean distance between the tail means of several runs."""
    means = [t.tail_mean(tail).as_array() for t in trajectories]
    return max((float(np.linalg.norm(a - b)) for i, a in enumerate(means) for b in means[i + 1:]), default=0.0)


def cmd_reproduce_doa(args) -> int:
    out = _out_dir(args)
    config = _mcem_config(args)
    theta_star = doa.DoaParams(*THETA_STAR)
    root = np.random.SeedSequence(args.seed)
    data_seed, start_seed, info_seed, *run_seeds = root.spawn(3 + args.starts)
    data = doa.simulate_doa(theta_star, args.n, args.d, w0=args.x0, seed=data_seed)
    doa.write_snapshots_csv(out / "snapshots.csv", data.snapshots)
    doa.write_angles_csv(out / "angles.csv", data.angles)
    start_rng = np.random.default_rng(start_seed)
    inits = [theta_star] + [doa.DoaParams.from_array(start_rng.uniform(0, 1, 3)) for _ in range(args.starts - 1)]
    n_jobs = min(_n_jobs(), len(inits))
    if n_jobs > 1:
        from joblib import Parallel, delayed

        trajs = Parallel(n_jobs=n_jobs)(delayed(_mcem_start)(data.snapshots, args.x0, p, config, s)
                                        for p, s in zip(inits, run_seeds))
    else:
        trajs = [_mcem_start(data.snapshots, args.x0, p, config, s) for p, s in zip(inits, run_seeds)]
    outputs = ["snapshots.csv", "angles.csv"]
    for i, tr in enumerate(trajs):
        tr.to_csv(out / f"trajectory_start{i}.csv")
        tr.diagnostics_jsonl(out / f"diagnostics_start{i}.jsonl")
        outputs += [f"trajectory_start{i}.csv", f"diagnostics_start{i}.jsonl"]
    # by convention the reported estimate is the one from the second random start
    pick = min(2, len(trajs) - 1)
    tilde = trajs[pick].tail_mean(args.tail)
    report = {
        "theta_star": theta_star.as_array(),
        "inits": [p.as_array() for p in inits],
        "tail_means": [t.tail_mean(args.tail).as_array() for t in trajs],
        "agreement_max_pairwise_distance": agreement_metric(trajs, args.tail),
        "mean_accept_rate": float(np.mean([np.mean(t.accept_rate[1:]) for t in trajs])) if config.iterations else None,
        "estimate_from_start": pick,
    }
    report.update(_summarize_doa(tilde, data.snapshots, args.x0, config, np.random.default_rng(info_seed),
                                 theta_star, args.level))
    _write_json(out / "report.json", report)
    outputs.append("report.json")
    _manifest(args, out, outputs, {"mcem_config": mcem.config_dict(config)})
    chi = report.get("chi_square", {})
    print(f"theta_tilde={np.round(tilde.as_array(), 4).tolist()} agreement={report['agreement_max_pairwise_distance']:.4f} "
          f"chi2={chi.get('statistic', float('nan')):.3f} p={chi.get('p_value', float('nan')):.3f}")
    return 0


# -- parser --

def _add_common(p, out_default):
    p.add_argument("--config", help="JSON file of option values; flags given on the command line win")
    p.add_argument("--seed", type=int, default=None, help="RNG seed")
    p.add_argument("--out", default=out_default, help="output directory (default: %(default)s)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_mcem_options(p):
    d = mcem.McemConfig()
    p.add_argument("--iterations", type=int, default=d.iterations)
    p.add_argument("--mh-samples", type=int, default=d.mh_samples)
    p.add_argument("--burn-in", type=int, default=d.burn_in)
    p.add_argument("--eta-thin", type=int, default=d.eta_thin)
    p.add_argument("--sample-growth", type=float, default=d.sample_growth,
                   help="multiply the sample size by this factor after each iteration (1 = fixed)")
    p.add_argument("--fresh-start", action="store_true", help="restart the sampler at every E-step")
    p.add_argument("--info-burn-in", type=int, default=d.info_burn_in)
    p.add_argument("--info-samples", type=int, default=d.info_samples)
    p.add_argument("--x0", type=float, default=math.pi, help="fixed initial angle (default: pi)")
    p.add_argument("--tail", type=int, default=25, help="average the last K iterates (default: 25)")
    p.add_argument("--level", type=float, default=0.95)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regimeml", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a switching AR model or the DOA model")
    _add_common(p, "sim-out")
    p.add_argument("--model", help="model JSON file (switching AR)")
    p.add_argument("--doa", action="store_true", help="simulate the array model instead")
    p.add_argument("--sigma-eta-sq", type=float, default=THETA_STAR[0])
    p.add_argument("--sigma-s-sq", type=float, default=THETA_STAR[1])
    p.add_argument("--sigma-eps-sq", type=float, default=THETA_STAR[2])
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--d", type=int, default=4, help="number of sensors")
    p.add_argument("--w0", type=float, default=math.pi, help="initial angle (DOA)")
    p.add_argument("--x0", type=int, default=0, help="initial regime (switching AR)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit-exact", help="maximum likelihood for a finite-regime model")
    _add_common(p, "fit-out")
    p.add_argument("--data", required=True, help="observations CSV with column 'y'")
    p.add_argument("--model-init", help="model JSON used as the first start and as the family template")
    p.add_argument("--d-x", type=int, default=2)
    p.add_argument("--s", type=int, default=1)
    p.add_argument("--x0", type=int, default=0)
    p.add_argument("--starts", type=int, default=5)
    p.add_argument("--level", type=float, default=0.95)
    p.set_defaults(func=cmd_fit_exact)

    p = sub.add_parser("fit-mcem", help="Monte Carlo EM for the DOA model")
    _add_common(p, "mcem-out")
    p.add_argument("--data", required=True, help="snapshots CSV (re0,im0,...)")
    p.add_argument("--init", help="starting sigma_eta_sq,sigma_s_sq,sigma_eps_sq (default: uniform(0,1) draws)")
    p.add_argument("--theta-star", help="reference parameters for a chi-square test")
    _add_mcem_options(p)
    p.set_defaults(func=cmd_fit_mcem)

    p = sub.add_parser("verify", help="run the built-in verification checks")
    p.add_argument("--config")
    p.add_argument("--only", action="append", choices=list(checks.CHECKS) + list(checks.ALIASES),
                   help="run only this check (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="also write verify.json and a manifest here")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("reproduce-doa", help="simulate at the reference parameters and run five MCEM starts")
    _add_common(p, "doa-reproduction")
    p.set_defaults(seed=DEFAULT_SEED)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--starts", type=int, default=5)
    _add_mcem_options(p)
    p.set_defaults(func=cmd_reproduce_doa)
    return parser


def _apply_config_file(parser, argv):
    """Re-parse with defaults taken from ``--config``; unknown keys are rejected.

    A key in the file satisfies a required option such as ``--data``.
    """
    subs = parser._subparsers._group_actions[0].choices
    required = [a for sp in subs.values() for a in sp._actions if a.required]
    for a in required:
        a.required = False
    args = parser.parse_args(argv)
    for a in required:
        a.required = True
    if not getattr(args, "config", None):
        return parser.parse_args(argv)
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    sub = subs[args.command]
    known = {a.dest for a in sub._actions if a.dest not in ("help", "config")}
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    for a in sub._actions:
        if a.dest in cfg:
            a.required = False
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        try:
            args = _apply_config_file(parser, argv)
        except SystemExit as exc:  # argparse reports bad usage this way
            return exc.code if isinstance(exc.code, int) else 2
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"regimeml: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"regimeml: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
