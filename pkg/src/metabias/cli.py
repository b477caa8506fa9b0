"""Command-line interface: ``metabias fit | simulate | funnel``.

Exit status is 0 on success, 2 for input or validation errors and 3 when an
estimator fails to converge.
"""

from __future__ import annotations

import argparse
import math
import sys
import warnings
from typing import List, Optional, Sequence

from scipy import stats

from . import copas_sens, registry_mle, remeta, simlab
from .dataset import DatasetError, MetaDataset, load_bundled, parse_csv
from .funnel import FunnelSpec, render_svg
from .report import SIM_COLUMNS, ReportTable

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONVERGENCE = 3

FIT_METHODS = ("reml", "knha", "copas", "mle", "all")


class InputError(Exception):
    """Bad user input; maps to exit status 2."""


def _eprint(*args):
    print(*args, file=sys.stderr)


def _load(args) -> MetaDataset:
    if args.dataset:
        return load_bundled(args.dataset)
    try:
        return parse_csv(args.data)
    except FileNotFoundError:
        raise InputError(f"file not found: {args.data}") from None
    except IsADirectoryError:
        raise InputError(f"not a file: {args.data}") from None


def _emit(text: str, path: Optional[str]) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _z_p(est, se):
    return float(2.0 * stats.norm.sf(abs(est / se))) if se > 0 else math.nan


def _t_p(est, se, df):
    return float(2.0 * stats.t.sf(abs(est / se), df)) if se > 0 else math.nan


class _FitReport:
    def __init__(self, scale: str):
        self.table = ReportTable(scale=scale)
        self.tr = math.exp if scale == "or" else (lambda v: v)

    def effect(self, description, method, est, ci, p, expected_m=None):
        self.table.add(
            description=description, method=method, expected_m=expected_m,
            estimate=self.tr(est), ci_lower=self.tr(ci[0]), ci_upper=self.tr(ci[1]), p_value=p,
        )

    def test(self, description, method, p):
        self.table.add(description=description, method=method, p_value=p)


def _fit_reml(data, level, rep: _FitReport, with_tests: bool, with_normal: bool, with_knha: bool):
    fit = remeta.fit_random_effects(data, "REML")
    if with_normal:
        rep.effect("random effects", "REML", fit.theta_hat, remeta.ci_normal(fit, level),
                   _z_p(fit.theta_hat, fit.se_theta))
    if with_knha:
        lo, hi, se_hk = remeta.ci_knapp_hartung(data, fit, level)
        rep.effect("random effects", "REML.KnHa", fit.theta_hat, (lo, hi), _t_p(fit.theta_hat, se_hk, fit.k - 1))
    if with_tests and data.n_published >= 3:
        rep.test("funnel asymmetry", "Egger", remeta.egger_test(data).p_value)
        if all(s.n is not None for s in data.published):
            rep.test("funnel asymmetry", "Macaskill", remeta.macaskill_test(data).p_value)


def _fit_copas(data, level, rep: _FitReport) -> List[str]:
    curve = copas_sens.run_grid(data.published_only())
    problems = []
    for p in curve.points:
        if p.converged:
            rep.effect("sensitivity curve", "Copas", p.theta_hat, p.ci(level), p.p_value(), p.expected_m)
    sel = curve.selected_point
    if sel is None:
        problems.append("Copas: no converged grid point")
    else:
        desc = "selected (flagged)" if curve.selection_flagged else "selected"
        rep.effect(desc, "Copas", sel.theta_hat, sel.ci(level), sel.p_value(), sel.expected_m)
    return problems


def _fit_mle(data, level, rep: _FitReport) -> List[str]:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        fit = registry_mle.fit_full_mle(data)
    for w in caught:
        _eprint(f"warning: {w.message}")
    if not fit.converged:
        return [f"MLE: not converged ({fit.message})"]
    try:
        reml = remeta.fit_random_effects(data, "REML")
        se_hk = remeta.knapp_hartung_se(data.yi, data.sei, reml)
    except remeta.ConvergenceError:
        se_hk = 0.0
        _eprint("warning: REML failed; MLE(SE#) uses the MLE standard error alone")
    b = registry_mle.ci_bundle(fit, se_hk, level)
    m = float(data.n_unpublished)
    rep.effect("registry MLE", "MLE(N)", fit.theta, b.normal, _z_p(fit.theta, fit.se_theta), m)
    rep.effect("registry MLE", "MLE(T)", fit.theta, b.t, _t_p(fit.theta, fit.se_theta, b.df_used), m)
    rep.effect("registry MLE", "MLE(SE#)", fit.theta, b.se_sharp, _t_p(fit.theta, b.se_used_sharp, b.df_used), m)
    return []


def cmd_fit(args) -> int:
    data = _load(args)
    if data.n_published < 2:
        raise InputError("dataset needs at least 2 published studies")
    level = args.level
    rep = _FitReport(args.scale)
    method = args.method
    problems: List[str] = []
    try:
        if method in ("reml", "knha", "all"):
            _fit_reml(data, level, rep, with_tests=method in ("reml", "all"),
                      with_normal=method != "knha", with_knha=method != "reml")
    except remeta.ConvergenceError as exc:
        problems.append(f"REML: {exc}")
    if method in ("copas", "all"):
        try:
            problems += _fit_copas(data, level, rep)
        except RuntimeError as exc:
            problems.append(f"Copas: {exc}")
    if method in ("mle", "all"):
        problems += _fit_mle(data, level, rep)
    _emit(rep.table.serialize(args.format), args.output)
    for p in problems:
        _eprint(f"error: {p}")
    return EXIT_CONVERGENCE if problems else EXIT_OK


def _scenario(args) -> simlab.ScenarioConfig:
    values = {}
    if args.config:
        try:
            base = simlab.read_config(args.config)
        except FileNotFoundError:
            raise InputError(f"file not found: {args.config}") from None
        values.update(
            theta=base.theta, tau=base.tau, rho=base.rho, total_studies=base.total_studies,
            replications=base.replications, seed=base.seed, ci_level=base.ci_level,
        )
        if base.alphas is not None:
            values.update(alpha0=base.alphas[0], alpha1=base.alphas[1])
        else:
            values.update(p20=base.anchors[0], p500=base.anchors[1])
    flags = {
        "theta": args.theta, "tau": args.tau, "rho": args.rho, "total_studies": args.total,
        "replications": args.reps, "seed": args.seed, "ci_level": args.level,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    if args.alpha0 is not None or args.alpha1 is not None:
        if args.p20 is not None or args.p500 is not None:
            raise InputError("give either --alpha0/--alpha1 or --p20/--p500")
        if args.alpha0 is None or args.alpha1 is None:
            raise InputError("--alpha0 and --alpha1 go together")
        for key in ("p20", "p500"):
            values.pop(key, None)
        values.update(alpha0=args.alpha0, alpha1=args.alpha1)
    elif args.p20 is not None or args.p500 is not None:
        if args.p20 is None or args.p500 is None:
            raise InputError("--p20 and --p500 go together")
        for key in ("alpha0", "alpha1"):
            values.pop(key, None)
        values.update(p20=args.p20, p500=args.p500)
    return simlab.ScenarioConfig.from_mapping(values)


def cmd_simulate(args) -> int:
    config = _scenario(args)
    methods = tuple(args.methods.split(",")) if args.methods else simlab.METHODS
    summary = simlab.run_scenario(config, methods=methods, workers=args.workers)
    table = ReportTable(columns=SIM_COLUMNS, scale="log")
    for m in methods:
        s = summary.methods.get(m)
        if s is None:
            table.add(method=m, noc=0, replications=summary.replications)
        else:
            table.add(method=m, ave=s.ave, sd=s.sd, cp=s.cp, loci=s.loci, noc=s.noc,
                      replications=summary.replications)
    _emit(table.serialize(args.format), args.output)
    return EXIT_OK


def cmd_funnel(args) -> int:
    data = _load(args)
    spec = FunnelSpec(mode=args.mode, width=args.width, height=args.height)
    _emit(render_svg(data, spec), args.output)
    return EXIT_OK


def _probability(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {text}")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metabias", description="Publication-bias adjusted meta-analysis.")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p):
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--data", help="input CSV")
        src.add_argument("--dataset", help="bundled dataset name (tiotropium, clopidogrel)")

    def output_args(p):
        p.add_argument("--format", choices=("tsv", "json"), default="tsv")
        p.add_argument("--output", "-o", help="output file (default: stdout)")

    fit = sub.add_parser("fit", help="analyse one dataset")
    data_args(fit)
    fit.add_argument("--method", choices=FIT_METHODS, default="all")
    fit.add_argument("--level", type=_probability, default=0.95)
    fit.add_argument("--scale", choices=("or", "log"), default="or")
    output_args(fit)
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="run a simulation scenario")
    sim.add_argument("--config", help="key = value scenario file; flags override it")
    sim.add_argument("--theta", type=float)
    sim.add_argument("--tau", type=float)
    sim.add_argument("--rho", type=float)
    sim.add_argument("--p20", type=float)
    sim.add_argument("--p500", type=float)
    sim.add_argument("--alpha0", type=float)
    sim.add_argument("--alpha1", type=float)
    sim.add_argument("--total", type=int)
    sim.add_argument("--reps", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--level", type=float)
    sim.add_argument("--workers", type=_positive_int, help="worker processes (capped by META_BIAS_THREADS)")
    sim.add_argument("--methods", help=f"comma-separated subset of {','.join(simlab.METHODS)}")
    output_args(sim)
    sim.set_defaults(func=cmd_simulate)

    fun = sub.add_parser("funnel", help="write a funnel plot as SVG")
    data_args(fun)
    fun.add_argument("--mode", choices=("standard", "modified"), default="modified")
    fun.add_argument("--width", type=int, default=640)
    fun.add_argument("--height", type=int, default=480)
    fun.add_argument("--output", "-o", help="SVG file (default: stdout)")
    fun.set_defaults(func=cmd_funnel)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DatasetError as exc:
        _eprint(f"error: {exc}")
        for v in getattr(exc, "violations", ()):
            _eprint(f"  {v}")
        return EXIT_INPUT
    except (InputError, ValueError, OSError) as exc:
        _eprint(f"error: {exc}")
        return EXIT_INPUT
    except remeta.ConvergenceError as exc:
        _eprint(f"error: {exc}")
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
