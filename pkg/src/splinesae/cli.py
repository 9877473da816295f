"""Command-line front end.

Exit codes: 0 on success, 2 for input or configuration errors, 3 for
numerical failures.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .design import Dataset, SplineConfig, assemble_design
from .errors import SAEError
from .inference import diagnose_area_effect, lrt_area_effect, test_beta
from .io import csv_text, dumps, parse_targets, parse_units, read_bytes, sha256
from .lmm import blup_fit
from .sae import FLAG_SAMPLE_MEAN, make_target, predict_areas
from .sim import MODELS, SimScenario, run_study
from .varcomp import LikelihoodSurface, estimate_variance_components

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3
APPLICATION_KNOTS = 15
APPLICATION_MIN_AREAS = 64
TABLE1_SIZES = (30, 60, 100)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise SAEError("invalid-config", message)


def _knots(text: str):
    if text == "auto":
        return "auto"
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--knots must be a positive integer or 'auto', got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="splinesae", description="Small-area estimation with penalized-spline area effects.")
    parser.add_argument("--version", action="version", version=f"splinesae {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True):
        if data:
            p.add_argument("--input", required=True, help="unit CSV: area_id,y,x1..xk,z")
            p.add_argument("--degree", type=int, default=1, help="spline degree p (default 1)")
            p.add_argument(
                "--knots",
                type=_knots,
                default=None,
                help=f"knot count or 'auto' (default {APPLICATION_KNOTS} with >= {APPLICATION_MIN_AREAS} areas, else auto)",
            )
            p.add_argument("--method", choices=("reml", "ml"), default="reml")
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="output directory (default: stdout)")

    common(sub.add_parser("fit", help="fit the mixed model"))
    pr = sub.add_parser("predict", help="EBLUP and MSE per area")
    common(pr)
    pr.add_argument("--targets", default=None, help="CSV area_id,xbar1..xbark of population covariate means")
    common(sub.add_parser("test", help="tests for the area effect"))
    common(sub.add_parser("diagnose", help="area residuals against the area variable"))

    sm = sub.add_parser("simulate", help="Monte Carlo study")
    common(sm, data=False)
    sm.add_argument("--model", choices=MODELS, default="M5")
    sm.add_argument("--m", type=int, default=30)
    sm.add_argument("--ni", type=int, default=4)
    sm.add_argument("--replicates", type=int, default=1000)
    sm.add_argument("--sigma-e", type=float, default=1.0)
    sm.add_argument("--degree", type=int, default=1)
    sm.add_argument("--knots", type=_knots, default="auto")
    sm.add_argument("--table1", action="store_true", help="run every (model, m) cell of the benchmark table")
    return parser


@dataclass(frozen=True)
class RunConfig:
    command: str
    input: str | None
    targets: str | None
    degree: int
    knots: int | str | None
    method: str
    alpha: float
    seed: int
    out: str | None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _validate(args) -> None:
    if not 0 < args.alpha < 1:
        raise SAEError("invalid-config", f"--alpha must lie in (0, 1), got {args.alpha}")
    if args.seed < 0:
        raise SAEError("invalid-config", f"--seed must be nonnegative, got {args.seed}")
    SplineConfig(args.degree, args.knots if args.knots is not None else "auto")


class _Output:
    """Collects named artifacts; writes them under ``--out`` or to stdout."""

    def __init__(self, out: str | None):
        self.out = Path(out) if out else None

    def emit(self, name: str, text: str, primary: bool = True) -> None:
        if self.out is None:
            if primary:
                sys.stdout.write(text)
            return
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / name).write_text(text, encoding="utf-8")


def _load(args):
    raw = read_bytes(args.input)
    data, names = parse_units(raw, source=args.input)
    knots = args.knots
    if knots is None:
        knots = APPLICATION_KNOTS if data.m >= APPLICATION_MIN_AREAS else "auto"
    config = SplineConfig(args.degree, knots)
    design = assemble_design(data, config)
    meta = {
        "version": __version__,
        "seed": args.seed,
        "input_sha256": sha256(raw),
        "config": {**_config(args).to_dict(), "knots": knots, "knots_resolved": design.K},
    }
    return data, names, design, meta


def _config(args) -> RunConfig:
    return RunConfig(
        command=args.command,
        input=getattr(args, "input", None),
        targets=getattr(args, "targets", None),
        degree=args.degree,
        knots=args.knots,
        method=getattr(args, "method", "reml"),
        alpha=args.alpha,
        seed=args.seed,
        out=args.out,
    )


def _coef_names(names, p):
    return ["(intercept)"] + list(names) + (["z"] if p == 1 else [f"z^{j}" for j in range(1, p + 1)])


def cmd_fit(args) -> int:
    data, names, design, meta = _load(args)
    surf = LikelihoodSurface(design)
    est = estimate_variance_components(design, args.method, surface=surf)
    fit = blup_fit(design, est.delta_hat)
    g, s = est.delta_hat.sigma_gamma_sq, est.delta_hat.sigma_sq
    report = {
        **meta,
        "command": "fit",
        "n": design.n,
        "m": design.m,
        "k": design.k,
        "p": design.p,
        "K": design.K,
        "knots": list(design.knots.knots),
        "coefficients": [
            {"name": nm, "estimate": float(v), "se": float(se)}
            for nm, v, se in zip(_coef_names(names, design.p), fit.psi, fit.psi_se)
        ],
        "gamma": fit.gamma,
        "variance_components": {"sigma_gamma_sq": g, "sigma_sq": s, "lambda": est.delta_hat.penalty},
        "loglik": {
            "method": est.method,
            "value": est.loglik,
            "restricted": surf.restricted_loglik(g, s),
            "profile_ml": surf.profile_loglik(g, s),
        },
        "convergence": {
            "converged": est.converged,
            "iterations": est.iterations,
            "at_boundary": est.at_boundary,
            "score_norm": est.score_norm,
        },
        "fisher": est.fisher,
    }
    _Output(args.out).emit("fit.json", dumps(report))
    return EXIT_OK


PREDICTION_COLUMNS = ["area_id", "estimate", "mse_fixed", "mse_gamma", "mse_correction", "mse_total", "rmse", "flags"]


def _targets(args, data: Dataset, design, n_cov: int):
    given = {}
    digest = None
    if args.targets:
        raw = read_bytes(args.targets)
        digest = sha256(raw)
        given = parse_targets(raw, n_cov, source=args.targets)
        unknown = [a for a in given if a not in set(data.areas)]
        if unknown:
            raise SAEError("unknown-area", f"{args.targets}: area {unknown[0]!r} is not in the unit data")
    means = data.area_means()
    out = []
    for i, a in enumerate(data.areas):
        if a in given:
            out.append(make_target(design, a, given[a], float(data.area_z[i])))
        else:
            out.append(make_target(design, a, means[i], float(data.area_z[i]), flags=(FLAG_SAMPLE_MEAN,)))
    return out, digest


def cmd_predict(args) -> int:
    data, names, design, meta = _load(args)
    targets, digest = _targets(args, data, design, len(names))
    est = estimate_variance_components(design, args.method)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        preds = predict_areas(design, est, targets)
    rows = [
        [p.area_id, repr(p.estimate), repr(p.mse_fixed), repr(p.mse_gamma), repr(p.mse_correction),
         repr(p.mse_total), repr(p.rmse), ";".join(p.flags)]
        for p in preds
    ]
    report = {
        **meta,
        "command": "predict",
        "targets_sha256": digest,
        "variance_components": est.delta_hat.as_array(),
        "at_boundary": est.at_boundary,
        "predictions": [dict(zip(PREDICTION_COLUMNS, r)) for r in rows],
    }
    out = _Output(args.out)
    out.emit("predictions.csv", csv_text(PREDICTION_COLUMNS, rows))
    out.emit("predict.json", dumps(report), primary=False)
    return EXIT_OK


def _diagnostic(data: Dataset):
    try:
        d = diagnose_area_effect(data)
    except SAEError as exc:
        if exc.numerical:
            raise
        return None, {"error": exc.code, "message": str(exc)}
    return d, {
        "beta1_within": d.beta1_within,
        "corr_with_z": d.corr_with_z,
        "areas": [{"area_id": a, "z": float(z), "vtilde": float(v)} for a, z, v in zip(d.areas, d.area_z, d.vtilde)],
    }


def cmd_test(args) -> int:
    data, _, design, meta = _load(args)
    h1 = test_beta(design, None, alpha=args.alpha)
    h2 = lrt_area_effect(design, alpha=args.alpha)
    _, diag = _diagnostic(data)
    report = {**meta, "command": "test", "h1": h1.to_dict(), "h2": h2.to_dict(), "diagnostic": diag}
    _Output(args.out).emit("test.json", dumps(report))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    data, _, _, meta = _load(args)
    d = diagnose_area_effect(data)
    rows = [[a, repr(float(z)), repr(float(v))] for a, z, v in zip(d.areas, d.area_z, d.vtilde)]
    report = {**meta, "command": "diagnose", "beta1_within": d.beta1_within, "corr_with_z": d.corr_with_z}
    out = _Output(args.out)
    out.emit("diagnose.csv", csv_text(["area_id", "z", "vtilde"], rows), primary=False)
    out.emit("diagnose.json", dumps({**report, "areas": [dict(zip(("area_id", "z", "vtilde"), r)) for r in rows]}))
    return EXIT_OK


REPLICATE_COLUMNS = ["rep", "area", "estimate", "truth", "mse", "reject_h1", "reject_h2"]


def _replicate_rows(report):
    for r in report.records:
        if not r.ok:
            continue
        for i in range(len(r.estimate)):
            yield [r.rep, i, repr(float(r.estimate[i])), repr(float(r.truth[i])), repr(float(r.mse[i])),
                   int(r.reject_h1), int(r.reject_h2)]


def cmd_simulate(args) -> int:
    cells = [(mo, m) for mo in MODELS for m in TABLE1_SIZES] if args.table1 else [(args.model, args.m)]
    scenarios = [
        SimScenario(
            model_id=mo,
            m=m,
            n_per_area=args.ni,
            sigma_e=args.sigma_e,
            p=args.degree,
            K=args.knots,
            B=args.replicates,
            alpha=args.alpha,
            base_seed=args.seed,
        )
        for mo, m in cells
    ]
    meta = {"version": __version__, "seed": args.seed, "input_sha256": None}
    out = _Output(args.out)
    summary = []
    for sc in scenarios:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            rep = run_study(sc)
        d = {**meta, "command": "simulate", "config": sc.to_dict(), **rep.to_dict(),
             "warnings": sorted({str(w.message) for w in caught})}
        for w in d["warnings"]:
            print(f"warning: {sc.model_id} m={sc.m}: {w}", file=sys.stderr)
        stem = f"simulate_{sc.model_id}_m{sc.m}"
        if not args.table1:
            out.emit(f"{stem}.json", dumps(d))
        else:
            out.emit(f"{stem}.json", dumps(d), primary=False)
            summary.append({"model": sc.model_id, "m": sc.m, **d["metrics"], "failures": rep.failures})
        out.emit(f"{stem}_replicates.csv", csv_text(REPLICATE_COLUMNS, _replicate_rows(rep)), primary=False)
    if args.table1:
        cfg = {k: v for k, v in scenarios[0].to_dict().items() if k not in ("model_id", "m")}
        out.emit("table1.json", dumps({**meta, "command": "simulate", "config": cfg, "cells": summary}))
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "test": cmd_test,
    "diagnose": cmd_diagnose,
    "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _validate(args)
        return COMMANDS[args.command](args)
    except SAEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL if exc.numerical else EXIT_INPUT
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: numerical-failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ValueError) as exc:
        print(f"error: invalid-input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
