"""Command-line interface.

Subcommands: ``bounds``, ``synth-gaussian``, ``synth-gaussian2d``, ``neyman``
and ``cov``. Results are JSON (CSV for ``cov --all-pairs``) written to
``--out`` or stdout. Exit codes: 0 success, 2 input error, 3 numerical failure;
failures print a JSON object with an ``error`` field to stderr.

CSV input: a header with an ``arm`` column and outcome columns ``y1`` .. ``yd``
(an optional ``unit`` column is ignored), one row per experimental unit.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

from .bounds import covariance_bounds, covariance_sweep, identified_interval, neyman_ci
from .cost import resolve_spec
from .errors import CellCapError, NumericalError, SchemaError
from .measures import load_marginals
from .sinkhorn import SolverConfig
from .synthetic import (DEFAULT_SEED, GAUSSIAN2D_BETA, GAUSSIAN2D_VARIANCES, GAUSSIAN_SIGMAS,
                        experiment_config, rate_sweep, synth_gaussian, synth_gaussian2d)

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise SchemaError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _labels(text: str | None) -> list[str] | None:
    return None if text is None else [x.strip() for x in text.split(",") if x.strip()]


def _outcome_index(text: str) -> int:
    t = text.strip().lower()
    if t.startswith("y"):
        t = t[1:]
    try:
        j = int(t)
    except ValueError:
        raise SchemaError(f"outcome must be y1, y2, ... or 1, 2, ..., got {text!r}") from None
    if j < 1:
        raise SchemaError(f"outcome numbers start at 1, got {text!r}")
    return j - 1


def _config(args, experiment: bool = False) -> SolverConfig:
    base = experiment_config(args.eps) if experiment else SolverConfig(epsilon=args.eps)
    return replace(base, eta_override=args.eta, max_iters=args.max_iters,
                   record_trace=args.trace is not None)


def _manifest(args, spec: Any = None) -> dict:
    return {"command": args.command, "data": args.data, "arms": args.arms,
            "spec": spec, "seed": getattr(args, "seed", None), "out": args.out,
            "algorithm": args.algorithm}


def _emit(args, payload: Any) -> None:
    text = payload if isinstance(payload, str) else json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + ("" if text.endswith("\n") else "\n"))
    else:
        print(text)


def _write_trace(args, traces: dict) -> None:
    if not args.trace:
        return
    with open(args.trace, "w") as fh:
        for side, records in traces.items():
            for rec in records or ():
                row = json.loads(rec.to_json())
                row["side"] = side
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def _require_data(args) -> None:
    if not args.data:
        raise SchemaError(f"{args.command} needs --data PATH")


def cmd_bounds(args) -> int:
    _require_data(args)
    sys_ = load_marginals(args.data, _labels(args.arms))
    spec = resolve_spec(args.spec)
    cfg = _config(args)
    interval = identified_interval(spec, sys_, cfg, args.algorithm)
    _write_trace(args, interval.traces)
    _emit(args, {**interval.to_dict(), "arms": list(sys_.labels),
                 "manifest": _manifest(args, spec.to_dict())})
    return EXIT_OK


def cmd_synth_gaussian(args) -> int:
    sigmas = _floats(args.sigmas)
    cfg = _config(args, experiment=True)
    if args.rate_sweep:
        ns = [int(x) for x in _floats(args.ns)]
        report = {"rate_sweep": rate_sweep(ns, range(args.seed, args.seed + args.n_seeds),
                                           sigmas, cfg)}
    else:
        report = synth_gaussian(sigmas, args.n, args.seed, cfg, args.algorithm)
    _emit(args, {**report, "manifest": _manifest(args, {"kind": "mw2"})})
    return EXIT_OK


def cmd_synth_gaussian2d(args) -> int:
    cfg = _config(args, experiment=True)
    report = synth_gaussian2d(args.n, args.seed, _floats(args.variances), _floats(args.beta),
                              cfg, args.algorithm)
    _emit(args, {**report, "manifest": _manifest(args, {"kind": "contrast",
                                                        "beta": _floats(args.beta)})})
    return EXIT_OK


def cmd_neyman(args) -> int:
    _require_data(args)
    sys_ = load_marginals(args.data, _labels(args.arms))
    j = _outcome_index(args.outcome)
    if j >= sys_.dim:
        raise SchemaError(f"outcome y{j + 1} not present (d={sys_.dim})")
    beta = _floats(args.beta)
    arms = [m.points[:, j] for m in sys_.marginals]
    res = neyman_ci(arms, beta, _config(args), args.alpha, args.algorithm)
    _emit(args, {**res.to_dict(), "arms": list(sys_.labels), "beta": beta,
                 "outcome": f"y{j + 1}", "manifest": _manifest(args)})
    return EXIT_OK


def cmd_cov(args) -> int:
    _require_data(args)
    sys_ = load_marginals(args.data, _labels(args.arms))
    cfg = _config(args)
    beta = _floats(args.beta) if args.beta else None
    treated, control = args.treated, args.control
    if beta is None and (treated is None or control is None):
        if sys_.K != 2:
            raise SchemaError("cov needs --treated and --control (or --beta) with more than 2 arms")
        control, treated = sys_.labels
    arms = (treated, control)
    if args.all_pairs:
        rows = covariance_sweep(sys_, arms, cfg, beta, args.algorithm)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pair", "lower", "upper", "lower_converged", "upper_converged"])
        for (j1, j2), iv in rows:
            w.writerow([f"y{j1 + 1}-y{j2 + 1}", repr(iv.lower), repr(iv.upper),
                        iv.lower_certificate.converged, iv.upper_certificate.converged])
        _emit(args, buf.getvalue())
        return EXIT_OK
    if not args.dims:
        raise SchemaError("cov needs --dims y1,y2 or --all-pairs")
    parts = [p for p in args.dims.split(",") if p.strip()]
    if len(parts) != 2:
        raise SchemaError(f"--dims needs two outcomes, got {args.dims!r}")
    dims = (_outcome_index(parts[0]), _outcome_index(parts[1]))
    iv = covariance_bounds(sys_, dims, arms, cfg, beta, args.algorithm)
    _write_trace(args, iv.traces)
    _emit(args, {**iv.to_dict(), "dims": [f"y{d + 1}" for d in dims],
                 "arms": {"treated": treated, "control": control} if beta is None else None,
                 "beta": beta, "manifest": _manifest(args)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--data", help="CSV with columns arm, y1..yd")
    shared.add_argument("--spec", default="mw2", help="'mw2', inline JSON or a JSON file")
    shared.add_argument("--arms", help="comma-separated arm labels, in order")
    shared.add_argument("--eps", type=float, default=1e-3, help="target accuracy")
    shared.add_argument("--eta", type=float, default=None, help="fixed regularisation strength")
    shared.add_argument("--max-iters", type=int, default=10**6)
    shared.add_argument("--algorithm", choices=("sinkhorn", "greenkhorn"), default="sinkhorn")
    shared.add_argument("--seed", type=int, default=DEFAULT_SEED)
    shared.add_argument("--out", help="write the result here instead of stdout")
    shared.add_argument("--trace", help="write per-iteration JSON lines here")

    parser = argparse.ArgumentParser(prog="motbounds",
                                     description="Sharp bounds for non-identified causal estimands")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bounds", parents=[shared], help="identified interval of an estimand")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("synth-gaussian", parents=[shared], help="Gaussian MW2 check")
    p.add_argument("--sigmas", default=",".join(str(s) for s in GAUSSIAN_SIGMAS))
    p.add_argument("--n", type=int, default=200, help="draws per margin")
    p.add_argument("--rate-sweep", action="store_true", help="median error over sample sizes")
    p.add_argument("--ns", default="100,400,1600", help="total sample sizes for the sweep")
    p.add_argument("--n-seeds", type=int, default=20)
    p.set_defaults(func=cmd_synth_gaussian)

    p = sub.add_parser("synth-gaussian2d", parents=[shared], help="2-d Gaussian contrast check")
    p.add_argument("--n", type=int, default=100, help="joint draws")
    p.add_argument("--variances", default=",".join(str(v) for v in GAUSSIAN2D_VARIANCES))
    p.add_argument("--beta", default=",".join(str(b) for b in GAUSSIAN2D_BETA))
    p.set_defaults(func=cmd_synth_gaussian2d)

    p = sub.add_parser("neyman", parents=[shared], help="Neyman intervals for a contrast")
    p.add_argument("--beta", required=True, help="contrast coefficients, one per arm")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--outcome", default="y1")
    p.set_defaults(func=cmd_neyman)

    p = sub.add_parser("cov", parents=[shared], help="covariance of two treatment effects")
    p.add_argument("--dims", help="two outcomes, e.g. y1,y2")
    p.add_argument("--treated")
    p.add_argument("--control")
    p.add_argument("--beta", help="contrast over all arms instead of treated - control")
    p.add_argument("--all-pairs", action="store_true", help="CSV over every outcome pair")
    p.set_defaults(func=cmd_cov)
    return parser


def _fail(kind: str, message: str, code: int, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True),
          file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CellCapError as exc:
        return _fail("cell_cap", str(exc), EXIT_INPUT, required=exc.required,
                     allowed=exc.allowed)
    except NumericalError as exc:
        return _fail("numerical", str(exc), EXIT_NUMERICAL, iteration=exc.iteration,
                     margin=exc.margin)
    except (SchemaError, ValueError, OSError) as exc:
        return _fail("schema", str(exc), EXIT_INPUT)


if __name__ == "__main__":
    sys.exit(main())
