"""Command-line interface: ``fit``, ``predict``, ``simulate`` and ``km``.

Exit statuses: 0 success, 2 usage error, 3 data error, 4 numerical error.
"""

import argparse
import contextlib
import sys

import numpy as np

from . import __version__
from .analysis import analyze
from .artifact import FitArtifact, load_artifact, save_artifact
from .censoring import fit_km_censoring
from .data import FitOptions, Schema, read_csv
from .errors import DataError, IVSubdistError
from .prediction import cif_bands, predict_cif
from .simulation import CONFOUNDING_LEVELS, IV_LEVELS, SimScenario, run_monte_carlo, table1_grid


class Formatter:
    def __init__(self, full_precision=False):
        self.full = full_precision

    def __call__(self, value):
        if isinstance(value, (int, np.integer)):
            return str(int(value))
        value = float(value)
        return repr(value) if self.full else f"{value:.4g}"


def _table(rows, header, fmt):
    cells = [[c if isinstance(c, str) else fmt(c) for c in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(header)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join(lines)


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _tau(text):
    if text == "auto":
        return None
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"tau must be a number or 'auto', got {text!r}") from None


def _sim_tau(text):
    return "auto" if text == "auto" else _tau(text)


def _level(text):
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"level must lie in (0, 1), got {text}")
    return value


@contextlib.contextmanager
def _output(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w") as fh:
            yield fh


def _load_input(args):
    schema = Schema.parse(args.schema) if args.schema else None
    try:
        return read_csv(args.input, schema)
    except OSError as exc:
        raise DataError(f"cannot read {args.input}: {exc}") from None


def cmd_fit(args):
    fmt = Formatter(args.full_precision)
    data = _load_input(args)
    options = FitOptions(tau=args.tau, ci_level=args.level)
    result = analyze(data, options, args.mode)
    fit = result.fit
    out = [f"ivsubdist {__version__} fit  mode={fit.mode}  n={fit.n}  "
           f"events={int(fit.event_counts.sum())}  tau={fmt(fit.tau)}"]
    if result.first is not None:
        first = result.first
        diag = result.weak_iv()
        out += ["", "FIRST STAGE",
                _table([(name, g, s) for name, g, s in zip(first.column_names, first.gamma, first.gamma_se)],
                       ["term", "estimate", "se"], fmt),
                f"F = {fmt(first.f_stat)}  weak instrument: {'yes' if diag['weak'] else 'no'}",
                f"residual dispersion ratio (upper/lower half of fitted) = "
                f"{fmt(diag['residual_dispersion_ratio'])}",
                diag["advice"]]
    rows = [(r.name, r.estimate, r.se, r.z, r.p_value, r.lower, r.upper) for r in result.summary()]
    pct = f"{100 * args.level:g}%"
    out += ["", f"COEFFICIENTS ({pct} CI)",
            _table(rows, ["term", "estimate", "se", "z", "p", "lower", "upper"], fmt)]
    if any(r[2] == 0 for r in rows):
        out.append("note: zero standard error; z is infinite and the interval is a point")

    if args.baseline_out:
        with open(args.baseline_out, "w") as fh:
            fh.write("time\tH0_star\tH0_mod\n")
            for row in zip(fit.grid, fit.h0_star, fit.h0_mod):
                fh.write("\t".join(fmt(v) for v in row) + "\n")
        out.append(f"baseline written to {args.baseline_out}")
    if args.dump_influence:
        write_influence(result, args.dump_influence, fmt)
        out.append(f"influence functions written to {args.dump_influence}")
    if args.artifact:
        save_artifact(FitArtifact.from_analysis(result, data.digest()), args.artifact)
        out.append(f"artifact written to {args.artifact}")
    with _output(args.out) as fh:
        fh.write("\n".join(out) + "\n")
    return 0


def write_influence(result, path, fmt):
    names = result.fit.names
    rec = result.influence
    header = ["id"] + [f"{part}_{name}" for part in ("phi1", "phi2", "phi3") for name in names]
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for i, sid in enumerate(result.dataset.ids):
            values = np.concatenate([rec.phi1[i], rec.phi2[i], rec.phi3[i]])
            fh.write("\t".join([str(sid)] + [fmt(v) for v in values]) + "\n")


def cmd_predict(args):
    fmt = Formatter(args.full_precision)
    art = load_artifact(args.artifact)
    if args.input:
        art.check_input(_load_input(args).digest())
    fit = art.fit
    if args.times:
        times = np.array(args.times)
    else:
        times = np.linspace(0.0, fit.tau, args.grid)
    x_o = args.xo or []
    level = args.level if args.level is not None else art.level
    curve = cif_bands(predict_cif(fit, args.xe, x_o, times, art.variance), level)
    with _output(args.out) as fh:
        fh.write(_table(curve.table(), ["time", "F1", "se", "lower", "upper"], fmt) + "\n")
    return 0


def cmd_km(args):
    fmt = Formatter(args.full_precision)
    data = _load_input(args)
    G = fit_km_censoring(data)
    with _output(args.out) as fh:
        fh.write("time\tG\n")
        for t, g in G.step_table():
            fh.write(f"{fmt(t)}\t{fmt(g)}\n")
    return 0


SIM_HEADER = ["confounding", "iv", "n", "censoring", "iv_bias", "iv_se", "iv_cr", "iv_fail",
              "naive_bias", "naive_se", "naive_cr", "naive_fail", "weak_iv_rate"]


def _sim_row(labels, result):
    iv, naive = result.methods["iv"], result.methods["naive"]
    return list(labels) + [iv.bias, iv.empirical_se, iv.coverage, iv.failures,
                           naive.bias, naive.empirical_se, naive.coverage, naive.failures,
                           result.weak_iv_rate]


def _label(mapping, value):
    for name, v in mapping.items():
        if v == value:
            return name
    return str(value)


def cmd_simulate(args):
    fmt = Formatter(args.full_precision)
    tau = args.tau
    if args.table1:
        rows = [_sim_row((c, s, str(n), f"{cens:g}"), r) for (c, s, n, cens), r in table1_grid(
            confounding=args.confounding_levels, iv=args.iv_levels, sizes=args.sizes,
            censoring=args.censorings, reps=args.reps, seed=args.seed, workers=args.workers, tau=tau,
            invalid=args.invalid)]
    else:
        kw = dict(n=args.n, target_censoring=args.censoring, reps=args.reps, seed=args.seed,
                  tau=tau, invalid=args.invalid)
        if args.link == "logistic":
            scenario = SimScenario.logistic_default(**kw)
        else:
            scenario = SimScenario(gamma2=args.gamma2, beta3=args.beta3, **kw)
        result = run_monte_carlo(scenario, workers=args.workers)
        labels = (_label(CONFOUNDING_LEVELS, scenario.beta3),
                  args.link if args.link == "logistic" else _label(IV_LEVELS, scenario.gamma2),
                  str(scenario.n), f"{scenario.target_censoring:g}")
        rows = [_sim_row(labels, result)]
    with _output(args.out) as fh:
        if args.format == "csv":
            fh.write(",".join(SIM_HEADER) + "\n")
            for row in rows:
                fh.write(",".join(c if isinstance(c, str) else fmt(c) for c in row) + "\n")
        else:
            fh.write(_table(rows, SIM_HEADER, fmt) + "\n")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ivsubdist",
        description="Two-stage IV estimation for the additive subdistribution hazard model.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_input=True):
        if needs_input:
            p.add_argument("--input", required=True, help="CSV file with a header row")
            p.add_argument("--schema", help="column mapping, e.g. time=T,status=cause,covariates=a+b")
        p.add_argument("--out", help="report destination (default: standard output)")
        p.add_argument("--full-precision", action="store_true",
                       help="print full floating-point precision instead of 4 significant digits")

    p = sub.add_parser("fit", help="fit the IV or naive model and report coefficients")
    common(p)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--iv", dest="mode", action="store_const", const="iv")
    mode.add_argument("--naive", dest="mode", action="store_const", const="naive")
    p.set_defaults(mode="iv", func=cmd_fit)
    p.add_argument("--tau", type=_tau, default=None, help="upper time limit, or 'auto'")
    p.add_argument("--level", type=_level, default=0.95)
    p.add_argument("--artifact", help="save the fit to this artifact file")
    p.add_argument("--baseline-out", help="write (time, H0_star, H0_mod) to this file")
    p.add_argument("--dump-influence", help="write per-subject influence components to this file")

    p = sub.add_parser("predict", help="cumulative incidence with pointwise bands from an artifact")
    common(p, needs_input=False)
    p.add_argument("--artifact", required=True)
    p.add_argument("--input", help="data file to check against the artifact's input digest")
    p.add_argument("--schema")
    p.add_argument("--xe", type=float, required=True, help="exposure value (original scale)")
    p.add_argument("--xo", type=_float_list, help="comma-separated covariate values (original scale)")
    when = p.add_mutually_exclusive_group()
    when.add_argument("--times", type=_float_list)
    when.add_argument("--grid", type=int, default=21, help="number of equally spaced times on [0, tau]")
    p.add_argument("--level", type=_level, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="Monte Carlo study of bias, SE and coverage")
    common(p, needs_input=False)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--gamma2", type=float, default=0.4, help="instrument strength")
    p.add_argument("--beta3", type=float, default=0.4, help="unmeasured confounder effect")
    p.add_argument("--censoring", type=float, default=0.30, help="target censored fraction")
    p.add_argument("--link", choices=("linear", "logistic"), default="linear")
    p.add_argument("--invalid", choices=("resample", "envelope"), default="resample")
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=20240601)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--tau", type=_sim_tau, default=None,
                   help="fit horizon; default t0, 'auto' for the largest event time")
    p.add_argument("--table1", action="store_true", help="run the full grid instead of one scenario")
    p.add_argument("--sizes", type=lambda s: [int(v) for v in s.split(",")], default=[100, 400, 1000])
    p.add_argument("--censorings", type=_float_list, default=[0.5, 0.3])
    p.add_argument("--confounding-levels", type=lambda s: s.split(","), default=["none", "weak", "strong"])
    p.add_argument("--iv-levels", type=lambda s: s.split(","), default=["none", "weak", "strong"])
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("km", help="Kaplan-Meier estimate of the censoring distribution")
    common(p)
    p.set_defaults(func=cmd_km)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except IVSubdistError as exc:
        print(f"error: {exc.describe()}", file=sys.stderr)
        return exc.exit_status
    except ValueError as exc:
        print(f"error: [{args.command}:U100] {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
