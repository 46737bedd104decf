"""Command-line interface.

Every command writes its CSV outputs and a ``manifest.txt`` into
``--out-dir``.  Exit codes: 0 success, 2 usage, 3 data validation,
4 numerical failure; errors are reported on one line of stderr as
``error[<code>]: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import os
import platform
import re
import shlex
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np
import scipy
from scipy import stats

from . import __version__
from .bootstrap import (SINGLE_STAGE_CAVEAT, CalibrationSpec, bootstrap_critical_value,
                        bootstrap_draws)
from .datamodel import DesignSidecar, load_dataset, read_keyvalue, read_schema, write_keyvalue
from .elcore import ELKind, ELProblem, RFunction
from .eltest import (DEFAULT_MC_SEED, CalibMethod, TestResult, lr_nested, quantile_delta,
                     simple_test, step_interval, wald_test, woodruff_interval)
from .estfn import (family_linear_regression, family_logistic_regression, family_mean,
                    family_quantile)
from .exceptions import DataError, NumericalError
from .penel import select_tau
from .varest import plugin_components, sandwich

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
FAMILIES = ("mean", "linear", "logistic", "quantile")
TEST_METHODS = ("eigmc", "rs1", "rs2", "boot", "wald")
INTERCEPT_NAMES = {"one", "1", "intercept", "const"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- shared plumbing ------------------------------------------------------------

def _family(args, ds):
    name = args.family
    if name == "mean":
        return family_mean()
    if name == "quantile":
        if args.tau is None:
            raise UsageError("--tau is required for the quantile family")
        return family_quantile(args.tau)
    if ds.x.shape[1] == 0:
        raise UsageError(f"family {name!r} needs covariate columns in the schema")
    if name == "linear":
        return family_linear_regression(ds.x.shape[1])
    return family_logistic_regression(ds.x.shape[1])


def _load(args):
    if not args.schema or not Path(args.schema).is_file():
        raise UsageError(f"schema file not found: {args.schema}")
    if not args.data or not Path(args.data).is_file():
        raise UsageError(f"data file not found: {args.data}")
    return load_dataset(args.data, read_schema(args.schema))


def _param_names(gf, ds) -> list[str]:
    if gf.name.startswith(("linear", "logistic")):
        return list(ds.x_names)
    return ["theta"]


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".10g")
    return str(v)


_TERM = re.compile(r"\s*([+-]?)\s*(\d+(?:\.\d*)?(?:[eE][+-]?\d+)?\s*\*?\s*)?theta\[\s*([^\]]+?)\s*\]")


def parse_hypothesis(text: str, names, p: int):
    """Parse ``theta[j]=v`` and linear contrasts joined by ``;``.

    ``j`` is a 0-based index or a parameter name.  Returns ``(A, c)`` with
    one row per equation.
    """
    rows, rhs = [], []
    for eq in (e for e in text.split(";") if e.strip()):
        if eq.count("=") != 1:
            raise UsageError(f"hypothesis {eq.strip()!r} needs exactly one '='")
        lhs, value = eq.split("=")
        try:
            v = float(value)
        except ValueError:
            raise UsageError(f"right-hand side of {eq.strip()!r} is not a number") from None
        row = np.zeros(p)
        pos = 0
        lhs = lhs.strip()
        while pos < len(lhs):
            m = _TERM.match(lhs, pos)
            if m is None or (pos > 0 and not m.group(1)):
                raise UsageError(f"cannot parse {lhs[pos:]!r} in hypothesis")
            sign = -1.0 if m.group(1) == "-" else 1.0
            coef = float(m.group(2).replace("*", "")) if m.group(2) else 1.0
            key = m.group(3)
            if key.lstrip("-").isdigit():
                j = int(key)
            elif key in names:
                j = list(names).index(key)
            else:
                raise UsageError(f"unknown parameter {key!r}")
            if not 0 <= j < p:
                raise UsageError(f"parameter index {j} outside 0..{p - 1}")
            row[j] += sign * coef
            pos = m.end()
        if not np.any(row):
            raise UsageError(f"hypothesis {eq.strip()!r} has no parameter terms")
        rows.append(row)
        rhs.append(v)
    if not rows:
        raise UsageError("empty hypothesis")
    A = np.vstack(rows)
    if np.linalg.matrix_rank(A) < A.shape[0]:
        raise UsageError("hypothesis rows are linearly dependent")
    return A, np.asarray(rhs)


def _design_draws(args, ds):
    if not args.design:
        raise UsageError("method boot needs --design (design weights and calibration columns); "
                         "replication columns alone do not carry the resampling counts")
    side = DesignSidecar.from_file(args.design)
    sample = side.design_sample(args.data, ds)
    cols = side.calib_indices(ds)
    spec = (CalibrationSpec(cols, side.totals) if side.totals is not None
            else CalibrationSpec.horvitz_thompson(sample, cols))
    return bootstrap_draws(sample, spec, args.B, args.seed)


# -- commands -------------------------------------------------------------------

def cmd_estimate(args, out: Path) -> list[Path]:
    ds = _load(args)
    gf = _family(args, ds)
    kind = ELKind.parse(args.el)
    prob = ELProblem.from_dataset(kind, ds, gf)
    theta, prof = prob.maximize()
    names = _param_names(gf, ds)
    se = np.full(gf.p, np.nan)
    if ds.B and gf.smooth:
        se = sandwich(kind, plugin_components(kind, ds, gf, theta)).se
    header = ["coefficient", "estimate", "se"]
    logistic = gf.name.startswith("logistic")
    if logistic:
        header.append("odds_ratio")
    header.append("wald_p")
    rows = []
    for j, name in enumerate(names):
        z = theta[j] / se[j] if se[j] > 0 else np.nan
        p = float(2.0 * stats.norm.sf(abs(z))) if np.isfinite(z) else np.nan
        row = [name, _fmt(theta[j]), _fmt(se[j])]
        if logistic:
            row.append(_fmt(np.exp(theta[j])))
        rows.append(row + [_fmt(p)])
    return [_write_csv(out / "estimate.csv", header, rows)]


def cmd_test(args, out: Path) -> list[Path]:
    ds = _load(args)
    gf = _family(args, ds)
    kind = ELKind.parse(args.el)
    A, c = parse_hypothesis(args.hypothesis, _param_names(gf, ds), gf.p)
    method = args.method
    constraint = RFunction.linear(A, c)
    full_vector = A.shape[0] == gf.p
    if method == "wald":
        if A.shape[0] != 1:
            raise UsageError("the Wald test takes a single linear equation")
        fit = sandwich(kind, plugin_components(kind, ds, gf, ELProblem.from_dataset(kind, ds, gf).maximize()[0]))
        res = wald_test(fit, A[0], float(c[0]))
    elif method == "boot":
        H, wstar = _design_draws(args, ds)
        prob = ELProblem.from_dataset(kind, ds, gf)
        theta_hat, prof_hat = prob.maximize()
        theta0 = np.linalg.solve(A, c) if full_vector else None
        if full_vector:
            stat = 2.0 * (prof_hat.log_ratio - prob.log_ratio(theta0))
            theta_r = theta0
        else:
            theta_r, prof_r = prob.maximize_restricted(constraint, theta_hat=theta_hat)
            stat = 2.0 * (prof_hat.log_ratio - prof_r.log_ratio)
        stat = max(float(stat), 0.0)
        cal = bootstrap_critical_value(kind, gf, ds.x, ds.y, theta_hat, args.alpha,
                                       counts=H, unit_weights=wstar,
                                       constraint=None if full_vector else constraint)
        finite = cal.lr_star[np.isfinite(cal.lr_star)]
        p = float((1 + np.sum(finite >= stat)) / (1 + finite.size))
        print(SINGLE_STAGE_CAVEAT, file=sys.stderr)
        res = TestResult(stat, p, "BOOTSTRAP", {args.alpha: cal.rejects(stat)}, "boot",
                         theta_hat=theta_hat, theta_restricted=theta_r,
                         extra={"b_alpha": cal.b_alpha, "B": args.B,
                                "finite_replicates": cal.n_finite, "seed": args.seed})
    else:
        cm = CalibMethod(method)
        if full_vector:
            res = simple_test(kind, ds, gf, np.linalg.solve(A, c), cm,
                              mc_draws=args.mc_draws, seed=args.mc_seed)
        else:
            res = lr_nested(kind, ds, gf, constraint, cm, mc_draws=args.mc_draws,
                            seed=args.mc_seed)
    path = out / "test.csv"
    path.write_text(res.to_csv(), encoding="utf-8")
    return [path]


def cmd_quantile(args, out: Path) -> list[Path]:
    ds = _load(args)
    if args.tau is None:
        raise UsageError("--tau is required")
    gf = family_quantile(args.tau)
    rows = []
    for kind in ((args.el,) if args.el != "both" else ("pel", "sel")):
        prob = ELProblem.from_dataset(kind, ds, gf)
        theta, _ = prob.maximize()
        fit = plugin_components(kind, ds, gf, theta)
        crit = quantile_delta(fit, CalibMethod.EIGEN_MC, args.mc_draws, args.mc_seed).critical_value(args.alpha)
        iv = step_interval(prob, float(theta[0]), crit)
        rows.append([kind.upper(), _fmt(args.tau), _fmt(iv.estimate), _fmt(iv.lower), _fmt(iv.upper),
                     _fmt(iv.critical_value), ",".join(iv.flags)])
    iv = woodruff_interval(ds, args.tau, args.alpha)
    rows.append(["NA", _fmt(args.tau), _fmt(iv.estimate), _fmt(iv.lower), _fmt(iv.upper),
                 _fmt(iv.critical_value), ",".join(iv.flags)])
    header = ["method", "tau", "estimate", "lower", "upper", "critical_value", "flags"]
    return [_write_csv(out / "quantile.csv", header, rows)]


def _unpenalized(args, names) -> tuple[int, ...]:
    if args.unpenalized is None:
        return tuple(j for j, n in enumerate(names) if n.lower() in INTERCEPT_NAMES)
    keep = [s.strip() for s in args.unpenalized.split(",") if s.strip()]
    bad = [s for s in keep if s not in names]
    if bad:
        raise UsageError(f"unknown coefficient(s) in --unpenalized: {', '.join(bad)}")
    return tuple(names.index(s) for s in keep)


def cmd_select(args, out: Path) -> list[Path]:
    ds = _load(args)
    gf = _family(args, ds)
    if not gf.name.startswith(("linear", "logistic")):
        raise UsageError("selection is available for the linear and logistic families")
    names = _param_names(gf, ds)
    res = select_tau(args.el, ds, gf, unpenalized=_unpenalized(args, names))
    rows = [[name, _fmt(res.theta_hat[j]), str(int(j in res.selected))] for j, name in enumerate(names)]
    paths = [_write_csv(out / "select.csv", ["coefficient", "estimate", "selected"], rows)]
    path_rows = [[_fmt(t), _fmt(b), str(int(t == res.tau_chosen))] for t, b in res.criterion_path]
    paths.append(_write_csv(out / "select_path.csv", ["tau", "bic", "chosen"], path_rows))
    return paths


def cmd_repweights(args, out: Path) -> list[Path]:
    ds = _load(args)
    if not args.design:
        raise UsageError("repweights needs --design naming the design-weight column")
    side = DesignSidecar.from_file(args.design)
    sample = side.design_sample(args.data, ds)
    cols = side.calib_indices(ds)
    spec = (CalibrationSpec(cols, side.totals) if side.totals is not None
            else CalibrationSpec.horvitz_thompson(sample, cols))
    H, wstar = bootstrap_draws(sample, spec, args.B, args.seed)
    rep = H * wstar
    with open(args.data, newline="", encoding="utf-8") as fh:
        records = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    header, body = records[0], records[1:]
    new_cols = [f"{args.rep_prefix}{b + 1}" for b in range(args.B)]
    clash = set(new_cols) & {h.strip() for h in header}
    if clash:
        raise UsageError(f"output would duplicate existing column(s), e.g. {sorted(clash)[0]}")
    data_path = out / (Path(args.data).stem + "_rep.csv")
    with open(data_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header + new_cols)
        for row, vals in zip(body, rep):
            w.writerow(row + [format(v, ".17g") for v in vals])
    schema = read_schema(args.schema).to_mapping()
    schema["rep_prefix"] = args.rep_prefix
    if np.any(rep < 0):
        schema["signed_replicates"] = "true"
    schema_path = out / (Path(args.data).stem + "_rep.schema")
    write_keyvalue(schema_path, schema)
    print(SINGLE_STAGE_CAVEAT, file=sys.stderr)
    return [data_path, schema_path]


def _descriptor_path(name: str) -> Path:
    p = Path(name)
    if p.is_file():
        return p
    builtin = resources.files("elsurvey") / "descriptors" / f"{name}.txt"
    if builtin.is_file():
        return Path(str(builtin))
    raise UsageError(f"descriptor not found: {name}")


def cmd_simulate(args, out: Path) -> list[Path]:
    from .simlab.experiment import ExperimentDescriptor, run_experiment

    m = read_keyvalue(_descriptor_path(args.descriptor))
    if args.runs is not None:
        m["runs"] = str(args.runs)
    if args.B_given:
        m["B"] = str(args.B)
    if args.seed_given:
        m["seed"] = str(args.seed)
    if args.mc_draws_given:
        m["mc_draws"] = str(args.mc_draws)
    d = ExperimentDescriptor.from_mapping(m)
    write_keyvalue(out / f"{d.name}_descriptor.txt", d.to_mapping())
    res = run_experiment(d, threads=args.threads)
    return [out / f"{d.name}_descriptor.txt"] + res.write_tables(out)


def cmd_synth(args, out: Path) -> list[Path]:
    from .simlab.gss import write_gss_replica

    return list(write_gss_replica(out, seed=args.seed, B=args.B).values())


def cmd_report(args, out: Path) -> list[Path]:
    """Logistic summary table: estimates, odds ratios, EL p-values and selections."""
    ds = _load(args)
    args.family = "logistic"
    gf = _family(args, ds)
    names = _param_names(gf, ds)
    unpen = _unpenalized(args, names)
    cols = {}
    for kind in ("pel", "sel"):
        prob = ELProblem.from_dataset(kind, ds, gf)
        theta, _ = prob.maximize()
        fit = sandwich(kind, plugin_components(kind, ds, gf, theta))
        pv = []
        for j in range(gf.p):
            r = lr_nested(kind, ds, gf, RFunction.fix([j], [0.0], gf.p), CalibMethod(args.method),
                          mc_draws=args.mc_draws, seed=args.mc_seed, fit=fit, theta_hat=theta)
            pv.append(r.p_value)
        sel = select_tau(kind, ds, gf, unpenalized=unpen)
        cols[kind] = (theta, fit.se, pv, sel.theta_hat)
    theta, se = cols[args.el][0], cols[args.el][1]
    header = ["coefficient", "Estimate", "SE", "OR", "p_PEL", "p_SEL", "select_PEL", "select_SEL"]
    rows = [[name, _fmt(theta[j]), _fmt(se[j]), _fmt(np.exp(theta[j])), _fmt(cols["pel"][2][j]),
             _fmt(cols["sel"][2][j]), _fmt(cols["pel"][3][j]), _fmt(cols["sel"][3][j])]
            for j, name in enumerate(names)]
    return [_write_csv(out / "report.csv", header, rows)]


def cmd_replay(args, out: Path) -> list[Path]:
    m = read_keyvalue(args.manifest)
    if "argv" not in m:
        raise UsageError(f"{args.manifest}: no argv entry")
    argv = shlex.split(m["argv"])
    if args.out_dir:
        argv = _replace_flag(argv, "--out-dir", args.out_dir)
    return _dispatch(argv)[1]


def _replace_flag(argv, flag, value):
    argv = list(argv)
    if flag in argv:
        argv[argv.index(flag) + 1] = value
    else:
        argv += [flag, value]
    return argv


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="elsurvey", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"elsurvey {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, family=True):
        p.add_argument("--data")
        p.add_argument("--schema")
        if family:
            p.add_argument("--family", choices=FAMILIES, default="mean")
        p.add_argument("--tau", type=float)
        p.add_argument("--el", choices=("pel", "sel"), default="pel")
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--mc-draws", type=int, default=100_000)
        p.add_argument("--mc-seed", type=int, default=DEFAULT_MC_SEED)
        p.add_argument("--out-dir", default=".")
        return p

    p = common(sub.add_parser("estimate", help="point estimates and standard errors"))
    p.set_defaults(func=cmd_estimate)

    p = common(sub.add_parser("test", help="EL ratio, bootstrap or Wald test"))
    p.add_argument("--hypothesis", required=True)
    p.add_argument("--method", choices=TEST_METHODS, default="eigmc")
    p.add_argument("--design")
    p.add_argument("--B", type=int, default=500)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_test)

    p = common(sub.add_parser("quantile", help="EL and Woodruff intervals for a quantile"), family=False)
    p.set_defaults(func=cmd_quantile)

    p = common(sub.add_parser("select", help="SCAD variable selection tuned by BIC"))
    p.add_argument("--unpenalized")
    p.set_defaults(func=cmd_select)

    p = common(sub.add_parser("report", help="logistic summary table for PEL and SEL"), family=False)
    p.add_argument("--method", choices=("eigmc", "rs1", "rs2"), default="eigmc")
    p.add_argument("--unpenalized")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("repweights", help="append bootstrap replication weights to a file")
    p.add_argument("--data")
    p.add_argument("--schema")
    p.add_argument("--design")
    p.add_argument("--B", type=int, default=500)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--rep-prefix", default="w_rep_")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_repweights)

    p = sub.add_parser("simulate", help="run a Monte Carlo experiment descriptor")
    p.add_argument("--descriptor", required=True, help="file path or shipped name (tab0, tab1, ...)")
    p.add_argument("--runs", type=int)
    p.add_argument("--B", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mc-draws", type=int)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("synth", help="write the synthetic logistic survey replica")
    p.add_argument("--seed", type=int, default=2016)
    p.add_argument("--B", type=int, default=500)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_replay)
    return parser


def _manifest(argv, args, out: Path, outputs, elapsed: float) -> Path:
    items = {
        "command": args.command,
        "argv": shlex.join(argv),
        "elsurvey": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
        "elapsed_seconds": f"{elapsed:.3f}",
    }
    for k, v in sorted(vars(args).items()):
        if k not in ("func", "command") and not k.endswith("_given"):
            items[f"config.{k}"] = v
    items["outputs"] = ",".join(p.name for p in outputs)
    path = out / "manifest.txt"
    write_keyvalue(path, items)
    return path


def _dispatch(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a command is required (estimate, test, quantile, select, report, "
                         "repweights, simulate, synth, replay)")
    if args.command == "simulate":
        args.B_given = args.B is not None
        args.seed_given = args.seed is not None
        args.mc_draws_given = args.mc_draws is not None
    if args.command == "replay":
        return args, args.func(args, None)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    outputs = args.func(args, out)
    outputs.append(_manifest(argv, args, out, outputs, time.perf_counter() - start))
    return args, outputs


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        _, outputs = _dispatch(argv)
    except UsageError as exc:
        code, msg = EXIT_USAGE, f"usage: {exc}"
    except DataError as exc:
        code, msg = EXIT_DATA, f"data: {exc}"
    except NumericalError as exc:
        code, msg = EXIT_NUMERICAL, f"numerical: {exc}"
    except (OSError, ValueError) as exc:
        code, msg = EXIT_USAGE, f"usage: {exc}"
    else:
        for p in outputs:
            print(p)
        return EXIT_OK
    print(f"error[{code}]: " + " ".join(str(msg).split()), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
