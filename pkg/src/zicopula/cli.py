"""Command line front end."""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .copula import DEFAULT_AGE_CUT, fit_copula, fit_marginals
from .data import Role
from .dpiv import dks_test
from .glasso import (
    DEFAULT_LAMBDA_GRID,
    DEFAULT_NU_GRID,
    glasso_path,
    score_table_text,
    select_model,
)
from .inference import export_graph, prediction_records, sample, to_dot
from .io import IngestError, ModelFile, ModelFileError, ingest, load_model, save_model, write_csv
from .pipeline import (
    PipelineConfig,
    PipelineError,
    diagnostics_text,
    predictions_text,
    run_pipeline,
    train_test_split,
)
from .synthetic import reference_model


def _float_list(text: str) -> list[float]:
    try:
        return [math.inf if t.strip().lower() in ("inf", "infinity") else float(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("must lie strictly between 0 and 1")
    return v


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--workers", type=int, default=1, help="worker threads (default 1)")


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("data", type=Path, help="CSV with a header row, one row per user")
    p.add_argument("--age-column", help="name of the age column")
    p.add_argument("--gender-column", help="name of the 0/1 gender column")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--age-cut", type=int, default=DEFAULT_AGE_CUT, help="age threshold (default 35)")


def _grids(p: argparse.ArgumentParser, nu=True) -> None:
    if nu:
        p.add_argument("--nu-grid", type=_float_list, default=list(DEFAULT_NU_GRID),
                       help="degrees of freedom, 'inf' for Gaussian (default 30,60,inf)")
    p.add_argument("--lambda-grid", type=_float_list, default=list(DEFAULT_LAMBDA_GRID),
                   help="penalties (default 0,0.0075,0.02,0.1)")


def _scoring(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mvcdf-err", type=float, default=1e-4, help="QMC error target (default 1e-4)")
    p.add_argument("--score-rows", type=int, default=400, help="rows for the full score (default 400)")


def _load(args):
    return ingest(args.data, age_column=args.age_column, gender_column=args.gender_column,
                  delimiter=args.delimiter)


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _fmt(v):
    return "NA" if v is None else repr(float(v))


def cmd_fit_marginals(args) -> int:
    data = _load(args)
    fits = fit_marginals(data, seed=args.seed, workers=args.workers)
    head = ["column", "variant", "xi", "sigma", "beta", "mu", "se_xi", "se_sigma", "se_beta", "se_mu",
            "loglik", "bic", "n", "converged"]
    if args.ks_boot:
        head += ["ks_statistic", "ks_p_value"]
    lines = ["\t".join(head)]
    for j, fit in fits.items():
        p = fit.params
        row = [data.labels[j], p.variant.value, *map(_fmt, p.as_tuple()), *map(_fmt, fit.stderr),
               _fmt(fit.loglik), _fmt(fit.bic), str(fit.n), str(fit.converged)]
        if args.ks_boot:
            x = data.column(j)
            ks = dks_test(x[x > 0], p, n_boot=args.ks_boot, seed=args.seed)
            row += [_fmt(ks.statistic), _fmt(ks.p_value)]
        lines.append("\t".join(row))
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def cmd_fit_copula(args) -> int:
    data = _load(args)
    model = fit_copula(data, args.nu, age_cut=args.age_cut, workers=args.workers, seed=args.seed)
    save_model(ModelFile(model, model.sigma, None, {"seed": args.seed}), args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_glasso_path(args) -> int:
    mf = load_model(args.model)
    path = glasso_path(mf.sigma_pairwise, args.lambda_grid, penalize_diagonal=not args.no_diagonal_penalty)
    lines = ["lambda\tsparsity\tkkt_residual\tsweeps"]
    for est in path:
        lines.append(f"{est.lam!r}\t{est.sparsity!r}\t{est.kkt_residual!r}\t{est.n_sweeps}")
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def cmd_select(args) -> int:
    data = _load(args)
    if args.test is not None:
        train = data
        test = ingest(args.test, age_column=args.age_column, gender_column=args.gender_column,
                      delimiter=args.delimiter)
    else:
        tr, te = train_test_split(data.n, args.holdout, args.seed)
        train, test = data.take(tr), data.take(te)
    sel = select_model(train, test, args.nu_grid, args.lambda_grid, age_cut=args.age_cut,
                       score_rows=args.score_rows, target_err=args.mvcdf_err, seed=args.seed,
                       workers=args.workers)
    mf = ModelFile(sel.model, sel.base_models[sel.chosen.nu].sigma, sel.precision, {"seed": args.seed})
    save_model(mf, args.out)
    table = score_table_text(sel.table)
    if args.scores:
        Path(args.scores).write_text(table)
    else:
        sys.stdout.write(table)
    print(f"selected nu={sel.chosen.nu:g} lambda={sel.chosen.lam:g}; wrote {args.out}")
    return 0


def cmd_simulate(args) -> int:
    if args.reference:
        model, _ = reference_model(d=args.dim, seed=args.scenario_seed, covariates=args.covariates)
    elif args.model is not None:
        model = load_model(args.model).model
    else:
        raise SystemExit("simulate: give a model file or --reference")
    data = sample(model, args.n, args.seed)
    write_csv(data, args.out)
    extra = ""
    if Role.AGE in data.roles:
        extra = " (use --age-column age --gender-column gender when reading it back)"
    print(f"wrote {data.n} rows to {args.out}{extra}")
    return 0


def _precision(mf: ModelFile):
    if mf.precision is not None:
        return mf.precision.theta
    return np.linalg.inv(mf.model.sigma)


def cmd_predict(args) -> int:
    mf = load_model(args.model)
    data = _load(args)
    recs = prediction_records(mf.model, _precision(mf), data, args.n_predictions,
                              seed=args.seed, target_err=args.mvcdf_err)
    _emit(predictions_text(recs, mf.model.labels), args.out)
    return 0


def cmd_diagnose(args) -> int:
    mf = load_model(args.model)
    data = _load(args)
    _emit(diagnostics_text(mf.model, data, age_cut=args.age_cut), args.out)
    return 0


def cmd_export_graph(args) -> int:
    mf = load_model(args.model)
    graph = export_graph(_precision(mf), mf.model.labels, args.top_fraction)
    _emit(to_dot(graph, omit_isolated=not args.keep_isolated), args.out)
    return 0


def cmd_run(args) -> int:
    cfg = PipelineConfig(
        data=args.data, out_dir=args.out_dir, nu_grid=args.nu_grid, lambda_grid=args.lambda_grid,
        seed=args.seed, holdout=args.holdout, age_column=args.age_column,
        gender_column=args.gender_column, age_cut=args.age_cut, workers=args.workers,
        mvcdf_err=args.mvcdf_err, score_rows=args.score_rows, n_predictions=args.n_predictions,
        top_fraction=args.top_fraction, delimiter=args.delimiter,
    )
    run_pipeline(cfg)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="zicopula", description="Censored copula graphical models for count data.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-marginals", help="BIC-selected D-PIV fit per site column")
    _data_args(p); _common(p)
    p.add_argument("--ks-boot", type=int, default=0, help="bootstrap size for a discrete KS test (0 = skip)")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_fit_marginals)

    p = sub.add_parser("fit-copula", help="pairwise correlation fit for one nu")
    _data_args(p); _common(p)
    p.add_argument("--nu", type=lambda s: _float_list(s)[0], default=math.inf)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_fit_copula)

    p = sub.add_parser("glasso-path", help="penalized precision path of a fitted model")
    p.add_argument("model", type=Path)
    _grids(p, nu=False)
    p.add_argument("--no-diagonal-penalty", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_glasso_path)

    p = sub.add_parser("select", help="choose nu and lambda on held-out scores")
    _data_args(p); _common(p); _grids(p); _scoring(p)
    p.add_argument("--test", type=Path, help="held-out CSV (default: split off --holdout)")
    p.add_argument("--holdout", type=_fraction, default=0.1)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--scores", type=Path)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("simulate", help="sample from a model file or the reference scenario")
    p.add_argument("model", type=Path, nargs="?")
    p.add_argument("--reference", action="store_true", help="use the built-in sparse scenario")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--covariates", action="store_true", help="reference scenario with age and gender")
    p.add_argument("--scenario-seed", type=int, default=0, help="seed of the reference model itself (default 0)")
    p.add_argument("-n", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("predict", help="predict positive counts on held-out rows")
    p.add_argument("model", type=Path)
    _data_args(p); _common(p); _scoring(p)
    p.add_argument("--n-predictions", type=int, default=400)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("diagnose", help="binomial region and chi-square pair tests")
    p.add_argument("model", type=Path)
    _data_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("export-graph", help="Graphviz export of the strongest precision entries")
    p.add_argument("model", type=Path)
    p.add_argument("--top-fraction", type=float, default=0.05)
    p.add_argument("--keep-isolated", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_export_graph)

    p = sub.add_parser("run", help="full pipeline")
    _data_args(p); _common(p); _grids(p); _scoring(p)
    p.add_argument("--holdout", type=_fraction, default=0.1)
    p.add_argument("--n-predictions", type=int, default=400)
    p.add_argument("--top-fraction", type=float, default=0.05)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (IngestError, ModelFileError, PipelineError, ValueError, RuntimeError) as exc:
        print(f"zicopula {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
