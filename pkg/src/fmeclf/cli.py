"""Command-line interface: ``fmeclf {simulate,fit,predict,evaluate,benchmark,export-coefs}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 fit did not converge (outputs are still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .benchmark import DEFAULT_PENALTIES, benchmark
from .data import (
    SimConfig,
    atomic_write,
    correct_classification_rate,
    load_dataset,
    save_dataset,
    simulate,
)
from .em import Criterion, FitConfig, Variant, build_designs, fit, resolve_basis, select_hyperparams
from .exceptions import ConfigurationError, DataError, DegenerateComponentError, FmeError
from .model import BasisConfig, coefficient_functions, dumps_model, loads_model, predict

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NONCONVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from None


def _f17(x: float) -> str:
    return "%.17g" % x


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fmeclf", description="Functional mixture-of-experts classification.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="draw train/test sets from the synthetic generator")
    s.add_argument("--noise-var", type=float, default=1.0)
    s.add_argument("--n-train", type=int, default=300)
    s.add_argument("--n-test", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)

    f = sub.add_parser("fit", help="fit a model to a matrix_csv training file")
    f.add_argument("--train", required=True)
    f.add_argument("--model-out", required=True)
    f.add_argument("--report-out", help="fit report path (default: <model-out>.report.txt)")
    f.add_argument("--variant", choices=[v.value for v in Variant], default="ifme-em")
    f.add_argument("--K", type=int, default=2)
    f.add_argument("--G", type=int, help="number of classes (default: largest label)")
    f.add_argument("--chi", type=float, help="gating penalty (default: per-variant benchmark value)")
    f.add_argument("--lambda", dest="lam", type=float, help="expert penalty (default: per-variant)")
    f.add_argument("--d1", type=int, default=0)
    f.add_argument("--d2", type=int, default=2)
    f.add_argument("--r", type=int, default=15)
    f.add_argument("--p", type=int, default=15)
    f.add_argument("--q", type=int, default=15)
    f.add_argument("--order", type=int, default=4)
    f.add_argument("--restarts", type=int, default=5)
    f.add_argument("--max-em-iters", type=int, default=1000)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--select", choices=["none", "bic", "val-ccr"], default="none")
    f.add_argument("--chi-grid", type=_floats)
    f.add_argument("--lambda-grid", type=_floats)
    f.add_argument("--K-grid", type=_ints)

    for name, text in (("predict", "write labels and class probabilities"), ("evaluate", "print test CCR")):
        e = sub.add_parser(name, help=text)
        e.add_argument("--model", required=True)
        e.add_argument("--data", required=True)
        if name == "predict":
            e.add_argument("--out", required=True)

    b = sub.add_parser("benchmark", help="replicated simulation study of all variants")
    b.add_argument("--replicates", type=int, default=20)
    b.add_argument("--noise-var", type=_floats, default=[1.0], help="comma list of noise levels")
    b.add_argument("--n-train", type=int, default=300)
    b.add_argument("--n-test", type=int, default=200)
    b.add_argument("--restarts", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="results table path; a .csv twin is written next to it")

    x = sub.add_parser("export-coefs", help="sample fitted coefficient functions")
    x.add_argument("--model", required=True)
    x.add_argument("--out-dir", required=True)
    x.add_argument("--grid-points", type=int, default=200)
    return p


def _echo(command: str, resolved: dict) -> None:
    sys.stderr.write(json.dumps({"command": command, **resolved}, sort_keys=True) + "\n")


# --- subcommands -----------------------------------------------------------


def cmd_simulate(a) -> int:
    cfg = SimConfig(n_train=a.n_train, n_test=a.n_test, noise_var=a.noise_var, seed=a.seed)
    train, test, truth = simulate(cfg)
    doc = truth.to_dict()
    _echo("simulate", {"config": {k: doc[k] for k in ("n_train", "n_test", "noise_var", "seed")}})
    out = Path(a.out_dir)
    save_dataset(train, out / "train.csv")
    save_dataset(test, out / "test.csv")
    atomic_write(out / "truth.json", json.dumps(doc, indent=1) + "\n")
    return EXIT_OK


def _fit_config(a) -> FitConfig:
    v = Variant(a.variant)
    chi0, lam0 = DEFAULT_PENALTIES[v]
    basis = BasisConfig(r=a.r, p=a.p, q=a.q, order=a.order, domain=None, d1=a.d1, d2=a.d2)
    return FitConfig(
        variant=v,
        K=a.K,
        chi=chi0 if a.chi is None else a.chi,
        lam=lam0 if a.lam is None else a.lam,
        basis=basis,
        max_em_iters=a.max_em_iters,
        n_restarts=a.restarts,
        seed=a.seed,
    ).resolved()


def _fit_report(cfg: FitConfig, rep, selection) -> str:
    lines = [
        f"variant: {cfg.variant.value}",
        f"K: {cfg.K}  chi: {cfg.chi:g}  lambda: {cfg.lam:g}",
        f"converged: {'yes' if rep.converged else 'no'}  iterations: {rep.iterations}",
        f"selected restart: {rep.restart}  failed restarts: {rep.failed_restarts}",
        f"log-likelihood: {rep.log_likelihood:.4f}",
        f"penalized log-likelihood: {rep.penalized_log_likelihood:.4f}",
        "restart objectives: " + ", ".join(f"{o:.4f}" for o in rep.restart_objectives),
        "",
        "nonzero coefficients",
    ]
    for k, c in enumerate(rep.sparsity["gating_nonzero"], 1):
        lines.append(f"  gating {k}: {c}")
    for k, blk in enumerate(rep.sparsity["expert_nonzero"], 1):
        lines.append(f"  expert {k}: " + " ".join(str(c) for c in blk))
    if "expert_d2_nonzero" in rep.sparsity:
        for k, c in enumerate(rep.sparsity["gating_d2_nonzero"], 1):
            lines.append(f"  gating {k} second-derivative samples: {c}")
        for k, blk in enumerate(rep.sparsity["expert_d2_nonzero"], 1):
            lines.append(f"  expert {k} second-derivative samples: " + " ".join(str(c) for c in blk))
    if selection is not None:
        lines += ["", f"selection ({selection[0]})", "  K      chi      lambda   score"]
        for row in selection[1].table:
            lines.append(f"  {row['K']:<6d} {row['chi']:<8g} {row['lambda']:<8g} {row['score']:.4f}")
    lines += ["", "iteration  penalized log-likelihood"]
    lines += [f"{i:9d}  {v:.4f}" for i, v in enumerate(rep.trace)]
    return "\n".join(lines) + "\n"


def cmd_fit(a) -> int:
    cfg = _fit_config(a)
    data = load_dataset(a.train, G=a.G)
    cfg = replace(cfg, basis=resolve_basis(cfg.basis, data))
    selection = None
    if a.select != "none":
        grids = {
            "chi_grid": a.chi_grid or [cfg.chi],
            "lambda_grid": a.lambda_grid or [cfg.lam],
            "K_grid": a.K_grid or [cfg.K],
        }
        sel = select_hyperparams(
            data, cfg.variant, grids["chi_grid"], grids["lambda_grid"], grids["K_grid"],
            Criterion(a.select), base=cfg, seed=a.seed,
        )
        cfg = replace(cfg, chi=sel.chi, lam=sel.lam, K=sel.K).resolved()
        selection = (a.select, sel)
    _echo("fit", {"config": cfg.to_dict(), "train": a.train, "select": a.select, "G": data.G})
    rep = fit(data, cfg)
    atomic_write(a.model_out, dumps_model(rep.model))
    atomic_write(a.report_out or f"{a.model_out}.report.txt", _fit_report(cfg, rep, selection))
    return EXIT_OK if rep.converged else EXIT_NONCONVERGED


def _load_model_and_data(a):
    try:
        text = Path(a.model).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {a.model}: {exc.strerror}") from None
    try:
        model = loads_model(text)
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{a.model}: invalid model document ({exc})") from None
    data = load_dataset(a.data, G=model.G)
    basis = model.config
    lo, hi = basis.domain
    if data.grid[0] < lo or data.grid[-1] > hi:
        raise DataError(f"{a.data}: grid outside the model domain [{lo}, {hi}]")
    designs = build_designs(data, basis, model.parameterization)
    return model, data, predict(model, designs.gating, designs.expert)


def cmd_predict(a) -> int:
    model, data, pred = _load_model_and_data(a)
    _echo("predict", {"model": a.model, "data": a.data, "out": a.out})
    head = ["row", "label"] + [f"p_{g}" for g in range(1, model.G + 1)]
    rows = [",".join(head)]
    for i, (y, p) in enumerate(zip(pred.labels, pred.class_probs), 1):
        rows.append(",".join([str(i), str(int(y))] + [_f17(v) for v in p]))
    atomic_write(a.out, "\n".join(rows) + "\n")
    return EXIT_OK


def cmd_evaluate(a) -> int:
    model, data, pred = _load_model_and_data(a)
    _echo("evaluate", {"model": a.model, "data": a.data})
    ccr = correct_classification_rate(pred.labels, data.labels)
    hits = int(np.sum(pred.labels == data.labels))
    sys.stdout.write(f"CCR {ccr:.4f} ({hits}/{data.n})\n")
    return EXIT_OK


def cmd_benchmark(a) -> int:
    sim = SimConfig(n_train=a.n_train, n_test=a.n_test, seed=a.seed)
    configs = [
        FitConfig(variant=v, K=2, chi=c, lam=l, n_restarts=a.restarts, seed=a.seed)
        for v, (c, l) in DEFAULT_PENALTIES.items()
    ]
    _echo(
        "benchmark",
        {
            "replicates": a.replicates,
            "noise_var": a.noise_var,
            "n_train": a.n_train,
            "n_test": a.n_test,
            "restarts": a.restarts,
            "seed": a.seed,
            "configs": [c.to_dict() for c in configs],
        },
    )
    res = benchmark(
        configs, sim, a.replicates, a.noise_var, progress=lambda m: sys.stderr.write(m + "\n")
    )
    text = res.to_text()
    sys.stdout.write(text)
    if a.out:
        atomic_write(a.out, text)
        atomic_write(str(Path(a.out).with_suffix(".csv")), res.to_csv())
    failed = any(c.errors for c in res.cells.values())
    return EXIT_NONCONVERGED if failed else EXIT_OK


def _coef_csv(t, value, d1, d2) -> str:
    rows = ["t,value,d1,d2"]
    rows += [",".join(_f17(x) for x in r) for r in zip(t, value, d1, d2)]
    return "\n".join(rows) + "\n"


def cmd_export(a) -> int:
    try:
        model = loads_model(Path(a.model).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {a.model}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{a.model}: invalid model document ({exc})") from None
    if a.grid_points < 2:
        raise ConfigurationError("--grid-points must be at least 2")
    _echo("export-coefs", {"model": a.model, "out_dir": a.out_dir, "grid_points": a.grid_points})
    lo, hi = model.config.domain
    t = np.linspace(lo, hi, a.grid_points)
    cf = coefficient_functions(model, t)
    out = Path(a.out_dir)
    g1, g2 = cf.gating_d1_grid, cf.gating_d2_grid
    for k in range(model.K - 1):
        atomic_write(out / f"gating_{k + 1}.csv", _coef_csv(t, cf.gating[k], g1[k], g2[k]))
    e1, e2 = cf.experts_d1_grid, cf.experts_d2_grid
    for k in range(model.K):
        for g in range(model.G - 1):
            atomic_write(
                out / f"expert_{k + 1}_class_{g + 1}.csv",
                _coef_csv(t, cf.experts[k, g], e1[k, g], e2[k, g]),
            )
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "export-coefs": cmd_export,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except DegenerateComponentError as exc:
        sys.stderr.write(f"fit failed: {exc}\n")
        return EXIT_NONCONVERGED
    except DataError as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    except ConfigurationError as exc:
        sys.stderr.write(f"configuration error: {exc}\n")
        return EXIT_USAGE
    except FmeError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
