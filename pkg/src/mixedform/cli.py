"""Command-line surface: parse/explain formulas, fit models, translate dialects.

Reports go to standard output (JSON or text); diagnostics and error lines go
to standard error.  Exit codes: 0 success, 1 user or input error (one
machine-parsable ``E_<CODE>: message`` line on stderr), 2 non-convergence
(the report is still emitted).
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings

import numpy as np

from . import __version__
from . import formula as F
from . import terms as T
from .covariance import (
    AR1,
    AR1V,
    US,
    BlockDiag,
    Diag,
    GIV,
    Id,
    IdV,
    Kron,
    VarStructure,
    read_giv_triplets,
    read_pedigree,
)
from .data import read_csv
from .dialects import lower_grouped, lower_rcov, lower_structural, translate, translate_rcov
from .errors import MixedFormError, Untranslatable
from .model import _split_inline_groups, _structural_terms, build_known_covariances, build_model
from .reml import FitOptions, fit as reml_fit

_THREADS_ENV = "MIXEDFORM_THREADS"  # reserved; currently ignored


def _fmt(value):
    """Round floats to 12 significant digits, recursively."""
    if isinstance(value, float):
        return float(f"{value:.12g}")
    if isinstance(value, dict):
        return {k: _fmt(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_fmt(v) for v in value]
    if isinstance(value, (np.floating,)):
        return float(f"{float(value):.12g}")
    if isinstance(value, (np.integer,)):
        return int(value)
    return value


def _emit(report: dict, fmt: str) -> None:
    if fmt == "json":
        print(json.dumps(_fmt(report), indent=2))
        return
    for line in _text_lines(report):
        print(line)


def _text_lines(report: dict, indent: int = 0):
    pad = "  " * indent
    for key, value in report.items():
        if isinstance(value, dict):
            yield f"{pad}{key}:"
            yield from _text_lines(value, indent + 1)
        elif isinstance(value, list):
            yield f"{pad}{key}:"
            for item in value:
                if isinstance(item, dict):
                    yield from _text_lines(item, indent + 1)
                    yield ""
                else:
                    yield f"{pad}  - {item}"
        else:
            yield f"{pad}{key}: {_fmt(value)}"


def describe_structure(vs: VarStructure) -> str:
    if isinstance(vs, Kron):
        inner = " ⊗ ".join(describe_structure(c) for c in vs.components)
        if vs.attach_scale:
            return f"sigma2 · ({inner})"
        return inner
    if isinstance(vs, BlockDiag):
        blocks = "; ".join(
            f"{lvl}: {describe_structure(b)}"
            for lvl, b in zip(vs.level_names, vs.blocks)
        )
        return f"blockdiag[{blocks}]"
    if isinstance(vs, Id):
        return f"Id({vs.dim})"
    if isinstance(vs, IdV):
        return f"IdV({vs.dim})"
    if isinstance(vs, Diag):
        return f"Diag({vs.dim})"
    if isinstance(vs, US):
        return f"US({vs.dim})"
    if isinstance(vs, AR1):
        return f"AR1({vs.dim})"
    if isinstance(vs, AR1V):
        return f"AR1V({vs.dim})"
    if isinstance(vs, GIV):
        return f"GIV({vs.dim})"
    return f"{type(vs).__name__}({vs.dim})"


def _parse_kv(pairs: list[str], what: str) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise MixedFormError(f"{what} expects name=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _load_table(args):
    if not args.data:
        return None
    schema = _parse_kv(args.schema, "--schema") or None
    return read_csv(args.data, schema=schema)


def _caret_line(text: str, position: int) -> str:
    return text + "\n" + " " * position + "^"


def cmd_parse(args) -> int:
    table = _load_table(args)
    lints: list[str] = []
    report: dict = {"formula": args.formula, "version": __version__, "seed": args.seed}

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        parsed = F.parse_formula(args.formula)
        fixed_rhs, inline_groups = _split_inline_groups(parsed.rhs)
        if fixed_rhs is not None:
            term_items, intercept_state = T.expand_parts(fixed_rhs)
            tl = T.TermList(term_items, True if intercept_state is None else intercept_state)
            if intercept_state is None:
                lints.append(
                    "intercept included implicitly; write '1 + ...' to keep the "
                    "formula aligned with the model equation"
                )
            elif intercept_state is False:
                lints.append(
                    "intercept removed via '0'/'-1'; the formula no longer "
                    "mirrors the model equation"
                )
        else:
            tl = T.TermList([], True)
        report["response"] = F.unparse(parsed.lhs) if parsed.lhs is not None else None
        report["canonical"] = T.canonical_text(tl)
        report["intercept"] = tl.intercept
    for warning in caught:
        lints.append(str(warning.message))

    random_reports = []

    def summarize(spec) -> dict:
        return {
            "term": spec.block.label,
            "dialect": spec.dialect,
            "structure": describe_structure(spec.structure),
            "q_total": spec.block.q_total,
            "groups": spec.block.group_count,
            "effects_per_group": spec.block.effects_per_group,
            "n_params": spec.structure.param_count(),
        }

    for group in inline_groups:
        inner_terms, inner_state = T.expand_parts(group.inner)
        if inner_state is None:
            lints.append(
                f"random term {F.unparse(group)!r} includes an implicit random "
                "intercept"
            )
        if table is not None:
            random_reports.append(summarize(lower_grouped(group, table)))
        else:
            random_reports.append(
                {"term": F.unparse(group), "dialect": "grouped",
                 "structure": "needs --data for dimensions"}
            )
    if args.random:
        random_formula = F.parse_formula(args.random)
        for node in _structural_terms(random_formula.rhs):
            if table is not None:
                random_reports.append(summarize(lower_structural(node, table)))
            else:
                random_reports.append(
                    {"term": F.unparse(node), "dialect": "structural",
                     "structure": "needs --data for dimensions"}
                )
    report["random_terms"] = random_reports

    if args.rcov:
        rcov_formula = F.parse_formula(args.rcov)
        if table is not None:
            plan = lower_rcov(rcov_formula.rhs, table)
            report["rcov"] = {
                "term": plan.source_text,
                "structure": describe_structure(plan.structure),
                "n_params": plan.structure.param_count(),
                "row_order": list(plan.sort_keys),
            }
        else:
            report["rcov"] = {
                "term": F.unparse(rcov_formula.rhs),
                "structure": "needs --data for dimensions",
            }
    else:
        report["rcov"] = None

    report["lints"] = lints
    _emit(report, args.format)
    return 0


def cmd_fit(args) -> int:
    if not args.data:
        raise MixedFormError("fit requires --data")
    table = _load_table(args)
    pedigree = {
        name: read_pedigree(path)
        for name, path in _parse_kv(args.pedigree, "--pedigree").items()
    }
    ginverse = {
        name: read_giv_triplets(path)
        for name, path in _parse_kv(args.ginverse, "--ginverse").items()
    }
    spec = build_model(
        args.formula,
        table,
        random=args.random,
        rcov=args.rcov,
        pedigree=pedigree or None,
        ginverse=ginverse or None,
    )
    options = FitOptions(max_iter=args.max_iter, tol=args.tol)
    result = reml_fit(spec, options)
    report = {
        "beta": dict(zip(result.beta_labels, result.beta.tolist())),
        "theta": dict(zip(result.theta_labels, result.theta.tolist())),
        "logREML": result.logREML,
        "converged": result.converged,
        "iterations": result.iterations,
        "n": spec.n,
        "p": spec.p,
        "q_total": spec.q_total,
        "dropped_rows": spec.n_dropped,
        "version": __version__,
        "seed": args.seed,
    }
    _emit(report, args.format)
    return 0 if result.converged else 2


def cmd_translate(args) -> int:
    if bool(args.term) == bool(args.rcov):
        raise MixedFormError("translate needs exactly one of --term or --rcov")
    if not args.data:
        raise MixedFormError("translate requires --data to resolve factors")
    table = _load_table(args)
    report = {
        "source_dialect": getattr(args, "from"),
        "target_dialect": args.to,
        "version": __version__,
        "seed": args.seed,
    }
    try:
        if args.rcov:
            report["source"] = args.rcov
            plan = lower_rcov(F.parse_formula(args.rcov).rhs, table)
            translation = translate_rcov(plan, args.to)
        else:
            report["source"] = args.term
            node = F.parse_formula("~" + args.term).rhs
            if isinstance(node, F.Group):
                detected = "grouped"
                spec = lower_grouped(node, table)
            else:
                detected = "structural"
                spec = lower_structural(node, table)
            declared = getattr(args, "from")
            if declared != detected:
                raise MixedFormError(
                    f"term is written in the {detected} dialect, not {declared}"
                )
            translation = translate(spec, args.to, table)
        report["result"] = translation.text
        report["untranslatable"] = None
    except Untranslatable as exc:
        report["result"] = None
        report["untranslatable"] = str(exc)
        if args.format == "text":
            print(f"untranslatable: {exc}")
            return 0
    if args.format == "text" and report["result"] is not None:
        print(report["result"])
        return 0
    _emit(report, "json")
    return 0


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixedform",
        description="Symbolic model-formula compiler and REML engine for "
        "linear mixed models",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--data", help="CSV data file")
        p.add_argument(
            "--schema",
            action="append",
            metavar="NAME=KIND",
            help="column type override (numeric or factor); repeatable",
        )
        p.add_argument("--format", choices=("text", "json"), default="json")
        p.add_argument("--seed", type=int, default=None,
                       help="seed echoed into reports")

    p_parse = sub.add_parser("parse", help="explain a formula")
    p_parse.add_argument("--formula", required=True)
    p_parse.add_argument("--random", help="structural random formula, e.g. ~idv(gen)")
    p_parse.add_argument("--rcov", help="residual formula, e.g. ~ar1(colf):ar1(rowf)")
    common(p_parse)
    p_parse.set_defaults(func=cmd_parse)

    p_fit = sub.add_parser("fit", help="fit a model by REML")
    p_fit.add_argument("--formula", required=True)
    p_fit.add_argument("--random")
    p_fit.add_argument("--rcov")
    p_fit.add_argument(
        "--ginverse", action="append", metavar="FACTOR=PATH",
        help="sparse inverse covariance triplets for a factor; repeatable",
    )
    p_fit.add_argument(
        "--pedigree", action="append", metavar="FACTOR=PATH",
        help="pedigree CSV (id,sire,dam) for a factor; repeatable",
    )
    p_fit.add_argument("--max-iter", type=int, default=500)
    p_fit.add_argument("--tol", type=float, default=1e-8)
    common(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_tr = sub.add_parser("translate", help="translate a term between dialects")
    p_tr.add_argument("--from", dest="from", required=True,
                      choices=("grouped", "structural"))
    p_tr.add_argument("--to", required=True, choices=("grouped", "structural"))
    p_tr.add_argument("--term", help="random term, e.g. (1 | site:geno)")
    p_tr.add_argument("--rcov", help="residual formula to translate")
    common(p_tr)
    p_tr.set_defaults(func=cmd_translate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_arg_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"E_IO: {exc.filename}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"E_IO: {exc}", file=sys.stderr)
        return 1
    except MixedFormError as exc:
        detail = str(exc)
        if exc.position is not None and getattr(args, "formula", None):
            print(_caret_line(args.formula, exc.position), file=sys.stderr)
        print(f"E_{exc.code}: {detail}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
