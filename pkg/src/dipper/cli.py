"""Command-line interface: ``run``, ``null-bench``, ``replicate`` and ``simulate``.

Settings resolve as built-in defaults, then a JSON ``--config`` file, then
explicit flags. Every command writes a ``config.json`` echo of the resolved
settings next to its outputs, and identical settings give byte-identical
files (wall time is recorded only with ``--record-timing``).

Exit status: 0 success, 1 internal failure, 2 input error, 3 finished with a
convergence warning (outputs are still written).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from importlib import resources
from pathlib import Path

import numpy as np

from ._validation import CapabilityError, DataError, DesignError
from .benchmark import (
    SyntheticSpec,
    alpha_sweep,
    calls_from_results,
    direction_imbalance,
    generate_synthetic,
    null_error_rate,
    replication_counts,
    stored_results,
)
from .data import apply_null_split, ingest_table, make_null_splits, write_table
from .io import read_draws, read_results, write_draws, write_json, write_long, write_results
from .pipeline import ALL_METHODS, BAYESIAN_METHODS, RunConfig, analyze
from .model import PRESETS

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2
EXIT_CONVERGENCE = 3

INPUT_ERRORS = (DataError, DesignError, CapabilityError, FileNotFoundError,
                IsADirectoryError, json.JSONDecodeError)


class InputError(Exception):
    pass


def demo_table_path() -> Path:
    """Path of the bundled 40-sample demo table."""
    return Path(str(resources.files("dipper").joinpath("demo", "demo_table.tsv")))


def _add_common(p, methods=True):
    p.add_argument("--config", help="JSON file of settings; flags override it")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    if methods:
        p.add_argument("--input", nargs="+", help="input table(s)")
        p.add_argument("--method", choices=ALL_METHODS)
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--alpha", type=float)
        p.add_argument("--chains", type=int)
        p.add_argument("--iterations", type=int)
        p.add_argument("--warmup", type=int)
        p.add_argument("--target-accept", type=float)
        p.add_argument("--max-tree-depth", type=int)
        p.add_argument("--group-col")
        p.add_argument("--reads-col")
        p.add_argument("--covariates", nargs="*", help="covariate column names")
        p.add_argument("--min-present", type=int)
        p.add_argument("--jobs", dest="n_jobs", type=int, help="parallel workers")
        p.add_argument("--record-timing", action="store_const", const=True,
                       help="add wall time to diagnostics (outputs then differ run to run)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dipper", description="Differential prevalence analysis with shrinkage priors."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="analyze one table")
    _add_common(p)
    p.add_argument("--demo", action="store_true", help="use the bundled demo table")
    p.add_argument("--no-draws", dest="write_draws", action="store_const", const=False,
                   help="do not write posterior draws")

    p = sub.add_parser("null-bench", help="error rate on random relabelings of one group")
    _add_common(p)
    p.add_argument("--n-splits", type=int)
    p.add_argument("--null-group", type=int, help="group value of the samples to split")

    p = sub.add_parser("replicate", help="replication between two result files")
    _add_common(p)
    p.add_argument("--alphas", nargs="+", type=float)

    p = sub.add_parser("simulate", help="write a synthetic table and its truth")
    _add_common(p, methods=False)
    p.add_argument("--n-case", type=int)
    p.add_argument("--n-control", type=int)
    p.add_argument("--n-features", type=int)
    p.add_argument("--fraction-nonnull", type=float)
    p.add_argument("--effect-tau", type=float)
    p.add_argument("--effect-nu", type=float)
    p.add_argument("--reads-effect", type=float)
    return parser


def _load_config(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if not isinstance(d, dict):
        raise InputError(f"config file {path} must hold a JSON object")
    return d


def _resolve(args, names, build):
    """Merge config file and explicit flags, then ``build(settings)``."""
    settings = _load_config(args.config)
    for k, v in vars(args).items():
        if k in names and v is not None:
            settings[k] = v
    try:
        return build(settings)
    except TypeError as exc:
        raise InputError(f"bad configuration: {exc}") from None
    except ValueError as exc:
        raise InputError(str(exc)) from None


_RUN_FIELDS = {f.name for f in fields(RunConfig)}
_SIM_FIELDS = {f.name for f in fields(SyntheticSpec)} | {"out"}


def _run_config(args) -> RunConfig:
    return _resolve(args, _RUN_FIELDS, RunConfig.from_dict)


def _sim_config(settings):
    settings = dict(settings)
    out = settings.pop("out", "simulated")
    return out, SyntheticSpec(**settings)


def _outdir(config) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ingest(path, config, require_group=True):
    return ingest_table(path, group_col=config.group_col, reads_col=config.reads_col,
                        covariates=config.covariates, require_group=require_group)


def _summary_rows(method, results, dataset):
    sig = [r for r in results if r.significant]
    n = len(results)
    pos, neg, prop = direction_imbalance(calls_from_results(results))
    return [
        (method, "n_tested", n, dataset),
        (method, "n_significant", len(sig), dataset),
        (method, "proportion_significant", len(sig) / n if n else None, dataset),
        (method, "n_positive", pos, dataset),
        (method, "n_negative", neg, dataset),
        (method, "majority_direction_proportion", prop, dataset),
    ]


def cmd_run(args) -> int:
    if args.demo:
        args.input = [str(demo_table_path())]
        # the demo table carries an age column that is a covariate, not a feature
        if args.covariates is None and "covariates" not in _load_config(args.config):
            args.covariates = ["age"]
    config = _run_config(args)
    if len(config.input) != 1:
        raise InputError("run takes exactly one --input table (or --demo)")
    table = _ingest(config.input[0], config)
    output = analyze(table, config)
    out = _outdir(config)
    write_json(config.to_dict(), out / "config.json")
    write_results(output.results, out / "results.tsv")
    diag = dict(output.diagnostics)
    diag["warning"] = None if output.converged else (
        "convergence criteria violated (R-hat >= 1.02 or divergent transitions)"
    )
    write_json(diag, out / "diagnostics.json")
    dataset = Path(config.input[0]).stem
    write_long(_summary_rows(config.method, output.results, dataset), out / "plot.tsv")
    if output.beta_draws is not None and config.write_draws:
        write_draws(out / "draws.tsv", output.feature_ids, output.beta_draws)
    if not output.converged:
        print("warning: " + diag["warning"], file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def _split_seed(seed, source_index, split_index):
    return int(np.random.SeedSequence([seed, source_index, split_index]).generate_state(1)[0])


def cmd_null_bench(args) -> int:
    config = _run_config(args)
    if not config.input:
        raise InputError("null-bench needs at least one --input table")
    out = _outdir(config)
    rows, flag_results, ids = [], [], []
    any_unconverged = False
    for s, path in enumerate(config.input):
        table = _ingest(path, config, require_group=False)
        keep = np.flatnonzero(table.group == config.null_group)
        table = table.subset_samples(keep)
        source = Path(path).stem
        source_seed = int(np.random.SeedSequence([config.seed, s]).generate_state(1)[0])
        splits = make_null_splits(table, config.n_splits, source_seed, source_id=source)
        for i, split in enumerate(splits):
            output = analyze(apply_null_split(table, split), config, seed=_split_seed(config.seed, s, i))
            any_unconverged |= not output.converged
            n_sig = sum(r.significant for r in output.results)
            dataset = f"{source}:{i}"
            ids.append(dataset)
            flag_results.append(output.results)
            rows.append({
                "dataset": dataset, "source": source, "split": i,
                "n_case": split.n_case, "n_control": split.n_control,
                "balanced": split.balanced, "n_tested": len(output.results),
                "n_significant": n_sig, "any_finding": n_sig > 0,
                "converged": output.converged,
            })
    report = null_error_rate(flag_results, alpha=config.alpha, dataset_ids=ids)
    write_json(config.to_dict(), out / "config.json")
    write_json({"method": config.method, "alpha": config.alpha, **report.to_dict(),
                "splits": rows}, out / "null_report.json")
    cols = list(rows[0])
    with open(out / "null_splits.tsv", "w", encoding="utf-8") as fh:
        fh.write("\t".join(cols) + "\n")
        for r in rows:
            fh.write("\t".join(_cell(r[c]) for c in cols) + "\n")
    long = [(config.method, "lambda", report.lambda_, "all"),
            (config.method, "lambda_ci_low", report.ci_low, "all"),
            (config.method, "lambda_ci_high", report.ci_high, "all")]
    long += [(config.method, "n_significant", r["n_significant"], r["dataset"]) for r in rows]
    write_long(long, out / "plot.tsv")
    if any_unconverged:
        print("warning: some null datasets violated the convergence criteria", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def _cell(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _stored(path):
    results = read_results(path)
    if results and results[0].method in BAYESIAN_METHODS:
        draws_path = Path(path).with_name("draws.tsv")
        if not draws_path.exists():
            raise CapabilityError(f"{path} holds Bayesian results but {draws_path} is missing")
        fids, draws = read_draws(draws_path)
        if fids != [r.feature_id for r in results]:
            raise DataError(f"{draws_path} does not match the features of {path}")
        return results, stored_results(results, draws, fids)
    return results, stored_results(results)


def cmd_replicate(args) -> int:
    config = _run_config(args)
    if len(config.input) != 2:
        raise InputError("replicate needs exactly two --input result files")
    (res_a, store_a), (res_b, store_b) = (_stored(p) for p in config.input)
    curve = alpha_sweep(store_a, store_b, config.alphas)
    rep = replication_counts(store_a.calls(config.alpha), store_b.calls(config.alpha),
                             pair_id=f"{config.input[0]}|{config.input[1]}", curve=curve)
    out = _outdir(config)
    write_json(config.to_dict(), out / "config.json")
    write_json({"alpha": config.alpha, "methods": [res_a[0].method if res_a else None,
                                                   res_b[0].method if res_b else None],
                **rep.to_dict()}, out / "replication.json")
    with open(out / "replication_curve.tsv", "w", encoding="utf-8") as fh:
        fh.write("alpha\tn_replicated\tn_conflicting\n")
        for a, r, c in curve:
            fh.write(f"{a!r}\t{r}\t{c}\n")
    method = res_a[0].method if res_a else ""
    long = []
    for a, r, c in curve:
        long += [(method, f"replicated@{a!r}", r, rep.pair_id),
                 (method, f"conflicting@{a!r}", c, rep.pair_id)]
    write_long(long, out / "plot.tsv")
    return EXIT_OK


def cmd_simulate(args) -> int:
    out, spec = _resolve(args, _SIM_FIELDS, _sim_config)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    table, truth = generate_synthetic(spec)
    write_table(table, out / "table.tsv")
    with open(out / "truth.tsv", "w", encoding="utf-8") as fh:
        fh.write("feature_id\talpha\tbeta\tnonnull\n")
        for f, a, b, nn in zip(table.feature_ids, truth["alpha"], truth["beta"], truth["nonnull"]):
            fh.write(f"{f}\t{float(a)!r}\t{float(b)!r}\t{'true' if nn else 'false'}\n")
    write_json({"spec": spec.to_dict(), "seed": spec.seed, "out": str(out)}, out / "config.json")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "null-bench": cmd_null_bench,
    "replicate": cmd_replicate,
    "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (InputError, *INPUT_ERRORS) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - report and map to the failure code
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
