"""Command line entry point

Every command reads an optional flat TOML file (``--config``), applies ``--set key=value``
overrides, rejects keys it does not know and writes the resolved configuration next to its
outputs as ``resolved_config.toml``. Failures end with exit status 1 and one JSON object
``{"command", "error", "message"}`` on stderr.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any
from typing import Callable
from typing import Dict
from typing import List
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Tuple

import toml

from biascite import agents
from biascite import store
from biascite import synthetic
from biascite import training
from biascite import whatif as whatif_report
from biascite.config import apply_overrides
from biascite.config import dump_config
from biascite.config import from_mapping
from biascite.config import load_config_file
from biascite.errors import BiasCiteError
from biascite.errors import ConfigError
from biascite.graph import SplitConfig
from biascite.graph import YearRange
from biascite.graph import build_graph
from biascite.graph import export_graph
from biascite.graph import read_records
from biascite.graph import temporal_split
from biascite.graph import write_records
from biascite.objectives import ACTIONABLE_FACTORS


__all__ = ["main", "build_parser", "RESOLVED_CONFIG_FILE", "SCORER_URL_ENV", "GITHUB_TOKEN_ENV"]


logger = logging.getLogger(__name__)

RESOLVED_CONFIG_FILE = "resolved_config.toml"
SCORER_URL_ENV = "BIASCITE_SCORER_URL"
GITHUB_TOKEN_ENV = "BIASCITE_GITHUB_TOKEN"

# file names inside --out
FEATURES_FILE = "features.tsv"
DIAGNOSTICS_FILE = "diagnostics.tsv"
INGEST_ERRORS_FILE = "ingest_errors.tsv"
CORPUS_DB_FILE = "corpus.db"
GRAPH_DIR = "graph"
CHECKPOINT_DIR = "checkpoint"
HISTORY_FILE = "history.tsv"
LEDGER_FILE = "ledger.tsv"
VAL_REPORT_FILE = "val_report.json"
EVAL_REPORT_FILE = "eval_report.json"
EVAL_GROUPS_FILE = "eval_groups.tsv"
WHATIF_ROWS_FILE = "whatif_rows.tsv"
WHATIF_SUMMARY_FILE = "whatif_summary.json"
SWEEP_RESULTS_FILE = "sweep_results.tsv"
SWEEP_DB_FILE = "sweep.db"
SWEEP_CELLS_DIR = "cells"

_SPLIT_KEYS = ("train_first", "train_last", "val_first", "val_last", "test_first", "test_last")
_PATH_FLAGS = ("input", "records", "features", "tables", "checkpoint", "truth")


def _split_config(data: Mapping[str, Any], default: SplitConfig = SplitConfig()) -> SplitConfig:
    def span(name: str, base: YearRange) -> YearRange:
        first, last = data.get(f"{name}_first", base.first), data.get(f"{name}_last", base.last)
        if isinstance(first, bool) or isinstance(last, bool) or not isinstance(first, int) or not isinstance(last, int):
            raise ConfigError(f"'{name}_first' and '{name}_last' must be integers")
        return YearRange(first, last)

    return SplitConfig(
        train=span("train", default.train), val=span("val", default.val), test=span("test", default.test)
    )


def _split_keys(split: SplitConfig) -> Dict[str, int]:
    keys = {}
    for name in ("train", "val", "test"):
        span = getattr(split, name)
        keys[f"{name}_first"], keys[f"{name}_last"] = span.first, span.last
    return keys


def _require(data: Mapping[str, Any], key: str) -> Path:
    if key not in data:
        raise ConfigError(f"missing required path '{key}' (use --{key} or --set {key}=...)")
    path = Path(str(data[key]))
    if not path.exists():
        raise ConfigError(f"'{key}' path '{path}' does not exist")
    return path


def _check_keys(data: Mapping[str, Any], allowed: Sequence[str]) -> None:
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(sorted(unknown))}")


def _write_resolved(out: Path, sections: Sequence[Any], extra: Mapping[str, Any]) -> None:
    (out / RESOLVED_CONFIG_FILE).write_text(dump_config(sections, extra), encoding="utf-8")


def _paths(data: Mapping[str, Any]) -> Dict[str, str]:
    return {key: str(data[key]) for key in _PATH_FLAGS if key in data}


def _fields(cls) -> Tuple[str, ...]:
    return tuple(item.name for item in dataclasses.fields(cls))


def _load_inputs(data: Mapping[str, Any]):
    records = read_records(_require(data, "records")).records
    features = agents.read_features(_require(data, "features"))
    return records, features


def _exposure_target(data: Mapping[str, Any]) -> Optional[Dict[str, float]]:
    """Ground-truth exposure of a synthetic corpus, the reference of the calibration term"""
    if "truth" not in data:
        return None
    return {paper: item.e_true for paper, item in synthetic.read_truth(_require(data, "truth")).items()}


def cmd_gen(data: Dict[str, Any], out: Path, plot: bool) -> None:  # pylint: disable=unused-argument
    """Generate a synthetic corpus, its truth sidecar, lookup tables and features"""
    deterministic = data.pop("deterministic", False)
    if not isinstance(deterministic, bool):
        raise ConfigError("'deterministic' must be true or false")
    config = from_mapping(synthetic.GenConfig, data)
    if deterministic:
        config = dataclasses.replace(config, dispersion=None)
    corpus = synthetic.generate(config)
    synthetic.write_corpus(corpus, out)
    extractions = [agents.Extraction(record.id, corpus.features[record.id], ()) for record in corpus.records]
    agents.write_features(extractions, out / FEATURES_FILE)
    _write_resolved(out, [config], {"deterministic": config.deterministic})


def cmd_ingest(data: Dict[str, Any], out: Path, plot: bool) -> None:  # pylint: disable=unused-argument
    """Validate a record file, keep the valid records and store them with their split"""
    _check_keys(data, ("input", "year_first", "year_last", "seed") + _SPLIT_KEYS)
    year_range = None
    if "year_first" in data or "year_last" in data:
        year_range = (int(data.get("year_first", 0)), int(data.get("year_last", 9999)))
    split_config = _split_config(data)
    result = read_records(_require(data, "input"), year_range)
    write_records(result.records, out / synthetic.RECORDS_FILE)
    with (out / INGEST_ERRORS_FILE).open("w", encoding="utf-8") as outfile:
        outfile.write("line_no\treason\n")
        outfile.writelines(f"{error.line_no}\t{error.reason}\n" for error in result.errors)
    store.open_database(out / CORPUS_DB_FILE)
    store.save_corpus(result.records, temporal_split(result.records, split_config))
    logger.info("Ingested %d records, skipped %d malformed lines", len(result.records), len(result.errors))
    extra = {**_split_keys(split_config), **_paths(data)}
    if year_range is not None:
        extra.update(year_first=year_range[0], year_last=year_range[1])
    _write_resolved(out, [], extra)


def _agent_context(records, tables: Path, verify: bool, workers: int, split_config: SplitConfig) -> agents.AgentContext:
    venue_table = agents.VenueRankingTable.load(tables / synthetic.VENUES_FILE)
    institutions = agents.InstitutionDirectory.load(tables / synthetic.INSTITUTIONS_FILE)
    keyword_path = tables / synthetic.KEYWORDS_FILE
    if keyword_path.exists():
        keyword_counts = agents.KeywordCounts.load(keyword_path)
    else:
        logger.info("No keyword counts under %s, counting the corpus itself", tables)
        keyword_counts = agents.KeywordCounts.from_records(records)
    scorer = None
    endpoint = os.environ.get(SCORER_URL_ENV)
    if endpoint:
        logger.info("Scoring text quality with the external scorer at %s (%d workers)", endpoint, workers)
        scorer = agents.RemoteQualityScorer(endpoint)
    verifier = agents.GitHubRepositoryVerifier(token=os.environ.get(GITHUB_TOKEN_ENV)) if verify else None
    return agents.AgentContext.from_corpus(
        records, venue_table, institutions, keyword_counts, split_config, quality_scorer=scorer, repo_verifier=verifier
    )


def cmd_features(data: Dict[str, Any], out: Path, plot: bool) -> None:  # pylint: disable=unused-argument
    """Run the feature agents over a record file and export the corpus graph"""
    _check_keys(data, ("records", "tables", "workers", "verify_repositories", "seed") + _SPLIT_KEYS)
    split_config = _split_config(data)
    workers = data.get("workers", 1)
    verify = data.get("verify_repositories", False)
    if isinstance(workers, bool) or not isinstance(workers, int) or workers < 1:
        raise ConfigError("'workers' must be a positive integer")
    if not isinstance(verify, bool):
        raise ConfigError("'verify_repositories' must be true or false")
    records = read_records(_require(data, "records")).records
    context = _agent_context(records, _require(data, "tables"), verify, workers, split_config)
    extractions = agents.extract_all(records, context, workers)
    agents.write_features(extractions, out / FEATURES_FILE)
    agents.write_diagnostics(extractions, out / DIAGNOSTICS_FILE)
    export_graph(build_graph(records, {item.paper_id: item.vector for item in extractions}), out / GRAPH_DIR)
    extra = {"workers": workers, "verify_repositories": verify, **_split_keys(split_config), **_paths(data)}
    _write_resolved(out, [], extra)


def _train_one(
    data_set: training.TrainingData, config: training.TrainConfig, out: Path, plot: bool
) -> training.FitResult:
    out.mkdir(parents=True, exist_ok=True)
    result = training.fit(data_set, config)
    training.save_model(
        out / CHECKPOINT_DIR,
        result.best.params,
        data_set.normalizer,
        config,
        result.best_epoch,
        data_set.q_threshold,
        data_set.split.split_years,
    )
    training.write_history(result.history, out / HISTORY_FILE)
    training.write_ledger(result.bundles, out / LEDGER_FILE)
    (out / VAL_REPORT_FILE).write_text(result.best_report.to_json(), encoding="utf-8")
    if plot:
        from biascite import plots  # pylint: disable=import-outside-toplevel

        plots.plot_history(
            [row.epoch for row in result.history],
            [row.train_total for row in result.history],
            [row.val_loss for row in result.history],
            out / "history.svg",
        )
    return result


def cmd_train(data: Dict[str, Any], out: Path, plot: bool) -> None:
    """Train on the train split with early stopping on the validation split"""
    config = from_mapping(training.TrainConfig, data, allowed_extra=("records", "features", "truth") + _SPLIT_KEYS)
    split_config = _split_config(data)
    records, features = _load_inputs(data)
    data_set = training.prepare_data(
        records, features, split_config, config.environment_config(), exposure_target=_exposure_target(data)
    )
    _train_one(data_set, config, out, plot)
    _write_resolved(out, [config], {**_split_keys(split_config), **_paths(data)})


def _load_for_checkpoint(data: Mapping[str, Any]):
    model = training.load_model(_require(data, "checkpoint"))
    records, features = _load_inputs(data)
    data_set = training.prepare_data(
        records,
        features,
        model.split,
        model.config.environment_config(),
        normalizer=model.normalizer,
        q_threshold=model.q_threshold,
    )
    return model, data_set


def cmd_eval(data: Dict[str, Any], out: Path, plot: bool) -> None:
    """Evaluate a checkpoint on one split"""
    _check_keys(data, ("records", "features", "checkpoint", "split", "seed"))
    split = str(data.get("split", "test"))
    model, data_set = _load_for_checkpoint(data)
    report = training.evaluate(data_set, model.params, model.config, split)
    (out / EVAL_REPORT_FILE).write_text(report.to_json(), encoding="utf-8")
    with (out / EVAL_GROUPS_FILE).open("w", encoding="utf-8") as outfile:
        outfile.write("env\tband\tmale\trmsle\tcount\n")
        for env, band, male, rmsle, count in report.rows():
            outfile.write(f"{env}\t{band}\t{male!r}\t{rmsle!r}\t{count}\n")
    if plot:
        from biascite import plots  # pylint: disable=import-outside-toplevel

        plots.plot_report(report, out / "eval_report.svg")
    logger.info("%s split: MALE %.4f, RMSLE %.4f over %d papers", split, report.male, report.rmsle, report.count)
    _write_resolved(out, [], {"split": split, **_paths(data)})


def cmd_whatif(data: Dict[str, Any], out: Path, plot: bool) -> None:  # pylint: disable=unused-argument
    """Per-paper counterfactual effects of the actionable factors"""
    _check_keys(data, ("records", "features", "checkpoint", "split", "factors", "seed"))
    split = str(data.get("split", "test"))
    factors = tuple(str(item) for item in data.get("factors", ACTIONABLE_FACTORS))
    model, data_set = _load_for_checkpoint(data)
    report = whatif_report.whatif(data_set, model, factors, split)
    whatif_report.write_rows(report.rows, out / WHATIF_ROWS_FILE)
    whatif_report.write_summary(report, out / WHATIF_SUMMARY_FILE)
    _write_resolved(out, [], {"split": split, "factors": list(factors), **_paths(data)})


def _cell_dir(position: int, param: str, value: float) -> str:
    return f"{position:03d}_{param}={value!r}"


def cmd_sweep(data: Dict[str, Any], out: Path, plot: bool) -> None:
    """Train and evaluate once per value of one loss weight"""
    param = data.pop("sweep_param", "lambda_reg")
    values = data.pop("sweep_values", [0.01, 0.05, 0.1])
    split = str(data.pop("split", "test"))
    if param not in _fields(training.TrainConfig) or not param.startswith("lambda_"):
        raise ConfigError(f"'sweep_param' must name a loss weight, got '{param}'")
    if not isinstance(values, list) or not values:
        raise ConfigError("'sweep_values' must be a non-empty array")
    base = from_mapping(training.TrainConfig, data, allowed_extra=("records", "features", "truth") + _SPLIT_KEYS)
    split_config = _split_config(data)
    records, features = _load_inputs(data)
    data_set = training.prepare_data(
        records, features, split_config, base.environment_config(), exposure_target=_exposure_target(data)
    )
    store.open_database(out / SWEEP_DB_FILE)

    points: List[Tuple[float, float, float]] = []
    lines = ["position\tparam\tvalue\tmale\trmsle\tndcg10\tndcg20\tworst_group_rmsle\tbest_epoch\n"]
    for position, value in enumerate(values):
        config = from_mapping(training.TrainConfig, {**base.to_dict(), param: value})
        cell = out / SWEEP_CELLS_DIR / _cell_dir(position, param, float(value))
        store.record_sweep_cell(param, float(value), cell, seed=config.seed)
        logger.info("Sweep cell %d/%d: %s = %r", position + 1, len(values), param, value)
        try:
            result = _train_one(data_set, config, cell, False)
            report = training.evaluate(data_set, result.best.params, config, split)
        except BiasCiteError:
            store.record_sweep_cell(param, float(value), cell, store.SweepStatus.FAILED, seed=config.seed)
            raise
        (cell / EVAL_REPORT_FILE).write_text(report.to_json(), encoding="utf-8")
        store.record_sweep_cell(param, float(value), cell, store.SweepStatus.DONE, report.to_dict(), seed=config.seed)
        points.append((float(value), report.male, report.rmsle))
        lines.append(
            f"{position}\t{param}\t{float(value)!r}\t{report.male!r}\t{report.rmsle!r}\t{report.ndcg[10]!r}\t"
            f"{report.ndcg[20]!r}\t{report.worst_group_rmsle!r}\t{result.best_epoch}\n"
        )
    (out / SWEEP_RESULTS_FILE).write_text("".join(lines), encoding="utf-8")
    if plot:
        from biascite import plots  # pylint: disable=import-outside-toplevel

        plots.plot_sweep(param, points, out / "sweep_curve.svg")
    _write_resolved(
        out,
        [base],
        {
            "sweep_param": param,
            "sweep_values": [float(item) for item in values],
            "split": split,
            **_split_keys(split_config),
            **_paths(data),
        },
    )


COMMANDS: Dict[str, Callable[[Dict[str, Any], Path, bool], None]] = {
    "gen": cmd_gen,
    "ingest": cmd_ingest,
    "features": cmd_features,
    "train": cmd_train,
    "eval": cmd_eval,
    "whatif": cmd_whatif,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biascite", description="Bias-aware citation prediction")
    parser.add_argument("--verbose", "-v", action="store_true", help="Log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True)
    for name, func in COMMANDS.items():
        sub = commands.add_parser(name, help=(func.__doc__ or "").strip().splitlines()[0])
        sub.add_argument("--config", type=Path, help="Flat TOML configuration file")
        sub.add_argument("--seed", type=int, help="Random seed, overrides the configuration")
        sub.add_argument("--out", type=Path, required=True, help="Output directory")
        sub.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        sub.add_argument("--plot", action="store_true", help="Also render SVG charts (needs matplotlib)")
        for flag in _PATH_FLAGS:
            sub.add_argument(f"--{flag}", type=Path, help=f"Shorthand for --set {flag}=PATH")
    return parser


def resolve(args: argparse.Namespace) -> Dict[str, Any]:
    """Merge the configuration file, path flags, ``--set`` overrides and ``--seed``"""
    data = load_config_file(args.config) if args.config else {}
    for flag in _PATH_FLAGS:
        if getattr(args, flag, None) is not None:
            data[flag] = str(getattr(args, flag))
    data = apply_overrides(data, args.overrides)
    if args.seed is not None:
        data["seed"] = args.seed
    return data


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        data = resolve(args)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](data, args.out, args.plot)
    except (BiasCiteError, ValueError, KeyError, OSError, toml.TomlDecodeError) as err:
        error = err.to_dict() if isinstance(err, BiasCiteError) else {"error": type(err).__name__, "message": str(err)}
        sys.stderr.write(json.dumps({"command": args.command, **error}, sort_keys=True) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
