"""Command-line entry point.

Subcommands: build-data, grid-search, run, correlate, truncation-report.
Exit codes: 0 success, 2 validation error, 3 refusal to overwrite existing
results, 4 backend failure. Every report file starts with a header line
carrying the toolkit version and the config hash, and all files are written
atomically.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

from mtdetect import __version__
from mtdetect.backend import Hyperparams, get_backend
from mtdetect.config import ToolConfig, config_hash, load_config
from mtdetect.corpus import (
    GRANULARITIES,
    LABEL_HT,
    LABEL_MT,
    MODES,
    SPLIT_NAMES,
    DatasetSplit,
    build_paired_dataset,
    check_balance,
    filter_source_original,
    ingest_bitext,
)
from mtdetect.doclevel import truncation_report
from mtdetect.errors import BackendError, ConfigError, DataError
from mtdetect.metrics import (
    BLEU_VARIANT,
    EvalCell,
    bleu,
    emit_matrix,
    quality_vs_accuracy,
    read_quality_scores,
)
from mtdetect.training import (
    DatasetStore,
    ExperimentConfig,
    GridSearchResult,
    RunRecord,
    grid_search,
    run_document_experiment,
    run_sentence_experiment,
    safe_dirname,
    train_key,
)
from mtdetect.util import write_text_atomic


class ResultsExist(Exception):
    """Raised when a run would overwrite an existing results directory."""


def _header(cfg_hash: str, extra: str = "") -> str:
    line = f"# mtdetect {__version__} config {cfg_hash}"
    return f"{line} {extra}" if extra else line


def _print(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# ---------------------------------------------------------------- build-data


def cmd_build_data(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if not cfg.corpora:
        raise ConfigError("build-data needs a [corpora] section")
    store = DatasetStore(cfg.datasets_dir)

    count_lines: list[str] = []
    n_files = 0
    for lang in sorted(cfg.corpora):
        corpus_cfg = cfg.corpora[lang]
        corpus = ingest_bitext(
            corpus_cfg.source_file,
            corpus_cfg.ht_file,
            corpus_cfg.mt_files,
            corpus_cfg.manifest,
            src_lang=lang,
            target_lang=corpus_cfg.target_lang,
        )
        sent_counts: dict[str, int] = {}
        doc_counts: dict[str, int] = {}
        for split_name in SPLIT_NAMES:
            records = filter_source_original(corpus.splits[split_name], lang)
            sent_counts[split_name] = len(records)
            doc_counts[split_name] = len({r.source.doc_id for r in records})
            for system in sorted(corpus_cfg.mt_files):
                for granularity in GRANULARITIES:
                    for mode in MODES:
                        dataset = build_paired_dataset(
                            records, system, mode, granularity, split_name
                        )
                        check_balance(dataset)
                        store.save(dataset, lang, system)
                        n_files += 1
        count_lines.append(
            f"{lang} sentences  "
            + " / ".join(f"{s} {sent_counts[s]:,}" for s in SPLIT_NAMES)
        )
        count_lines.append(
            f"{lang} documents  "
            + " / ".join(f"{s} {doc_counts[s]:,}" for s in SPLIT_NAMES)
        )

    # Hash after building so the header reflects the datasets just produced.
    cfg_hash = config_hash(cfg)
    report = "\n".join([_header(cfg_hash)] + count_lines) + "\n"
    write_text_atomic(cfg.datasets_dir / "counts.txt", report)
    _print(report)
    _print(f"wrote {n_files} dataset files under {cfg.datasets_dir}")
    return 0


# --------------------------------------------------------------- grid-search


def _experiment_config(cfg: ToolConfig) -> ExperimentConfig:
    return ExperimentConfig(
        backend_id=cfg.backend_id,
        mode=cfg.mode,
        granularity=cfg.granularity,
        train_groups=cfg.train_groups,
        eval_targets=cfg.eval_targets,
        seeds=cfg.seeds,
        hp_grid=cfg.grid,
        doc_strategy=cfg.strategy,
        adapter_command=cfg.adapter_command,
    )


def _grid_dir(cfg: ToolConfig) -> Path:
    key = safe_dirname(train_key(cfg.train_groups[0]))
    return cfg.output_dir / "grid_search" / f"{key}.{cfg.mode}.{cfg.granularity}"


def _grid_csv(result: GridSearchResult, cfg_hash: str) -> str:
    lines = [
        _header(cfg_hash),
        "learning_rate,batch_size,gradient_accumulation,dev_accuracy,error",
    ]
    for point in result.points:
        acc = "" if point.dev_accuracy is None else f"{point.dev_accuracy:.6f}"
        err = "" if point.error is None else point.error.replace("\n", " ").replace(",", ";")
        lines.append(
            f"{point.hp.learning_rate},{point.hp.batch_size},"
            f"{point.hp.gradient_accumulation},{acc},{err}"
        )
    return "\n".join(lines) + "\n"


def cmd_grid_search(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if cfg.grid is None:
        raise ConfigError("grid-search needs a [grid] section")
    if len(cfg.train_groups) != 1:
        raise ConfigError(
            "grid-search runs one train group at a time; "
            f"config lists {len(cfg.train_groups)}"
        )
    exp = _experiment_config(cfg)
    store = DatasetStore(cfg.datasets_dir)
    group = cfg.train_groups[0]
    train = store.load_group(group, "train", cfg.granularity, cfg.mode)
    dev = store.load_group(group, "dev", cfg.granularity, cfg.mode)

    cfg_hash = config_hash(cfg)
    out_dir = _grid_dir(cfg)
    result = grid_search(exp, train, dev, out_dir / "work", jobs=args.jobs)

    best_acc = next(
        p.dev_accuracy for p in result.points if p.error is None and p.hp == result.best
    )
    payload = {
        "version": __version__,
        "config_hash": cfg_hash,
        "train": train_key(group),
        "mode": cfg.mode,
        "granularity": cfg.granularity,
        "dev_accuracy": best_acc,
        "hyperparams": result.best.to_dict(),
    }
    write_text_atomic(
        out_dir / "best_hyperparams.json", json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )
    write_text_atomic(out_dir / "grid_points.csv", _grid_csv(result, cfg_hash))

    n_failed = sum(1 for p in result.points if p.error is not None)
    _print(_header(cfg_hash))
    _print(
        f"best: learning_rate={result.best.learning_rate} "
        f"batch_size={result.best.batch_size} "
        f"gradient_accumulation={result.best.gradient_accumulation} "
        f"dev_accuracy={best_acc:.4f}"
    )
    _print(
        f"evaluated {len(result.points)} grid points ({n_failed} failed); "
        f"results under {out_dir}"
    )
    return 0


# ----------------------------------------------------------------------- run


def _resolve_hyperparams(cfg: ToolConfig) -> tuple[Hyperparams, str]:
    """Explicit [hyperparams] wins; otherwise pick up the stored grid-search
    winner for the first train group."""
    if cfg.hyperparams is not None:
        return cfg.hyperparams, "config"
    best_file = _grid_dir(cfg) / "best_hyperparams.json"
    if not best_file.exists():
        raise ConfigError(
            "no [hyperparams] in config and no grid-search result at "
            f"{best_file}; run grid-search first or set [hyperparams]"
        )
    payload = json.loads(best_file.read_text(encoding="utf-8"))
    return Hyperparams(**payload["hyperparams"]), f"grid-search ({best_file})"


def _write_run_outputs(results_dir: Path, record: RunRecord, cfg_hash: str) -> str:
    extra = f"strategy {record.doc_strategy}" if record.doc_strategy else ""
    cells = record.matrix.cell_list()
    rows = list(record.matrix.row_order)
    cols = list(record.matrix.col_order)
    text_table = emit_matrix(cells, rows, cols, fmt="text")
    csv_table = emit_matrix(cells, rows, cols, fmt="csv")
    write_text_atomic(results_dir / "run_record.json", record.to_json() + "\n")
    write_text_atomic(
        results_dir / "matrix.txt", _header(cfg_hash, extra) + "\n" + text_table
    )
    write_text_atomic(
        results_dir / "matrix.csv", _header(cfg_hash, extra) + "\n" + csv_table
    )
    return text_table


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if not cfg.eval_targets:
        raise ConfigError("run needs a non-empty experiment.eval list")
    if cfg.granularity == "document" and cfg.strategy is None:
        raise ConfigError("document-granularity runs need experiment.strategy")

    cfg_hash = config_hash(cfg)
    results_dir = cfg.output_dir / "results" / cfg_hash
    if results_dir.exists() and any(results_dir.iterdir()):
        if not args.force:
            raise ResultsExist(
                f"results exist for config {cfg_hash} at {results_dir} "
                "(use --force to overwrite)"
            )
        shutil.rmtree(results_dir)

    store = DatasetStore(cfg.datasets_dir)
    exp = _experiment_config(cfg)
    sentence_hp = cfg.sentence_hyperparams

    if cfg.strategy == "majority_vote":
        # The vote path trains only the sentence model, so those settings are
        # the run's operative hyperparameters.
        if sentence_hp is None:
            raise ConfigError("majority_vote needs a [sentence_hyperparams] section")
        hp, hp_source = sentence_hp, "config ([sentence_hyperparams])"
    else:
        hp, hp_source = _resolve_hyperparams(cfg)
        if cfg.strategy == "doc_finetune" and sentence_hp is None:
            raise ConfigError("doc_finetune needs a [sentence_hyperparams] section")

    work_dir = results_dir / "work"
    if cfg.granularity == "sentence":
        record = run_sentence_experiment(
            exp, store, hp, work_dir, config_hash=cfg_hash, jobs=args.jobs
        )
    else:
        record = run_document_experiment(
            exp,
            store,
            hp,
            work_dir,
            sentence_hp=sentence_hp,
            config_hash=cfg_hash,
            jobs=args.jobs,
        )

    table = _write_run_outputs(results_dir, record, cfg_hash)
    _print(_header(cfg_hash, f"hyperparams from {hp_source}"))
    _print(table)
    _print(f"results: {results_dir}")
    return 0


# ------------------------------------------------------------------ correlate


def _cells_from_record(record: dict) -> list[EvalCell]:
    cells = []
    matrix = record["matrix"]
    for row in matrix["rows"]:
        for col in matrix["cols"]:
            raw = matrix["cells"].get(f"{row}|{col}")
            if raw is None:
                continue
            cells.append(
                EvalCell(
                    train_key=row,
                    eval_key=col,
                    per_seed_acc=tuple(raw["per_seed_acc"]),
                    mean=raw["mean"],
                    std=raw["std"],
                    n_examples=raw["n_examples"],
                )
            )
    return cells


def _ht_mt_pairs(split: DatasetSplit) -> tuple[list[str], list[str]]:
    """(hypotheses, references): each MT text with its HT twin."""
    check_balance(split)
    ht_by_key = {
        e.seg_ids: e.target_text for e in split.examples if e.label == LABEL_HT
    }
    hyps, refs = [], []
    for ex in split.examples:
        if ex.label == LABEL_MT:
            hyps.append(ex.target_text)
            refs.append(ht_by_key[ex.seg_ids])
    return hyps, refs


def _bleu_scores(cfg: ToolConfig, eval_keys: list[str]) -> dict[str, float]:
    store = DatasetStore(cfg.datasets_dir)
    scores = {}
    for key in eval_keys:
        lang, system, split_name = key.split(":")
        split = store.load(lang, system, split_name, "sentence", "target_only")
        if split is None:
            raise DataError(
                f"cannot compute BLEU for {key}: no sentence dataset under "
                f"{cfg.datasets_dir} (run build-data first)"
            )
        hyps, refs = _ht_mt_pairs(split)
        scores[key] = bleu(hyps, refs).score
    return scores


def cmd_correlate(args: argparse.Namespace) -> int:
    record_file = args.results / "run_record.json"
    if not record_file.exists():
        raise ConfigError(f"no run_record.json under {args.results}")
    record = json.loads(record_file.read_text(encoding="utf-8"))
    cells = _cells_from_record(record)
    if not cells:
        raise DataError(f"run record at {args.results} has no populated cells")

    if args.quality_file is not None:
        scores = read_quality_scores(args.quality_file)
        source_desc = f"quality file:{args.quality_file.name}"
    else:
        if args.config is None:
            raise ConfigError("--bleu needs -c/--config to locate the datasets")
        cfg = load_config(args.config)
        eval_keys = sorted({c.eval_key for c in cells})
        scores = _bleu_scores(cfg, eval_keys)
        source_desc = f"quality bleu[{BLEU_VARIANT}]"

    try:
        result, scatter = quality_vs_accuracy(cells, scores)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    header = _header(record.get("config_hash", ""), source_desc)
    write_text_atomic(args.results / "scatter.csv", header + "\n" + scatter)

    if result.p_value is None:
        _print(f"r={result.r:.6f} p undefined (n<3) n={result.n}")
    else:
        _print(f"r={result.r:.6f} p={result.p_value:.6f} n={result.n}")
    _print(f"scatter: {args.results / 'scatter.csv'}")
    return 0


# --------------------------------------------------------- truncation-report


def _parse_max_lengths(text: str) -> list[int | None]:
    out: list[int | None] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if part.lower() == "none":
            out.append(None)
            continue
        try:
            out.append(int(part))
        except ValueError as exc:
            raise ConfigError(f"bad max length {part!r} (integer or 'none')") from exc
    if not out:
        raise ConfigError("no max lengths given")
    return out


def cmd_truncation_report(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    max_lengths = _parse_max_lengths(args.max_lengths)
    store = DatasetStore(cfg.datasets_dir)
    group = cfg.train_groups[0]
    dataset = store.load_group(group, "train", "document", cfg.mode)
    backend = get_backend(cfg.backend_id, cfg.adapter_command)
    try:
        stats = truncation_report(dataset, backend.tokenize, max_lengths)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    cfg_hash = config_hash(cfg)
    lines = [
        _header(cfg_hash, f"train {train_key(group)} mode {cfg.mode}"),
        "# T(avg) averages dropped tokens over ALL training documents"
        " (untruncated docs count as 0)",
        f"{'max_length':<12}{'T(%)':>8}{'T(avg)':>10}",
    ]
    for stat in stats:
        label = "none" if stat.max_length is None else str(stat.max_length)
        lines.append(
            f"{label:<12}{stat.pct_truncated:>8.1f}{stat.avg_tokens_truncated:>10.1f}"
        )
    report = "\n".join(lines) + "\n"
    write_text_atomic(cfg.output_dir / "truncation_report.txt", report)
    _print(report)
    return 0


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtdetect",
        description=(
            "Build balanced human-vs-machine translation datasets and run "
            "detection experiments."
        ),
    )
    parser.add_argument(
        "--version", action="version", version=f"mtdetect {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-data", help="ingest corpora and write balanced datasets")
    p.add_argument("-c", "--config", required=True, type=Path)
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("grid-search", help="search the hyperparameter grid on dev")
    p.add_argument("-c", "--config", required=True, type=Path)
    p.add_argument("--jobs", type=int, default=1, help="parallel grid points")
    p.set_defaults(func=cmd_grid_search)

    p = sub.add_parser("run", help="train over seeds and emit the eval matrix")
    p.add_argument("-c", "--config", required=True, type=Path)
    p.add_argument("--force", action="store_true", help="overwrite existing results")
    p.add_argument("--jobs", type=int, default=1, help="parallel training runs")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("correlate", help="correlate eval accuracy with quality scores")
    p.add_argument("--results", required=True, type=Path, help="results directory of a run")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--quality-file", type=Path, help="eval_key<TAB>score lines")
    source.add_argument(
        "--bleu", action="store_true", help="compute BLEU from the built datasets"
    )
    p.add_argument("-c", "--config", type=Path, help="config (required with --bleu)")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("truncation-report", help="token-budget statistics for documents")
    p.add_argument("-c", "--config", required=True, type=Path)
    p.add_argument(
        "--max-lengths",
        default="512,768,1024,2048,3072",
        help="comma-separated budgets; 'none' for unlimited",
    )
    p.set_defaults(func=cmd_truncation_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ResultsExist as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except BackendError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
