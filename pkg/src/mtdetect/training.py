"""Experiment orchestration: hyperparameter grid search, single- and
multi-source training runs, cross-language and cross-system evaluation, and
the three document-level strategies, each repeated over seeds.

Train configurations are groups of (src_lang, system_id) pairs; a group with
more than one pair trains on the concatenation of the per-pair datasets.
Evaluation targets are (src_lang, system_id, split) triples. A target whose
dataset file does not exist becomes an explicitly absent matrix cell, never a
silent omission.
"""

from __future__ import annotations

import itertools
import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from mtdetect.backend import Hyperparams, TrainedModel, get_backend
from mtdetect.corpus import (
    GRANULARITIES,
    LABEL_HT,
    LABEL_MT,
    MODES,
    DatasetSplit,
    concat_training_sets,
    group_documents,
)
from mtdetect.doclevel import majority_vote
from mtdetect.errors import BackendError, ConfigError, DataError
from mtdetect.metrics import EvalCell, accuracy
from mtdetect.util import canonical_json, write_text_atomic

DOC_STRATEGIES = ("majority_vote", "doc_train", "doc_finetune")

DEFAULT_SENTENCE_SEEDS = (1, 2, 3)
DEFAULT_DOCUMENT_SEEDS = tuple(range(1, 11))

TrainPair = tuple[str, str]
TrainGroup = tuple[TrainPair, ...]
EvalTarget = tuple[str, str, str]


def train_key(group: TrainGroup) -> str:
    return "+".join(f"{lang}:{system}" for lang, system in group)


def eval_key(target: EvalTarget) -> str:
    lang, system, split = target
    return f"{lang}:{system}:{split}"


def safe_dirname(key: str) -> str:
    return re.sub(r"[^A-Za-z0-9._+-]", "-", key)


@dataclass(frozen=True)
class HpGrid:
    """Candidate axes for the hyperparameter search.

    The grid is the cross product of learning rates, batch sizes, and
    gradient-accumulation steps; combinations whose effective batch exceeds
    batch_ceiling are not part of the search space.
    """

    learning_rates: tuple[float, ...]
    batch_sizes: tuple[int, ...]
    gradient_accumulations: tuple[int, ...] = (1,)
    max_length: int | None = None
    epochs: int = 5
    batch_ceiling: int | None = None

    def __post_init__(self) -> None:
        if not self.learning_rates or not self.batch_sizes or not self.gradient_accumulations:
            raise ValueError("hyperparameter grid axes must be non-empty")

    def points(self, seed: int) -> list[Hyperparams]:
        out = []
        for batch, accum, lr in itertools.product(
            sorted(self.batch_sizes),
            sorted(self.gradient_accumulations),
            sorted(self.learning_rates),
        ):
            if self.batch_ceiling is not None and batch * accum > self.batch_ceiling:
                continue
            out.append(
                Hyperparams(
                    learning_rate=lr,
                    batch_size=batch,
                    gradient_accumulation=accum,
                    max_length=self.max_length,
                    epochs=self.epochs,
                    seed=seed,
                    batch_ceiling=self.batch_ceiling,
                )
            )
        if not out:
            raise ValueError("batch ceiling excludes every grid point")
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything an experiment run needs besides the datasets themselves."""

    backend_id: str
    mode: str
    granularity: str
    train_groups: tuple[TrainGroup, ...]
    eval_targets: tuple[EvalTarget, ...]
    seeds: tuple[int, ...]
    hp_grid: HpGrid | None = None
    doc_strategy: str | None = None
    adapter_command: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if not self.train_groups:
            raise ValueError("at least one train group is required")
        for group in self.train_groups:
            if not group:
                raise ValueError("empty train group")
            if len(set(group)) != len(group):
                raise ValueError(f"duplicate (lang, system) pair in group {group}")
        if len(set(self.train_groups)) != len(self.train_groups):
            raise ValueError("duplicate train groups")
        if len(set(self.eval_targets)) != len(self.eval_targets):
            raise ValueError("duplicate eval targets")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("duplicate seeds")
        if self.doc_strategy is not None and self.doc_strategy not in DOC_STRATEGIES:
            raise ValueError(f"unknown doc_strategy {self.doc_strategy!r}")
        if self.doc_strategy is not None and self.granularity != "document":
            raise ValueError("doc_strategy requires document granularity")


class DatasetStore:
    """Resolves built dataset files by coordinates.

    Layout: <root>/<lang>.<split>.<granularity>.<system>.<mode>.jsonl
    """

    def __init__(self, root: Path):
        self.root = Path(root)

    def path_for(
        self, lang: str, system: str, split: str, granularity: str, mode: str
    ) -> Path:
        return self.root / f"{lang}.{split}.{granularity}.{system}.{mode}.jsonl"

    def save(self, dataset: DatasetSplit, lang: str, system: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.path_for(lang, system, dataset.name, dataset.granularity, dataset.mode)
        write_text_atomic(path, dataset.to_jsonl())
        return path

    def load(
        self, lang: str, system: str, split: str, granularity: str, mode: str
    ) -> DatasetSplit | None:
        """None when the dataset was never built (an absent matrix cell)."""
        path = self.path_for(lang, system, split, granularity, mode)
        if not path.exists():
            return None
        try:
            return DatasetSplit.from_jsonl(
                path.read_text(encoding="utf-8"), split, granularity, mode
            )
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise DataError(f"cannot parse dataset {path}: {exc}") from exc

    def load_group(
        self, group: TrainGroup, split: str, granularity: str, mode: str
    ) -> DatasetSplit:
        """Concatenated dataset for a train group; every member must exist."""
        parts = []
        for lang, system in group:
            part = self.load(lang, system, split, granularity, mode)
            if part is None:
                raise DataError(
                    f"missing {split} dataset for {lang}:{system} "
                    f"({granularity}, {mode}) under {self.root}"
                )
            parts.append(part)
        return concat_training_sets(parts)


@dataclass(frozen=True)
class GridPoint:
    hp: Hyperparams
    dev_accuracy: float | None
    error: str | None = None


@dataclass(frozen=True)
class GridSearchResult:
    best: Hyperparams
    points: tuple[GridPoint, ...]


@dataclass
class EvalMatrix:
    """Complete train-by-eval grid; absent cells are explicit Nones."""

    row_order: tuple[str, ...]
    col_order: tuple[str, ...]
    cells: dict[tuple[str, str], EvalCell | None]

    def __post_init__(self) -> None:
        want = {(r, c) for r in self.row_order for c in self.col_order}
        if set(self.cells) != want:
            raise ValueError("matrix cells do not cover row x col exactly")

    def cell_list(self) -> list[EvalCell]:
        out = []
        for row in self.row_order:
            for col in self.col_order:
                cell = self.cells[(row, col)]
                if cell is not None:
                    out.append(cell)
        return out


@dataclass
class RunRecord:
    """Provenance for one experiment run."""

    config_hash: str
    backend_id: str
    mode: str
    granularity: str
    doc_strategy: str | None
    hyperparams: Hyperparams
    sentence_hyperparams: Hyperparams | None
    seeds: tuple[int, ...]
    wall_clock_seconds: float
    dev_accuracies: dict[str, list[float]]
    matrix: EvalMatrix
    artifacts: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        cells = {}
        for (row, col), cell in self.matrix.cells.items():
            cells[f"{row}|{col}"] = (
                None
                if cell is None
                else {
                    "per_seed_acc": list(cell.per_seed_acc),
                    "mean": cell.mean,
                    "std": cell.std,
                    "n_examples": cell.n_examples,
                }
            )
        payload = {
            "config_hash": self.config_hash,
            "backend_id": self.backend_id,
            "mode": self.mode,
            "granularity": self.granularity,
            "doc_strategy": self.doc_strategy,
            "hyperparams": self.hyperparams.to_dict(),
            "sentence_hyperparams": (
                None
                if self.sentence_hyperparams is None
                else self.sentence_hyperparams.to_dict()
            ),
            "seeds": list(self.seeds),
            "wall_clock_seconds": self.wall_clock_seconds,
            "dev_accuracies": self.dev_accuracies,
            "matrix": {
                "rows": list(self.matrix.row_order),
                "cols": list(self.matrix.col_order),
                "cells": cells,
            },
            "artifacts": self.artifacts,
        }
        return canonical_json(payload)


def check_leakage(train_seg_ids: set[str], eval_split: DatasetSplit, context: str) -> None:
    """Hard error when any segment id sits on both sides of a run."""
    overlap = train_seg_ids & eval_split.seg_ids()
    if overlap:
        shown = ", ".join(sorted(overlap)[:5])
        raise DataError(
            f"train/eval leakage in {context}: {len(overlap)} shared segment id(s), "
            f"e.g. {shown}"
        )


def _hard_labels(probs: list[float]) -> list[str]:
    return [LABEL_MT if p >= 0.5 else LABEL_HT for p in probs]


def _pool_map(jobs: int, fn, args_list):
    if jobs <= 1 or len(args_list) <= 1:
        return [fn(*args) for args in args_list]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *args) for args in args_list]
        return [f.result() for f in futures]


def grid_search(
    config: ExperimentConfig,
    train: DatasetSplit,
    dev: DatasetSplit,
    work_dir: Path,
    jobs: int = 1,
) -> GridSearchResult:
    """Fit every grid point with one fixed seed (the first configured seed)
    and pick the point with the best dev accuracy.

    Ties break toward the smaller learning rate, then the smaller batch size.
    A grid point whose training fails is excluded; only a fully failed grid is
    an error. The winning configuration is meant to be re-run with the full
    seed list afterwards.
    """
    if config.hp_grid is None:
        raise ConfigError("grid search requires hp_grid in the experiment config")
    backend = get_backend(config.backend_id, config.adapter_command)
    seed = config.seeds[0]
    candidates = config.hp_grid.points(seed)

    def evaluate(idx: int, hp: Hyperparams) -> GridPoint:
        point_dir = work_dir / f"point{idx:03d}"
        try:
            model = backend.fit(train, dev, hp, config.mode, point_dir)
            probs = backend.predict_proba(model, dev.examples)
        except BackendError as exc:
            return GridPoint(hp=hp, dev_accuracy=None, error=str(exc))
        acc = accuracy(_hard_labels(probs), [e.label for e in dev.examples])
        return GridPoint(hp=hp, dev_accuracy=acc, error=None)

    points = _pool_map(jobs, evaluate, list(enumerate(candidates)))
    usable = [p for p in points if p.error is None]
    if not usable:
        raise BackendError(
            f"all {len(points)} grid points failed; first error: {points[0].error}"
        )
    best = max(
        usable,
        key=lambda p: (
            p.dev_accuracy,
            -p.hp.learning_rate,
            -p.hp.batch_size,
            -p.hp.gradient_accumulation,
        ),
    )
    return GridSearchResult(best=best.hp, points=tuple(points))


def _load_eval_splits(
    store: DatasetStore, config: ExperimentConfig, granularity: str
) -> dict[EvalTarget, DatasetSplit | None]:
    return {
        target: store.load(target[0], target[1], target[2], granularity, config.mode)
        for target in config.eval_targets
    }


def _assemble_matrix(
    config: ExperimentConfig,
    eval_splits: dict[EvalTarget, DatasetSplit | None],
    per_seed: dict[tuple[str, int], dict[str, float]],
) -> EvalMatrix:
    rows = tuple(train_key(g) for g in config.train_groups)
    cols = tuple(eval_key(t) for t in config.eval_targets)
    cells: dict[tuple[str, str], EvalCell | None] = {}
    for group in config.train_groups:
        row = train_key(group)
        for target in config.eval_targets:
            col = eval_key(target)
            split = eval_splits[target]
            if split is None:
                cells[(row, col)] = None
                continue
            accs = [per_seed[(row, seed)][col] for seed in config.seeds]
            n_examples = per_seed[(row, config.seeds[0])].get(
                f"__n__{col}", len(split.examples)
            )
            cells[(row, col)] = EvalCell.from_accs(row, col, accs, int(n_examples))
    return EvalMatrix(row_order=rows, col_order=cols, cells=cells)


def run_sentence_experiment(
    config: ExperimentConfig,
    store: DatasetStore,
    hp: Hyperparams,
    work_dir: Path,
    config_hash: str = "",
    jobs: int = 1,
) -> RunRecord:
    """Train each group once per seed, evaluate on every target, aggregate.

    Missing eval datasets become absent cells; missing train datasets are hard
    errors. Each (group, seed) fit gets a private artifact directory.
    """
    started = time.monotonic()
    backend = get_backend(config.backend_id, config.adapter_command)
    eval_splits = _load_eval_splits(store, config, config.granularity)

    group_data = {}
    for group in config.train_groups:
        train = store.load_group(group, "train", config.granularity, config.mode)
        dev = store.load_group(group, "dev", config.granularity, config.mode)
        train_ids = train.seg_ids()
        for target, split in eval_splits.items():
            if split is not None:
                check_leakage(train_ids, split, f"{train_key(group)} -> {eval_key(target)}")
        group_data[group] = (train, dev)

    artifacts: dict[str, str] = {}

    def run_one(group: TrainGroup, seed: int) -> tuple[tuple[str, int], dict, str]:
        row = train_key(group)
        train, dev = group_data[group]
        run_dir = work_dir / safe_dirname(row) / f"seed{seed}"
        model = backend.fit(train, dev, hp.replace(seed=seed), config.mode, run_dir)
        scores: dict[str, float] = {}
        dev_probs = backend.predict_proba(model, dev.examples)
        scores["__dev__"] = accuracy(_hard_labels(dev_probs), [e.label for e in dev.examples])
        for target, split in eval_splits.items():
            if split is None:
                continue
            probs = backend.predict_proba(model, split.examples)
            scores[eval_key(target)] = accuracy(
                _hard_labels(probs), [e.label for e in split.examples]
            )
        return (row, seed), scores, str(model.artifact)

    tasks = [(group, seed) for group in config.train_groups for seed in config.seeds]
    results = _pool_map(jobs, run_one, tasks)

    per_seed: dict[tuple[str, int], dict[str, float]] = {}
    dev_accuracies: dict[str, list[float]] = {}
    for key, scores, artifact in sorted(results, key=lambda item: (item[0][0], item[0][1])):
        per_seed[key] = scores
        artifacts[f"{key[0]}/seed{key[1]}"] = artifact
        dev_accuracies.setdefault(key[0], []).append(scores["__dev__"])

    matrix = _assemble_matrix(config, eval_splits, per_seed)
    return RunRecord(
        config_hash=config_hash,
        backend_id=config.backend_id,
        mode=config.mode,
        granularity=config.granularity,
        doc_strategy=None,
        hyperparams=hp,
        sentence_hyperparams=None,
        seeds=config.seeds,
        wall_clock_seconds=time.monotonic() - started,
        dev_accuracies=dev_accuracies,
        matrix=matrix,
        artifacts=artifacts,
    )


def run_multisource_experiment(
    config: ExperimentConfig,
    store: DatasetStore,
    hp: Hyperparams,
    work_dir: Path,
    config_hash: str = "",
    jobs: int = 1,
) -> RunRecord:
    """Sentence experiment over multi-language train groups: each group's
    training set is the concatenation of its members' datasets, one matrix row
    per group."""
    return run_sentence_experiment(config, store, hp, work_dir, config_hash, jobs)


def _vote_predictions(
    backend, model: TrainedModel, sentence_split: DatasetSplit
) -> tuple[list[str], list[str], list[dict]]:
    """Majority-vote doc labels from sentence predictions.

    Returns (predicted, gold, traces) with two entries per document: the HT
    rendering then the MT rendering.
    """
    groups = group_documents(sentence_split)
    doc_ids = sorted(groups)
    flat: list = []
    spans: list[tuple[str, str, int, int]] = []
    for doc_id in doc_ids:
        for label, sentences in ((LABEL_HT, groups[doc_id].ht), (LABEL_MT, groups[doc_id].mt)):
            spans.append((doc_id, label, len(flat), len(flat) + len(sentences)))
            flat.extend(sentences)
    probs = backend.predict_proba(model, flat)
    predicted, gold, traces = [], [], []
    for doc_id, label, start, end in spans:
        vote = majority_vote(probs[start:end], doc_id=doc_id)
        predicted.append(vote.label)
        gold.append(label)
        traces.append(
            {
                "doc_id": doc_id,
                "gold": label,
                "predicted": vote.label,
                "votes_mt": vote.vote_counts[0],
                "votes_ht": vote.vote_counts[1],
                "tie_broken": vote.tie_broken,
            }
        )
    return predicted, gold, traces


def run_document_experiment(
    config: ExperimentConfig,
    store: DatasetStore,
    hp: Hyperparams,
    work_dir: Path,
    sentence_hp: Hyperparams | None = None,
    config_hash: str = "",
    jobs: int = 1,
) -> RunRecord:
    """One document-level strategy across all train groups.

    majority_vote: train a sentence model per seed, vote over its per-sentence
    predictions. doc_train: fit directly on document datasets. doc_finetune:
    fit on documents warm-started from the same-seed sentence model, so the
    initialization matches the run's own randomness.
    """
    if config.doc_strategy is None:
        raise ConfigError("run_document_experiment requires doc_strategy")
    strategy = config.doc_strategy
    if strategy in ("majority_vote", "doc_finetune") and sentence_hp is None:
        raise ConfigError(f"{strategy} needs sentence-level hyperparameters")

    started = time.monotonic()
    backend = get_backend(config.backend_id, config.adapter_command)
    eval_granularity = "sentence" if strategy == "majority_vote" else "document"
    eval_splits = _load_eval_splits(store, config, eval_granularity)

    group_data: dict[TrainGroup, dict] = {}
    for group in config.train_groups:
        data: dict = {}
        if strategy in ("majority_vote", "doc_finetune"):
            data["sent_train"] = store.load_group(group, "train", "sentence", config.mode)
            data["sent_dev"] = store.load_group(group, "dev", "sentence", config.mode)
        if strategy in ("doc_train", "doc_finetune"):
            data["doc_train"] = store.load_group(group, "train", "document", config.mode)
            data["doc_dev"] = store.load_group(group, "dev", "document", config.mode)
        train_ids: set[str] = set()
        for split_key in ("sent_train", "doc_train"):
            if split_key in data:
                train_ids |= data[split_key].seg_ids()
        for target, split in eval_splits.items():
            if split is not None:
                check_leakage(train_ids, split, f"{train_key(group)} -> {eval_key(target)}")
        group_data[group] = data

    def run_one(group: TrainGroup, seed: int) -> tuple[tuple[str, int], dict, str]:
        row = train_key(group)
        data = group_data[group]
        run_dir = work_dir / safe_dirname(row) / f"seed{seed}"
        scores: dict[str, float] = {}

        sentence_model = None
        if strategy in ("majority_vote", "doc_finetune"):
            sentence_model = backend.fit(
                data["sent_train"],
                data["sent_dev"],
                sentence_hp.replace(seed=seed),
                config.mode,
                run_dir / "sentence",
            )

        if strategy == "majority_vote":
            model = sentence_model
            predicted, gold, _ = _vote_predictions(backend, model, data["sent_dev"])
            scores["__dev__"] = accuracy(predicted, gold)
            for target, split in eval_splits.items():
                if split is None:
                    continue
                predicted, gold, traces = _vote_predictions(backend, model, split)
                scores[eval_key(target)] = accuracy(predicted, gold)
                scores[f"__n__{eval_key(target)}"] = float(len(predicted))
                trace_path = run_dir / f"votes.{safe_dirname(eval_key(target))}.jsonl"
                run_dir.mkdir(parents=True, exist_ok=True)
                write_text_atomic(
                    trace_path,
                    "".join(json.dumps(t, sort_keys=True) + "\n" for t in traces),
                )
        else:
            init = sentence_model.artifact if strategy == "doc_finetune" else None
            model = backend.fit(
                data["doc_train"],
                data["doc_dev"],
                hp.replace(seed=seed),
                config.mode,
                run_dir / "document",
                init_artifact=init,
            )
            dev_split = data["doc_dev"]
            dev_probs = backend.predict_proba(model, dev_split.examples)
            scores["__dev__"] = accuracy(
                _hard_labels(dev_probs), [e.label for e in dev_split.examples]
            )
            for target, split in eval_splits.items():
                if split is None:
                    continue
                probs = backend.predict_proba(model, split.examples)
                scores[eval_key(target)] = accuracy(
                    _hard_labels(probs), [e.label for e in split.examples]
                )
        return (row, seed), scores, str(model.artifact)

    tasks = [(group, seed) for group in config.train_groups for seed in config.seeds]
    results = _pool_map(jobs, run_one, tasks)

    per_seed: dict[tuple[str, int], dict[str, float]] = {}
    dev_accuracies: dict[str, list[float]] = {}
    artifacts: dict[str, str] = {}
    for key, scores, artifact in sorted(results, key=lambda item: (item[0][0], item[0][1])):
        per_seed[key] = scores
        artifacts[f"{key[0]}/seed{key[1]}"] = artifact
        dev_accuracies.setdefault(key[0], []).append(scores["__dev__"])

    matrix = _assemble_matrix(config, eval_splits, per_seed)
    return RunRecord(
        config_hash=config_hash,
        backend_id=config.backend_id,
        mode=config.mode,
        granularity=config.granularity,
        doc_strategy=strategy,
        hyperparams=hp,
        sentence_hyperparams=sentence_hp,
        seeds=config.seeds,
        wall_clock_seconds=time.monotonic() - started,
        dev_accuracies=dev_accuracies,
        matrix=matrix,
        artifacts=artifacts,
    )
