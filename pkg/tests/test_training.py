"""Experiment orchestration tests: grids, stores, leakage, and the sentence,
multi-source, and document runners."""

from __future__ import annotations

import json

import pytest

from conftest import build_datasets_via_api, make_marker_corpus
from mtdetect.backend import Hyperparams, TrainedModel
from mtdetect.corpus import DatasetSplit
from mtdetect.errors import BackendError, ConfigError, DataError
from mtdetect.training import (
    DatasetStore,
    EvalMatrix,
    ExperimentConfig,
    HpGrid,
    check_leakage,
    eval_key,
    grid_search,
    run_document_experiment,
    run_multisource_experiment,
    run_sentence_experiment,
    safe_dirname,
    train_key,
)

HP = Hyperparams(learning_rate=1.0, batch_size=16, epochs=3)


@pytest.fixture(scope="module")
def store(tmp_path_factory):
    """Marker-corpus datasets for two source languages in one store."""
    root = tmp_path_factory.mktemp("train_store")
    de = make_marker_corpus(root / "de", lang="de", n_docs=12, segs_per_doc=3)
    cs = make_marker_corpus(root / "cs", lang="cs", n_docs=12, segs_per_doc=3, seed=7)
    built = build_datasets_via_api(de, root / "data")
    build_datasets_via_api(cs, root / "data")
    return built


def _config(**kwargs):
    defaults = dict(
        backend_id="baseline",
        mode="target_only",
        granularity="sentence",
        train_groups=((("de", "sys1"),),),
        eval_targets=(("de", "sys1", "test"),),
        seeds=(1, 2),
    )
    defaults.update(kwargs)
    return ExperimentConfig(**defaults)


# ---------------------------------------------------------------------- keys


def test_train_key_joins_pairs_in_order():
    assert train_key((("de", "sys1"),)) == "de:sys1"
    assert train_key((("de", "sys1"), ("cs", "sys2"))) == "de:sys1+cs:sys2"


def test_eval_key_three_parts():
    assert eval_key(("de", "sys1", "test")) == "de:sys1:test"


def test_safe_dirname_replaces_separators():
    assert safe_dirname("de:sys1+cs:sys2") == "de-sys1+cs-sys2"
    assert safe_dirname("a/b\\c") == "a-b-c"


# -------------------------------------------------------------------- HpGrid


def test_hp_grid_cross_product_sorted():
    grid = HpGrid(
        learning_rates=(3e-5, 1e-5, 2e-5),
        batch_sizes=(32, 16),
        gradient_accumulations=(2, 1),
    )
    points = grid.points(seed=5)
    assert len(points) == 12
    assert all(p.seed == 5 for p in points)
    combos = [(p.batch_size, p.gradient_accumulation, p.learning_rate) for p in points]
    assert combos == sorted(combos)
    assert combos[0] == (16, 1, 1e-5)


def test_hp_grid_ceiling_filters_points():
    grid = HpGrid(
        learning_rates=(1e-5,),
        batch_sizes=(16, 32),
        gradient_accumulations=(1, 2),
        batch_ceiling=32,
    )
    points = grid.points(seed=0)
    assert len(points) == 3  # 32*2 = 64 is over the ceiling
    assert all(p.effective_batch() <= 32 for p in points)


def test_hp_grid_ceiling_excluding_everything():
    grid = HpGrid(learning_rates=(1e-5,), batch_sizes=(64,), batch_ceiling=32)
    with pytest.raises(ValueError, match="ceiling"):
        grid.points(seed=0)


def test_hp_grid_propagates_shared_fields():
    grid = HpGrid(learning_rates=(1e-5,), batch_sizes=(8,), max_length=512, epochs=7)
    (point,) = grid.points(seed=1)
    assert point.max_length == 512 and point.epochs == 7


def test_hp_grid_empty_axis():
    with pytest.raises(ValueError):
        HpGrid(learning_rates=(), batch_sizes=(16,))


# ---------------------------------------------------------- ExperimentConfig


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(mode="both"),
        dict(granularity="line"),
        dict(train_groups=()),
        dict(train_groups=((),)),
        dict(train_groups=((("de", "sys1"), ("de", "sys1")),)),
        dict(train_groups=((("de", "sys1"),), (("de", "sys1"),))),
        dict(eval_targets=(("de", "sys1", "test"), ("de", "sys1", "test"))),
        dict(seeds=()),
        dict(seeds=(1, 1)),
        dict(granularity="document", doc_strategy="vote"),
        dict(doc_strategy="majority_vote"),  # sentence granularity
    ],
)
def test_experiment_config_validation(kwargs):
    with pytest.raises(ValueError):
        _config(**kwargs)


# ---------------------------------------------------------------- DatasetStore


def test_store_round_trip(store):
    split = store.load("de", "sys1", "train", "sentence", "target_only")
    assert split is not None and len(split) == 48
    again = DatasetStore(store.root).load("de", "sys1", "train", "sentence", "target_only")
    assert again.examples == split.examples


def test_store_naming_scheme(store):
    path = store.path_for("de", "sys1", "dev", "document", "source_target")
    assert path.name == "de.dev.document.sys1.source_target.jsonl"
    assert path.exists()


def test_store_missing_is_none(store):
    assert store.load("fr", "sys1", "train", "sentence", "target_only") is None


def test_store_corrupt_is_error(tmp_path):
    bad = DatasetStore(tmp_path)
    path = bad.path_for("de", "sys1", "train", "sentence", "target_only")
    path.write_text('{"label": "??"}\n', encoding="utf-8")
    with pytest.raises(DataError, match="cannot parse"):
        bad.load("de", "sys1", "train", "sentence", "target_only")


def test_store_load_group_concatenates(store):
    merged = store.load_group(
        (("de", "sys1"), ("cs", "sys1")), "train", "sentence", "target_only"
    )
    de = store.load("de", "sys1", "train", "sentence", "target_only")
    assert len(merged) == 96
    assert merged.examples[:48] == de.examples


def test_store_load_group_missing_member(store):
    with pytest.raises(DataError, match="fr:sys1"):
        store.load_group((("fr", "sys1"),), "train", "sentence", "target_only")


# ------------------------------------------------------------- check_leakage


def test_check_leakage_reports_overlap(store):
    split = store.load("de", "sys1", "test", "sentence", "target_only")
    with pytest.raises(DataError, match="leakage"):
        check_leakage(split.seg_ids(), split, "self")
    check_leakage({"de:other:0"}, split, "ok")  # disjoint ids pass


# ------------------------------------------------------------------ EvalMatrix


def test_eval_matrix_requires_full_coverage():
    with pytest.raises(ValueError, match="cover"):
        EvalMatrix(row_order=("a",), col_order=("x", "y"), cells={("a", "x"): None})


# ----------------------------------------------------------------- grid_search


class FakeBackend:
    """Backend whose dev accuracy is a pure function of the hyperparameters."""

    backend_id = "fake"

    def __init__(self, acc_fn, fail_fn=None):
        self.acc_fn = acc_fn
        self.fail_fn = fail_fn or (lambda hp: False)

    def tokenize(self, text):
        return text.split()

    def fit(self, train, dev, hp, mode, artifact_dir, init_artifact=None):
        if self.fail_fn(hp):
            raise BackendError("forced grid failure")
        artifact_dir.mkdir(parents=True, exist_ok=True)
        artifact = artifact_dir / "fake.json"
        artifact.write_text(json.dumps(hp.to_dict()), encoding="utf-8")
        return TrainedModel(
            backend_id="fake", mode=mode, hyperparams=hp, artifact=artifact
        )

    def predict_proba(self, model, examples):
        acc = self.acc_fn(model.hyperparams)
        k = round(acc * len(examples))
        probs = []
        for i, ex in enumerate(examples):
            correct = i < k
            is_mt = ex.label == "MT"
            probs.append(0.9 if is_mt == correct else 0.1)
        return probs


def _patch_backend(monkeypatch, backend):
    monkeypatch.setattr(
        "mtdetect.training.get_backend", lambda backend_id, adapter_command=None: backend
    )


def _grid_config(**kwargs):
    return _config(
        hp_grid=HpGrid(
            learning_rates=(1e-5, 2e-5), batch_sizes=(16, 32), gradient_accumulations=(1,)
        ),
        **kwargs,
    )


def test_grid_search_picks_best_dev_accuracy(store, tmp_path, monkeypatch):
    _patch_backend(
        monkeypatch,
        FakeBackend(lambda hp: 0.9 if (hp.learning_rate, hp.batch_size) == (2e-5, 32) else 0.5),
    )
    train = store.load("de", "sys1", "train", "sentence", "target_only")
    dev = store.load("de", "sys1", "dev", "sentence", "target_only")
    result = grid_search(_grid_config(), train, dev, tmp_path)
    assert (result.best.learning_rate, result.best.batch_size) == (2e-5, 32)
    assert len(result.points) == 4
    assert all(p.error is None for p in result.points)


def test_grid_search_tie_breaks_toward_smaller_knobs(store, tmp_path, monkeypatch):
    _patch_backend(monkeypatch, FakeBackend(lambda hp: 0.75))
    train = store.load("de", "sys1", "train", "sentence", "target_only")
    dev = store.load("de", "sys1", "dev", "sentence", "target_only")
    result = grid_search(_grid_config(), train, dev, tmp_path)
    assert result.best.learning_rate == 1e-5
    assert result.best.batch_size == 16


def test_grid_search_uses_first_seed(store, tmp_path, monkeypatch):
    _patch_backend(monkeypatch, FakeBackend(lambda hp: 0.5))
    train = store.load("de", "sys1", "train", "sentence", "target_only")
    dev = store.load("de", "sys1", "dev", "sentence", "target_only")
    result = grid_search(_grid_config(seeds=(9, 1)), train, dev, tmp_path)
    assert all(p.hp.seed == 9 for p in result.points)


def test_grid_search_skips_failed_points(store, tmp_path, monkeypatch):
    _patch_backend(
        monkeypatch,
        FakeBackend(lambda hp: 0.9 if hp.batch_size == 32 else 0.5,
                    fail_fn=lambda hp: hp.batch_size == 32),
    )
    train = store.load("de", "sys1", "train", "sentence", "target_only")
    dev = store.load("de", "sys1", "dev", "sentence", "target_only")
    result = grid_search(_grid_config(), train, dev, tmp_path)
    assert result.best.batch_size == 16  # the better points all failed
    failed = [p for p in result.points if p.error]
    assert len(failed) == 2 and all(p.dev_accuracy is None for p in failed)


def test_grid_search_all_failed(store, tmp_path, monkeypatch):
    _patch_backend(monkeypatch, FakeBackend(lambda hp: 0.5, fail_fn=lambda hp: True))
    train = store.load("de", "sys1", "train", "sentence", "target_only")
    dev = store.load("de", "sys1", "dev", "sentence", "target_only")
    with pytest.raises(BackendError, match="all 4 grid points failed"):
        grid_search(_grid_config(), train, dev, tmp_path)


def test_grid_search_requires_grid(store, tmp_path):
    train = store.load("de", "sys1", "train", "sentence", "target_only")
    dev = store.load("de", "sys1", "dev", "sentence", "target_only")
    with pytest.raises(ConfigError):
        grid_search(_config(), train, dev, tmp_path)


def test_grid_search_real_backend_end_to_end(store, tmp_path):
    train = store.load("de", "sys1", "train", "sentence", "target_only")
    dev = store.load("de", "sys1", "dev", "sentence", "target_only")
    config = _config(
        hp_grid=HpGrid(learning_rates=(0.5, 1.0), batch_sizes=(16,), epochs=3)
    )
    result = grid_search(config, train, dev, tmp_path)
    # Marker data is separable at any rate; ties break to the smaller one.
    assert result.best.learning_rate == 0.5
    assert all(p.dev_accuracy == 1.0 for p in result.points)


# ---------------------------------------------------- run_sentence_experiment


def test_sentence_experiment_full_matrix(store, tmp_path):
    config = _config(
        eval_targets=(("de", "sys1", "test"), ("cs", "sys1", "test")),
        seeds=(1, 2, 3),
    )
    record = run_sentence_experiment(config, store, HP, tmp_path, config_hash="abc123def456")
    assert record.matrix.row_order == ("de:sys1",)
    assert record.matrix.col_order == ("de:sys1:test", "cs:sys1:test")
    own = record.matrix.cells[("de:sys1", "de:sys1:test")]
    assert own.mean == 1.0 and own.std == 0.0
    assert own.per_seed_acc == (1.0, 1.0, 1.0)
    assert own.n_examples == 12
    # Cross-language transfer also works: the marker is language-independent.
    cross = record.matrix.cells[("de:sys1", "cs:sys1:test")]
    assert cross.mean == 1.0
    assert record.dev_accuracies == {"de:sys1": [1.0, 1.0, 1.0]}
    assert set(record.artifacts) == {f"de:sys1/seed{s}" for s in (1, 2, 3)}
    assert record.config_hash == "abc123def456"


def test_sentence_experiment_absent_eval_is_none_cell(store, tmp_path):
    config = _config(eval_targets=(("de", "sys1", "test"), ("fr", "sys9", "test")))
    record = run_sentence_experiment(config, store, HP, tmp_path)
    assert record.matrix.cells[("de:sys1", "fr:sys9:test")] is None
    assert record.matrix.cells[("de:sys1", "de:sys1:test")] is not None
    assert len(record.matrix.cell_list()) == 1


def test_sentence_experiment_missing_train_data(store, tmp_path):
    config = _config(train_groups=((("fr", "sys1"),),))
    with pytest.raises(DataError, match="missing train dataset"):
        run_sentence_experiment(config, store, HP, tmp_path)


def test_sentence_experiment_detects_leakage(store, tmp_path):
    config = _config(eval_targets=(("de", "sys1", "train"),))
    with pytest.raises(DataError, match="leakage"):
        run_sentence_experiment(config, store, HP, tmp_path)


def test_sentence_experiment_jobs_parity(store, tmp_path):
    config = _config(
        train_groups=((("de", "sys1"),), (("cs", "sys1"),)),
        eval_targets=(("de", "sys1", "test"), ("cs", "sys1", "test")),
    )
    serial = run_sentence_experiment(config, store, HP, tmp_path / "s", jobs=1)
    threaded = run_sentence_experiment(config, store, HP, tmp_path / "t", jobs=4)
    assert serial.matrix.cells == threaded.matrix.cells
    assert serial.dev_accuracies == threaded.dev_accuracies


def test_sentence_experiment_deterministic_across_runs(store, tmp_path):
    config = _config()
    a = run_sentence_experiment(config, store, HP, tmp_path / "a")
    b = run_sentence_experiment(config, store, HP, tmp_path / "b")
    assert a.matrix.cells == b.matrix.cells


def test_multisource_concatenates_groups(store, tmp_path):
    config = _config(
        train_groups=((("de", "sys1"), ("cs", "sys1")),),
        eval_targets=(("de", "sys1", "test"), ("cs", "sys1", "test")),
    )
    record = run_multisource_experiment(config, store, HP, tmp_path)
    assert record.matrix.row_order == ("de:sys1+cs:sys1",)
    for col in record.matrix.col_order:
        assert record.matrix.cells[("de:sys1+cs:sys1", col)].mean == 1.0


def test_run_record_json_round_trip(store, tmp_path):
    config = _config(eval_targets=(("de", "sys1", "test"), ("fr", "sys9", "test")))
    record = run_sentence_experiment(config, store, HP, tmp_path, config_hash="cafe01")
    payload = json.loads(record.to_json())
    assert payload["config_hash"] == "cafe01"
    assert payload["matrix"]["cells"]["de:sys1|fr:sys9:test"] is None
    cell = payload["matrix"]["cells"]["de:sys1|de:sys1:test"]
    assert cell["per_seed_acc"] == [1.0, 1.0]
    assert payload["hyperparams"]["learning_rate"] == 1.0
    assert payload["doc_strategy"] is None


# ---------------------------------------------------- run_document_experiment


def _doc_config(strategy, **kwargs):
    return _config(granularity="document", doc_strategy=strategy, **kwargs)


def test_doc_train_strategy(store, tmp_path):
    record = run_document_experiment(
        _doc_config("doc_train"), store, HP, tmp_path, config_hash="d0c"
    )
    cell = record.matrix.cells[("de:sys1", "de:sys1:test")]
    assert cell.mean == 1.0
    assert cell.n_examples == 4  # 2 test docs, HT + MT renderings
    assert record.doc_strategy == "doc_train"
    assert record.sentence_hyperparams is None


def test_majority_vote_strategy_votes_over_sentences(store, tmp_path):
    record = run_document_experiment(
        _doc_config("majority_vote"), store, HP, tmp_path, sentence_hp=HP
    )
    cell = record.matrix.cells[("de:sys1", "de:sys1:test")]
    assert cell.mean == 1.0
    assert cell.n_examples == 4
    assert record.sentence_hyperparams == HP
    traces = list((tmp_path / "de-sys1" / "seed1").glob("votes.*.jsonl"))
    assert len(traces) == 1
    rows = [json.loads(line) for line in traces[0].read_text().splitlines()]
    assert len(rows) == 4
    assert {r["gold"] for r in rows} == {"HT", "MT"}
    assert all(r["predicted"] == r["gold"] for r in rows)
    assert all(r["votes_mt"] + r["votes_ht"] == 3 for r in rows)


def test_doc_finetune_strategy_warm_starts_per_seed(store, tmp_path):
    record = run_document_experiment(
        _doc_config("doc_finetune"), store, HP, tmp_path, sentence_hp=HP
    )
    cell = record.matrix.cells[("de:sys1", "de:sys1:test")]
    assert cell.mean == 1.0
    for seed in (1, 2):
        seed_dir = tmp_path / "de-sys1" / f"seed{seed}"
        assert (seed_dir / "sentence" / "model.json").exists()
        assert (seed_dir / "document" / "model.json").exists()
    assert record.artifacts["de:sys1/seed1"].endswith("document/model.json")


def test_doc_strategies_require_sentence_hp(store, tmp_path):
    for strategy in ("majority_vote", "doc_finetune"):
        with pytest.raises(ConfigError, match="sentence"):
            run_document_experiment(_doc_config(strategy), store, HP, tmp_path)


def test_document_experiment_requires_strategy(store, tmp_path):
    config = _config(granularity="document")
    with pytest.raises(ConfigError, match="doc_strategy"):
        run_document_experiment(config, store, HP, tmp_path)


def test_document_experiment_detects_leakage(store, tmp_path):
    config = _doc_config("doc_train", eval_targets=(("de", "sys1", "train"),))
    with pytest.raises(DataError, match="leakage"):
        run_document_experiment(config, store, HP, tmp_path)
