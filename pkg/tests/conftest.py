"""Shared test helpers: synthetic corpus builders and a TOML config writer.

The builders write real line-aligned corpus files plus a split manifest, so
tests exercise the same ingestion path as production data. Three corpus
flavors cover the test matrix:

* marker corpus: MT adds a fixed rare token, detectable from the target text
  alone (linearly separable in both modes);
* source-relative corpus: MT adds one filler token over a per-domain baseline
  where the domain is only visible in the source text, so target-only models
  face overlapping classes but bilingual models can separate them;
* any corpus can mix in foreign-origin documents that ingestion must filter.
"""

from __future__ import annotations

import random
import sys
from dataclasses import dataclass
from pathlib import Path

import pytest
from hypothesis import settings

settings.register_profile("suite", deadline=None)
settings.load_profile("suite")

ADAPTER_STUB = Path(__file__).parent / "adapter_stub.py"

MARKER = "zzmarkertoken"
HT_MARKER = "qqhumantoken"

_WORDS = (
    "alpha bravo charlie delta echo foxtrot golf hotel india juliet kilo lima "
    "mike november oscar papa quebec romeo sierra tango uniform victor whiskey "
    "xray yankee zulu"
).split()


@dataclass
class BuiltCorpus:
    lang: str
    source_file: Path
    ht_file: Path
    mt_files: dict[str, Path]
    manifest: Path


@pytest.fixture(autouse=True)
def _isolate_adapter_env(monkeypatch):
    monkeypatch.delenv("MTDETECT_ADAPTER_CMD", raising=False)


@pytest.fixture
def adapter_cmd() -> str:
    return f"{sys.executable} {ADAPTER_STUB}"


def _split_for(doc_idx: int, n_docs: int) -> str:
    if doc_idx < int(n_docs * 0.7):
        return "train"
    if doc_idx < int(n_docs * 0.85):
        return "dev"
    return "test"


def write_corpus_files(
    root: Path,
    lang: str,
    docs: list[tuple[str, str, str, list[tuple[str, str, dict[str, str]]]]],
) -> BuiltCorpus:
    """Write line-aligned corpus files from explicit document specs.

    Each doc spec is (doc_id, split, origin_lang, segments) with segments as
    (source, ht, {system: mt}) triples.
    """
    root.mkdir(parents=True, exist_ok=True)
    systems = sorted({s for _, _, _, segs in docs for _, _, mt in segs for s in mt})
    src_lines: list[str] = []
    ht_lines: list[str] = []
    mt_lines: dict[str, list[str]] = {s: [] for s in systems}
    manifest_rows: list[str] = []
    for doc_id, split, origin, segments in docs:
        start = len(src_lines)
        for src, ht, mt in segments:
            src_lines.append(src)
            ht_lines.append(ht)
            for system in systems:
                mt_lines[system].append(mt[system])
        manifest_rows.append(f"{start}\t{len(src_lines)}\t{doc_id}\t{origin}\t{split}")

    source_file = root / f"{lang}.src.txt"
    ht_file = root / f"{lang}.ht.txt"
    manifest = root / f"{lang}.manifest.tsv"
    source_file.write_text("\n".join(src_lines) + "\n", encoding="utf-8")
    ht_file.write_text("\n".join(ht_lines) + "\n", encoding="utf-8")
    manifest.write_text("\n".join(manifest_rows) + "\n", encoding="utf-8")
    mt_files = {}
    for system in systems:
        path = root / f"{lang}.{system}.txt"
        path.write_text("\n".join(mt_lines[system]) + "\n", encoding="utf-8")
        mt_files[system] = path
    return BuiltCorpus(
        lang=lang, source_file=source_file, ht_file=ht_file, mt_files=mt_files, manifest=manifest
    )


def make_marker_corpus(
    root: Path,
    lang: str = "de",
    systems: tuple[str, ...] = ("sys1",),
    n_docs: int = 40,
    segs_per_doc: int = 5,
    seed: int = 0,
    n_foreign_docs: int = 0,
    marker: str = MARKER,
) -> BuiltCorpus:
    """Trivially separable corpus: every HT segment ends in a human marker,
    every MT segment in a machine marker. Both classes carry a high-margin
    token, which keeps bias-free linear models seed-independently exact."""
    rng = random.Random(seed)
    docs = []
    for d in range(n_docs):
        segments = []
        for _ in range(segs_per_doc):
            base = " ".join(rng.choice(_WORDS) for _ in range(8))
            src = f"src{lang} " + " ".join(rng.choice(_WORDS) for _ in range(6))
            ht = f"{base} {HT_MARKER}"
            segments.append((src, ht, {s: f"{base} {marker}" for s in systems}))
        docs.append((f"{lang}doc{d:03d}", _split_for(d, n_docs), lang, segments))
    for f in range(n_foreign_docs):
        segments = []
        for _ in range(segs_per_doc):
            base = " ".join(rng.choice(_WORDS) for _ in range(8))
            segments.append((f"other {base}", base, {s: base for s in systems}))
        docs.append((f"{lang}foreign{f:03d}", _split_for(f, max(n_foreign_docs, 1)), "xx", segments))
    return write_corpus_files(root, lang, docs)


def make_source_relative_corpus(
    root: Path,
    lang: str = "de",
    system: str = "sys1",
    n_docs: int = 60,
    segs_per_doc: int = 4,
    seed: int = 1,
) -> BuiltCorpus:
    """MT adds exactly one filler token over a domain-specific HT baseline.

    Domain A sources carry "qqdoma" and their targets hold 1 (HT) or 2 (MT)
    "qq" fillers; domain B sources carry "qqdomb" with 3 or 4 fillers. Filler
    counts alone cannot separate the classes ({1,3} vs {2,4} overlap in any
    single threshold), but source + target input makes the problem linear.
    """
    rng = random.Random(seed)
    docs = []
    for d in range(n_docs):
        segments = []
        for _ in range(segs_per_doc):
            domain = rng.choice(("a", "b"))
            base_ht = 1 if domain == "a" else 3
            base = " ".join(rng.choice(_WORDS) for _ in range(6))
            src = f"qqdom{domain} " + " ".join(rng.choice(_WORDS) for _ in range(5))
            ht = base + " qq" * base_ht
            mt = base + " qq" * (base_ht + 1)
            segments.append((src, ht, {system: mt}))
        docs.append((f"{lang}rel{d:03d}", _split_for(d, n_docs), lang, segments))
    return write_corpus_files(root, lang, docs)


def toml_quote(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(toml_quote(v) for v in value) + "]"
    return '"' + str(value).replace("\\", "\\\\").replace('"', '\\"') + '"'


def write_config(
    path: Path,
    output_dir: Path,
    corpora: dict[str, BuiltCorpus] | None = None,
    backend_id: str = "baseline",
    adapter_command: str | None = None,
    mode: str = "target_only",
    granularity: str = "sentence",
    train: tuple[str, ...] = ("de:sys1",),
    eval_targets: tuple[str, ...] = (),
    seeds: tuple[int, ...] | None = (1, 2, 3),
    strategy: str | None = None,
    grid: dict | None = None,
    hyperparams: dict | None = None,
    sentence_hyperparams: dict | None = None,
    extra: str = "",
) -> Path:
    """Render a config TOML for the CLI tests."""
    lines = ["[output]", f"dir = {toml_quote(output_dir)}", ""]
    lines += ["[backend]", f"id = {toml_quote(backend_id)}"]
    if adapter_command is not None:
        lines.append(f"adapter_command = {toml_quote(adapter_command)}")
    lines += ["", "[experiment]"]
    lines.append(f"mode = {toml_quote(mode)}")
    lines.append(f"granularity = {toml_quote(granularity)}")
    lines.append(f"train = {toml_quote(list(train))}")
    if eval_targets:
        lines.append(f"eval = {toml_quote(list(eval_targets))}")
    if seeds is not None:
        lines.append(f"seeds = {toml_quote(list(seeds))}")
    if strategy is not None:
        lines.append(f"strategy = {toml_quote(strategy)}")
    for section, table in (
        ("grid", grid),
        ("hyperparams", hyperparams),
        ("sentence_hyperparams", sentence_hyperparams),
    ):
        if table is not None:
            lines += ["", f"[{section}]"]
            for key, value in table.items():
                lines.append(f"{key} = {toml_quote(value)}")
    for lang, corpus in (corpora or {}).items():
        lines += ["", f"[corpora.{lang}]"]
        lines.append(f"source_file = {toml_quote(corpus.source_file)}")
        lines.append(f"ht_file = {toml_quote(corpus.ht_file)}")
        lines.append(f"manifest = {toml_quote(corpus.manifest)}")
        lines.append(f"[corpora.{lang}.mt_files]")
        for system, mt_path in sorted(corpus.mt_files.items()):
            lines.append(f"{system} = {toml_quote(mt_path)}")
    if extra:
        lines += ["", extra]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


DEFAULT_HP = {"learning_rate": 1.0, "batch_size": 16, "epochs": 5}


def build_datasets_via_api(
    corpus: BuiltCorpus, out_dir: Path, systems: tuple[str, ...] | None = None
):
    """Ingest a built corpus and write every dataset combination, returning a
    ready DatasetStore."""
    from mtdetect.corpus import (
        GRANULARITIES,
        MODES,
        SPLIT_NAMES,
        build_paired_dataset,
        filter_source_original,
        ingest_bitext,
    )
    from mtdetect.training import DatasetStore

    parsed = ingest_bitext(
        corpus.source_file,
        corpus.ht_file,
        corpus.mt_files,
        corpus.manifest,
        src_lang=corpus.lang,
    )
    store = DatasetStore(out_dir)
    for split_name in SPLIT_NAMES:
        records = filter_source_original(parsed.splits[split_name], corpus.lang)
        for system in systems or sorted(corpus.mt_files):
            for granularity in GRANULARITIES:
                for mode in MODES:
                    dataset = build_paired_dataset(records, system, mode, granularity, split_name)
                    store.save(dataset, corpus.lang, system)
    return store
