"""Corpus construction: ingest line-aligned bitext plus MT outputs, filter by
original language, and build perfectly balanced HT/MT datasets.

Balance is structural, not statistical: every source segment contributes
exactly one human-translation example and one machine-translation example, so
the label prior is 0.5 by construction. All operations are deterministic;
shuffling is the trainer's job.

File formats
------------
* segment files: UTF-8, one segment per line, LF endings, line-aligned across
  source / HT / every MT file;
* split manifest: TSV with columns (line_start, line_end, doc_id, origin_lang,
  split), 0-based inclusive-exclusive line ranges that must tile the file;
* serialized datasets: one JSON object per line with a fixed key order so
  identical inputs produce byte-identical files.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from mtdetect.errors import DataError

LABEL_HT = "HT"
LABEL_MT = "MT"

SPLIT_NAMES = ("train", "dev", "test")
GRANULARITIES = ("sentence", "document")
MODES = ("target_only", "source_target")

# Fixed serialization key order; append-only to keep old files readable.
_EXAMPLE_FIELDS = (
    "target_text",
    "source_text",
    "label",
    "system_id",
    "src_lang",
    "doc_id",
    "seg_ids",
)


@dataclass(frozen=True)
class Segment:
    """One source-side segment with its document coordinates."""

    seg_id: str
    doc_id: str
    position: int
    lang: str
    text: str
    origin_lang: str


@dataclass(frozen=True)
class BitextRecord:
    """A source segment, its human translation, and MT outputs by system id."""

    source: Segment
    ht_text: str
    mt_texts: dict[str, str]


@dataclass(frozen=True)
class LabeledExample:
    """One classifier input: a target text (optionally with its source) and a
    binary HT/MT label. system_id is set exactly when label is MT."""

    target_text: str
    label: str
    src_lang: str
    doc_id: str
    seg_ids: tuple[str, ...]
    source_text: str | None = None
    system_id: str | None = None

    def __post_init__(self) -> None:
        if self.label not in (LABEL_HT, LABEL_MT):
            raise ValueError(f"unknown label {self.label!r}")
        if self.label == LABEL_MT and self.system_id is None:
            raise ValueError("MT example requires a system_id")
        if self.label == LABEL_HT and self.system_id is not None:
            raise ValueError("HT example must not carry a system_id")

    def to_json_line(self) -> str:
        record = {
            "target_text": self.target_text,
            "source_text": self.source_text,
            "label": self.label,
            "system_id": self.system_id,
            "src_lang": self.src_lang,
            "doc_id": self.doc_id,
            "seg_ids": list(self.seg_ids),
        }
        # Explicit key order (not sort_keys) keeps the wire format stable even
        # if field names change lexicographic rank later.
        return json.dumps(
            {k: record[k] for k in _EXAMPLE_FIELDS},
            ensure_ascii=False,
            separators=(",", ":"),
        )

    @classmethod
    def from_json_line(cls, line: str) -> "LabeledExample":
        obj = json.loads(line)
        return cls(
            target_text=obj["target_text"],
            source_text=obj.get("source_text"),
            label=obj["label"],
            system_id=obj.get("system_id"),
            src_lang=obj["src_lang"],
            doc_id=obj["doc_id"],
            seg_ids=tuple(obj["seg_ids"]),
        )


@dataclass
class DatasetSplit:
    """An ordered, perfectly balanced list of labeled examples."""

    name: str
    granularity: str
    mode: str
    examples: list[LabeledExample] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.name not in SPLIT_NAMES:
            raise ValueError(f"unknown split name {self.name!r}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    def __len__(self) -> int:
        return len(self.examples)

    def label_counts(self) -> tuple[int, int]:
        """(n_ht, n_mt)."""
        n_ht = sum(1 for e in self.examples if e.label == LABEL_HT)
        return n_ht, len(self.examples) - n_ht

    def seg_ids(self) -> set[str]:
        out: set[str] = set()
        for e in self.examples:
            out.update(e.seg_ids)
        return out

    def to_jsonl(self) -> str:
        return "".join(e.to_json_line() + "\n" for e in self.examples)

    @classmethod
    def from_jsonl(cls, text: str, name: str, granularity: str, mode: str) -> "DatasetSplit":
        examples = [LabeledExample.from_json_line(ln) for ln in text.splitlines() if ln]
        return cls(name=name, granularity=granularity, mode=mode, examples=examples)


@dataclass
class BitextCorpus:
    """Ingested bitext grouped by split."""

    splits: dict[str, list[BitextRecord]]

    def counts(self) -> dict[str, int]:
        return {name: len(self.splits.get(name, [])) for name in SPLIT_NAMES}

    def doc_counts(self) -> dict[str, int]:
        out = {}
        for name in SPLIT_NAMES:
            out[name] = len({r.source.doc_id for r in self.splits.get(name, [])})
        return out


@dataclass(frozen=True)
class ManifestRow:
    line_start: int
    line_end: int
    doc_id: str
    origin_lang: str
    split: str


def read_manifest(path: Path) -> list[ManifestRow]:
    """Parse a split manifest TSV. Ranges are 0-based inclusive-exclusive."""
    rows: list[ManifestRow] = []
    seen_docs: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise DataError(
                    f"{path}:{lineno}: expected 5 tab-separated columns, got {len(parts)}"
                )
            start_s, end_s, doc_id, origin_lang, split = parts
            try:
                start, end = int(start_s), int(end_s)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-integer line range") from exc
            if start < 0 or end <= start:
                raise DataError(f"{path}:{lineno}: bad line range [{start}, {end})")
            if split not in SPLIT_NAMES:
                raise DataError(
                    f"{path}:{lineno}: unknown split name {split!r} "
                    f"(expected one of {', '.join(SPLIT_NAMES)})"
                )
            if doc_id in seen_docs:
                raise DataError(f"{path}:{lineno}: duplicate doc_id {doc_id!r}")
            seen_docs.add(doc_id)
            rows.append(ManifestRow(start, end, doc_id, origin_lang, split))
    if not rows:
        raise DataError(f"{path}: empty manifest")
    return rows


def _read_lines(path: Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return fh.read().splitlines()


def ingest_bitext(
    source_file: Path,
    ht_file: Path,
    mt_files: dict[str, Path],
    manifest: Path | list[ManifestRow],
    src_lang: str,
    target_lang: str = "en",
) -> BitextCorpus:
    """Load line-aligned source / HT / MT files into one BitextRecord per line,
    grouped into splits by the manifest.

    Hard errors: line-count mismatch between files, empty segments, manifest
    ranges that overlap or leave lines uncovered.
    """
    if src_lang == target_lang:
        raise DataError(f"source language equals target language ({src_lang!r})")

    rows = read_manifest(manifest) if isinstance(manifest, (str, Path)) else manifest

    src_lines = _read_lines(source_file)
    n = len(src_lines)
    ht_lines = _read_lines(ht_file)
    if len(ht_lines) != n:
        raise DataError(
            f"line-count mismatch: {ht_file} has {len(ht_lines)} lines, "
            f"expected {n} (from {source_file})"
        )
    mt_lines: dict[str, list[str]] = {}
    for system_id in sorted(mt_files):
        lines = _read_lines(mt_files[system_id])
        if len(lines) != n:
            raise DataError(
                f"line-count mismatch: {mt_files[system_id]} has {len(lines)} lines, "
                f"expected {n} (from {source_file})"
            )
        mt_lines[system_id] = lines

    # The manifest must tile [0, n) exactly: silent gaps would drop segments
    # and overlaps would duplicate them, both breaking the balance invariant.
    covered = sorted(rows, key=lambda r: r.line_start)
    cursor = 0
    for row in covered:
        if row.line_start != cursor:
            kind = "overlap" if row.line_start < cursor else "gap"
            raise DataError(
                f"manifest {kind} at line {min(cursor, row.line_start)} "
                f"(doc {row.doc_id!r} starts at {row.line_start}, cursor at {cursor})"
            )
        if row.line_end > n:
            raise DataError(
                f"manifest range [{row.line_start}, {row.line_end}) for doc "
                f"{row.doc_id!r} exceeds file length {n}"
            )
        cursor = row.line_end
    if cursor != n:
        raise DataError(f"manifest covers {cursor} of {n} lines")

    splits: dict[str, list[BitextRecord]] = {name: [] for name in SPLIT_NAMES}
    for row in covered:
        for position, i in enumerate(range(row.line_start, row.line_end)):
            src_text = src_lines[i]
            if not src_text.strip():
                raise DataError(f"{source_file}: empty source segment at line {i}")
            if not ht_lines[i].strip():
                raise DataError(f"{ht_file}: empty HT segment at line {i}")
            mt_texts = {}
            for system_id, lines in mt_lines.items():
                if not lines[i].strip():
                    raise DataError(
                        f"{mt_files[system_id]}: empty MT segment at line {i} "
                        f"(system {system_id!r})"
                    )
                mt_texts[system_id] = lines[i]
            # Lang prefix keeps seg_ids unique across corpora, so leakage
            # checks stay sound when manifests reuse document ids.
            seg = Segment(
                seg_id=f"{src_lang}:{row.doc_id}:{position}",
                doc_id=row.doc_id,
                position=position,
                lang=src_lang,
                text=src_text,
                origin_lang=row.origin_lang,
            )
            splits[row.split].append(BitextRecord(seg, ht_lines[i], mt_texts))
    return BitextCorpus(splits=splits)


def filter_source_original(records: list[BitextRecord], src_lang: str) -> list[BitextRecord]:
    """Keep only records whose source document was originally written in
    *src_lang*; order preserved. Idempotent; an empty result is legal."""
    return [r for r in records if r.source.origin_lang == src_lang]


def build_paired_dataset(
    records: list[BitextRecord],
    system_id: str,
    mode: str,
    granularity: str,
    name: str,
) -> DatasetSplit:
    """Build a balanced dataset: per source unit (sentence or document), one HT
    example immediately followed by its MT twin, in input-record order.

    Document texts are the positional-order concatenation of segment texts
    joined by single newlines.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if granularity not in GRANULARITIES:
        raise ValueError(f"unknown granularity {granularity!r}")

    missing = [r.source.seg_id for r in records if system_id not in r.mt_texts]
    if missing:
        shown = ", ".join(missing[:10])
        suffix = "" if len(missing) <= 10 else f" (+{len(missing) - 10} more)"
        raise DataError(
            f"system {system_id!r} missing for {len(missing)} segment(s): {shown}{suffix}"
        )

    examples: list[LabeledExample] = []
    if granularity == "sentence":
        for rec in records:
            src = rec.source
            common = dict(
                src_lang=src.lang,
                doc_id=src.doc_id,
                seg_ids=(src.seg_id,),
                source_text=src.text if mode == "source_target" else None,
            )
            examples.append(LabeledExample(target_text=rec.ht_text, label=LABEL_HT, **common))
            examples.append(
                LabeledExample(
                    target_text=rec.mt_texts[system_id],
                    label=LABEL_MT,
                    system_id=system_id,
                    **common,
                )
            )
    else:
        docs: dict[str, list[BitextRecord]] = {}
        order: list[str] = []
        for rec in records:
            doc_id = rec.source.doc_id
            if doc_id not in docs:
                docs[doc_id] = []
                order.append(doc_id)
            docs[doc_id].append(rec)
        for doc_id in order:
            recs = docs[doc_id]
            positions = [r.source.position for r in recs]
            if positions != list(range(len(recs))):
                raise DataError(
                    f"document {doc_id!r} is incomplete or out of order "
                    f"(positions {positions})"
                )
            common = dict(
                src_lang=recs[0].source.lang,
                doc_id=doc_id,
                seg_ids=tuple(r.source.seg_id for r in recs),
                source_text=(
                    "\n".join(r.source.text for r in recs)
                    if mode == "source_target"
                    else None
                ),
            )
            examples.append(
                LabeledExample(
                    target_text="\n".join(r.ht_text for r in recs),
                    label=LABEL_HT,
                    **common,
                )
            )
            examples.append(
                LabeledExample(
                    target_text="\n".join(r.mt_texts[system_id] for r in recs),
                    label=LABEL_MT,
                    system_id=system_id,
                    **common,
                )
            )
    return DatasetSplit(name=name, granularity=granularity, mode=mode, examples=examples)


def concat_training_sets(splits: list[DatasetSplit]) -> DatasetSplit:
    """Concatenate datasets in input order. All inputs must agree on split
    name, granularity, and mode; the balance invariant carries over."""
    if not splits:
        raise DataError("no datasets to concatenate")
    head = splits[0]
    for other in splits[1:]:
        for attr in ("name", "granularity", "mode"):
            if getattr(other, attr) != getattr(head, attr):
                raise DataError(
                    f"cannot concatenate: {attr} mismatch "
                    f"({getattr(head, attr)!r} vs {getattr(other, attr)!r})"
                )
    examples: list[LabeledExample] = []
    for split in splits:
        examples.extend(split.examples)
    return DatasetSplit(
        name=head.name, granularity=head.granularity, mode=head.mode, examples=examples
    )


@dataclass
class DocGroup:
    """A document's two renderings as parallel ordered sentence lists."""

    ht: list[LabeledExample]
    mt: list[LabeledExample]


def group_documents(sentence_split: DatasetSplit) -> dict[str, DocGroup]:
    """Partition a sentence-granularity dataset by doc_id into parallel HT and
    MT sentence lists. A sentence lacking its twin is a hard error."""
    if sentence_split.granularity != "sentence":
        raise DataError("group_documents requires sentence granularity")
    groups: dict[str, DocGroup] = {}
    for ex in sentence_split.examples:
        group = groups.setdefault(ex.doc_id, DocGroup(ht=[], mt=[]))
        (group.ht if ex.label == LABEL_HT else group.mt).append(ex)
    for doc_id, group in groups.items():
        ht_segs = Counter(e.seg_ids for e in group.ht)
        mt_segs = Counter(e.seg_ids for e in group.mt)
        if ht_segs != mt_segs:
            odd = set(ht_segs.keys()) ^ set(mt_segs.keys())
            raise DataError(
                f"document {doc_id!r} has unpaired sentences: "
                f"{sorted(s for segs in odd for s in segs)}"
            )
    return groups


def check_balance(split: DatasetSplit) -> None:
    """Raise DataError unless HT/MT counts are exactly equal and every MT
    example has exactly one HT twin with identical seg_ids."""
    n_ht, n_mt = split.label_counts()
    if n_ht != n_mt:
        raise DataError(f"unbalanced dataset: {n_ht} HT vs {n_mt} MT")
    ht_keys = Counter(e.seg_ids for e in split.examples if e.label == LABEL_HT)
    for ex in split.examples:
        if ex.label == LABEL_MT and ht_keys.get(ex.seg_ids, 0) != 1:
            raise DataError(f"MT example {ex.seg_ids} lacks a unique HT twin")
