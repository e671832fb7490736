"""Document-level mechanics: token budgets with truncation statistics, and
sentence-to-document label aggregation by majority vote.

Everything here is pure and tokenizer-agnostic; callers supply the backend's
tokenizer because token counts only mean something relative to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from mtdetect.corpus import LABEL_HT, LABEL_MT, DatasetSplit, LabeledExample
from mtdetect.errors import DataError

Tokenizer = Callable[[str], Sequence[str]]


@dataclass(frozen=True)
class TruncationStats:
    """How much a token budget cuts from a document training set.

    pct_truncated is the percentage of documents strictly exceeding the
    budget. avg_tokens_truncated averages the dropped-token count over ALL
    documents, untruncated ones contributing 0; reports flag this convention
    wherever the number is printed because the truncated-docs-only reading is
    also defensible.
    """

    max_length: int | None
    pct_truncated: float
    avg_tokens_truncated: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.pct_truncated <= 100.0:
            raise ValueError(f"pct_truncated {self.pct_truncated} outside [0, 100]")
        if self.avg_tokens_truncated < 0.0:
            raise ValueError(f"avg_tokens_truncated {self.avg_tokens_truncated} negative")
        if self.max_length is None and (self.pct_truncated or self.avg_tokens_truncated):
            raise ValueError("no token budget implies zero truncation")


@dataclass(frozen=True)
class VoteResult:
    """Outcome of a per-document majority vote over sentence MT probabilities."""

    doc_id: str
    sentence_probs: tuple[float, ...]
    vote_counts: tuple[int, int]
    label: str
    tie_broken: bool

    def __post_init__(self) -> None:
        n_mt, n_ht = self.vote_counts
        if n_mt + n_ht != len(self.sentence_probs):
            raise ValueError("vote counts do not cover all sentences")
        if self.label not in (LABEL_HT, LABEL_MT):
            raise ValueError(f"unknown label {self.label!r}")


def truncate(tokens: Sequence[str], max_length: int | None) -> tuple[list[str], int]:
    """Keep the first max_length tokens; None means no budget."""
    if max_length is None:
        return list(tokens), 0
    if max_length < 1:
        raise ValueError(f"max_length must be >= 1, got {max_length}")
    kept = list(tokens[:max_length])
    return kept, max(0, len(tokens) - max_length)


def truncate_pair(
    source_tokens: Sequence[str],
    target_tokens: Sequence[str],
    max_length: int | None,
) -> tuple[list[str], list[str], int]:
    """Apply one budget to a combined source+target input.

    Overflow is removed from the tail of each segment proportionally to its
    length (source share rounded down), so neither side is wiped out while the
    other stays whole.
    """
    if max_length is None:
        return list(source_tokens), list(target_tokens), 0
    if max_length < 1:
        raise ValueError(f"max_length must be >= 1, got {max_length}")
    total = len(source_tokens) + len(target_tokens)
    overflow = max(0, total - max_length)
    if overflow == 0:
        return list(source_tokens), list(target_tokens), 0
    drop_src = overflow * len(source_tokens) // total
    drop_tgt = overflow - drop_src
    return (
        list(source_tokens[: len(source_tokens) - drop_src]),
        list(target_tokens[: len(target_tokens) - drop_tgt]),
        overflow,
    )


def _doc_token_length(example: LabeledExample, tokenizer: Tokenizer) -> int:
    n = len(tokenizer(example.target_text))
    if example.source_text is not None:
        n += len(tokenizer(example.source_text))
    return n


def truncation_report(
    doc_dataset: DatasetSplit | Iterable[LabeledExample],
    tokenizer: Tokenizer,
    max_lengths: Sequence[int | None],
) -> list[TruncationStats]:
    """Per-budget truncation statistics over a document training set.

    A document is truncated when its token count strictly exceeds the budget;
    bilingual examples count source and target tokens together.
    """
    examples = doc_dataset.examples if isinstance(doc_dataset, DatasetSplit) else list(doc_dataset)
    if not examples:
        raise DataError("cannot report truncation on an empty dataset")
    lengths = [_doc_token_length(e, tokenizer) for e in examples]
    n = len(lengths)
    stats = []
    for max_length in max_lengths:
        if max_length is None:
            stats.append(TruncationStats(None, 0.0, 0.0))
            continue
        if max_length < 1:
            raise ValueError(f"max_length must be >= 1, got {max_length}")
        n_over = sum(1 for length in lengths if length > max_length)
        dropped = math.fsum(max(0, length - max_length) for length in lengths)
        stats.append(
            TruncationStats(
                max_length=max_length,
                pct_truncated=100.0 * n_over / n,
                avg_tokens_truncated=dropped / n,
            )
        )
    return stats


def majority_vote(sentence_probs: Sequence[float], doc_id: str = "") -> VoteResult:
    """Aggregate sentence MT probabilities into one document label.

    A sentence votes MT when p >= 0.5. The document is MT when MT votes win
    outright; an exact tie falls back to the mean probability (MT on >= 0.5)
    and is marked tie_broken.
    """
    if not sentence_probs:
        raise ValueError("cannot vote over an empty document")
    for p in sentence_probs:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability {p} outside [0, 1]")
    n_mt = sum(1 for p in sentence_probs if p >= 0.5)
    n_ht = len(sentence_probs) - n_mt
    tie_broken = False
    if n_mt != n_ht:
        label = LABEL_MT if n_mt > n_ht else LABEL_HT
    else:
        tie_broken = True
        mean = math.fsum(sentence_probs) / len(sentence_probs)
        label = LABEL_MT if mean >= 0.5 else LABEL_HT
    return VoteResult(
        doc_id=doc_id,
        sentence_probs=tuple(sentence_probs),
        vote_counts=(n_mt, n_ht),
        label=label,
        tie_broken=tie_broken,
    )
