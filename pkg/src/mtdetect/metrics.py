"""Scoring and statistics: accuracy, seed aggregation, corpus BLEU, Pearson
correlation with significance, quality-vs-accuracy scatter, and result-matrix
rendering.

All functions are pure and thread-safe. Accuracies live in [0, 1] internally;
report renderers multiply by 100 and show one decimal.
"""

from __future__ import annotations

import csv
import io
import math
import re
import sys
import unicodedata
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

from scipy.special import betainc

from mtdetect.errors import DataError

ABSENT_CELL = "—"

BLEU_MAX_ORDER = 4

# Report headers cite this so every BLEU number is tied to its configuration.
BLEU_VARIANT = "corpus-bleu|n=1..4|uniform|tok=v14-international|smooth=none|effective-order"


def accuracy(pred_labels: list[str], gold_labels: list[str]) -> float:
    """Fraction of exact label matches."""
    if len(pred_labels) != len(gold_labels):
        raise ValueError(
            f"length mismatch: {len(pred_labels)} predictions vs {len(gold_labels)} golds"
        )
    if not pred_labels:
        raise ValueError("cannot score an empty prediction list")
    hits = sum(1 for p, g in zip(pred_labels, gold_labels) if p == g)
    return hits / len(pred_labels)


def aggregate_seeds(accs: list[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n-1 denominator) across seeds.

    A single seed has no spread; its std is defined as 0.
    """
    if not accs:
        raise ValueError("cannot aggregate an empty accuracy list")
    n = len(accs)
    mean = math.fsum(accs) / n
    if n == 1:
        return mean, 0.0
    var = math.fsum((a - mean) ** 2 for a in accs) / (n - 1)
    return mean, math.sqrt(var)


@dataclass(frozen=True)
class EvalCell:
    """One matrix cell: a (train, eval) pairing with its per-seed accuracies."""

    train_key: str
    eval_key: str
    per_seed_acc: tuple[float, ...]
    mean: float
    std: float
    n_examples: int

    def __post_init__(self) -> None:
        if not self.per_seed_acc:
            raise ValueError("EvalCell requires at least one seed accuracy")
        for a in self.per_seed_acc:
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"accuracy {a} outside [0, 1]")
        want_mean, want_std = aggregate_seeds(list(self.per_seed_acc))
        if not math.isclose(self.mean, want_mean, abs_tol=1e-9):
            raise ValueError(f"mean {self.mean} inconsistent with per-seed accuracies")
        if not math.isclose(self.std, want_std, abs_tol=1e-9):
            raise ValueError(f"std {self.std} inconsistent with per-seed accuracies")

    @classmethod
    def from_accs(
        cls, train_key: str, eval_key: str, accs: list[float], n_examples: int
    ) -> "EvalCell":
        mean, std = aggregate_seeds(accs)
        return cls(
            train_key=train_key,
            eval_key=eval_key,
            per_seed_acc=tuple(accs),
            mean=mean,
            std=std,
            n_examples=n_examples,
        )


@dataclass(frozen=True)
class CorrelationResult:
    """Pearson r with its two-sided p-value; p is None when n < 3 leaves the
    t-test undefined."""

    r: float
    p_value: float | None
    n: int

    def __post_init__(self) -> None:
        if not -1.0 <= self.r <= 1.0:
            raise ValueError(f"r {self.r} outside [-1, 1]")
        if self.p_value is not None and not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p-value {self.p_value} outside [0, 1]")
        if self.p_value is not None and self.n < 3:
            raise ValueError("p-value defined but n < 3")


@dataclass(frozen=True)
class BleuScore:
    """Corpus-level BLEU with its components.

    precisions holds the four modified n-gram precisions; orders with no
    n-gram slots anywhere in the corpus report 0.0 and are excluded from the
    geometric mean (effective_order marks the cutoff), so a corpus compared
    against itself scores exactly 100 regardless of segment lengths.
    """

    score: float
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    effective_order: int = BLEU_MAX_ORDER

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 100.0:
            raise ValueError(f"BLEU score {self.score} outside [0, 100]")
        if not 0.0 < self.brevity_penalty <= 1.0:
            raise ValueError(f"brevity penalty {self.brevity_penalty} outside (0, 1]")


@lru_cache(maxsize=1)
def _tokenizer_regexes() -> tuple[re.Pattern[str], re.Pattern[str], re.Pattern[str]]:
    # One-time scan of the full codepoint range for Unicode categories P and S.
    # The raw character-class join is well formed: the only literal '-' lands
    # between ',' and '.' (a range equal to those three chars) and the only ']'
    # is preceded by '\\', which escapes it.
    punct = "".join(
        chr(x) for x in range(sys.maxunicode) if unicodedata.category(chr(x)).startswith("P")
    )
    symbol = "".join(
        chr(x) for x in range(sys.maxunicode) if unicodedata.category(chr(x)).startswith("S")
    )
    return (
        re.compile(r"([^\d])([" + punct + r"])"),
        re.compile(r"([" + punct + r"])([^\d])"),
        re.compile(r"([" + symbol + r"])"),
    )


def tokenize(text: str) -> list[str]:
    """Split punctuation from words unless digit-adjacent, split symbols
    always, then split on whitespace. Language-agnostic."""
    nondigit_punct, punct_nondigit, symbol = _tokenizer_regexes()
    text = nondigit_punct.sub(r"\1 \2 ", text)
    text = punct_nondigit.sub(r" \1 \2", text)
    text = symbol.sub(r" \1 ", text)
    return text.split()


def _ngram_counts(tokens: list[str]) -> Counter:
    counts: Counter = Counter()
    for n in range(1, BLEU_MAX_ORDER + 1):
        for i in range(len(tokens) - n + 1):
            counts[tuple(tokens[i : i + n])] += 1
    return counts


def bleu(hypotheses: list[str], references: list[str]) -> BleuScore:
    """Corpus-level BLEU, single reference per segment, orders 1..4 with
    uniform weights.

    Clipped n-gram matches and totals are summed over the whole corpus before
    dividing. Brevity penalty is exp(1 - ref_len/hyp_len) when the hypothesis
    corpus is shorter than the reference corpus, else 1. The score is 0 when
    any contributing precision is 0.
    """
    if len(hypotheses) != len(references):
        raise ValueError(
            f"length mismatch: {len(hypotheses)} hypotheses vs {len(references)} references"
        )
    if not hypotheses:
        raise ValueError("cannot score an empty corpus")

    correct = [0] * BLEU_MAX_ORDER
    total = [0] * BLEU_MAX_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_tokens = tokenize(hyp)
        ref_tokens = tokenize(ref)
        hyp_len += len(hyp_tokens)
        ref_len += len(ref_tokens)
        ref_counts = _ngram_counts(ref_tokens)
        for ngram, count in _ngram_counts(hyp_tokens).items():
            order = len(ngram)
            total[order - 1] += count
            correct[order - 1] += min(count, ref_counts.get(ngram, 0))

    if hyp_len == 0 or ref_len == 0:
        raise ValueError("cannot score a corpus with no tokens")

    precisions = [0.0] * BLEU_MAX_ORDER
    effective_order = 0
    for n in range(BLEU_MAX_ORDER):
        if total[n] == 0:
            break
        effective_order = n + 1
        precisions[n] = correct[n] / total[n]

    brevity_penalty = 1.0
    if hyp_len < ref_len:
        brevity_penalty = math.exp(1.0 - ref_len / hyp_len)

    if any(precisions[n] == 0.0 for n in range(effective_order)):
        score = 0.0
    else:
        log_mean = math.fsum(math.log(precisions[n]) for n in range(effective_order))
        score = 100.0 * brevity_penalty * math.exp(log_mean / effective_order)

    return BleuScore(
        score=score,
        precisions=tuple(precisions),
        brevity_penalty=brevity_penalty,
        hyp_len=hyp_len,
        ref_len=ref_len,
        effective_order=effective_order,
    )


def pearson(xs: list[float], ys: list[float]) -> CorrelationResult:
    """Pearson correlation with a two-sided t-test p-value.

    Sufficient statistics are accumulated as exact rationals, so data whose
    affine relation is exactly representable in floats yields r of exactly
    +/-1.0. The p-value needs n >= 3 and is None below that; exact |r| = 1
    gives p = 0.
    """
    if len(xs) != len(ys):
        raise ValueError(f"length mismatch: {len(xs)} vs {len(ys)}")
    n = len(xs)
    if n < 2:
        raise ValueError("correlation needs at least 2 points")

    fx = [Fraction(x) for x in xs]
    fy = [Fraction(y) for y in ys]
    sx, sy = sum(fx), sum(fy)
    cov = n * sum(a * b for a, b in zip(fx, fy)) - sx * sy
    var_x = n * sum(v * v for v in fx) - sx * sx
    var_y = n * sum(v * v for v in fy) - sy * sy
    if var_x == 0 or var_y == 0:
        raise ValueError("undefined correlation: zero variance")

    r_squared = cov * cov / (var_x * var_y)
    if r_squared >= 1:
        r = 1.0 if cov > 0 else -1.0
    else:
        r = float(cov) / math.sqrt(float(var_x) * float(var_y))
        r = max(-1.0, min(1.0, r))

    if n < 3:
        return CorrelationResult(r=r, p_value=None, n=n)
    if abs(r) == 1.0:
        return CorrelationResult(r=r, p_value=0.0, n=n)
    df = n - 2
    t_squared = r * r * df / (1.0 - r * r)
    p = float(betainc(df / 2.0, 0.5, df / (df + t_squared)))
    return CorrelationResult(r=r, p_value=min(max(p, 0.0), 1.0), n=n)


def read_quality_scores(path: Path) -> dict[str, float]:
    """Load an external quality-metric file: one "eval_key<TAB>score" per line."""
    if not Path(path).exists():
        raise DataError(f"quality-score file does not exist: {path}")
    scores: dict[str, float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'eval_key<TAB>score'")
            key, value = parts
            if key in scores:
                raise DataError(f"{path}:{lineno}: duplicate eval_key {key!r}")
            try:
                scores[key] = float(value)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric score {value!r}") from exc
    if not scores:
        raise DataError(f"{path}: no quality scores found")
    return scores


def quality_vs_accuracy(
    cells: list[EvalCell], quality_scores: dict[str, float]
) -> tuple[CorrelationResult, str]:
    """Pair each cell's mean accuracy with the quality score of its eval set.

    Returns the correlation over the (quality, accuracy) points plus a
    two-column comma-separated scatter export with a header row, points in
    cell order.
    """
    missing = sorted({c.eval_key for c in cells if c.eval_key not in quality_scores})
    if missing:
        raise DataError(f"missing quality scores for: {', '.join(missing)}")
    if len(cells) < 2:
        raise ValueError("quality-vs-accuracy needs at least 2 cells")

    qualities = [float(quality_scores[c.eval_key]) for c in cells]
    accs = [c.mean for c in cells]
    lines = ["quality,accuracy"]
    lines.extend(f"{q:.6f},{a:.6f}" for q, a in zip(qualities, accs))
    return pearson(qualities, accs), "\n".join(lines) + "\n"


def format_cell(mean: float, std: float) -> str:
    """Render an accuracy cell the way result tables print them."""
    return f"{mean * 100:.1f} ({std * 100:.1f})"


def emit_matrix(
    cells: list[EvalCell],
    row_order: list[str],
    col_order: list[str],
    fmt: str = "text",
) -> str:
    """Render cells as a train-by-eval table; absent cells show an em dash.

    fmt is "text" (aligned columns) or "csv". Identical inputs produce
    byte-identical output.
    """
    if fmt not in ("text", "csv"):
        raise ValueError(f"unknown format {fmt!r}")
    if len(set(row_order)) != len(row_order) or len(set(col_order)) != len(col_order):
        raise ValueError("duplicate row or column keys")

    index: dict[tuple[str, str], EvalCell] = {}
    for cell in cells:
        addr = (cell.train_key, cell.eval_key)
        if addr in index:
            raise ValueError(f"duplicate cell for train={addr[0]!r} eval={addr[1]!r}")
        if cell.train_key not in row_order:
            raise ValueError(f"cell train_key {cell.train_key!r} not in row order")
        if cell.eval_key not in col_order:
            raise ValueError(f"cell eval_key {cell.eval_key!r} not in column order")
        index[addr] = cell

    header = ["train\\eval"] + list(col_order)
    rows = [header]
    for train_key in row_order:
        row = [train_key]
        for eval_key in col_order:
            cell = index.get((train_key, eval_key))
            row.append(ABSENT_CELL if cell is None else format_cell(cell.mean, cell.std))
        rows.append(row)

    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerows(rows)
        return buf.getvalue()

    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    out_lines = []
    for row in rows:
        out_lines.append("  ".join(value.ljust(widths[i]) for i, value in enumerate(row)).rstrip())
    return "\n".join(out_lines) + "\n"
