"""Classifier backends: the fit/predict contract, a deterministic
self-contained baseline, and an external-process adapter for heavyweight
models.

Inputs are one segment (target only) or two segments in (source, target)
order. Separator handling belongs to the backend, so the contract always
passes segments as a list, never a pre-joined string. The decision threshold
is fixed at 0.5: hard label MT iff p_mt >= 0.5.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import random
import shlex
import subprocess
import tempfile
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from mtdetect.corpus import LABEL_MT, MODES, DatasetSplit, LabeledExample, check_balance
from mtdetect.doclevel import truncate, truncate_pair
from mtdetect.errors import BackendError, DataError
from mtdetect.util import write_text_atomic

ADAPTER_CMD_ENV = "MTDETECT_ADAPTER_CMD"

# Per-segment hashed feature space; segment i owns [i*space, (i+1)*space), so
# source and target features can never collide.
_SEGMENT_SPACE = 1 << 20
_CHAR_NGRAM_MAX = 4


@dataclass(frozen=True)
class EncodedInput:
    """Backend-ready input: 1 segment (target) or 2 segments (source, target)."""

    segments: tuple[str, ...]
    max_length: int | None = None

    def __post_init__(self) -> None:
        if len(self.segments) not in (1, 2):
            raise ValueError(f"expected 1 or 2 segments, got {len(self.segments)}")
        if self.max_length is not None and self.max_length < 1:
            raise ValueError(f"max_length must be >= 1, got {self.max_length}")


@dataclass(frozen=True)
class Hyperparams:
    """Training knobs shared by every backend.

    epochs is interpreted by the backend (the baseline runs exactly that many
    passes; adapters may treat it as a budget). batch_ceiling, when set, caps
    the effective batch size batch_size * gradient_accumulation.
    """

    learning_rate: float
    batch_size: int
    gradient_accumulation: int = 1
    max_length: int | None = None
    epochs: int = 5
    seed: int = 0
    batch_ceiling: int | None = None

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.gradient_accumulation < 1:
            raise ValueError(
                f"gradient_accumulation must be >= 1, got {self.gradient_accumulation}"
            )
        if self.max_length is not None and self.max_length < 1:
            raise ValueError(f"max_length must be >= 1, got {self.max_length}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if (
            self.batch_ceiling is not None
            and self.batch_size * self.gradient_accumulation > self.batch_ceiling
        ):
            raise ValueError(
                f"effective batch {self.batch_size * self.gradient_accumulation} "
                f"exceeds ceiling {self.batch_ceiling}"
            )

    def effective_batch(self) -> int:
        return self.batch_size * self.gradient_accumulation

    def replace(self, **kwargs) -> "Hyperparams":
        current = {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "gradient_accumulation": self.gradient_accumulation,
            "max_length": self.max_length,
            "epochs": self.epochs,
            "seed": self.seed,
            "batch_ceiling": self.batch_ceiling,
        }
        current.update(kwargs)
        return Hyperparams(**current)

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "gradient_accumulation": self.gradient_accumulation,
            "max_length": self.max_length,
            "epochs": self.epochs,
            "seed": self.seed,
            "batch_ceiling": self.batch_ceiling,
        }


@dataclass(frozen=True)
class TrainedModel:
    """Handle to a fitted model; the artifact path is backend-opaque."""

    backend_id: str
    mode: str
    hyperparams: Hyperparams
    artifact: Path


def encode_example(
    example: LabeledExample, mode: str, max_length: int | None = None
) -> EncodedInput:
    """Project a labeled example into the segment layout the mode demands."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "target_only":
        return EncodedInput(segments=(example.target_text,), max_length=max_length)
    if example.source_text is None:
        raise DataError(
            f"source_target mode needs source_text (doc {example.doc_id!r}, "
            f"segments {example.seg_ids})"
        )
    return EncodedInput(
        segments=(example.source_text, example.target_text), max_length=max_length
    )


def _hash_token(kind: bytes, token: str) -> int:
    digest = hashlib.blake2b(kind + b"\x00" + token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % _SEGMENT_SPACE


def baseline_featurize(encoded: EncodedInput) -> Counter:
    """Hashed character n-grams (1..4) plus word unigrams per segment,
    count-valued. Text is NFC-normalized, case preserved. Deterministic."""
    features: Counter = Counter()
    segments = [unicodedata.normalize("NFC", s) for s in encoded.segments]
    if encoded.max_length is not None:
        if len(segments) == 2:
            src, tgt, _ = truncate_pair(
                segments[0].split(), segments[1].split(), encoded.max_length
            )
            segments = [" ".join(src), " ".join(tgt)]
        else:
            kept, _ = truncate(segments[0].split(), encoded.max_length)
            segments = [" ".join(kept)]
    # Offsets follow segment role, not list position: source owns space 0,
    # target owns space 1. A target-only input is still a target segment, so
    # monolingual and bilingual models hash target features identically.
    role_offsets = (1,) if len(segments) == 1 else (0, 1)
    for seg_idx, text in enumerate(segments):
        base = role_offsets[seg_idx] * _SEGMENT_SPACE
        for n in range(1, _CHAR_NGRAM_MAX + 1):
            for i in range(len(text) - n + 1):
                features[base + _hash_token(b"c", text[i : i + n])] += 1
        for word in text.split():
            features[base + _hash_token(b"w", word)] += 1
    return features


def _sigmoid(score: float) -> float:
    if score >= 0:
        return 1.0 / (1.0 + math.exp(-score))
    e = math.exp(score)
    return e / (1.0 + e)


def _check_fit_inputs(train: DatasetSplit, dev: DatasetSplit, mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    for name, split in (("train", train), ("dev", dev)):
        if not split.examples:
            raise DataError(f"{name} split is empty")
        if split.mode != mode:
            raise DataError(
                f"{name} split was built in {split.mode!r} mode, cannot fit in {mode!r}"
            )
        check_balance(split)


def _check_predict_inputs(model: TrainedModel, examples: list[LabeledExample]) -> None:
    for ex in examples:
        has_source = ex.source_text is not None
        if model.mode == "source_target" and not has_source:
            raise DataError(
                f"model expects source_text but example (doc {ex.doc_id!r}) has none"
            )
        if model.mode == "target_only" and has_source:
            raise DataError(
                f"target-only model given a bilingual example (doc {ex.doc_id!r})"
            )


class BaselineBackend:
    """Averaged perceptron over hashed n-gram features.

    Self-contained and fast enough to act as the oracle for every pipeline
    test. Training is deterministic given (data, seed): examples are sorted
    into a canonical order, then shuffled by the seed each epoch, so the
    incoming dataset order never matters. The sigmoid of the averaged margin
    serves as p_mt; weight updates scale with the learning rate, so the rate
    shifts confidence but never flips decisions.
    """

    backend_id = "baseline"

    def tokenize(self, text: str) -> list[str]:
        return text.split()

    def fit(
        self,
        train: DatasetSplit,
        dev: DatasetSplit,
        hp: Hyperparams,
        mode: str,
        artifact_dir: Path,
        init_artifact: Path | None = None,
    ) -> TrainedModel:
        _check_fit_inputs(train, dev, mode)

        canonical = sorted(train.examples, key=lambda e: e.to_json_line())
        data = [
            (
                baseline_featurize(encode_example(e, mode, hp.max_length)),
                1 if e.label == LABEL_MT else -1,
            )
            for e in canonical
        ]

        weights: defaultdict[int, float] = defaultdict(float)
        totals: defaultdict[int, float] = defaultdict(float)
        if init_artifact is not None:
            for idx, value in _load_artifact(init_artifact)["weights"].items():
                weights[int(idx)] = value

        rng = random.Random(hp.seed)
        counter = 1
        order = list(range(len(data)))
        for _ in range(hp.epochs):
            rng.shuffle(order)
            for i in order:
                features, y = data[i]
                score = math.fsum(weights[f] * v for f, v in features.items())
                predicted = 1 if score >= 0 else -1
                if predicted != y:
                    step = hp.learning_rate * y
                    for f, v in features.items():
                        weights[f] += step * v
                        totals[f] += counter * step * v
                counter += 1

        averaged = {f: w - totals[f] / counter for f, w in weights.items()}
        averaged = {f: w for f, w in averaged.items() if w != 0.0}

        artifact_dir.mkdir(parents=True, exist_ok=True)
        artifact = artifact_dir / "model.json"
        payload = {
            "backend_id": self.backend_id,
            "mode": mode,
            "hyperparams": hp.to_dict(),
            "feature_space": {
                "char_ngram_max": _CHAR_NGRAM_MAX,
                "segment_space": _SEGMENT_SPACE,
            },
            "weights": {str(f): averaged[f] for f in sorted(averaged)},
        }
        write_text_atomic(artifact, json.dumps(payload, sort_keys=True, indent=None))
        return TrainedModel(
            backend_id=self.backend_id, mode=mode, hyperparams=hp, artifact=artifact
        )

    def predict_proba(
        self, model: TrainedModel, examples: list[LabeledExample]
    ) -> list[float]:
        _check_predict_inputs(model, examples)
        if not examples:
            return []
        payload = _load_artifact(model.artifact)
        weights = {int(k): v for k, v in payload["weights"].items()}
        max_length = model.hyperparams.max_length
        probs = []
        for ex in examples:
            features = baseline_featurize(encode_example(ex, model.mode, max_length))
            score = math.fsum(weights.get(f, 0.0) * v for f, v in features.items())
            probs.append(_sigmoid(score))
        return probs


def _load_artifact(path: Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise BackendError(f"model artifact missing: {path}") from exc
    except json.JSONDecodeError as exc:
        raise BackendError(f"model artifact corrupt: {path}: {exc}") from exc


# Fixed key order for hp.txt so adapter inputs are reproducible byte for byte.
_HP_KEYS = (
    "learning_rate",
    "batch_size",
    "gradient_accumulation",
    "max_length",
    "epochs",
    "seed",
    "batch_ceiling",
)


class AdapterBackend:
    """External-process backend.

    fit: the toolkit writes train.txt, dev.txt, and hp.txt (key=value lines,
    plus mode and an optional init_artifact) into a work directory and runs
    `<command> fit <workdir>`. The adapter leaves its artifacts in that
    directory.

    predict: the toolkit writes eval.txt into a fresh directory and runs
    `<command> predict <workdir> <predict_dir>`; the adapter must write
    predictions.txt there, one probability in [0, 1] per line, LF-terminated,
    aligned with eval.txt.

    Any nonzero exit status is a training/prediction failure.
    """

    def __init__(self, backend_id: str, command: str):
        if not command or not command.strip():
            raise BackendError(f"backend {backend_id!r}: empty adapter command")
        self.backend_id = backend_id
        self._argv = shlex.split(command)

    def tokenize(self, text: str) -> list[str]:
        # Budget accounting only; the adapter's real tokenizer is unknown here.
        return text.split()

    def _run(self, args: list[str]) -> None:
        argv = self._argv + args
        try:
            proc = subprocess.run(argv, capture_output=True, text=True)
        except OSError as exc:
            raise BackendError(
                f"backend {self.backend_id!r}: cannot run {argv[0]!r}: {exc}"
            ) from exc
        if proc.returncode != 0:
            tail = (proc.stderr or proc.stdout or "").strip().splitlines()[-5:]
            detail = ("\n" + "\n".join(tail)) if tail else ""
            raise BackendError(
                f"backend {self.backend_id!r}: {' '.join(args[:1])} exited "
                f"{proc.returncode}{detail}"
            )

    def fit(
        self,
        train: DatasetSplit,
        dev: DatasetSplit,
        hp: Hyperparams,
        mode: str,
        artifact_dir: Path,
        init_artifact: Path | None = None,
    ) -> TrainedModel:
        _check_fit_inputs(train, dev, mode)
        artifact_dir.mkdir(parents=True, exist_ok=True)
        write_text_atomic(artifact_dir / "train.txt", train.to_jsonl())
        write_text_atomic(artifact_dir / "dev.txt", dev.to_jsonl())
        hp_values = hp.to_dict()
        lines = [f"{key}={_render_hp(hp_values[key])}" for key in _HP_KEYS]
        lines.append(f"mode={mode}")
        if init_artifact is not None:
            lines.append(f"init_artifact={init_artifact}")
        write_text_atomic(artifact_dir / "hp.txt", "\n".join(lines) + "\n")
        self._run(["fit", str(artifact_dir)])
        return TrainedModel(
            backend_id=self.backend_id, mode=mode, hyperparams=hp, artifact=artifact_dir
        )

    def predict_proba(
        self, model: TrainedModel, examples: list[LabeledExample]
    ) -> list[float]:
        _check_predict_inputs(model, examples)
        if not examples:
            return []
        workdir = model.artifact
        predict_dir = Path(tempfile.mkdtemp(prefix="predict_", dir=workdir))
        eval_split = DatasetSplit(
            name="test", granularity="sentence", mode=model.mode, examples=list(examples)
        )
        write_text_atomic(predict_dir / "eval.txt", eval_split.to_jsonl())
        self._run(["predict", str(workdir), str(predict_dir)])
        pred_file = predict_dir / "predictions.txt"
        if not pred_file.exists():
            raise BackendError(
                f"backend {self.backend_id!r}: adapter wrote no predictions.txt"
            )
        lines = pred_file.read_text(encoding="utf-8").splitlines()
        if len(lines) != len(examples):
            raise BackendError(
                f"backend {self.backend_id!r}: expected {len(examples)} predictions, "
                f"got {len(lines)}"
            )
        probs = []
        for lineno, line in enumerate(lines, start=1):
            try:
                p = float(line.strip())
            except ValueError as exc:
                raise BackendError(
                    f"backend {self.backend_id!r}: predictions.txt:{lineno}: "
                    f"not a number: {line!r}"
                ) from exc
            if not 0.0 <= p <= 1.0:
                raise BackendError(
                    f"backend {self.backend_id!r}: predictions.txt:{lineno}: "
                    f"probability {p} outside [0, 1]"
                )
            probs.append(p)
        return probs


def _render_hp(value) -> str:
    return "none" if value is None else str(value)


def get_backend(backend_id: str, adapter_command: str | None = None):
    """Resolve a backend id. "baseline" is built in; anything else runs through
    the adapter, whose command comes from the MTDETECT_ADAPTER_CMD environment
    variable (highest precedence) or the supplied configuration value."""
    if backend_id == "baseline":
        return BaselineBackend()
    command = os.environ.get(ADAPTER_CMD_ENV) or adapter_command
    if not command:
        raise BackendError(
            f"backend {backend_id!r} needs an adapter command "
            f"(set {ADAPTER_CMD_ENV} or the backend.adapter_command config key)"
        )
    return AdapterBackend(backend_id, command)
