"""Declarative run configuration loaded from a TOML file.

The loader is strict: unknown keys are rejected and every referenced input
path must exist at validation time, so typos die before any work starts. The
[corpora] section is only required by commands that read raw corpus files
(build-data, correlate --bleu); experiment commands run off built datasets.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from mtdetect.backend import Hyperparams
from mtdetect.corpus import GRANULARITIES, MODES, SPLIT_NAMES
from mtdetect.errors import ConfigError
from mtdetect.training import (
    DEFAULT_DOCUMENT_SEEDS,
    DEFAULT_SENTENCE_SEEDS,
    DOC_STRATEGIES,
    EvalTarget,
    HpGrid,
    TrainGroup,
)
from mtdetect.util import canonical_json, sha256_file, sha256_text


@dataclass(frozen=True)
class CorpusConfig:
    lang: str
    source_file: Path
    ht_file: Path
    manifest: Path
    mt_files: dict[str, Path]
    target_lang: str = "en"


@dataclass(frozen=True)
class ToolConfig:
    path: Path
    output_dir: Path
    backend_id: str
    adapter_command: str | None
    mode: str
    granularity: str
    train_groups: tuple[TrainGroup, ...]
    eval_targets: tuple[EvalTarget, ...]
    seeds: tuple[int, ...]
    strategy: str | None
    grid: HpGrid | None
    hyperparams: Hyperparams | None
    sentence_hyperparams: Hyperparams | None
    corpora: dict[str, CorpusConfig]
    raw: dict

    @property
    def datasets_dir(self) -> Path:
        return self.output_dir / "datasets"


def parse_train_group(text: str) -> TrainGroup:
    """Parse "lang:system" pairs joined by "+" into a train group."""
    pairs = []
    for part in text.split("+"):
        bits = part.split(":")
        if len(bits) != 2 or not all(bits):
            raise ConfigError(
                f"bad train entry {part!r} in {text!r} (expected lang:system)"
            )
        pairs.append((bits[0], bits[1]))
    return tuple(pairs)


def parse_eval_target(text: str) -> EvalTarget:
    """Parse "lang:system:split" into an eval target."""
    bits = text.split(":")
    if len(bits) != 3 or not all(bits):
        raise ConfigError(f"bad eval entry {text!r} (expected lang:system:split)")
    if bits[2] not in SPLIT_NAMES:
        raise ConfigError(
            f"bad eval entry {text!r}: unknown split {bits[2]!r} "
            f"(expected one of {', '.join(SPLIT_NAMES)})"
        )
    return (bits[0], bits[1], bits[2])


def _reject_unknown(table: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")


def _require(table: dict, key: str, kind, where: str):
    if key not in table:
        raise ConfigError(f"missing required key {key!r} in [{where}]")
    return _typed(table, key, kind, where)


def _typed(table: dict, key: str, kind, where: str):
    value = table[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ConfigError(
            f"key {key!r} in [{where}] must be {kind.__name__}, got {type(value).__name__}"
        )
    return value


def _typed_list(table: dict, key: str, kind, where: str) -> list:
    raw = _typed(table, key, list, where)
    out = []
    for item in raw:
        if kind is float and isinstance(item, int) and not isinstance(item, bool):
            item = float(item)
        if not isinstance(item, kind) or isinstance(item, bool):
            raise ConfigError(f"every entry of {key!r} in [{where}] must be {kind.__name__}")
        out.append(item)
    if not out:
        raise ConfigError(f"list {key!r} in [{where}] must be non-empty")
    return out


def _existing_path(base: Path, table: dict, key: str, where: str) -> Path:
    raw = _require(table, key, str, where)
    path = (base / raw).resolve() if not Path(raw).is_absolute() else Path(raw)
    if not path.exists():
        raise ConfigError(f"path for {key!r} in [{where}] does not exist: {path}")
    return path


def _parse_hyperparams(table: dict, where: str) -> Hyperparams:
    _reject_unknown(
        table,
        {
            "learning_rate",
            "batch_size",
            "gradient_accumulation",
            "max_length",
            "epochs",
            "batch_ceiling",
        },
        where,
    )
    try:
        return Hyperparams(
            learning_rate=_require(table, "learning_rate", float, where),
            batch_size=_require(table, "batch_size", int, where),
            gradient_accumulation=(
                _typed(table, "gradient_accumulation", int, where)
                if "gradient_accumulation" in table
                else 1
            ),
            max_length=_typed(table, "max_length", int, where) if "max_length" in table else None,
            epochs=_typed(table, "epochs", int, where) if "epochs" in table else 5,
            batch_ceiling=(
                _typed(table, "batch_ceiling", int, where) if "batch_ceiling" in table else None
            ),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid [{where}]: {exc}") from exc


def _parse_grid(table: dict) -> HpGrid:
    _reject_unknown(
        table,
        {
            "learning_rates",
            "batch_sizes",
            "gradient_accumulations",
            "max_length",
            "epochs",
            "batch_ceiling",
        },
        "grid",
    )
    try:
        return HpGrid(
            learning_rates=tuple(_typed_list(table, "learning_rates", float, "grid")),
            batch_sizes=tuple(_typed_list(table, "batch_sizes", int, "grid")),
            gradient_accumulations=(
                tuple(_typed_list(table, "gradient_accumulations", int, "grid"))
                if "gradient_accumulations" in table
                else (1,)
            ),
            max_length=_typed(table, "max_length", int, "grid") if "max_length" in table else None,
            epochs=_typed(table, "epochs", int, "grid") if "epochs" in table else 5,
            batch_ceiling=(
                _typed(table, "batch_ceiling", int, "grid") if "batch_ceiling" in table else None
            ),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid [grid]: {exc}") from exc


def _parse_corpus(lang: str, table: dict, base: Path) -> CorpusConfig:
    where = f"corpora.{lang}"
    _reject_unknown(
        table, {"source_file", "ht_file", "manifest", "mt_files", "target_lang"}, where
    )
    mt_table = _require(table, "mt_files", dict, where)
    if not mt_table:
        raise ConfigError(f"[{where}.mt_files] must name at least one system")
    mt_files = {}
    for system in sorted(mt_table):
        mt_files[system] = _existing_path(base, mt_table, system, f"{where}.mt_files")
    return CorpusConfig(
        lang=lang,
        source_file=_existing_path(base, table, "source_file", where),
        ht_file=_existing_path(base, table, "ht_file", where),
        manifest=_existing_path(base, table, "manifest", where),
        mt_files=mt_files,
        target_lang=(
            _typed(table, "target_lang", str, where) if "target_lang" in table else "en"
        ),
    )


def load_config(path: Path) -> ToolConfig:
    """Parse and validate a TOML config; any problem raises ConfigError."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    base = path.parent

    _reject_unknown(
        raw,
        {
            "output",
            "backend",
            "experiment",
            "grid",
            "hyperparams",
            "sentence_hyperparams",
            "corpora",
        },
        "top level",
    )

    output = _require(raw, "output", dict, "top level")
    _reject_unknown(output, {"dir"}, "output")
    out_raw = _require(output, "dir", str, "output")
    output_dir = (base / out_raw).resolve() if not Path(out_raw).is_absolute() else Path(out_raw)

    backend = raw.get("backend", {})
    _reject_unknown(backend, {"id", "adapter_command"}, "backend")
    backend_id = _typed(backend, "id", str, "backend") if "id" in backend else "baseline"
    adapter_command = (
        _typed(backend, "adapter_command", str, "backend")
        if "adapter_command" in backend
        else None
    )

    experiment = _require(raw, "experiment", dict, "top level")
    _reject_unknown(
        experiment, {"mode", "granularity", "train", "eval", "seeds", "strategy"}, "experiment"
    )
    mode = _require(experiment, "mode", str, "experiment")
    if mode not in MODES:
        raise ConfigError(f"experiment.mode must be one of {', '.join(MODES)}, got {mode!r}")
    granularity = _require(experiment, "granularity", str, "experiment")
    if granularity not in GRANULARITIES:
        raise ConfigError(
            f"experiment.granularity must be one of {', '.join(GRANULARITIES)}, "
            f"got {granularity!r}"
        )
    train_groups = tuple(
        parse_train_group(t) for t in _typed_list(experiment, "train", str, "experiment")
    )
    eval_targets: tuple[EvalTarget, ...] = ()
    if "eval" in experiment and _typed(experiment, "eval", list, "experiment"):
        eval_targets = tuple(
            parse_eval_target(t) for t in _typed_list(experiment, "eval", str, "experiment")
        )
    if "seeds" in experiment:
        seeds = tuple(_typed_list(experiment, "seeds", int, "experiment"))
    else:
        seeds = (
            DEFAULT_DOCUMENT_SEEDS if granularity == "document" else DEFAULT_SENTENCE_SEEDS
        )
    strategy = (
        _typed(experiment, "strategy", str, "experiment") if "strategy" in experiment else None
    )
    if strategy is not None and strategy not in DOC_STRATEGIES:
        raise ConfigError(
            f"experiment.strategy must be one of {', '.join(DOC_STRATEGIES)}, got {strategy!r}"
        )
    if strategy is not None and granularity != "document":
        raise ConfigError("experiment.strategy requires granularity = \"document\"")

    grid = _parse_grid(_require(raw, "grid", dict, "top level")) if "grid" in raw else None
    hyperparams = (
        _parse_hyperparams(_typed(raw, "hyperparams", dict, "top level"), "hyperparams")
        if "hyperparams" in raw
        else None
    )
    sentence_hyperparams = (
        _parse_hyperparams(
            _typed(raw, "sentence_hyperparams", dict, "top level"), "sentence_hyperparams"
        )
        if "sentence_hyperparams" in raw
        else None
    )

    corpora = {}
    if "corpora" in raw:
        corpora_table = _typed(raw, "corpora", dict, "top level")
        for lang in sorted(corpora_table):
            corpora[lang] = _parse_corpus(
                lang, _typed(corpora_table, lang, dict, "corpora"), base
            )

    return ToolConfig(
        path=path,
        output_dir=output_dir,
        backend_id=backend_id,
        adapter_command=adapter_command,
        mode=mode,
        granularity=granularity,
        train_groups=train_groups,
        eval_targets=eval_targets,
        seeds=seeds,
        strategy=strategy,
        grid=grid,
        hyperparams=hyperparams,
        sentence_hyperparams=sentence_hyperparams,
        corpora=corpora,
        raw=raw,
    )


def config_hash(cfg: ToolConfig) -> str:
    """12-hex-char digest over the normalized config, the raw corpus inputs,
    and every built dataset file, so results key to exactly what produced
    them and stale datasets change the hash."""
    parts = [canonical_json(cfg.raw)]
    for lang in sorted(cfg.corpora):
        corpus = cfg.corpora[lang]
        for label, file in (
            ("source", corpus.source_file),
            ("ht", corpus.ht_file),
            ("manifest", corpus.manifest),
        ):
            parts.append(f"{lang}:{label}:{sha256_file(file)}")
        for system in sorted(corpus.mt_files):
            parts.append(f"{lang}:mt:{system}:{sha256_file(corpus.mt_files[system])}")
    if cfg.datasets_dir.is_dir():
        for file in sorted(cfg.datasets_dir.glob("*.jsonl")):
            parts.append(f"dataset:{file.name}:{sha256_file(file)}")
    return sha256_text("\n".join(parts))[:12]
