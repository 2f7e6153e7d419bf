"""Experiment configuration: strict JSON documents with materialized defaults.

A config document has sections `model`, `train`, `data`, plus top-level
`projection` and `output_dir`. Unknown keys anywhere are rejected. The
resolved form (every default filled in) is echoed into the run's output
directory; re-running from that echo reproduces the run.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .attention import PRESETS
from .data import (
    DatasetSpec,
    Vocabulary,
    generate_pairs,
    make_mlm_windows,
    normalize_corpus,
    read_pairs,
    read_sidecar,
    read_windows,
    split_windows,
)
from .model import ModelConfig
from .training import MlmTask, Seq2SeqTask, TrainConfig

SEED_ENV_VAR = "NALAB_SEED"


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass
class DataConfig:
    task: str = "reversal"
    vocab_size: int = 20
    min_len: int = 4
    max_len: int = 12
    num_train: int = 20000
    num_val: int = 1000
    seed: int = 7
    corpus: str | None = None  # charmlm text file; None uses the packaged corpus
    sidecar: str | None = None  # pre-generated dataset (gen-data output)

    def __post_init__(self):
        if self.task not in ("reversal", "copy", "charmlm"):
            raise ConfigError(f"unknown data task {self.task!r}")


@dataclass
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    projection: str = "standard"
    output_dir: str = "runs/experiment"


_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"projection"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_DATA_KEYS = {f.name for f in dataclasses.fields(DataConfig)}
_TOP_KEYS = {"model", "train", "data", "projection", "output_dir"}


def _check_keys(section: str, doc: dict, allowed: set) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(unknown)}")


def parse_config(doc: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from a JSON document, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys("config", doc, _TOP_KEYS)
    model_doc = dict(doc.get("model", {}))
    train_doc = dict(doc.get("train", {}))
    data_doc = dict(doc.get("data", {}))
    _check_keys("model", model_doc, _MODEL_KEYS)
    _check_keys("train", train_doc, _TRAIN_KEYS)
    _check_keys("data", data_doc, _DATA_KEYS)

    projection = doc.get("projection", "standard")
    if projection not in PRESETS:
        raise ConfigError(f"unknown projection preset {projection!r}; expected one of {sorted(PRESETS)}")

    try:
        data = DataConfig(**data_doc)
        model_doc.setdefault("vocab_size", 0)  # 0 = derive from the dataset
        model_doc["projection"] = projection
        if data.task == "charmlm":
            model_doc.setdefault("architecture", "encoder")
        model = ModelConfig(**model_doc)
        train = TrainConfig(**train_doc)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    return ExperimentConfig(
        model=model,
        train=train,
        data=data,
        projection=projection,
        output_dir=doc.get("output_dir", "runs/experiment"),
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(doc)


def apply_seed_override(cfg: ExperimentConfig, env: dict | None = None) -> None:
    """NALAB_SEED overrides both training and data-generation seeds."""
    env = os.environ if env is None else env
    raw = env.get(SEED_ENV_VAR)
    if raw is None:
        return
    try:
        seed = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from exc
    cfg.train.seed = seed
    cfg.data.seed = seed


@dataclass
class ResolvedData:
    task: object  # Seq2SeqTask | MlmTask
    vocab: Vocabulary
    info: dict = field(default_factory=dict)


def packaged_corpus_path() -> str:
    return os.path.join(os.path.dirname(__file__), "assets", "desk_corpus.txt")


def materialize_data(data: DataConfig, max_seq_len: int) -> ResolvedData:
    """Generate or load the dataset a config describes."""
    if data.sidecar is not None:
        return _load_from_sidecar(data)
    if data.task in ("reversal", "copy"):
        spec = DatasetSpec(task=data.task, vocab_size=data.vocab_size,
                           min_len=data.min_len, max_len=data.max_len,
                           num_train=data.num_train, num_val=data.num_val, seed=data.seed)
        try:
            train_pairs, val_pairs = generate_pairs(spec)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        vocab = Vocabulary.synthetic(data.vocab_size)
        task = Seq2SeqTask(train_pairs, val_pairs, max_decode_len=data.max_len + 2)
        return ResolvedData(task, vocab, {"source": "generated", "spec": dataclasses.asdict(spec)})

    corpus_path = data.corpus or packaged_corpus_path()
    try:
        with open(corpus_path, encoding="utf-8") as fh:
            text = normalize_corpus(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read corpus {corpus_path}: {exc}") from exc
    vocab = Vocabulary.from_text(text)
    windows = make_mlm_windows(text, vocab, window=max_seq_len)
    spec = DatasetSpec(task="charmlm", vocab_size=vocab.size,
                       num_train=data.num_train, num_val=data.num_val, seed=data.seed)
    try:
        train_windows, val_windows = split_windows(windows, spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    task = MlmTask(train_windows, val_windows, mask_seed=data.seed)
    return ResolvedData(task, vocab, {"source": "corpus", "corpus": corpus_path,
                                      "windows": len(windows)})


def _load_from_sidecar(data: DataConfig) -> ResolvedData:
    try:
        spec, vocab = read_sidecar(data.sidecar)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read dataset sidecar {data.sidecar}: {exc}") from exc
    base = os.path.dirname(data.sidecar)
    with open(data.sidecar, encoding="utf-8") as fh:
        files = json.load(fh)["files"]
    if spec.task in ("reversal", "copy"):
        train_pairs = read_pairs(os.path.join(base, files["train"]), vocab)
        val_pairs = read_pairs(os.path.join(base, files["val"]), vocab)
        task = Seq2SeqTask(train_pairs, val_pairs, max_decode_len=spec.max_len + 2)
    else:
        train_windows = read_windows(os.path.join(base, files["train"]), vocab)
        val_windows = read_windows(os.path.join(base, files["val"]), vocab)
        task = MlmTask(train_windows, val_windows, mask_seed=spec.seed)
    return ResolvedData(task, vocab, {"source": "sidecar", "sidecar": data.sidecar})


def resolve_vocab_size(cfg: ExperimentConfig, resolved: ResolvedData) -> None:
    """Fill in / validate model.vocab_size against the materialized dataset."""
    actual = resolved.vocab.size
    if cfg.model.vocab_size not in (0, actual):
        raise ConfigError(
            f"model.vocab_size {cfg.model.vocab_size} does not match dataset vocabulary {actual}"
        )
    cfg.model.vocab_size = actual


def resolved_dict(cfg: ExperimentConfig) -> dict:
    model = dataclasses.asdict(cfg.model)
    model.pop("projection")  # owned by the top-level key
    return {
        "model": model,
        "train": dataclasses.asdict(cfg.train),
        "data": dataclasses.asdict(cfg.data),
        "projection": cfg.projection,
        "output_dir": cfg.output_dir,
    }


def write_resolved(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(resolved_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_diff(a: dict, b: dict, prefix: str = "") -> list[str]:
    """Paths of keys whose values differ between two resolved config dicts."""
    diffs = []
    for key in sorted(set(a) | set(b)):
        pa, pb = a.get(key), b.get(key)
        path = f"{prefix}{key}"
        if isinstance(pa, dict) and isinstance(pb, dict):
            diffs.extend(config_diff(pa, pb, path + "."))
        elif pa != pb:
            diffs.append(path)
    return diffs
