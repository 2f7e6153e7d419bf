"""Synthetic tasks, vocabulary, batching, and dataset files.

Translation-style tasks (reversal, copy) pair a random token sequence with
its transform; the char-level task windows a text corpus for masked-LM
training. Dataset files are plain UTF-8 with LF line endings: translation
lines are `source<TAB>target` with space-separated tokens, MLM lines are raw
text.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .rng import Rng, derive_seed

PAD_ID, BOS_ID, EOS_ID, MASK_ID, UNK_ID = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<mask>", "<unk>")
N_SPECIAL = len(SPECIAL_TOKENS)

MLM_MASK_FRACTION = 0.15


class Vocabulary:
    """Bijective token<->id map over fixed special ids plus content tokens."""

    def __init__(self, content_tokens: list[str]):
        for tok in content_tokens:
            if "\t" in tok or "\n" in tok or tok == "":
                raise ValueError(f"invalid token {tok!r}: TAB/newline/empty forbidden")
        self.tokens = list(SPECIAL_TOKENS) + list(content_tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def content_ids(self) -> range:
        return range(N_SPECIAL, self.size)

    @classmethod
    def synthetic(cls, vocab_size: int) -> "Vocabulary":
        if vocab_size < N_SPECIAL + 1:
            raise ValueError(f"vocab_size must be at least {N_SPECIAL + 1}, got {vocab_size}")
        return cls([f"t{i}" for i in range(N_SPECIAL, vocab_size)])

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        chars = sorted(set(text) - {"\t", "\n"})
        return cls(chars)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def char_tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Per-character ids; UNK for characters outside the vocabulary."""
    return vocab.encode(list(text))


def char_detokenize(ids: list[int], vocab: Vocabulary) -> str:
    return "".join(vocab.decode(ids))


@dataclass
class Batch:
    """Padded id matrix with per-row true lengths."""

    ids: np.ndarray
    lengths: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        b, length = self.ids.shape
        if self.lengths.shape != (b,):
            raise ValueError("lengths must have one entry per row")
        if (self.lengths < 1).any() or (self.lengths > length).any():
            raise ValueError("row lengths must lie in [1, padded length]")
        beyond = np.arange(length)[None, :] >= self.lengths[:, None]
        if (self.ids[beyond] != PAD_ID).any():
            raise ValueError("positions beyond a row's length must be PAD")

    @property
    def key_allow(self) -> np.ndarray:
        """[batch, len] bool: True where a position holds a real token."""
        return np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]

    @classmethod
    def from_rows(cls, rows: list[list[int]]) -> "Batch":
        if not rows:
            raise ValueError("cannot build a batch from zero rows")
        lengths = np.array([len(r) for r in rows], dtype=np.int64)
        width = int(lengths.max())
        ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
        for i, row in enumerate(rows):
            ids[i, : len(row)] = row
        return cls(ids, lengths)


@dataclass
class DatasetSpec:
    task: str  # reversal | copy | charmlm
    vocab_size: int = 20
    min_len: int = 4
    max_len: int = 12
    num_train: int = 20000
    num_val: int = 1000
    seed: int = 7

    def __post_init__(self):
        if self.task not in ("reversal", "copy", "charmlm"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task != "charmlm":
            if self.vocab_size < N_SPECIAL + 1:
                raise ValueError(f"vocab_size must leave room for specials, got {self.vocab_size}")
            if not 1 <= self.min_len <= self.max_len:
                raise ValueError("need 1 <= min_len <= max_len")


def sequence_space(spec: DatasetSpec) -> int:
    """Number of distinct content sequences the spec can draw."""
    n = spec.vocab_size - N_SPECIAL
    return sum(n ** length for length in range(spec.min_len, spec.max_len + 1))


def _random_sequence(rng: Rng, spec: DatasetSpec) -> tuple[int, ...]:
    length = spec.min_len + rng.randint(spec.max_len - spec.min_len + 1)
    lo, hi = N_SPECIAL, spec.vocab_size
    return tuple(lo + rng.randint(hi - lo) for _ in range(length))


def generate_pairs(spec: DatasetSpec):
    """(train, val) lists of (source_ids, target_ids) content-token pairs.

    Train may repeat sequences; val sequences are distinct and never appear
    in train. Raises if the sequence space cannot supply the val set.
    """
    transform = {"reversal": lambda s: tuple(reversed(s)), "copy": lambda s: s}[spec.task]
    train_rng = Rng(derive_seed(spec.seed, "train"))
    val_rng = Rng(derive_seed(spec.seed, "val"))

    train_sources = [_random_sequence(train_rng, spec) for _ in range(spec.num_train)]
    seen = set(train_sources)
    space = sequence_space(spec)
    if spec.num_val > space - len(seen):
        raise ValueError(
            f"num_val {spec.num_val} exceeds the {space - len(seen)} distinct "
            f"sequences left outside the train set"
        )
    val_sources: list[tuple[int, ...]] = []
    val_seen: set[tuple[int, ...]] = set()
    while len(val_sources) < spec.num_val:
        cand = _random_sequence(val_rng, spec)
        if cand in seen or cand in val_seen:
            continue
        val_sources.append(cand)
        val_seen.add(cand)

    train = [(list(s), list(transform(s))) for s in train_sources]
    val = [(list(s), list(transform(s))) for s in val_sources]
    return train, val


def write_pairs(path, pairs, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for src, tgt in pairs:
            fh.write(" ".join(vocab.decode(src)) + "\t" + " ".join(vocab.decode(tgt)) + "\n")


def read_pairs(path, vocab: Vocabulary):
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            src_text, tgt_text = line.split("\t")
            pairs.append((vocab.encode(src_text.split(" ")), vocab.encode(tgt_text.split(" "))))
    return pairs


def write_sidecar(path, spec: DatasetSpec, vocab: Vocabulary, files: dict) -> None:
    doc = {"spec": asdict(spec), "vocab": vocab.tokens[N_SPECIAL:], "files": files}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_sidecar(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return DatasetSpec(**doc["spec"]), Vocabulary(doc["vocab"])


# --- char-level MLM -----------------------------------------------------------


def normalize_corpus(text: str) -> str:
    """Collapse all whitespace runs to single spaces (windows must be newline-free)."""
    return " ".join(text.split())


def make_mlm_windows(text: str, vocab: Vocabulary, window: int, min_window: int = 4) -> list[list[int]]:
    ids = char_tokenize(text, vocab)
    out = [ids[i : i + window] for i in range(0, len(ids), window)]
    return [w for w in out if len(w) >= min_window]


def split_windows(windows: list[list[int]], spec: DatasetSpec):
    """Deterministic disjoint train/val split of corpus windows."""
    if spec.num_train + spec.num_val > len(windows):
        raise ValueError(
            f"corpus yields {len(windows)} windows, fewer than "
            f"num_train+num_val = {spec.num_train + spec.num_val}"
        )
    order = list(range(len(windows)))
    Rng(derive_seed(spec.seed, "split")).shuffle(order)
    val_idx = order[: spec.num_val]
    train_idx = order[spec.num_val : spec.num_val + spec.num_train]
    return [windows[i] for i in train_idx], [windows[i] for i in val_idx]


def write_windows(path, windows, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for w in windows:
            fh.write(char_detokenize(w, vocab) + "\n")


def read_windows(path, vocab: Vocabulary):
    with open(path, encoding="utf-8") as fh:
        return [char_tokenize(line.rstrip("\n"), vocab) for line in fh if line.rstrip("\n")]


def apply_mlm_masking(ids: list[int], rng: Rng, fraction: float = MLM_MASK_FRACTION):
    """Replace a random fraction of positions with MASK (at least one).

    Returns (masked_ids, positions); every chosen position becomes MASK_ID.
    """
    n = len(ids)
    k = max(1, int(round(fraction * n)))
    positions = list(range(n))
    rng.shuffle(positions)
    chosen = sorted(positions[:k])
    masked = list(ids)
    for p in chosen:
        masked[p] = MASK_ID
    return masked, chosen


# --- batching -------------------------------------------------------------------


def make_batches(num_examples: int, batch_size: int, rng: Rng | None = None, shuffle: bool = False):
    """Yield index arrays covering the dataset; last partial batch kept."""
    if num_examples == 0:
        raise ValueError("empty dataset")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = list(range(num_examples))
    if shuffle:
        if rng is None:
            raise ValueError("shuffle requires an Rng")
        rng.shuffle(order)
    for start in range(0, num_examples, batch_size):
        yield np.array(order[start : start + batch_size], dtype=np.int64)


def collate_pairs(pairs, idxs):
    """(src Batch, tgt Batch) for translation pairs; tgt gains BOS...EOS."""
    src_rows = [pairs[i][0] for i in idxs]
    tgt_rows = [[BOS_ID] + pairs[i][1] + [EOS_ID] for i in idxs]
    return Batch.from_rows(src_rows), Batch.from_rows(tgt_rows)
