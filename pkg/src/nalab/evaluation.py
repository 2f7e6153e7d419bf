"""Evaluation metrics: corpus BLEU, perplexity, and token accuracy.

Pure functions over immutable inputs. Model-based metrics run the forward
pass in eval mode and accumulate per-position negative log-likelihood in
float64, in example order, so results do not depend on evaluation batch
size.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import BOS_ID, EOS_ID, PAD_ID, Batch, apply_mlm_masking, collate_pairs, make_batches
from .model import TransformerEncoder, TransformerEncoderDecoder
from .rng import Rng, derive_seed

MAX_NGRAM_ORDER = 4

_STRIP = {PAD_ID, BOS_ID, EOS_ID, "<pad>", "<bos>", "<eos>"}


@dataclass
class BleuReport:
    bleu: float
    p1: float | None
    p2: float | None
    p3: float | None
    p4: float | None
    brevity_penalty: float
    candidate_length: int
    reference_length: int

    def to_json(self) -> dict:
        return {
            "bleu": self.bleu,
            "p1": self.p1,
            "p2": self.p2,
            "p3": self.p3,
            "p4": self.p4,
            "brevity_penalty": self.brevity_penalty,
            "candidate_length": self.candidate_length,
            "reference_length": self.reference_length,
        }


@dataclass
class PerplexityReport:
    mean_nll: float
    perplexity: float
    position_count: int
    accuracy: float

    def to_json(self) -> dict:
        return {
            "mean_nll": self.mean_nll,
            "perplexity": self.perplexity,
            "position_count": self.position_count,
            "accuracy": self.accuracy,
        }


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(candidates, references) -> BleuReport:
    """Corpus-level BLEU: clipped n-gram counts pooled over all pairs, n=1..4,
    no smoothing, single reference per candidate.

    Specials (PAD/BOS/EOS) are stripped before counting. Orders with zero
    candidate n-grams are left out of the geometric mean; a zero clipped
    precision at any counted order gives BLEU 0.
    """
    if len(candidates) != len(references):
        raise ValueError(
            f"got {len(candidates)} candidates but {len(references)} references"
        )
    if not candidates:
        raise ValueError("corpus_bleu needs at least one candidate/reference pair")

    cands = [[t for t in c if t not in _STRIP] for c in candidates]
    refs = [[t for t in r if t not in _STRIP] for r in references]

    matched = [0] * MAX_NGRAM_ORDER
    total = [0] * MAX_NGRAM_ORDER
    cand_len = sum(len(c) for c in cands)
    ref_len = sum(len(r) for r in refs)
    for cand, ref in zip(cands, refs):
        for n in range(1, MAX_NGRAM_ORDER + 1):
            cand_counts = _ngrams(cand, n)
            if not cand_counts:
                continue
            ref_counts = _ngrams(ref, n)
            total[n - 1] += sum(cand_counts.values())
            matched[n - 1] += sum(
                min(count, ref_counts[gram]) for gram, count in cand_counts.items()
            )

    precisions = [m / t if t > 0 else None for m, t in zip(matched, total)]
    if cand_len == 0:
        bp = 0.0
    elif cand_len > ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / cand_len)

    counted = [p for p in precisions if p is not None]
    if not counted or any(p == 0.0 for p in counted) or cand_len == 0:
        bleu = 0.0
    else:
        bleu = 100.0 * bp * math.exp(sum(math.log(p) for p in counted) / len(counted))
    return BleuReport(bleu, *precisions, brevity_penalty=bp,
                      candidate_length=cand_len, reference_length=ref_len)


def _nll_and_hits(logits: np.ndarray, targets: np.ndarray):
    """Per-row NLL (float64) and argmax hits for [n, vocab] logits."""
    x = logits.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x - m).sum(axis=-1)) + m[:, 0]
    rows = np.arange(x.shape[0])
    nll = lse - x[rows, targets]
    hits = x.argmax(axis=-1) == targets
    return nll, hits


def evaluate_seq2seq(model: TransformerEncoderDecoder, pairs, batch_size: int = 64) -> PerplexityReport:
    """Teacher-forced NLL over non-PAD target positions, plus token accuracy."""
    if not pairs:
        raise ValueError("evaluate_seq2seq: empty dataset")
    total_nll = 0.0
    count = 0
    correct = 0
    for idxs in make_batches(len(pairs), batch_size):
        src, tgt = collate_pairs(pairs, idxs)
        in_ids = tgt.ids[:, :-1].copy()
        in_lengths = np.maximum(tgt.lengths - 1, 1)
        in_ids[np.arange(in_ids.shape[1])[None, :] >= in_lengths[:, None]] = PAD_ID
        memory = model.encode(src)
        logits = model.decode(memory, src, Batch(in_ids, in_lengths))
        labels = tgt.ids[:, 1:]
        for row in range(len(idxs)):
            n = int(tgt.lengths[row]) - 1
            nll, hits = _nll_and_hits(logits.data[row, :n], labels[row, :n])
            total_nll += float(nll.sum())
            correct += int(hits.sum())
            count += n
    mean_nll = total_nll / count
    return PerplexityReport(mean_nll, math.exp(mean_nll), count, correct / count)


def evaluate_mlm(
    model: TransformerEncoder,
    windows,
    mask_seed: int,
    batch_size: int = 64,
) -> PerplexityReport:
    """NLL over masked positions; masks are derived per window index, so the
    evaluation set is fixed across calls and batch sizes."""
    if not windows:
        raise ValueError("evaluate_mlm: empty dataset")
    total_nll = 0.0
    count = 0
    correct = 0
    for idxs in make_batches(len(windows), batch_size):
        rows = []
        positions = []
        gold = []
        for j, idx in enumerate(idxs):
            masked, chosen = apply_mlm_masking(
                windows[idx], Rng(derive_seed(mask_seed, "eval-mask", int(idx)))
            )
            rows.append(masked)
            positions.extend((j, c) for c in chosen)
            gold.extend(windows[idx][c] for c in chosen)
        batch = Batch.from_rows(rows)
        hidden = model.forward_hidden(batch)
        b, length, d = hidden.shape
        positions = np.asarray(positions)
        flat = hidden.data.reshape(b * length, d)[positions[:, 0] * length + positions[:, 1]]
        logits = flat @ model.vocab_projection_matrix() + model.head_b.data
        nll, hits = _nll_and_hits(logits, np.asarray(gold))
        total_nll += float(nll.sum())
        correct += int(hits.sum())
        count += len(gold)
    mean_nll = total_nll / count
    return PerplexityReport(mean_nll, math.exp(mean_nll), count, correct / count)


def perplexity_eval(model, data, mask_seed: int = 0, batch_size: int = 64) -> PerplexityReport:
    """Dispatch on model kind: MLM windows for encoders, pairs for encoder-decoders."""
    if isinstance(model, TransformerEncoder):
        return evaluate_mlm(model, data, mask_seed, batch_size)
    return evaluate_seq2seq(model, data, batch_size)


def token_accuracy(model, data, mask_seed: int = 0, batch_size: int = 64) -> float:
    """Argmax-vs-gold accuracy over the same positions perplexity_eval uses."""
    return perplexity_eval(model, data, mask_seed, batch_size).accuracy


def decode_and_bleu(model, pairs, max_len: int, batch_size: int = 64) -> BleuReport:
    """Greedy-decode every source and score against the reference targets."""
    from .model import greedy_decode

    candidates = []
    references = []
    for idxs in make_batches(len(pairs), batch_size):
        src, _ = collate_pairs(pairs, idxs)
        candidates.extend(greedy_decode(model, src, max_len))
        references.extend(list(pairs[i][1]) for i in idxs)
    return corpus_bleu(candidates, references)
