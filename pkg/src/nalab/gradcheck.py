"""Central-difference gradient verification.

All checks run in float64: float32 rounding noise swamps the 1e-5 tolerance
this module enforces. Large parameter tensors are checked on a seeded random
subset of coordinates; small ones exhaustively.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import Rng
from .tensor import Tape, Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-5


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


@dataclass
class GradcheckRow:
    name: str
    max_rel_error: float
    checked_coords: int


@dataclass
class GradcheckReport:
    rows: list[GradcheckRow] = field(default_factory=list)
    tol: float = DEFAULT_TOL

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def worst(self, k: int = 5) -> list[GradcheckRow]:
        return sorted(self.rows, key=lambda r: -r.max_rel_error)[:k]


def check_gradients(
    loss_fn,
    tensors: dict[str, Tensor],
    step: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    max_coords: int = 25,
    seed: int = 0,
) -> GradcheckReport:
    """Compare taped gradients of `loss_fn()` against central differences.

    `loss_fn` must rebuild the forward pass from the current tensor values on
    every call and return a scalar Tensor. Tensors with more than
    `max_coords` entries are spot-checked on a seeded random subset.
    """
    for t in tensors.values():
        if t.data.dtype != np.float64:
            raise ValueError("gradcheck requires float64 tensors")
        t.zero_grad()

    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = {name: np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for name, t in tensors.items()}

    coord_rng = Rng(seed)
    report = GradcheckReport(tol=tol)
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        size = flat.size
        if size <= max_coords:
            coords = range(size)
        else:
            coords = sorted({coord_rng.randint(size) for _ in range(max_coords)})
        worst = 0.0
        n_checked = 0
        for c in coords:
            original = flat[c]
            flat[c] = original + step
            f_plus = float(loss_fn().data)
            flat[c] = original - step
            f_minus = float(loss_fn().data)
            flat[c] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = relative_error(float(analytic[name].reshape(-1)[c]), numeric)
            worst = max(worst, err)
            n_checked += 1
        report.rows.append(GradcheckRow(name, worst, n_checked))
    return report


def run_gradcheck_suite(
    d_model: int = 8,
    num_heads: int = 2,
    seq_len: int = 5,
    batch: int = 2,
    step: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    max_coords: int = 6,
) -> list[tuple[str, GradcheckReport]]:
    """Central-difference checks for every projection kind, covering both a
    bare attention block and a full 1-layer encoder-decoder loss."""
    from .attention import AttentionConfig, MultiHeadAttention
    from .data import collate_pairs
    from .model import ModelConfig, build_model, seq2seq_forward_loss
    from .tensor import mul, sum_all

    results = []
    data_rng = np.random.default_rng(12)
    for preset in ("standard", "dlp", "neural"):
        acfg = AttentionConfig.from_preset(preset, d_model=d_model, num_heads=num_heads)
        mha = MultiHeadAttention(acfg, Rng(7), dtype=np.float64)
        x_q = Tensor(data_rng.standard_normal((seq_len, d_model)),
                     dtype=np.float64, requires_grad=True)
        x_kv = Tensor(data_rng.standard_normal((seq_len, d_model)),
                      dtype=np.float64, requires_grad=True)
        weight = Tensor(data_rng.standard_normal((seq_len, d_model)), dtype=np.float64)
        tensors = {"x_q": x_q, "x_kv": x_kv, **dict(mha.named_parameters("mha"))}
        report = check_gradients(
            lambda: sum_all(mul(mha(x_q, x_kv), weight)),
            tensors, step=step, tol=tol, max_coords=max_coords,
        )
        results.append((f"attention/{preset}", report))

        vocab_size = 12
        mcfg = ModelConfig(
            vocab_size=vocab_size, d_model=d_model, num_layers=1, num_heads=num_heads,
            d_ff=2 * d_model, dropout_p=0.0, max_seq_len=2 * seq_len + 2,
            projection=preset, dtype="f64",
        )
        model = build_model(mcfg, seed=21)
        pairs = [
            (
                [int(5 + data_rng.integers(vocab_size - 5)) for _ in range(seq_len)],
                [int(5 + data_rng.integers(vocab_size - 5)) for _ in range(seq_len)],
            )
            for _ in range(batch)
        ]
        src, tgt = collate_pairs(pairs, np.arange(batch))
        report = check_gradients(
            lambda: seq2seq_forward_loss(model, src, tgt)[0],
            dict(model.named_parameters()), step=step, tol=tol, max_coords=max_coords,
        )
        results.append((f"encoder-decoder/{preset}", report))
    return results
