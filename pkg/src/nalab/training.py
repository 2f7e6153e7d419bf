"""Adam optimizer, deterministic training loop, and checkpoint persistence.

Randomness is derived statelessly: the shuffle order for epoch e and the
dropout stream for step s are both functions of (seed, e) / (seed, s), so a
run is fully determined by its seed and resuming from a checkpoint needs
only the step counter.

Checkpoint files are one line of JSON manifest followed by a binary payload
of little-endian IEEE-754 values, concatenated in manifest order.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import make_batches
from .model import ModelConfig, build_model
from .rng import Rng, derive_seed
from .tensor import NumericError, Tape

CHECKPOINT_VERSION = "nalab-ckpt-v1"
METRICS_HEADER = "step,seconds,train_loss,eval_loss,eval_accuracy,perplexity,bleu"


class CheckpointError(Exception):
    """Version/shape/payload mismatch while loading a checkpoint."""


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the last good checkpoint is retained."""

    def __init__(self, message: str, last_good: str | None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    max_steps: int = 3000
    epochs: int | None = None  # when set, overrides max_steps
    eval_every: int = 250
    log_every: int = 50
    batch_size: int = 32
    eval_batch_size: int = 64
    seed: int = 42
    lr: float = 3e-4
    clip_norm: float = 1.0  # 0 disables clipping
    weight_decay: float = 0.0
    timing: bool = True  # fill the wall-seconds column (non-reproducible by nature)

    def __post_init__(self):
        if self.eval_every <= 0:
            raise ValueError("eval_every must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


class AdamState:
    """First/second moment estimates plus the shared step counter."""

    def __init__(self, named_params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in named_params}


def adam_step(state: AdamState, named_params) -> None:
    """One Adam update with bias correction over every named parameter."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in named_params:
        g = p.grad
        if g is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
        if not np.isfinite(g).all():
            raise ValueError(f"adam_step: non-finite gradient in parameter {name!r}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns the pre-clip norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(scale)
    return norm


# ---------------------------------------------------------------------------
# checkpoints


def _dtype_tag(arr: np.ndarray) -> str:
    return {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}[arr.dtype]


def _np_dtype(tag: str):
    return {"f32": "<f4", "f64": "<f8"}[tag]


def save_checkpoint(path, model, adam: AdamState | None, step: int, train_seed: int) -> None:
    named = list(model.named_parameters())
    chunks: list[bytes] = []
    offset = 0

    def push(arr: np.ndarray) -> tuple[int, int]:
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype=_np_dtype(_dtype_tag(arr))).tobytes()
        entry = (offset, len(raw))
        chunks.append(raw)
        offset += len(raw)
        return entry

    params_manifest = {}
    for name, p in named:
        off, length = push(p.data)
        params_manifest[name] = {
            "shape": list(p.shape),
            "dtype": _dtype_tag(p.data),
            "offset": off,
            "length": length,
        }

    opt_manifest = None
    if adam is not None:
        moments = {}
        for name, _ in named:
            m_off, m_len = push(adam.m[name])
            v_off, v_len = push(adam.v[name])
            moments[name] = {"m_offset": m_off, "m_length": m_len,
                             "v_offset": v_off, "v_length": v_len}
        opt_manifest = {
            "type": "adam", "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "weight_decay": adam.weight_decay, "t": adam.t,
            "moments": moments,
        }

    manifest = {
        "version": CHECKPOINT_VERSION,
        "step": step,
        "model_config": asdict(model.cfg),
        "optimizer": opt_manifest,
        "rng": {"scheme": "per-step-derived", "seed": train_seed},
        "params": params_manifest,
        "payload_bytes": offset,
    }
    # no key sorting: the manifest's params order IS the payload order
    blob = json.dumps(manifest).encode("utf-8") + b"\n" + b"".join(chunks)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Rebuild (model, adam_state, step, manifest) from a checkpoint file.

    Nothing is mutated until the whole payload validates."""
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {manifest.get('version')!r} != {CHECKPOINT_VERSION!r}"
        )
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(
            f"payload is {len(payload)} bytes, manifest says {manifest['payload_bytes']}"
        )

    def pull(meta, off_key, len_key, shape, tag):
        raw = payload[meta[off_key] : meta[off_key] + meta[len_key]]
        arr = np.frombuffer(raw, dtype=_np_dtype(tag)).astype(np.float32 if tag == "f32" else np.float64)
        if arr.size != int(np.prod(shape, initial=1)):
            raise CheckpointError(f"payload length mismatch for entry at offset {meta[off_key]}")
        return arr.reshape(shape)

    cfg = ModelConfig(**manifest["model_config"])
    model = build_model(cfg, seed=0)  # init values are replaced below
    loaded = {}
    for name, meta in manifest["params"].items():
        loaded[name] = pull(meta, "offset", "length", meta["shape"], meta["dtype"])

    named = dict(model.named_parameters())
    if set(named) != set(loaded):
        raise CheckpointError("parameter names in checkpoint do not match the model config")
    for name, p in named.items():
        if tuple(loaded[name].shape) != p.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {loaded[name].shape} vs model {p.shape}"
            )

    adam = None
    opt = manifest.get("optimizer")
    if opt is not None:
        adam = AdamState(list(named.items()), lr=opt["lr"], beta1=opt["beta1"],
                         beta2=opt["beta2"], eps=opt["eps"], weight_decay=opt["weight_decay"])
        adam.t = opt["t"]
        for name, meta in opt["moments"].items():
            tag = manifest["params"][name]["dtype"]
            shape = manifest["params"][name]["shape"]
            adam.m[name] = pull(meta, "m_offset", "m_length", shape, tag)
            adam.v[name] = pull(meta, "v_offset", "v_length", shape, tag)

    for name, p in named.items():
        p.data = loaded[name]
    return model, adam, manifest["step"], manifest


# ---------------------------------------------------------------------------
# tasks


class Seq2SeqTask:
    """Translation-style training on (source, target) content-id pairs."""

    kind = "seq2seq"

    def __init__(self, train_pairs, val_pairs, max_decode_len: int = 32):
        self.train_pairs = train_pairs
        self.val_pairs = val_pairs
        self.max_decode_len = max_decode_len

    @property
    def num_train(self) -> int:
        return len(self.train_pairs)

    def batch_loss(self, model, idxs, epoch, training, rng):
        from .data import collate_pairs
        from .model import seq2seq_forward_loss

        src, tgt = collate_pairs(self.train_pairs, idxs)
        return seq2seq_forward_loss(model, src, tgt, training=training, rng=rng)

    def evaluate(self, model, eval_batch_size):
        from .evaluation import decode_and_bleu, evaluate_seq2seq

        report = evaluate_seq2seq(model, self.val_pairs, eval_batch_size)
        bleu = decode_and_bleu(model, self.val_pairs, self.max_decode_len, eval_batch_size)
        return {
            "eval_loss": report.mean_nll,
            "eval_accuracy": report.accuracy,
            "perplexity": report.perplexity,
            "bleu": bleu.bleu,
        }


class MlmTask:
    """Masked-LM training on char windows; masks are re-drawn per epoch."""

    kind = "mlm"

    def __init__(self, train_windows, val_windows, mask_seed: int):
        self.train_windows = train_windows
        self.val_windows = val_windows
        self.mask_seed = mask_seed

    @property
    def num_train(self) -> int:
        return len(self.train_windows)

    def batch_loss(self, model, idxs, epoch, training, rng):
        from .data import Batch, apply_mlm_masking
        from .model import mlm_forward_loss

        rows, positions, gold = [], [], []
        for j, idx in enumerate(idxs):
            window = self.train_windows[idx]
            masked, chosen = apply_mlm_masking(
                window, Rng(derive_seed(self.mask_seed, "train-mask", epoch, int(idx)))
            )
            rows.append(masked)
            positions.extend((j, c) for c in chosen)
            gold.extend(window[c] for c in chosen)
        return mlm_forward_loss(
            model, Batch.from_rows(rows), np.array(positions), np.array(gold),
            training=training, rng=rng,
        )

    def evaluate(self, model, eval_batch_size):
        from .evaluation import evaluate_mlm

        report = evaluate_mlm(model, self.val_windows, self.mask_seed, eval_batch_size)
        return {
            "eval_loss": report.mean_nll,
            "eval_accuracy": report.accuracy,
            "perplexity": report.perplexity,
            "bleu": None,
        }


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    rows: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    metrics_path: str = ""
    best_path: str = ""
    final_path: str = ""
    final_step: int = 0

    def steps_to_accuracy(self, threshold: float) -> int | None:
        for row in self.rows:
            acc = row.get("eval_accuracy")
            if acc is not None and acc >= threshold:
                return row["step"]
        return None


def _format_row(row: dict, timing: bool) -> str:
    def fmt(key, digits=6):
        val = row.get(key)
        return "" if val is None else f"{val:.{digits}f}"

    seconds = f"{row['seconds']:.3f}" if timing and row.get("seconds") is not None else ""
    return ",".join([
        str(row["step"]), seconds, fmt("train_loss"), fmt("eval_loss"),
        fmt("eval_accuracy"), fmt("perplexity"), fmt("bleu", 4),
    ])


def train(
    model,
    task,
    cfg: TrainConfig,
    out_dir,
    adam: AdamState | None = None,
    start_step: int = 0,
    quiet: bool = True,
) -> TrainResult:
    """Run the step loop: periodic evaluation rows, best/final checkpoints.

    Fully determined by (seed, config, dataset) apart from the wall-seconds
    column. Raises TrainingDiverged on a non-finite loss, keeping the best
    checkpoint on disk.
    """
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    best_path = os.path.join(out_dir, "best.ckpt")
    final_path = os.path.join(out_dir, "final.ckpt")

    named = list(model.named_parameters())
    params = [p for _, p in named]
    if adam is None:
        adam = AdamState(named, lr=cfg.lr, weight_decay=cfg.weight_decay)

    steps_per_epoch = math.ceil(task.num_train / cfg.batch_size)
    max_steps = cfg.epochs * steps_per_epoch if cfg.epochs is not None else cfg.max_steps

    result = TrainResult(metrics_path=metrics_path, best_path=best_path, final_path=final_path)
    start_time = time.perf_counter()
    best_eval = math.inf
    window: list[float] = []
    epoch_batches: list[np.ndarray] = []
    epoch_of_batches = -1

    mode = "a" if start_step > 0 and os.path.exists(metrics_path) else "w"
    metrics_file = open(metrics_path, mode, encoding="utf-8", newline="\n")
    if mode == "w":
        metrics_file.write(METRICS_HEADER + "\n")

    def run_eval(step: int) -> dict:
        nonlocal best_eval
        metrics = task.evaluate(model, cfg.eval_batch_size)
        row = {
            "step": step,
            "seconds": time.perf_counter() - start_time if cfg.timing else None,
            "train_loss": (sum(window) / len(window)) if window else None,
            **metrics,
        }
        result.rows.append(row)
        metrics_file.write(_format_row(row, cfg.timing) + "\n")
        metrics_file.flush()
        if metrics["eval_loss"] < best_eval:
            best_eval = metrics["eval_loss"]
            save_checkpoint(best_path, model, adam, step, cfg.seed)
        return row

    try:
        if start_step == 0:
            run_eval(0)
        for step in range(start_step + 1, max_steps + 1):
            epoch = (step - 1) // steps_per_epoch
            pos = (step - 1) % steps_per_epoch
            if epoch != epoch_of_batches:
                order_rng = Rng(derive_seed(cfg.seed, "shuffle", epoch))
                epoch_batches = list(
                    make_batches(task.num_train, cfg.batch_size, order_rng, shuffle=True)
                )
                epoch_of_batches = epoch
            idxs = epoch_batches[pos]

            step_rng = Rng(derive_seed(cfg.seed, "dropout", step))
            model.zero_grad()
            last_good = best_path if os.path.exists(best_path) else None
            try:
                with Tape() as tape:
                    loss, _, _ = task.batch_loss(model, idxs, epoch, training=True, rng=step_rng)
                    loss_val = float(loss.data)
                    if not math.isfinite(loss_val):
                        raise TrainingDiverged(f"non-finite loss at step {step}", last_good)
                    tape.backward(loss)
                if cfg.clip_norm:
                    clip_grad_norm(params, cfg.clip_norm)
                adam_step(adam, named)
            except (NumericError, ValueError) as exc:
                raise TrainingDiverged(f"aborted at step {step}: {exc}", last_good) from exc

            window.append(loss_val)
            result.step_losses.append(loss_val)
            if not quiet and cfg.log_every and step % cfg.log_every == 0:
                print(f"step {step:>6d}  loss {loss_val:.4f}")
            if step % cfg.eval_every == 0 or step == max_steps:
                run_eval(step)
                window.clear()
        result.final_step = max_steps
        save_checkpoint(final_path, model, adam, max_steps, cfg.seed)
    finally:
        metrics_file.close()
    return result
