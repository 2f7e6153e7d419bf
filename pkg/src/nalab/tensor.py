"""Dense tensors with taped reverse-mode automatic differentiation.

float32 by default; float64 selectable per tensor (gradient checking always
runs in float64). Ops record onto the currently active `Tape`; outside a
tape everything runs gradient-free. Broadcasting is deliberately limited to
bias-row addition; any other shape mismatch is an error.
"""

from __future__ import annotations

import os

import numpy as np

from .rng import Rng

DEFAULT_DTYPE = np.float32

# Spec'd invariant: forward ops never leave NaN/Inf behind silently.
# The scan costs a few percent at desk scale; NALAB_FINITE_CHECKS=0 disables it.
FINITE_CHECKS = os.environ.get("NALAB_FINITE_CHECKS", "1") != "0"


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def assert_finite(self, context: str = "tensor") -> "Tensor":
        if not np.isfinite(self.data).all():
            raise NumericError(f"non-finite values in {context}")
        return self

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar over the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def permute(self, *axes) -> "Tensor":
        return permute(self, axes)

    def sum(self) -> "Tensor":
        return sum_all(self)


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Ops append in execution order, so the list is topologically sorted;
    `backward` walks it once in reverse.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], callable]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every requires_grad leaf reachable from `loss`."""
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, rule in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, rule(g)):
                if gi is None:
                    continue
                if inp._leaf:
                    if inp.requires_grad:
                        if inp.grad is None:
                            inp.grad = gi.astype(inp.data.dtype, copy=True)
                        else:
                            inp.grad += gi
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] += gi
                    else:
                        grads[key] = gi.astype(inp.data.dtype, copy=True)


_ACTIVE_TAPE: Tape | None = None


def _result(arr: np.ndarray, inputs: tuple[Tensor, ...], rule, opname: str) -> Tensor:
    # single-reduce probe: any NaN/Inf in arr makes the sum non-finite
    if FINITE_CHECKS:
        with np.errstate(over="ignore", invalid="ignore"):
            finite = np.isfinite(arr.sum())
        if not finite:
            raise NumericError(f"non-finite values produced by {opname}")
    out = Tensor(arr)
    if _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        _ACTIVE_TAPE.entries.append((out, inputs, rule))
    return out


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), rule, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over matching leading dimension: [s,m,k] @ [s,k,n]."""
    if (
        a.data.ndim != 3
        or b.data.ndim != 3
        or a.shape[0] != b.shape[0]
        or a.shape[2] != b.shape[1]
    ):
        raise ShapeError(f"bmm shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return _result(ad @ bd, (a, b), rule, "bmm")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; the only broadcast allowed is a bias row on the last axis."""
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        def rule(g):
            return g, g
    elif bd.ndim == 1 and ad.ndim >= 2 and ad.shape[-1] == bd.shape[0]:
        lead = tuple(range(ad.ndim - 1))

        def rule(g):
            return g, g.sum(axis=lead)
    else:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _result(ad + bd, (a, b), rule, "add")


def add_const(a: Tensor, const) -> Tensor:
    """Add a non-differentiable constant array (masks, positional encodings)."""
    out = a.data + np.asarray(const, dtype=a.data.dtype)
    if out.shape != a.data.shape:
        raise ShapeError(f"add_const changed shape: {a.shape} + {np.shape(const)}")

    def rule(g):
        return (g,)

    return _result(out, (a,), rule, "add_const")


def scale(a: Tensor, s: float) -> Tensor:
    def rule(g):
        return (g * s,)

    return _result(a.data * a.data.dtype.type(s), (a,), rule, "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        return g * bd, g * ad

    return _result(ad * bd, (a, b), rule, "mul")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    # subgradient at 0 is 0: only strictly positive inputs pass gradient
    pos = xd > 0

    def rule(g):
        return (g * pos,)

    return _result(np.maximum(xd, 0), (x,), rule, "relu")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-stabilized softmax over the last axis; rows sum to 1."""
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("softmax_rows: NaN in input")
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _result(y, (x,), rule, "softmax_rows")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis (biased variance), then affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last dim {h}"
        )
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    centered = xd - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = centered * inv_std
    gd = gamma.data

    def rule(g):
        lead = tuple(range(xd.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gd
        dx = (
            inv_std
            / h
            * (
                h * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        )
        return dx, dgamma, dbeta

    return _result(xhat * gd + beta.data, (x, gamma, beta), rule, "layer_norm")


def dropout(x: Tensor, p: float, rng: Rng | None = None, training: bool = True) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        def rule(g):
            return (g,)

        return _result(x.data.copy(), (x,), rule, "dropout")
    if rng is None:
        raise ValueError("dropout in training mode needs an Rng")
    u = rng.uniform_block(x.data.size).reshape(x.shape)
    mask = (u >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)

    def rule(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), rule, "dropout")


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_id: int = -1) -> tuple[Tensor, int]:
    """Mean negative log-softmax over positions whose target is not `ignore_id`.

    Returns (scalar loss, number of contributing positions).
    """
    xd = logits.data
    if xd.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n, vocab] logits, got {logits.shape}")
    targets = np.asarray(targets)
    if targets.shape != (xd.shape[0],):
        raise ShapeError(
            f"cross_entropy targets shape {targets.shape} does not match {xd.shape[0]} rows"
        )
    vocab = xd.shape[1]
    contributing = targets != ignore_id
    count = int(contributing.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is ignored, mean undefined")
    valid = targets[contributing]
    if valid.min() < 0 or valid.max() >= vocab:
        raise ValueError(f"cross_entropy: target ids outside [0, {vocab})")

    m = xd.max(axis=-1, keepdims=True)
    shifted = xd - m
    lse = np.log(np.exp(shifted).sum(axis=-1)) + m[:, 0]
    safe_targets = np.where(contributing, targets, 0)
    rows = np.arange(xd.shape[0])
    nll = lse - xd[rows, safe_targets]
    loss_val = np.asarray((nll * contributing).sum() / count, dtype=xd.dtype)

    def rule(g):
        probs = np.exp(shifted - (lse - m[:, 0])[:, None])
        probs[rows, safe_targets] -= 1.0
        probs *= (contributing / count)[:, None]
        return (g * probs,)

    return _result(loss_val, (logits,), rule, "cross_entropy"), count


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def rule(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), rule, "reshape")


def permute(x: Tensor, axes: tuple) -> Tensor:
    inverse = np.argsort(axes)

    def rule(g):
        return (g.transpose(inverse),)

    return _result(x.data.transpose(axes), (x,), rule, "permute")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids [..] -> values [.., d]; gradients scatter-add into the table."""
    ids = np.asarray(ids)
    td = table.data
    if ids.size and (ids.min() < 0 or ids.max() >= td.shape[0]):
        raise ValueError(f"embedding ids outside [0, {td.shape[0]})")

    def rule(g):
        dt = np.zeros_like(td)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, td.shape[1]))
        return (dt,)

    return _result(td[ids], (table,), rule, "embedding")


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor; backward scatter-adds."""
    if x.data.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D tensor, got {x.shape}")
    idx = np.asarray(idx)
    xd = x.data

    def rule(g):
        dx = np.zeros_like(xd)
        np.add.at(dx, idx, g)
        return (dx,)

    return _result(xd[idx], (x,), rule, "take_rows")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    dtype = x.data.dtype

    def rule(g):
        return (np.broadcast_to(g, shape).astype(dtype),)

    return _result(np.asarray(x.data.sum(), dtype=dtype), (x,), rule, "sum_all")


# ---------------------------------------------------------------------------
# initialization helper shared by the network modules


def init_trunc_normal(shape: tuple, rng: Rng, std: float = 0.02, dtype=None) -> Tensor:
    """Weight init: N(0, std^2) resampled beyond ±2σ."""
    n = int(np.prod(shape))
    vals = rng.normal_block(n, std=std, trunc_sigmas=2.0)
    arr = vals.reshape(shape).astype(dtype or DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=True)


def zeros(shape: tuple, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape: tuple, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)
