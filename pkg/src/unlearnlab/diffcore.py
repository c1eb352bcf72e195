"""Minimal reverse-mode differentiable tensor core.

Float64 tensors plus a tape of primitive operations. The primitive set is
exactly what the tiny causal language model needs: matmul (optionally
stacked over leading axes), add with trailing broadcast, scalar scale,
gelu, row softmax, row layer norm, embedding lookup, head split/merge,
and two masked losses (cross-entropy and KL against a frozen reference).

No general broadcasting, no fusion, no mixed precision: every gradient
rule here is short enough to audit against finite differences.
"""

from __future__ import annotations

import threading

import numpy as np

_EPS_LAYER_NORM = 1e-5
_NEG_INF = -1e30  # additive mask value; finite so forward values stay finite


class Tensor:
    """A float64 array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class Tape:
    """Ordered record of the primitives executed during one forward pass.

    Use as a context manager; primitives record onto the innermost active
    tape of the current thread. A Tape must never be shared across threads.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __len__(self) -> int:
        return len(self._ops)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self._ops.append((out, inputs, backward_fn))

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        tape._record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse traversal of ``tape``; accumulates grads on trainable tensors.

    Seeds d(loss)/d(loss) = 1 and visits each recorded operation exactly
    once, in reverse order. Tensors with ``requires_grad`` get their
    ``.grad`` field accumulated (allocated on first use); all intermediate
    adjoints live only for the duration of the call.
    """
    if len(tape) == 0:
        raise ValueError("backward on an empty tape")
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    produced = {id(out) for out, _, _ in tape._ops}
    if id(loss) not in produced:
        raise ValueError("loss was not produced by this tape's forward pass")

    # Forward sweep: which tensors need an adjoint at all.
    needs: set[int] = set()
    for out, inputs, _ in tape._ops:
        if any(t.requires_grad or id(t) in needs for t in inputs):
            needs.add(id(out))
    needs.add(id(loss))

    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, backward_fn in reversed(tape._ops):
        g = adjoint.pop(id(out), None)
        if g is None:
            continue
        for t, contrib in zip(inputs, backward_fn(g)):
            if contrib is None:
                continue
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += contrib
            elif id(t) in needs:
                key = id(t)
                if key in adjoint:
                    adjoint[key] += contrib
                else:
                    adjoint[key] = contrib


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b on the last two axes.

    Supported layouts: equal ndim (stacked matmul with identical leading
    dims) or stacked ``a`` against a plain 2-D ``b``.
    """
    an, bn = a.data.ndim, b.data.ndim
    if an < 2 or bn < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if an == bn:
        if a.shape[:-2] != b.shape[:-2]:
            raise ValueError(f"matmul leading dims differ: {a.shape} @ {b.shape}")
    elif bn != 2:
        raise ValueError(f"matmul unsupported layout: {a.shape} @ {b.shape}")

    out = a.data @ b.data

    def backward_fn(g: np.ndarray):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if an == bn:
            gb = np.swapaxes(a.data, -1, -2) @ g
        else:
            # reduce the stacked leading axes into the shared 2-D weight
            a2 = a.data.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            gb = a2.T @ g2
        return ga, gb

    return _emit(out, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may broadcast over leading axes of ``a``."""
    if a.shape != b.shape:
        bn = b.data.ndim
        if bn == 0 or b.shape != a.shape[a.data.ndim - bn:]:
            raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    out = a.data + b.data

    def backward_fn(g: np.ndarray):
        if a.shape == b.shape:
            return g, g
        lead = tuple(range(g.ndim - b.data.ndim))
        return g, g.sum(axis=lead)

    return _emit(out, (a, b), backward_fn)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar constant."""
    s = float(s)
    return _emit(a.data * s, (a,), lambda g: (g * s,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (0.5*x*(1+tanh(sqrt(2/pi)*(x+0.044715*x^3))))."""
    c = np.sqrt(2.0 / np.pi)
    xd = x.data
    inner = c * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward_fn(g: np.ndarray):
        dinner = c * (1.0 + 3 * 0.044715 * xd**2)
        dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * dinner
        return (g * dx,)

    return _emit(out, (x,), backward_fn)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis; each output row sums to one."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g: np.ndarray):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _emit(out, (x,), backward_fn)


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layer_norm_rows affine shape mismatch: x {x.shape}, "
            f"gain {gain.shape}, bias {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _EPS_LAYER_NORM)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def backward_fn(g: np.ndarray):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return _emit(out, (x, gain, bias), backward_fn)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer id array (any leading shape)."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("embedding_lookup: empty id list")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ValueError(
            f"embedding_lookup: id out of range [0, {table.shape[0]}) "
            f"(got min {idx.min()}, max {idx.max()})"
        )
    out = table.data[idx]

    def backward_fn(g: np.ndarray):
        dtable = np.zeros_like(table.data)
        np.add.at(dtable, idx, g)
        return (dtable,)

    return _emit(out, (table,), backward_fn)


def transpose_last2(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.data.ndim < 2:
        raise ValueError(f"transpose_last2 needs >=2-D input, got {x.shape}")
    out = np.swapaxes(x.data, -1, -2)
    return _emit(out, (x,), lambda g: (np.swapaxes(g, -1, -2),))


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[.., T, D] -> [.., H, T, D/H] for multi-head attention."""
    *lead, t, d = x.shape
    if d % n_heads != 0:
        raise ValueError(f"split_heads: {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    perm = _head_perm(len(lead))
    out = x.data.reshape(*lead, t, n_heads, dh).transpose(perm)

    def backward_fn(g: np.ndarray):
        return (g.transpose(perm).reshape(*lead, t, d),)

    return _emit(out, (x,), backward_fn)


def merge_heads(x: Tensor) -> Tensor:
    """[.., H, T, D/H] -> [.., T, D]; inverse of split_heads."""
    *lead, h, t, dh = x.shape
    perm = _head_perm(len(lead))
    out = x.data.transpose(perm).reshape(*lead, t, h * dh)

    def backward_fn(g: np.ndarray):
        return (g.reshape(*lead, t, h, dh).transpose(perm),)

    return _emit(out, (x,), backward_fn)


def _head_perm(n_lead: int) -> tuple[int, ...]:
    # swaps the (T, H) axis pair that sits after the leading axes
    lead = tuple(range(n_lead))
    return lead + (n_lead + 1, n_lead, n_lead + 2)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _check_loss_inputs(logits: Tensor, targets: np.ndarray, mask: np.ndarray):
    if logits.data.ndim not in (2, 3):
        raise ValueError(f"loss expects [T,V] or [B,T,V] logits, got {logits.shape}")
    lead = logits.shape[:-1]
    if targets.shape != lead or mask.shape != lead:
        raise ValueError(
            f"loss target/mask shape mismatch: logits {logits.shape}, "
            f"targets {targets.shape}, mask {mask.shape}"
        )
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise ValueError("loss mask must select at least one position per sequence")
    vocab = logits.shape[-1]
    masked_targets = targets[mask]
    if masked_targets.min() < 0 or masked_targets.max() >= vocab:
        raise ValueError(f"target id out of range [0, {vocab})")
    return counts


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy_loss(logits: Tensor, targets, mask) -> Tensor:
    """Masked next-token cross-entropy.

    Per sequence: mean over masked positions of -log softmax(target).
    Batched input averages the per-sequence means, so gradient
    accumulation over equal-size micro-batches reproduces the
    concatenated-batch gradient exactly.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    counts = _check_loss_inputs(logits, targets, mask)

    logp = _log_softmax(logits.data)
    safe_targets = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, safe_targets[..., None], axis=-1)[..., 0]
    nll = -(picked * mask).sum(axis=-1) / counts
    out_value = nll.mean() if logits.data.ndim == 3 else nll

    n_seq = logits.shape[0] if logits.data.ndim == 3 else 1

    def backward_fn(g: np.ndarray):
        p = np.exp(logp)
        dlogits = p.copy()
        # masked-out positions may carry dummy target ids; route them to 0
        safe = np.where(mask, targets, 0).reshape(-1)
        flat = dlogits.reshape(-1, logits.shape[-1])
        flat[np.arange(safe.size), safe] -= 1.0
        w = mask / counts[..., None] / n_seq
        dlogits *= w[..., None]
        return (dlogits * float(g),)

    return _emit(np.asarray(out_value, dtype=np.float64), (logits,), backward_fn)


def kl_to_reference(logits: Tensor, ref_log_probs: np.ndarray, mask) -> Tensor:
    """Masked mean KL(softmax(logits) || exp(ref_log_probs)).

    ``ref_log_probs`` is a frozen constant (e.g., a reference model's
    log-softmax output); gradients flow to ``logits`` only. Always >= 0.
    """
    mask = np.asarray(mask, dtype=bool)
    ref = np.asarray(ref_log_probs, dtype=np.float64)
    if ref.shape != logits.shape:
        raise ValueError(
            f"kl_to_reference shape mismatch: logits {logits.shape}, "
            f"reference {ref.shape}"
        )
    lead = logits.shape[:-1]
    if mask.shape != lead:
        raise ValueError(f"kl_to_reference mask shape {mask.shape} != {lead}")
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise ValueError("loss mask must select at least one position per sequence")

    logp = _log_softmax(logits.data)
    p = np.exp(logp)
    diff = logp - ref
    kl_rows = (p * diff).sum(axis=-1)
    per_seq = (kl_rows * mask).sum(axis=-1) / counts
    out_value = per_seq.mean() if logits.data.ndim == 3 else per_seq

    n_seq = logits.shape[0] if logits.data.ndim == 3 else 1

    def backward_fn(g: np.ndarray):
        w = mask / counts[..., None] / n_seq
        dlogits = p * (diff - kl_rows[..., None]) * w[..., None]
        return (dlogits * float(g),)

    return _emit(np.asarray(out_value, dtype=np.float64), (logits,), backward_fn)


def causal_mask(t: int) -> Tensor:
    """[T,T] additive mask: 0 at or below the diagonal, -1e30 above."""
    m = np.triu(np.full((t, t), _NEG_INF), k=1)
    return constant(m)
