"""Tiny decoder-only transformer LM with optional LoRA adapters.

The model is small enough to memorize a few dozen sequences in seconds on
one core, yet structurally faithful: token+position embeddings, pre-norm
multi-head causal attention, GELU MLP, final layer norm, untied unembedding.
With LoRA enabled only the adapter weights are trainable; the base weights
are frozen and the zero-initialized ``up`` matrices make the adapted model
bitwise-equal to the base model until the first update.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .data import EOS_ID, PackedExample, Vocabulary
from .validation import check_count, check_positive

_INIT_STD = 0.02
_CHECKPOINT_MAGIC = "unlearnlab-checkpoint v1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_length: int = 64
    lora_enabled: bool = False
    lora_rank: int = 16
    lora_alpha: float = 32.0
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_length"):
            check_count(getattr(self, name), name)
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"n_heads: d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.lora_enabled:
            check_count(self.lora_rank, "lora_rank")
            if self.lora_rank > self.d_model:
                raise ValueError(
                    f"lora_rank: rank {self.lora_rank} exceeds d_model {self.d_model}"
                )
            check_positive(self.lora_alpha, "lora_alpha")


@dataclass
class LoraAdapter:
    """Low-rank delta for one frozen weight matrix: delta = scaling * up @ down."""

    down: dc.Tensor  # [rank, d_in]
    up: dc.Tensor  # [d_out, rank]
    scaling: float


class TinyCausalLM:
    """Causal LM over a whitespace-token vocabulary.

    Parameters live in ``self.params`` (base) and ``self.adapters`` (LoRA);
    the trainable set is the adapters when LoRA is enabled, otherwise all
    base weights. ``vocab`` is optional metadata carried along so that
    checkpoints stay usable without re-deriving the tokenizer.
    """

    def __init__(self, config: ModelConfig, vocab: Vocabulary | None = None):
        self.config = config
        self.vocab = vocab
        self.params: dict[str, dc.Tensor] = {}
        self.adapters: dict[str, LoraAdapter] = {}
        self._init_parameters()

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    def _init_parameters(self) -> None:
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, 0])
        d, v = cfg.d_model, cfg.vocab_size

        def draw(name: str, shape: tuple[int, ...]):
            self.params[name] = dc.Tensor(rng.normal(0.0, _INIT_STD, shape))

        draw("tok_emb", (v, d))
        draw("pos_emb", (cfg.max_length, d))
        for i in range(cfg.n_layers):
            p = f"layer{i}."
            for w in ("wq", "wk", "wv", "wo"):
                draw(p + w, (d, d))
            draw(p + "w1", (d, 4 * d))
            draw(p + "w2", (4 * d, d))
            for ln in ("ln1", "ln2"):
                self.params[p + ln + ".gain"] = dc.Tensor(np.ones(d))
                self.params[p + ln + ".bias"] = dc.Tensor(np.zeros(d))
        self.params["lnf.gain"] = dc.Tensor(np.ones(d))
        self.params["lnf.bias"] = dc.Tensor(np.zeros(d))
        draw("lm_head", (d, v))

        if cfg.lora_enabled:
            arng = np.random.default_rng([cfg.seed, 1])
            scaling = cfg.lora_alpha / cfg.lora_rank
            for i in range(cfg.n_layers):
                for w in ("wq", "wv"):
                    self.adapters[f"layer{i}.{w}"] = LoraAdapter(
                        down=dc.parameter(
                            arng.normal(0.0, _INIT_STD, (cfg.lora_rank, d))
                        ),
                        up=dc.parameter(np.zeros((d, cfg.lora_rank))),
                        scaling=scaling,
                    )
        else:
            for t in self.params.values():
                t.requires_grad = True

        self._trainable = self._trainable_tensors()

    def _trainable_tensors(self) -> list[tuple[str, dc.Tensor]]:
        if self.config.lora_enabled:
            out = []
            for name in sorted(self.adapters):
                out.append((name + ".down", self.adapters[name].down))
                out.append((name + ".up", self.adapters[name].up))
            return out
        return list(self.params.items())

    def clone(self) -> "TinyCausalLM":
        """Deep copy; parameter arrays are independent."""
        other = TinyCausalLM.__new__(TinyCausalLM)
        other.config = self.config
        other.vocab = self.vocab
        other.params = {}
        for name, t in self.params.items():
            c = dc.Tensor(t.data.copy())
            c.requires_grad = t.requires_grad
            other.params[name] = c
        other.adapters = {
            name: LoraAdapter(
                down=dc.parameter(a.down.data.copy()),
                up=dc.parameter(a.up.data.copy()),
                scaling=a.scaling,
            )
            for name, a in self.adapters.items()
        }
        other._trainable = other._trainable_tensors()
        return other

    def with_lora(self, rank: int, alpha: float, seed: int) -> "TinyCausalLM":
        """New model: same (frozen) base weights plus fresh zero-delta adapters."""
        if self.config.lora_enabled:
            raise ValueError("model already carries LoRA adapters")
        cfg = ModelConfig(
            **{
                **asdict(self.config),
                "lora_enabled": True,
                "lora_rank": rank,
                "lora_alpha": alpha,
                "seed": seed,
            }
        )
        other = TinyCausalLM(cfg, vocab=self.vocab)
        for name, t in self.params.items():
            other.params[name].data = t.data.copy()
            other.params[name].requires_grad = False
        return other

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def _project(self, h: dc.Tensor, name: str) -> dc.Tensor:
        base = dc.matmul(h, self.params[name])
        adapter = self.adapters.get(name)
        if adapter is None:
            return base
        low = dc.matmul(h, dc.transpose_last2(adapter.down))
        delta = dc.matmul(low, dc.transpose_last2(adapter.up))
        return dc.add(base, dc.scale(delta, adapter.scaling))

    def _forward_ids(self, ids: np.ndarray) -> dc.Tensor:
        cfg = self.config
        t = ids.shape[-1]
        dh = cfg.d_model // cfg.n_heads
        x = dc.add(
            dc.embedding_lookup(self.params["tok_emb"], ids),
            dc.embedding_lookup(self.params["pos_emb"], np.arange(t)),
        )
        mask = dc.causal_mask(t)
        for i in range(cfg.n_layers):
            p = f"layer{i}."
            h = dc.layer_norm_rows(
                x, self.params[p + "ln1.gain"], self.params[p + "ln1.bias"]
            )
            q = dc.split_heads(self._project(h, p + "wq"), cfg.n_heads)
            k = dc.split_heads(dc.matmul(h, self.params[p + "wk"]), cfg.n_heads)
            v = dc.split_heads(self._project(h, p + "wv"), cfg.n_heads)
            scores = dc.scale(dc.matmul(q, dc.transpose_last2(k)), 1.0 / np.sqrt(dh))
            probs = dc.softmax_rows(dc.add(scores, mask))
            attn = dc.merge_heads(dc.matmul(probs, v))
            x = dc.add(x, dc.matmul(attn, self.params[p + "wo"]))
            h2 = dc.layer_norm_rows(
                x, self.params[p + "ln2.gain"], self.params[p + "ln2.bias"]
            )
            m = dc.matmul(dc.gelu(dc.matmul(h2, self.params[p + "w1"])), self.params[p + "w2"])
            x = dc.add(x, m)
        x = dc.layer_norm_rows(x, self.params["lnf.gain"], self.params["lnf.bias"])
        return dc.matmul(x, self.params["lm_head"])

    def _check_ids(self, tokens, what: str) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError(f"{what} must be a non-empty token-id sequence")
        if ids.size > self.config.max_length:
            raise ValueError(
                f"{what} length {ids.size} exceeds max_length {self.config.max_length}"
            )
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError(
                f"{what} contains ids outside [0, {self.config.vocab_size})"
            )
        return ids

    def forward_lm(self, tokens) -> dc.Tensor:
        """Logits [T, V] for one token-id sequence."""
        return self._forward_ids(self._check_ids(tokens, "token sequence"))

    # ------------------------------------------------------------------
    # losses
    # ------------------------------------------------------------------

    @staticmethod
    def _shift(tokens: np.ndarray, loss_mask: np.ndarray):
        """Next-token targets/mask: logits at t predict token t+1."""
        targets = np.concatenate([tokens[1:], [0]])
        mask = np.concatenate([loss_mask[1:], [False]])
        return targets, mask

    def sequence_loss(self, packed: PackedExample) -> dc.Tensor:
        """Cross-entropy over the masked (output-field) positions."""
        n = packed.attention_length
        tokens = self._check_ids(packed.token_ids[:n], "packed sequence")
        targets, mask = self._shift(tokens, np.asarray(packed.loss_mask[:n], dtype=bool))
        logits = self._forward_ids(tokens)
        return dc.cross_entropy_loss(logits, targets, mask)

    def batch_loss(self, batch: list[PackedExample]) -> dc.Tensor:
        """Mean over examples of the per-example masked-mean cross-entropy."""
        if not batch:
            raise ValueError("batch must not be empty")
        if len(batch) == 1:
            return self.sequence_loss(batch[0])
        t_max = max(p.attention_length for p in batch)
        ids = np.zeros((len(batch), t_max), dtype=np.int64)
        targets = np.zeros((len(batch), t_max), dtype=np.int64)
        mask = np.zeros((len(batch), t_max), dtype=bool)
        for row, packed in enumerate(batch):
            n = packed.attention_length
            tokens = self._check_ids(packed.token_ids[:n], "packed sequence")
            tg, mk = self._shift(tokens, np.asarray(packed.loss_mask[:n], dtype=bool))
            ids[row, :n] = tokens
            targets[row, :n] = tg
            mask[row, :n] = mk
        logits = self._forward_ids(ids)
        return dc.cross_entropy_loss(logits, targets, mask)

    def batch_logits(self, batch: list[PackedExample]):
        """Padded batch logits plus the shifted targets/mask (for KL terms)."""
        t_max = max(p.attention_length for p in batch)
        ids = np.zeros((len(batch), t_max), dtype=np.int64)
        mask = np.zeros((len(batch), t_max), dtype=bool)
        for row, packed in enumerate(batch):
            n = packed.attention_length
            tokens = np.asarray(packed.token_ids[:n], dtype=np.int64)
            _, mk = self._shift(tokens, np.asarray(packed.loss_mask[:n], dtype=bool))
            ids[row, :n] = tokens
            mask[row, :n] = mk
        return self._forward_ids(ids), mask

    # ------------------------------------------------------------------
    # decoding
    # ------------------------------------------------------------------

    def greedy_decode(self, prompt, max_new: int) -> list[int]:
        """Deterministic argmax continuation of ``prompt``.

        Ties break toward the lowest token id; generation stops after
        ``max_new`` tokens, at the end-of-sequence token (not emitted), or
        when the context window is full.
        """
        ids = self._check_ids(prompt, "prompt")
        if max_new < 0:
            raise ValueError(f"max_new must be >= 0, got {max_new}")
        seq = list(ids)
        out: list[int] = []
        for _ in range(max_new):
            if len(seq) >= self.config.max_length:
                break
            logits = self._forward_ids(np.asarray(seq, dtype=np.int64))
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == EOS_ID:
                break
            seq.append(nxt)
            out.append(nxt)
        return out

    # ------------------------------------------------------------------
    # trainable parameter vector
    # ------------------------------------------------------------------

    @property
    def trainable_names(self) -> list[str]:
        return [name for name, _ in self._trainable]

    def num_trainable(self) -> int:
        return sum(t.data.size for _, t in self._trainable)

    def get_parameter_vector(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for _, t in self._trainable])

    def set_parameter_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.num_trainable(),):
            raise ValueError(
                f"parameter vector length {vec.shape} != ({self.num_trainable()},)"
            )
        offset = 0
        for _, t in self._trainable:
            n = t.data.size
            t.data = vec[offset : offset + n].reshape(t.data.shape).copy()
            offset += n

    def base_parameter_vector(self) -> np.ndarray:
        """All base (non-adapter) weights; used by the freeze invariant."""
        return np.concatenate(
            [self.params[name].data.ravel() for name in sorted(self.params)]
        )

    def zero_grads(self) -> None:
        for _, t in self._trainable:
            t.grad = None

    def grad_vector(self) -> np.ndarray:
        parts = []
        for _, t in self._trainable:
            if t.grad is None:
                parts.append(np.zeros(t.data.size))
            else:
                parts.append(t.grad.ravel())
        return np.concatenate(parts)

    def loss_and_gradient(self, batch: list[PackedExample]) -> tuple[float, np.ndarray]:
        """Batch loss and its gradient w.r.t. the trainable vector."""
        self.zero_grads()
        with dc.Tape() as tape:
            loss = self.batch_loss(batch)
        dc.backward(loss, tape)
        return loss.item(), self.grad_vector()


def build_model(config: ModelConfig, vocab: Vocabulary | None = None) -> TinyCausalLM:
    return TinyCausalLM(config, vocab=vocab)


def lora_parameter_count(config: ModelConfig) -> int:
    """rank * (d_in + d_out) summed over the adapted q/v projections."""
    per_matrix = config.lora_rank * (config.d_model + config.d_model)
    return 2 * config.n_layers * per_matrix


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _array_entries(model: TinyCausalLM) -> list[tuple[str, np.ndarray]]:
    entries = [(f"base.{n}", model.params[n].data) for n in sorted(model.params)]
    for name in sorted(model.adapters):
        a = model.adapters[name]
        entries.append((f"adapter.{name}.down", a.down.data))
        entries.append((f"adapter.{name}.up", a.up.data))
    return entries


def save_checkpoint(model: TinyCausalLM, path) -> None:
    """Versioned container: magic line, JSON manifest line, raw float64 blobs.

    Fully deterministic bytes, so save -> load -> save round-trips bitwise.
    """
    entries = _array_entries(model)
    manifest = {
        "config": asdict(model.config),
        "vocab": model.vocab.to_dict() if model.vocab is not None else None,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in entries],
    }
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC.encode() + b"\n")
        fh.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode())
        fh.write(b"\n")
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> TinyCausalLM:
    with open(path, "rb") as fh:
        magic = fh.readline().decode().rstrip("\n")
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"not an unlearnlab checkpoint: {path}")
        manifest = json.loads(fh.readline().decode())
        config = ModelConfig(**manifest["config"])
        vocab = (
            Vocabulary.from_dict(manifest["vocab"])
            if manifest["vocab"] is not None
            else None
        )
        model = TinyCausalLM(config, vocab=vocab)
        stores = {f"base.{n}": t for n, t in model.params.items()}
        for name, a in model.adapters.items():
            stores[f"adapter.{name}.down"] = a.down
            stores[f"adapter.{name}.up"] = a.up
        for entry in manifest["arrays"]:
            shape = tuple(entry["shape"])
            n_bytes = 8 * int(np.prod(shape)) if shape else 8
            raw = fh.read(n_bytes)
            if len(raw) != n_bytes:
                raise ValueError(f"truncated checkpoint: {path}")
            if entry["name"] not in stores:
                raise ValueError(f"unknown checkpoint array {entry['name']!r}")
            stores[entry["name"]].data = (
                np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            )
    return model
