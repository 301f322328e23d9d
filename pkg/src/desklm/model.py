"""Decoder-only causal transformer on top of :mod:`desklm.tensor`.

Pre-norm blocks, learned absolute positions, GELU MLP, LM head tied to the
token embedding. Activations are row vectors, so a projection is ``x @ W``
with ``W`` stored as (d_in x d_out).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from . import tensor as T
from .container import read_container, write_container
from .errors import ConfigError, ContextOverflowError, ContractError, ShapeMismatchError
from .tensor import Tensor
from .tokenizer import BOS_ID, EOS_ID, ByteTokenizer

if TYPE_CHECKING:
    from .lora import LoraAdapter

CHECKPOINT_MAGIC = b"FTLM"
INIT_STD = 0.02
LN_EPS = 1e-5


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size: int = 259
    context_length: int = 512
    model_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_hidden: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mlp_hidden is None:
            object.__setattr__(self, "mlp_hidden", 4 * self.model_dim)
        for name in ("vocab_size", "model_dim", "num_layers", "num_heads", "mlp_hidden"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.context_length < 2:
            raise ConfigError("context_length must be at least 2")
        if self.model_dim % self.num_heads:
            raise ConfigError(
                f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TransformerConfig":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


def parameter_shapes(config: TransformerConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter order and shapes; checkpoints follow this order."""
    d, h = config.model_dim, config.mlp_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.context_length, d),
    }
    for i in range(config.num_layers):
        p = f"layers.{i}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn." + w] = (d, d)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "mlp.w_in"] = (d, h)
        shapes[p + "mlp.b_in"] = (h,)
        shapes[p + "mlp.w_out"] = (h, d)
        shapes[p + "mlp.b_out"] = (d,)
    shapes["ln_f.gain"] = (d,)
    shapes["ln_f.bias"] = (d,)
    return shapes


@dataclass
class TransformerWeights:
    config: TransformerConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def copy(self) -> "TransformerWeights":
        return TransformerWeights(
            self.config, {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        )

    def fingerprint(self) -> str:
        """SHA-256 over names, shapes and raw bytes, in canonical order."""
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(repr(p.shape).encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def init_model(config: TransformerConfig) -> TransformerWeights:
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape, dtype=np.float32)
        elif ".ln" in name or name.startswith("ln_f"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            data = (rng.standard_normal(shape) * INIT_STD).astype(np.float32)
        params[name] = Tensor(data)
    return TransformerWeights(config, params)


# -- forward -------------------------------------------------------------------


def _check_ids(config: TransformerConfig, ids: Sequence[int]) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim != 1 or arr.size == 0:
        raise ContractError("ids must be a non-empty 1-D sequence")
    if arr.size > config.context_length:
        raise ContextOverflowError(
            f"sequence of {arr.size} tokens exceeds context length {config.context_length}"
        )
    return arr


def _project(x: Tensor, w: Tensor, adapter: "LoraAdapter | None", train: bool, rng) -> Tensor:
    out = x @ w
    if adapter is not None:
        out = out + adapter.delta(x, train=train, rng=rng)
    return out


def hidden_states(
    weights: TransformerWeights,
    ids: Sequence[int],
    adapters: Mapping[tuple[int, str], "LoraAdapter"] | None = None,
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Final-norm hidden states, shape (t x d)."""
    cfg = weights.config
    idx = _check_ids(cfg, ids)
    t = idx.size
    H, dh = cfg.num_heads, cfg.head_dim
    adapters = adapters or {}
    P = weights.params

    x = T.embedding(P["tok_emb"], idx) + T.slice_rows(P["pos_emb"], t)
    scale = 1.0 / math.sqrt(dh)
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        h = T.layer_norm(x, P[p + "ln1.gain"], P[p + "ln1.bias"], LN_EPS)
        q = _project(h, P[p + "attn.wq"], adapters.get((i, "query")), train, rng)
        k = h @ P[p + "attn.wk"]
        v = _project(h, P[p + "attn.wv"], adapters.get((i, "value")), train, rng)
        # (t x d) -> (H x t x dh)
        q = q.reshape(t, H, dh).transpose(1, 0, 2)
        k = k.reshape(t, H, dh).transpose(1, 0, 2)
        v = v.reshape(t, H, dh).transpose(1, 0, 2)
        att = T.softmax_rows((q @ k.transpose(0, 2, 1)) * scale, causal=True)
        ctx = (att @ v).transpose(1, 0, 2).reshape(t, cfg.model_dim)
        x = x + ctx @ P[p + "attn.wo"]
        h = T.layer_norm(x, P[p + "ln2.gain"], P[p + "ln2.bias"], LN_EPS)
        h = T.gelu(h @ P[p + "mlp.w_in"] + P[p + "mlp.b_in"])
        x = x + h @ P[p + "mlp.w_out"] + P[p + "mlp.b_out"]
    return T.layer_norm(x, P["ln_f.gain"], P["ln_f.bias"], LN_EPS)


def forward(
    weights: TransformerWeights,
    ids: Sequence[int],
    adapters: Mapping[tuple[int, str], "LoraAdapter"] | None = None,
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits (t x V). Position i only sees ids[0..i]."""
    h = hidden_states(weights, ids, adapters, train=train, rng=rng)
    return h @ weights.params["tok_emb"].T


def chunk_nll(
    weights: TransformerWeights,
    chunk: Sequence[int],
    adapters: Mapping[tuple[int, str], "LoraAdapter"] | None = None,
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean next-token cross-entropy over positions 1..t-1 of ``chunk``."""
    ids = np.asarray(getattr(chunk, "ids", chunk), dtype=np.int64)
    if ids.size < 2:
        raise ContractError("chunk_nll needs at least 2 tokens")
    logits = forward(weights, ids, adapters, train=train, rng=rng)
    return T.cross_entropy_next_token(T.slice_rows(logits, ids.size - 1), ids[1:])


# -- generation ----------------------------------------------------------------


@dataclass(frozen=True)
class GenerationParams:
    max_new_tokens: int = 64
    strategy: str = "greedy"
    temperature: float = 1.0
    k: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("greedy", "temperature", "top-k"):
            raise ConfigError(f"unknown generation strategy {self.strategy!r}")
        if self.max_new_tokens < 0:
            raise ConfigError("max_new_tokens must be non-negative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.k < 1:
            raise ConfigError("k must be at least 1")


def _pick(logits: np.ndarray, params: GenerationParams, rng: np.random.Generator) -> int:
    if params.strategy == "greedy":
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / params.temperature
    if params.strategy == "top-k" and params.k < z.size:
        cutoff = np.partition(z, -params.k)[-params.k]
        z = np.where(z >= cutoff, z, -np.inf)
    p = np.exp(z - z.max())
    p /= p.sum()
    return int(rng.choice(z.size, p=p))


def generate_ids(
    weights: TransformerWeights,
    prompt_ids: Sequence[int],
    params: GenerationParams,
    adapters=None,
) -> list[int]:
    """New token ids appended after ``prompt_ids`` (eos excluded)."""
    cfg = weights.config
    ids = list(prompt_ids) or [BOS_ID]
    rng = np.random.default_rng(params.seed)
    window = cfg.context_length - 1
    new: list[int] = []
    for _ in range(params.max_new_tokens):
        ctx = ids[-window:] if len(ids) > window else ids
        logits = forward(weights, ctx, adapters).data[-1]
        nxt = _pick(logits, params, rng)
        if nxt == EOS_ID:
            break
        ids.append(nxt)
        new.append(nxt)
    return new


def generate(
    weights: TransformerWeights,
    prompt: str,
    params: GenerationParams,
    adapters=None,
    tokenizer: ByteTokenizer | None = None,
) -> str:
    """Prompt followed by the decoded continuation."""
    tok = tokenizer or ByteTokenizer()
    if params.max_new_tokens == 0:
        return prompt
    prompt_ids = tok.encode(prompt)
    if len(prompt_ids) > weights.config.context_length:
        raise ContextOverflowError(
            f"prompt of {len(prompt_ids)} tokens exceeds context length {weights.config.context_length}"
        )
    new = generate_ids(weights, prompt_ids, params, adapters)
    return prompt + tok.decode(new)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(weights: TransformerWeights, path: str | Path) -> None:
    write_container(
        path,
        CHECKPOINT_MAGIC,
        weights.config.to_dict(),
        {name: p.data for name, p in weights.params.items()},
    )


def load_checkpoint(path: str | Path) -> TransformerWeights:
    raw_config, raw_params = read_container(path, CHECKPOINT_MAGIC)
    try:
        config = TransformerConfig.from_dict(raw_config)
    except (ConfigError, TypeError) as exc:
        raise ShapeMismatchError(f"checkpoint carries an invalid config: {exc}") from exc
    expected = parameter_shapes(config)
    if list(raw_params) != list(expected):
        raise ShapeMismatchError("checkpoint parameter names do not match the config")
    for name, shape in expected.items():
        if raw_params[name].shape != shape:
            raise ShapeMismatchError(
                f"{name}: stored shape {raw_params[name].shape}, config implies {shape}"
            )
    return TransformerWeights(config, {k: Tensor(v) for k, v in raw_params.items()})
