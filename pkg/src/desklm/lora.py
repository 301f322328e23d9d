"""Low-rank adapters on the query and value projections.

An adapter contributes ``(alpha / r) * B(Ax)`` beside the frozen projection,
so with ``B = 0`` the adapted model is exactly the base model.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .container import read_container, write_container
from .errors import ContractError, DimensionError, ShapeMismatchError
from .model import TransformerWeights
from .tensor import Tensor

ADAPTER_MAGIC = b"FTLA"
TARGETS = {"query": "wq", "value": "wv"}
ALIASES = {"q": "query", "v": "value", "query": "query", "value": "value"}

AdapterSet = dict[tuple[int, str], "LoraAdapter"]


@dataclass
class LoraAdapter:
    layer: int
    target: str
    A: Tensor  # r x d
    B: Tensor  # d x r
    alpha: float = 8.0
    dropout: float = 0.05

    def __post_init__(self):
        r, d = self.A.shape
        if self.B.shape != (d, r):
            raise ShapeMismatchError(f"B has shape {self.B.shape}, expected {(d, r)}")
        if not 1 <= r <= d:
            raise ContractError(f"rank {r} must lie in [1, {d}]")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must be in [0, 1)")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def key(self) -> tuple[int, str]:
        return (self.layer, self.target)

    def delta(self, x: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """``(alpha/r) * B(Ax)`` for row vectors ``x``; dropout on ``x`` only when training."""
        d = self.A.shape[1]
        if x.shape[-1] != d:
            raise DimensionError(f"adapter expects width {d}, got input of shape {x.shape}")
        if train and self.dropout > 0.0:
            if rng is None:
                raise ContractError("training-mode dropout needs an rng")
            keep = (rng.random(x.shape) >= self.dropout).astype(np.float32)
            x = x * (keep / np.float32(1.0 - self.dropout))
        return ((x @ self.A.T) @ self.B.T) * self.scale

    def dense_delta(self) -> np.ndarray:
        """``(alpha/r) * BA`` as a (d x d) matrix in column-vector convention."""
        return self.scale * (self.B.data.astype(np.float64) @ self.A.data.astype(np.float64))


def adapter_delta(adapter: LoraAdapter, x: Tensor) -> Tensor:
    return adapter.delta(x)


def _normalise_targets(targets: Iterable[str]) -> list[str]:
    out = []
    for name in targets:
        if name not in ALIASES:
            raise ContractError(f"unknown adapter target {name!r}; expected query or value")
        if ALIASES[name] not in out:
            out.append(ALIASES[name])
    return sorted(out, key=list(TARGETS).index)


def attach_adapters(
    weights: TransformerWeights,
    rank: int = 4,
    alpha: float = 8.0,
    targets: Iterable[str] = ("query", "value"),
    seed: int = 0,
    dropout: float = 0.05,
) -> AdapterSet:
    """One adapter per (layer, target); A ~ N(0, 0.02^2), B = 0.

    Marks every base tensor as not requiring gradients.
    """
    d = weights.config.model_dim
    if not 1 <= rank <= d:
        raise ContractError(f"rank {rank} must lie in [1, model_dim={d}]")
    names = _normalise_targets(targets)
    rng = np.random.default_rng(seed)
    adapters: AdapterSet = {}
    for layer in range(weights.config.num_layers):
        for target in names:
            A = Tensor((rng.standard_normal((rank, d)) * 0.02).astype(np.float32), requires_grad=True)
            B = Tensor(np.zeros((d, rank), dtype=np.float32), requires_grad=True)
            adapters[(layer, target)] = LoraAdapter(layer, target, A, B, alpha, dropout)
    weights.set_trainable(False)
    return adapters


def trainable_parameters(weights: TransformerWeights, adapters: Mapping | None) -> list[Tensor]:
    """Exactly the A and B tensors, in (layer, target) order."""
    if not adapters:
        return []
    out: list[Tensor] = []
    for key in sorted(adapters, key=lambda k: (k[0], list(TARGETS).index(k[1]))):
        out.extend((adapters[key].A, adapters[key].B))
    return out


def merge(weights: TransformerWeights, adapters: Mapping | None) -> TransformerWeights:
    """New weights with ``W + (alpha/r)(BA)^T`` folded into each target projection."""
    merged = weights.copy()
    d = weights.config.model_dim
    for (layer, target), ad in (adapters or {}).items():
        if layer >= weights.config.num_layers or target not in TARGETS:
            raise ContractError(f"adapter {(layer, target)} does not match these weights")
        if ad.A.shape[1] != d:
            raise ContractError(f"adapter width {ad.A.shape[1]} does not match model_dim {d}")
        name = f"layers.{layer}.attn.{TARGETS[target]}"
        base = weights.params[name].data.astype(np.float64)
        merged.params[name] = Tensor((base + ad.dense_delta().T).astype(np.float32))
    return merged


# -- serialization ----------------------------------------------------------------


def save_adapters(adapters: Mapping, path: str | Path) -> None:
    items = [adapters[k] for k in sorted(adapters, key=lambda k: (k[0], list(TARGETS).index(k[1])))]
    if not items:
        raise ContractError("no adapters to save")
    first = items[0]
    config = {
        "rank": first.rank,
        "alpha": first.alpha,
        "dropout": first.dropout,
        "model_dim": first.A.shape[1],
        "targets": [[a.layer, a.target] for a in items],
    }
    params = {}
    for a in items:
        params[f"layers.{a.layer}.{a.target}.A"] = a.A.data
        params[f"layers.{a.layer}.{a.target}.B"] = a.B.data
    write_container(path, ADAPTER_MAGIC, config, params)


def load_adapters(path: str | Path) -> AdapterSet:
    config, params = read_container(path, ADAPTER_MAGIC)
    adapters: AdapterSet = {}
    try:
        for layer, target in config["targets"]:
            A = Tensor(params[f"layers.{layer}.{target}.A"], requires_grad=True)
            B = Tensor(params[f"layers.{layer}.{target}.B"], requires_grad=True)
            if A.shape != (config["rank"], config["model_dim"]):
                raise ShapeMismatchError(f"adapter {layer}/{target} A has shape {A.shape}")
            adapters[(layer, target)] = LoraAdapter(
                layer, target, A, B, config["alpha"], config["dropout"]
            )
    except KeyError as exc:
        raise ShapeMismatchError(f"adapter file missing entry {exc}") from exc
    return adapters


def numerical_rank(matrix: np.ndarray, tol: float = 1e-6) -> int:
    s = np.linalg.svd(np.asarray(matrix, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int((s > tol * s[0]).sum())
