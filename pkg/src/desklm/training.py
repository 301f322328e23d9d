"""Training loops: next-token LM fine-tuning and headline code regression.

Both loops optimize only the LoRA tensors (plus the regression head) when
adapters are given, leaving the base weights untouched. Passing
``adapters=None`` trains every base tensor instead, which is how the desk
model is trained from scratch.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .container import read_container, write_container
from .errors import ContractError, NonFiniteError, TrainingDivergedError
from .labels import LabeledHeadline, ReturnBucket, decode_score
from .lora import save_adapters, trainable_parameters
from .model import TransformerWeights, chunk_nll, hidden_states, save_checkpoint
from .optim import AdamWState, adamw_step, global_norm
from .tensor import Tensor
from .tokenizer import ByteTokenizer

log = logging.getLogger(__name__)

HEAD_MAGIC = b"FTLH"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 1
    lr: float = 2e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    stop_loss: float | None = None  # end early once an epoch's mean loss drops below this

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be positive")
        if self.lr < 0 or self.weight_decay < 0 or self.clip_norm < 0:
            raise ContractError("lr, weight_decay and clip_norm must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    final_eval_loss: float | None = None

    def write_csv(self, path: str | Path, timings: bool = True) -> None:
        """``epoch,loss,seconds``; with ``timings=False`` the seconds column is left empty."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "seconds"])
            for i, (loss, sec) in enumerate(zip(self.losses, self.seconds), start=1):
                w.writerow([i, repr(loss), f"{sec:.6f}" if timings else ""])


def append_run_log(path: str | Path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class RegressionHead:
    """Pooled final hidden state -> scalar code prediction."""

    weight: Tensor  # d x 1
    bias: Tensor  # 1
    pooling: str = "mean"

    @classmethod
    def create(cls, model_dim: int, seed: int = 0, pooling: str = "mean") -> "RegressionHead":
        if pooling not in ("mean", "last"):
            raise ContractError(f"unknown pooling {pooling!r}")
        rng = np.random.default_rng(seed)
        w = (rng.standard_normal((model_dim, 1)) * 0.02).astype(np.float32)
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(1, np.float32), requires_grad=True), pooling)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, hidden: Tensor) -> Tensor:
        t = hidden.shape[0]
        if self.pooling == "mean":
            pool = np.full((1, t), 1.0 / t, dtype=np.float32)
        else:
            pool = np.zeros((1, t), dtype=np.float32)
            pool[0, -1] = 1.0
        return (Tensor(pool) @ hidden) @ self.weight + self.bias


def save_head(head: RegressionHead, path: str | Path) -> None:
    write_container(
        path, HEAD_MAGIC, {"pooling": head.pooling}, {"weight": head.weight.data, "bias": head.bias.data}
    )


def load_head(path: str | Path) -> RegressionHead:
    config, params = read_container(path, HEAD_MAGIC)
    return RegressionHead(
        Tensor(params["weight"], requires_grad=True),
        Tensor(params["bias"], requires_grad=True),
        config.get("pooling", "mean"),
    )


def _parameters(weights: TransformerWeights, adapters) -> list[Tensor]:
    if adapters:
        weights.set_trainable(False)
        return trainable_parameters(weights, adapters)
    weights.set_trainable(True)
    return weights.tensors()


def _fit(
    params: list[Tensor],
    n_items: int,
    loss_fn: Callable[[int, np.random.Generator], Tensor],
    config: TrainConfig,
    on_epoch_end: Callable[[int], None] | None = None,
) -> TrainHistory:
    order_rng = np.random.default_rng(config.seed)
    dropout_rng = np.random.default_rng([config.seed, 1])
    state = AdamWState.for_parameters([p.data for p in params])
    history = TrainHistory()
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = order_rng.permutation(n_items)
        losses: list[float] = []
        for b in range(0, n_items, config.batch_size):
            batch = order[b : b + config.batch_size]
            T.zero_grads(params)
            for idx in batch:
                try:
                    loss = loss_fn(int(idx), dropout_rng)
                except NonFiniteError as exc:
                    raise TrainingDivergedError(
                        f"non-finite activations at epoch {epoch}, item {int(idx)}: {exc}",
                        {"epoch": epoch, "item": int(idx), "grad_norm": None},
                    ) from exc
                value = loss.item()
                if not math.isfinite(value):
                    grads = [p.grad for p in params if p.grad is not None]
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, item {int(idx)}",
                        {"epoch": epoch, "item": int(idx), "grad_norm": global_norm(grads) if grads else 0.0},
                    )
                losses.append(value)
                (loss * (1.0 / len(batch))).backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            try:
                adamw_step(
                    [p.data for p in params],
                    grads,
                    state,
                    lr=config.lr,
                    betas=config.betas,
                    eps=config.eps,
                    weight_decay=config.weight_decay,
                    clip_norm=config.clip_norm,
                )
            except TrainingDivergedError as exc:
                exc.diagnostics.update(epoch=epoch, items=[int(i) for i in batch])
                raise
        T.zero_grads(params)
        history.losses.append(math.fsum(losses) / len(losses))
        history.seconds.append(time.perf_counter() - start)
        log.info("epoch %d loss %.4f", epoch, history.losses[-1])
        if on_epoch_end is not None:
            on_epoch_end(epoch)
        if config.stop_loss is not None and history.losses[-1] < config.stop_loss:
            break
    return history


def train_lm(
    weights: TransformerWeights,
    adapters: Mapping | None,
    chunks: Sequence,
    config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    eval_chunks: Sequence | None = None,
) -> TrainHistory:
    """Next-token training over fixed-length chunks, shuffled each epoch."""
    if not chunks:
        raise ContractError("train_lm needs at least one chunk")
    ids = [np.asarray(getattr(c, "ids", c), dtype=np.int64) for c in chunks]
    params = _parameters(weights, adapters)

    def loss_fn(i: int, rng) -> Tensor:
        return chunk_nll(weights, ids[i], adapters, train=True, rng=rng)

    def checkpoint(epoch: int) -> None:
        if checkpoint_dir is None or not config.checkpoint_every or epoch % config.checkpoint_every:
            return
        out = Path(checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        if adapters:
            save_adapters(adapters, out / f"adapters_epoch{epoch:04d}.ftla")
        else:
            save_checkpoint(weights, out / f"model_epoch{epoch:04d}.ftlm")

    history = _fit(params, len(ids), loss_fn, config, checkpoint)
    weights.set_trainable(False)
    if eval_chunks:
        history.final_eval_loss = mean_chunk_nll(weights, eval_chunks, adapters)
    return history


def mean_chunk_nll(weights: TransformerWeights, chunks: Sequence, adapters=None) -> float:
    total = 0.0
    count = 0
    for c in chunks:
        ids = np.asarray(getattr(c, "ids", c), dtype=np.int64)
        total += chunk_nll(weights, ids, adapters).item() * (ids.size - 1)
        count += ids.size - 1
    return total / count


def _encode_headline(text: str, weights: TransformerWeights, tokenizer: ByteTokenizer) -> list[int]:
    ids = tokenizer.encode(text)[: weights.config.context_length]
    if not ids:
        raise ContractError("headline encodes to no tokens")
    return ids


def predict_score(weights, adapters, head: RegressionHead, text: str, *, train=False, rng=None,
                  tokenizer: ByteTokenizer | None = None) -> Tensor:
    ids = _encode_headline(text, weights, tokenizer or ByteTokenizer())
    return head(hidden_states(weights, ids, adapters, train=train, rng=rng))


def train_classifier(
    weights: TransformerWeights,
    adapters: Mapping | None,
    head: RegressionHead,
    dataset: Sequence[LabeledHeadline],
    config: TrainConfig,
) -> TrainHistory:
    """Squared error between the head's scalar output and the bucket code."""
    if not dataset:
        raise ContractError("train_classifier needs a non-empty dataset")
    tok = ByteTokenizer()
    encoded = [_encode_headline(ex.headline.text, weights, tok) for ex in dataset]
    codes = [float(ex.bucket.code) for ex in dataset]
    params = _parameters(weights, adapters) + head.parameters()

    def loss_fn(i: int, rng) -> Tensor:
        pred = head(hidden_states(weights, encoded[i], adapters, train=True, rng=rng))
        return T.mse(pred, codes[i])

    history = _fit(params, len(dataset), loss_fn, config)
    weights.set_trainable(False)
    history.final_eval_loss = classifier_mse(weights, adapters, head, dataset)
    return history


def classifier_mse(weights, adapters, head: RegressionHead, dataset: Sequence[LabeledHeadline]) -> float:
    errs = [
        (predict_score(weights, adapters, head, ex.headline.text).item() - ex.bucket.code) ** 2
        for ex in dataset
    ]
    return math.fsum(errs) / len(errs)


def predict_bucket(weights, adapters, head: RegressionHead, text: str) -> tuple[ReturnBucket, float]:
    """Decoded bucket and the raw regression score."""
    raw = predict_score(weights, adapters, head, text).item()
    return decode_score(raw), raw


def classification_metrics(weights, adapters, head, dataset: Sequence[LabeledHeadline]) -> dict:
    """Exact-bucket accuracy and mean absolute code error."""
    hits = 0
    abs_err = []
    for ex in dataset:
        bucket, raw = predict_bucket(weights, adapters, head, ex.headline.text)
        hits += bucket == ex.bucket
        abs_err.append(abs(raw - ex.bucket.code))
    return {
        "accuracy": hits / len(dataset),
        "mean_abs_code_error": math.fsum(abs_err) / len(abs_err),
        "n": len(dataset),
    }
