"""Perplexity, summarization ROUGE, multiple-choice accuracy and backend comparison."""

from __future__ import annotations

import datetime as dt
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from ..errors import ContractError, RemoteError, UnsupportedCapabilityError, ValidationError
from ..model import GenerationParams
from .rouge import rouge_l, rouge_n

OK, SKIPPED, ERROR = "OK", "SKIPPED", "ERROR"


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).replace(microsecond=0).isoformat()


@dataclass
class EvalReport:
    metric: str
    values: dict[str, Any]
    dataset_id: str
    backend_id: str
    sample_count: int
    timestamp: str | None = None
    config: dict = field(default_factory=dict)
    status: str = OK
    detail: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def stamp(report: EvalReport, timestamps: bool) -> EvalReport:
    report.timestamp = _now() if timestamps else None
    return report


# -- item schemas ---------------------------------------------------------------


@dataclass(frozen=True)
class SummarizationItem:
    id: str
    input: str
    reference: str
    query: str | None = None
    candidate: str | None = None


@dataclass(frozen=True)
class MCItem:
    id: str
    question: str
    choices: tuple[str, ...]
    gold: int

    def __post_init__(self):
        if len(self.choices) < 2:
            raise ValidationError(f"item {self.id}: needs at least two choices")
        if not 0 <= self.gold < len(self.choices):
            raise ValidationError(f"item {self.id}: gold index {self.gold} out of range")


def _read_jsonl(path: str | Path) -> list[tuple[int, dict]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    rows.append((n, json.loads(line)))
                except json.JSONDecodeError as exc:
                    raise ValidationError(f"line {n}: invalid JSON ({exc})") from exc
    return rows


def read_summarization_items(path: str | Path) -> list[SummarizationItem]:
    items = []
    for n, rec in _read_jsonl(path):
        try:
            items.append(
                SummarizationItem(
                    str(rec["id"]), rec["input"], rec["reference"], rec.get("query"), rec.get("candidate")
                )
            )
        except KeyError as exc:
            raise ValidationError(f"line {n}: missing field {exc}") from exc
    return items


def read_mc_items(path: str | Path) -> list[MCItem]:
    items = []
    for n, rec in _read_jsonl(path):
        try:
            items.append(MCItem(str(rec["id"]), rec["question"], tuple(rec["choices"]), int(rec["gold"])))
        except KeyError as exc:
            raise ValidationError(f"line {n}: missing field {exc}") from exc
    return items


# -- perplexity -------------------------------------------------------------------


def _require_logprobs(backend, metric: str) -> None:
    if not getattr(backend, "supports_logprobs", False):
        raise UnsupportedCapabilityError(
            f"{metric} needs token log-probabilities, which backend {backend.name!r} ({backend.kind}) lacks"
        )


def token_nlls(backend, chunks: Iterable) -> list[float]:
    """-log p(x_i | x_<i) for every predicted position of every chunk."""
    out: list[float] = []
    for c in chunks:
        ids = np.asarray(getattr(c, "ids", c), dtype=np.int64)
        lp = backend.log_probs(ids)
        out.extend((-lp[np.arange(ids.size - 1), ids[1:]]).tolist())
    return out


def perplexity(backend, chunks: Sequence, dataset_id: str = "chunks", timestamps: bool = True) -> EvalReport:
    """exp of the mean NLL over all predicted positions of all chunks."""
    _require_logprobs(backend, "perplexity")
    if not chunks:
        raise ContractError("perplexity needs at least one chunk")
    nlls = token_nlls(backend, chunks)
    mean_nll = math.fsum(nlls) / len(nlls)
    report = EvalReport(
        "perplexity",
        {"perplexity": math.exp(mean_nll), "mean_nll": mean_nll, "tokens": len(nlls)},
        dataset_id,
        backend.name,
        len(chunks),
    )
    return stamp(report, timestamps)


# -- summarization ------------------------------------------------------------------


def build_prompt(item: SummarizationItem, budget: int | None) -> str:
    """Query then input; with a byte budget the input is cut from the front."""
    head = f"{item.query}\n" if item.query else ""
    if budget is None:
        return head + item.input
    head_b = head.encode("utf-8")[-budget:]
    room = max(budget - len(head_b), 0)
    body_b = item.input.encode("utf-8")
    body_b = body_b[len(body_b) - room :] if room else b""
    return head_b.decode("utf-8", errors="ignore") + body_b.decode("utf-8", errors="ignore")


def score_summary(candidate: str, reference: str) -> dict[str, float]:
    return {
        "rouge1": rouge_n(candidate, reference, 1)["f1"],
        "rouge2": rouge_n(candidate, reference, 2)["f1"],
        "rougeL": rouge_l(candidate, reference)["f1"],
    }


def summarization_eval(
    backend,
    items: Sequence[SummarizationItem],
    params: GenerationParams | None = None,
    dataset_id: str = "summarization",
    workers: int = 1,
    timestamps: bool = True,
) -> EvalReport:
    if not items:
        raise ContractError("summarization_eval needs at least one item")
    params = params or GenerationParams(max_new_tokens=128)
    ctx = getattr(backend, "context_length", None)
    budget = None if ctx is None else max(ctx - 1 - params.max_new_tokens, 1)

    def run(item: SummarizationItem):
        try:
            cand = item.candidate
            if cand is None:
                if backend is None:
                    raise ContractError(f"item {item.id} has no candidate and no backend was given")
                cand = backend.generate(build_prompt(item, budget), params)
            return item.id, score_summary(cand, item.reference), None
        except (RemoteError, ContractError) as exc:
            return item.id, None, str(exc)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(it) for it in items]

    scores = [s for _, s, _ in results if s is not None]
    failures = {iid: err for iid, s, err in results if s is None}
    values: dict[str, Any] = {"completed": len(scores), "failed": len(failures)}
    for key in ("rouge1", "rouge2", "rougeL"):
        values[key] = math.fsum(s[key] for s in scores) / len(scores) if scores else None
    if failures:
        values["failures"] = failures
    report = EvalReport(
        "rouge",
        values,
        dataset_id,
        getattr(backend, "name", "candidates"),
        len(items),
        status=OK if scores else ERROR,
        detail="" if scores else "no item completed",
    )
    return stamp(report, timestamps)


# -- multiple choice ---------------------------------------------------------------


def choice_scores(backend, item: MCItem) -> tuple[list[float], list[float]]:
    """(raw total log p, per-token mean log p) for every choice."""
    raw, norm = [], []
    for choice in item.choices:
        total, n = backend.continuation_logprob(f"{item.question} ", choice)
        raw.append(total)
        norm.append(total / n if n else total)
    return raw, norm


TIE_RTOL = 1e-9


def argmax_first(scores: Sequence[float]) -> int:
    """Index of the maximum; ties go to the lowest index.

    Scores within a relative 1e-9 of each other count as tied, so summation
    order noise cannot break a mathematical tie.
    """
    best = 0
    for i, s in enumerate(scores):
        if s - scores[best] > TIE_RTOL * max(1.0, abs(scores[best])):
            best = i
    return best


def mc_accuracy(
    backend,
    items: Sequence[MCItem],
    normalization: str = "none",
    dataset_id: str = "multiple_choice",
    timestamps: bool = True,
) -> EvalReport:
    """Accuracy of argmax conditional log-likelihood; both scoring modes are reported."""
    _require_logprobs(backend, "multiple-choice scoring")
    if normalization not in ("none", "per-token"):
        raise ContractError(f"unknown normalization {normalization!r}")
    if not items:
        raise ContractError("mc_accuracy needs at least one item")
    pred_raw, pred_norm = [], []
    for item in items:
        raw, norm = choice_scores(backend, item)
        pred_raw.append(argmax_first(raw))
        pred_norm.append(argmax_first(norm))
    golds = [it.gold for it in items]
    acc_raw = sum(p == g for p, g in zip(pred_raw, golds)) / len(items)
    acc_norm = sum(p == g for p, g in zip(pred_norm, golds)) / len(items)
    values = {
        "accuracy": acc_raw if normalization == "none" else acc_norm,
        "accuracy_none": acc_raw,
        "accuracy_per_token": acc_norm,
        "predictions_none": pred_raw,
        "predictions_per_token": pred_norm,
    }
    report = EvalReport("mc_accuracy", values, dataset_id, backend.name, len(items),
                        config={"normalization": normalization})
    return stamp(report, timestamps)


# -- comparison -----------------------------------------------------------------------


@dataclass
class EvalSuite:
    perplexity_chunks: Sequence | None = None
    summarization_items: Sequence[SummarizationItem] | None = None
    mc_items: Sequence[MCItem] | None = None
    generation: GenerationParams = field(default_factory=lambda: GenerationParams(max_new_tokens=64))
    normalization: str = "none"

    def metrics(self) -> list[str]:
        out = []
        if self.perplexity_chunks is not None:
            out.append("perplexity")
        if self.summarization_items is not None:
            out.append("rouge")
        if self.mc_items is not None:
            out.append("mc_accuracy")
        return out


_NEEDS_LOGPROBS = {"perplexity", "mc_accuracy"}


def compare_backends(backends: Sequence, suite: EvalSuite, timestamps: bool = True) -> list[EvalReport]:
    """One report per (backend, metric); capability gaps become SKIPPED rows."""
    if len(backends) < 2:
        raise ContractError("compare_backends needs at least two backends")
    reports: list[EvalReport] = []
    for backend in backends:
        for metric in suite.metrics():
            if metric in _NEEDS_LOGPROBS and not backend.supports_logprobs:
                reports.append(stamp(EvalReport(
                    metric, {}, metric, backend.name, 0, status=SKIPPED,
                    detail=f"{backend.kind} backend has no token log-probabilities",
                ), timestamps))
                continue
            try:
                if metric == "perplexity":
                    rep = perplexity(backend, suite.perplexity_chunks, timestamps=timestamps)
                elif metric == "rouge":
                    rep = summarization_eval(backend, suite.summarization_items, suite.generation,
                                             timestamps=timestamps)
                else:
                    rep = mc_accuracy(backend, suite.mc_items, suite.normalization, timestamps=timestamps)
            except Exception as exc:  # recorded, not fatal
                rep = stamp(EvalReport(metric, {}, metric, backend.name, 0, status=ERROR,
                                       detail=f"{type(exc).__name__}: {exc}"), timestamps)
            reports.append(rep)
    return reports


# -- output ----------------------------------------------------------------------------


def write_reports(reports: Sequence[EvalReport], path: str | Path, config: dict | None = None) -> None:
    payload = {"config": config or {}, "reports": [r.to_dict() for r in reports]}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def format_table(reports: Sequence[EvalReport]) -> str:
    rows = [("backend", "metric", "status", "values")]
    for r in reports:
        shown = ", ".join(
            f"{k}={_fmt(v)}" for k, v in r.values.items() if isinstance(v, (int, float)) or v is None
        )
        rows.append((r.backend_id, r.metric, r.status, shown or r.detail))
    widths = [max(len(row[i]) for row in rows) for i in range(3)]
    lines = []
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row[:3], widths)) + "  " + row[3])
    return "\n".join(lines)
