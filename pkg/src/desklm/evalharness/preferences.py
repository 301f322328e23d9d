"""Human preference votes: one pick (or none) per evaluator and question."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from ..errors import ValidationError


@dataclass(frozen=True)
class PreferenceVote:
    evaluator: str
    question: str
    model: str | None  # None: no answer was helpful


def read_votes_csv(path: str | Path) -> list[PreferenceVote]:
    """CSV ``evaluator_id,question_id,model_id``; an empty model_id abstains."""
    votes = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"evaluator_id", "question_id", "model_id"} - set(reader.fieldnames or [])
        if missing:
            raise ValidationError(f"votes CSV lacks columns: {', '.join(sorted(missing))}")
        for row in reader:
            model = (row["model_id"] or "").strip() or None
            votes.append(PreferenceVote(row["evaluator_id"].strip(), row["question_id"].strip(), model))
    return votes


def aggregate_preferences(
    votes: Sequence[PreferenceVote],
    models: Sequence[str],
    questions: Sequence[str] | None = None,
) -> dict:
    """Per-model vote counts, a per-question breakdown and the abstention count."""
    known_models = set(models)
    known_questions = set(questions) if questions is not None else None
    problems: list[str] = []
    seen: dict[tuple[str, str], int] = {}
    for row, v in enumerate(votes, start=1):
        if v.model is not None and v.model not in known_models:
            problems.append(f"row {row}: unknown model {v.model!r}")
        if known_questions is not None and v.question not in known_questions:
            problems.append(f"row {row}: unknown question {v.question!r}")
        key = (v.evaluator, v.question)
        if key in seen:
            problems.append(f"row {row}: duplicate vote by {v.evaluator!r} on {v.question!r} (first at row {seen[key]})")
        else:
            seen[key] = row
    if problems:
        raise ValidationError(f"{len(problems)} invalid vote rows", problems)

    scores = Counter({m: 0 for m in models})
    qs = list(questions) if questions is not None else sorted({v.question for v in votes})
    per_question = {q: {m: 0 for m in models} for q in qs}
    abstentions = 0
    for v in votes:
        if v.model is None:
            abstentions += 1
            continue
        scores[v.model] += 1
        per_question[v.question][v.model] += 1
    return {
        "scores": {m: scores[m] for m in models},
        "per_question": per_question,
        "abstentions": abstentions,
        "total_votes": len(votes),
    }


def format_scores(result: dict) -> str:
    width = max([len("model")] + [len(m) for m in result["scores"]])
    lines = [f"{'model'.ljust(width)}  score"]
    lines += [f"{m.ljust(width)}  {s}" for m, s in result["scores"].items()]
    lines.append(f"{'(none)'.ljust(width)}  {result['abstentions']}")
    return "\n".join(lines)
