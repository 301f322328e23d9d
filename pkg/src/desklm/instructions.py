"""Q&A instruction sets -> chat-format JSON-lines for hosted fine-tuning.

Each output line is ``{"messages": [system, user, assistant]}``.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ValidationError

DEFAULT_SYSTEM_PROMPT = (
    "investment research analyst chatbot that provides fundamental analysis "
    "of macro, market, sector, and equity."
)
CATEGORIES = ("philosophy", "methodology", "facts")
MIN_EXAMPLES = 10


@dataclass(frozen=True)
class InstructionItem:
    category: str
    question: str
    answer: str
    system: str | None = None
    line: int | None = None  # position in the source file, for error messages

    def problems(self) -> list[str]:
        out = []
        if self.category not in CATEGORIES:
            out.append(f"unknown category {self.category!r}")
        if not self.question.strip():
            out.append("empty question")
        if not self.answer.strip():
            out.append("empty answer")
        if self.system is not None and not self.system.strip():
            out.append("empty system prompt")
        return out


@dataclass
class BuildSummary:
    written: int
    per_category: dict[str, int]
    rejected: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def read_instruction_items(path: str | Path) -> list[InstructionItem]:
    """CSV or JSON-lines with ``category,question,answer[,system]``."""
    path = Path(path)
    items = []
    if path.suffix.lower() in (".jsonl", ".json"):
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValidationError(f"line {n}: invalid JSON ({exc})") from exc
                items.append(_item(rec, n))
    else:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for n, rec in enumerate(reader, start=2):
                items.append(_item(rec, n))
    return items


def _item(rec: dict, line: int) -> InstructionItem:
    system = rec.get("system")
    return InstructionItem(
        str(rec.get("category") or "").strip().lower(),
        str(rec.get("question") or ""),
        str(rec.get("answer") or ""),
        system if system not in (None, "") else None,
        line,
    )


def to_chat_example(item: InstructionItem, system_prompt: str = DEFAULT_SYSTEM_PROMPT) -> dict:
    return {
        "messages": [
            {"role": "system", "content": item.system or system_prompt},
            {"role": "user", "content": item.question},
            {"role": "assistant", "content": item.answer},
        ]
    }


def build_jsonl(
    items: Sequence[InstructionItem],
    output_path: str | Path,
    system_prompt: str = DEFAULT_SYSTEM_PROMPT,
    strict: bool = True,
) -> BuildSummary:
    """Write one chat example per valid item.

    With ``strict`` any invalid item raises before anything is written;
    otherwise invalid items are listed in ``summary.rejected``.
    """
    if not items:
        raise ValidationError("no instruction items given")
    accepted, rejected = [], []
    for pos, item in enumerate(items, start=1):
        issues = item.problems()
        if issues:
            where = f"line {item.line}" if item.line is not None else f"item {pos}"
            rejected.append(f"{where}: {'; '.join(issues)}")
        else:
            accepted.append(item)
    if rejected and strict:
        raise ValidationError(f"{len(rejected)} invalid instruction items", rejected)
    lines = [json.dumps(to_chat_example(it, system_prompt), ensure_ascii=False) for it in accepted]
    with open(output_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(line + "\n" for line in lines))
    counts = Counter(it.category for it in accepted)
    summary = BuildSummary(len(accepted), {c: counts.get(c, 0) for c in CATEGORIES}, rejected)
    if len(accepted) < MIN_EXAMPLES:
        summary.warnings.append(
            f"only {len(accepted)} examples; most fine-tuning services require at least {MIN_EXAMPLES}"
        )
    return summary


@dataclass
class ValidationReport:
    lines: int
    violations: list[tuple[int, str]]

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def exit_status(self) -> int:
        return 0 if self.ok else 1


_ROLE_ORDER_ERR = "roles must be system, then alternating user/assistant, ending with assistant"


def _check_messages(messages) -> list[str]:
    if not isinstance(messages, list) or not messages:
        return ["'messages' must be a non-empty list"]
    out = []
    roles = []
    for m in messages:
        if not isinstance(m, dict) or set(m) - {"role", "content"} or "role" not in m:
            out.append("each message needs exactly 'role' and 'content'")
            return out
        roles.append(m["role"])
        content = m.get("content")
        if not isinstance(content, str) or not content.strip():
            out.append(f"empty content in {m['role']!r} message")
    expected_tail = ["user", "assistant"] * ((len(roles) - 1) // 2)
    if roles[0] != "system" or roles[1:] != expected_tail or len(roles) < 3 or len(roles) % 2 == 0:
        out.append(f"{_ROLE_ORDER_ERR}; got {roles}")
    return out


def validate_bytes(data: bytes) -> ValidationReport:
    violations: list[tuple[int, str]] = []
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        line = data[: exc.start].count(b"\n") + 1
        return ValidationReport(line, [(line, f"invalid UTF-8 at byte {exc.start}")])
    if "\r" in text:
        violations.append((text[: text.index("\r")].count("\n") + 1, "CR line ending"))
    body = text[:-1] if text.endswith("\n") else text
    lines = body.split("\n") if body else []
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            violations.append((n, "blank line"))
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            violations.append((n, f"malformed JSON: {exc.msg}"))
            continue
        if not isinstance(rec, dict) or "messages" not in rec:
            violations.append((n, "missing 'messages'"))
            continue
        violations.extend((n, msg) for msg in _check_messages(rec["messages"]))
    if not lines:
        violations.append((0, "file contains no examples"))
    return ValidationReport(len(lines), violations)


def validate_jsonl(path: str | Path) -> ValidationReport:
    return validate_bytes(Path(path).read_bytes())
