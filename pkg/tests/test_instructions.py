import json
from pathlib import Path

import pytest

from desklm.errors import ValidationError
from desklm.instructions import (
    DEFAULT_SYSTEM_PROMPT,
    InstructionItem,
    build_jsonl,
    read_instruction_items,
    validate_bytes,
    validate_jsonl,
)

FIXTURE = Path(__file__).parent / "fixtures" / "instructions.csv"


def test_default_system_prompt():
    assert DEFAULT_SYSTEM_PROMPT == (
        "investment research analyst chatbot that provides fundamental analysis of macro, market, sector, and equity."
    )


def test_single_item_round_trip(tmp_path):
    item = InstructionItem("facts", "What is EPS — exactly?", "Earnings per share. 每股收益")
    build_jsonl([item], tmp_path / "o.jsonl")
    raw = (tmp_path / "o.jsonl").read_bytes()
    assert raw.endswith(b"}\n") and b"\r" not in raw and raw.count(b"\n") == 1
    assert json.loads(raw) == {"messages": [
        {"role": "system", "content": DEFAULT_SYSTEM_PROMPT},
        {"role": "user", "content": "What is EPS — exactly?"},
        {"role": "assistant", "content": "Earnings per share. 每股收益"},
    ]}
    assert "每股收益".encode() in raw


def test_thirty_item_fixture(tmp_path):
    items = read_instruction_items(FIXTURE)
    assert len(items) == 30
    summary = build_jsonl(items, tmp_path / "o.jsonl")
    assert summary.per_category == {"philosophy": 10, "methodology": 10, "facts": 10}
    assert summary.written == 30 and not summary.warnings
    report = validate_jsonl(tmp_path / "o.jsonl")
    assert report.ok and report.lines == 30 and report.exit_status == 0


def test_under_minimum_warns(tmp_path):
    items = read_instruction_items(FIXTURE)[:5]
    summary = build_jsonl(items, tmp_path / "o.jsonl")
    assert summary.written == 5 and len(summary.warnings) == 1


def test_per_item_override(tmp_path):
    build_jsonl([InstructionItem("facts", "q", "a", system="custom")], tmp_path / "o.jsonl")
    assert json.loads((tmp_path / "o.jsonl").read_text())["messages"][0]["content"] == "custom"


def test_invalid_items_name_lines(tmp_path):
    p = tmp_path / "in.csv"
    p.write_text("category,question,answer\nfacts,ok?,yes\nfacts,,missing question\nopinion,q,a\n")
    items = read_instruction_items(p)
    with pytest.raises(ValidationError) as info:
        build_jsonl(items, tmp_path / "o.jsonl")
    assert [x.split(":")[0] for x in info.value.problems] == ["line 3", "line 4"]
    assert not (tmp_path / "o.jsonl").exists()
    summary = build_jsonl(items, tmp_path / "o.jsonl", strict=False)
    assert summary.written == 1 and len(summary.rejected) == 2


def test_jsonl_input(tmp_path):
    p = tmp_path / "in.jsonl"
    p.write_text(json.dumps({"category": "Facts", "question": "q", "answer": "a"}) + "\n")
    assert read_instruction_items(p) == [InstructionItem("facts", "q", "a", None, 1)]


def _line(roles, contents=None):
    contents = contents or ["x"] * len(roles)
    return json.dumps({"messages": [{"role": r, "content": c} for r, c in zip(roles, contents)]})


GOOD = _line(["system", "user", "assistant"])


def test_seeded_violations():
    lines = [
        GOOD,
        _line(["user", "system", "assistant"]),      # 2 ordering
        GOOD,
        "",                                           # 4 blank line
        '{"messages": [',                             # 5 malformed
        _line(["system", "user", "assistant"], ["s", " ", "a"]),  # 6 empty content
        json.dumps({"prompt": "x"}),                  # 7 missing messages
        _line(["system", "user"]),                    # 8 does not end with assistant
        _line(["system", "user", "assistant", "user", "assistant"]),  # 9 fine (multi-turn shape)
    ]
    report = validate_bytes(("\n".join(lines) + "\n").encode())
    bad = sorted({n for n, _ in report.violations})
    assert bad == [2, 4, 5, 6, 7, 8]
    assert report.exit_status == 1
    msgs = dict(report.violations)
    assert "roles" in msgs[2] and "blank" in msgs[4] and "JSON" in msgs[5]


def test_crlf_and_bad_utf8():
    rep = validate_bytes((GOOD + "\r\n" + GOOD + "\n").encode())
    assert (1, "CR line ending") in rep.violations
    rep = validate_bytes(GOOD.encode() + b"\n" + b'{"messages": "\xff"}\n')
    assert rep.violations[0][0] == 2 and "UTF-8" in rep.violations[0][1]


def test_validator_is_pure(tmp_path):
    data = (GOOD + "\n\n").encode()
    (tmp_path / "f.jsonl").write_bytes(data)
    assert validate_jsonl(tmp_path / "f.jsonl").violations == validate_bytes(data).violations
    assert validate_bytes(b"").violations
