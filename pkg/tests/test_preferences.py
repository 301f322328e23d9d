import pytest

from desklm.errors import ValidationError
from desklm.evalharness.preferences import (
    PreferenceVote,
    aggregate_preferences,
    format_scores,
    read_votes_csv,
)

MODELS = ["gpt4", "desk-ft", "base"]
QUESTIONS = [f"q{i}" for i in range(1, 8)]


def _grid(choose):
    return [PreferenceVote(f"e{e}", q, choose(e, q)) for e in range(8) for q in QUESTIONS]


def test_all_one_model():
    res = aggregate_preferences(_grid(lambda e, q: "gpt4"), MODELS, QUESTIONS)
    assert res["scores"] == {"gpt4": 56, "desk-ft": 0, "base": 0}
    assert res["abstentions"] == 0 and res["total_votes"] == 56


def test_all_none():
    res = aggregate_preferences(_grid(lambda e, q: None), MODELS, QUESTIONS)
    assert res["scores"] == {m: 0 for m in MODELS}
    assert res["abstentions"] == 56


def test_random_fixture_recount(rng):
    options = MODELS + [None]
    for _ in range(20):
        votes = _grid(lambda e, q: options[int(rng.integers(0, 4))])
        res = aggregate_preferences(votes, MODELS, QUESTIONS)
        tally = {m: 0 for m in MODELS}
        none = 0
        for v in votes:
            if v.model is None:
                none += 1
            else:
                tally[v.model] += 1
        assert res["scores"] == tally
        assert res["abstentions"] == none
        assert sum(res["scores"].values()) + res["abstentions"] == len(votes)
        for q in QUESTIONS:
            assert sum(res["per_question"][q].values()) == sum(v.question == q and v.model is not None for v in votes)


def test_duplicate_and_unknown_rows():
    votes = [PreferenceVote("e1", "q1", "gpt4"), PreferenceVote("e1", "q1", "base"),
             PreferenceVote("e2", "q1", "llama"), PreferenceVote("e3", "q99", None)]
    with pytest.raises(ValidationError) as info:
        aggregate_preferences(votes, MODELS, QUESTIONS)
    text = " ".join(info.value.problems)
    assert "row 2" in text and "row 3" in text and "row 4" in text


def test_csv(tmp_path):
    p = tmp_path / "v.csv"
    p.write_text("evaluator_id,question_id,model_id\ne1,q1,gpt4\ne1,q2,\n")
    votes = read_votes_csv(p)
    assert votes == [PreferenceVote("e1", "q1", "gpt4"), PreferenceVote("e1", "q2", None)]
    table = format_scores(aggregate_preferences(votes, MODELS))
    assert table.splitlines()[1].split() == ["gpt4", "1"]
    p.write_text("who,question_id,model_id\n")
    with pytest.raises(ValidationError):
        read_votes_csv(p)
