import json
import math

import numpy as np
import pytest

from httpstub import Stub
from desklm.errors import ContextOverflowError, ContractError, RemoteError, UnsupportedCapabilityError, ValidationError
from desklm.evalharness import (
    EvalSuite,
    LocalBackend,
    MCItem,
    RemoteChatBackend,
    SummarizationItem,
    UniformBackend,
    argmax_first,
    compare_backends,
    format_table,
    mc_accuracy,
    perplexity,
    read_mc_items,
    read_summarization_items,
    summarization_eval,
    token_nlls,
    write_reports,
)
from desklm.evalharness.harness import build_prompt, choice_scores
from desklm.evalharness.rouge import rouge_l, rouge_n
from desklm.model import GenerationParams, forward
from desklm.training import TrainConfig, train_lm


class GoldStub:
    """Scores the gold continuation of each question above everything else."""

    kind = "local"
    supports_logprobs = True
    name = "gold"

    def __init__(self, items):
        self.gold = {f"{it.question} ": it.choices[it.gold] for it in items}

    def continuation_logprob(self, context, continuation):
        n = len(continuation.encode())
        return (0.0 if self.gold[context] == continuation else -5.0 * n), n


class ShiftedBackend:
    """Wraps a backend and adds a constant to every choice total."""

    kind = "local"
    supports_logprobs = True
    name = "shifted"

    def __init__(self, inner, shift):
        self.inner, self.shift = inner, shift

    def continuation_logprob(self, context, continuation):
        total, n = self.inner.continuation_logprob(context, continuation)
        return total + self.shift, n


def _mc_items(rng, n=12):
    items = []
    for i in range(n):
        k = int(rng.integers(2, 5))
        choices = tuple(f"answer {i}-{j}" + "x" * int(rng.integers(0, 4)) for j in range(k))
        items.append(MCItem(f"q{i}", f"Question {i}?", choices, int(rng.integers(0, k))))
    return items


# -- perplexity ---------------------------------------------------------------------


def test_uniform_perplexity(rng):
    chunks = [rng.integers(3, 259, size=64) for _ in range(3)]
    rep = perplexity(UniformBackend(), chunks, timestamps=False)
    assert rep.values["perplexity"] == pytest.approx(259, abs=1e-3)
    assert rep.values["tokens"] == 3 * 63
    assert abs(rep.values["perplexity"] - math.exp(rep.values["mean_nll"])) <= 1e-9
    assert rep.timestamp is None and rep.sample_count == 3


def test_perplexity_brute_force(tiny_model, rng):
    chunks = [rng.integers(3, 259, size=int(rng.integers(2, 30))) for _ in range(4)]
    nlls = []
    for c in chunks:
        logits = forward(tiny_model, c).data.astype(np.float64)
        for i in range(c.size - 1):
            row = logits[i]
            nlls.append(math.log(np.exp(row - row.max()).sum()) + row.max() - row[c[i + 1]])
    rep = perplexity(LocalBackend(tiny_model), chunks)
    assert rep.values["perplexity"] == pytest.approx(math.exp(sum(nlls) / len(nlls)), abs=1e-6)
    # corpus-level mean, not a mean of per-chunk perplexities
    per_chunk = [perplexity(LocalBackend(tiny_model), [c]).values["perplexity"] for c in chunks]
    assert rep.values["perplexity"] != pytest.approx(np.mean(per_chunk), abs=1e-6)


def test_memorised_chunk_perplexity_near_one(tiny_model):
    ids = np.array([5, 6, 7, 8] * 8)
    train_lm(tiny_model, None, [ids], TrainConfig(epochs=200, lr=1e-2, weight_decay=0.0, stop_loss=0.01))
    assert perplexity(LocalBackend(tiny_model), [ids]).values["perplexity"] < 1.05


def test_perplexity_refuses_remote():
    with pytest.raises(UnsupportedCapabilityError):
        perplexity(RemoteChatBackend("http://127.0.0.1:9", "m"), [[1, 2, 3]])
    with pytest.raises(ContractError):
        perplexity(UniformBackend(), [])


def test_token_nlls_uniform():
    assert token_nlls(UniformBackend(vocab_size=10), [[1, 2, 3]]) == pytest.approx([math.log(10)] * 2)


# -- summarization --------------------------------------------------------------------


def test_summaries_equal_references():
    items = [SummarizationItem(f"s{i}", "long text", ref, candidate=ref)
             for i, ref in enumerate(["rates rise", "oil falls on supply", "stocks flat"])]
    rep = summarization_eval(None, items)
    assert rep.values["rouge1"] == rep.values["rouge2"] == rep.values["rougeL"] == 1.0
    assert rep.values["completed"] == 3


def test_summary_means_match_per_item():
    pairs = [("the fed held rates", "the fed held rates steady"), ("oil up", "crude oil rose sharply"),
             ("a b c d", "a c d"), ("nothing", "else")]
    items = [SummarizationItem(str(i), "", r, candidate=c) for i, (c, r) in enumerate(pairs)]
    rep = summarization_eval(None, items, workers=3)
    for key, fn in (("rouge1", lambda c, r: rouge_n(c, r, 1)), ("rouge2", lambda c, r: rouge_n(c, r, 2)),
                    ("rougeL", rouge_l)):
        expected = sum(fn(c, r)["f1"] for c, r in pairs) / len(pairs)
        assert abs(rep.values[key] - expected) <= 1e-9


def test_summary_empty_items():
    with pytest.raises(ContractError):
        summarization_eval(None, [])


def test_summary_generates_with_local(tiny_model):
    items = [SummarizationItem("a", "market text " * 10, "market", query="Summarise:")]
    rep = summarization_eval(LocalBackend(tiny_model), items, GenerationParams(max_new_tokens=4))
    assert rep.values["completed"] == 1 and rep.status == "OK"


def test_build_prompt_keeps_query_and_tail():
    item = SummarizationItem("a", "0123456789", "r", query="Q?")
    assert build_prompt(item, None) == "Q?\n0123456789"
    assert build_prompt(item, 7) == "Q?\n6789"


def test_readers(tmp_path):
    (tmp_path / "s.jsonl").write_text(json.dumps({"id": 1, "input": "x", "reference": "y"}) + "\n\n")
    assert read_summarization_items(tmp_path / "s.jsonl")[0].query is None
    (tmp_path / "m.jsonl").write_text(json.dumps({"id": "a", "question": "q", "choices": ["x", "y"], "gold": 1}))
    assert read_mc_items(tmp_path / "m.jsonl")[0].gold == 1
    (tmp_path / "bad.jsonl").write_text(json.dumps({"id": "a", "question": "q"}))
    with pytest.raises(ValidationError):
        read_mc_items(tmp_path / "bad.jsonl")
    with pytest.raises(ValidationError):
        MCItem("a", "q", ("x", "y"), 2)


# -- multiple choice --------------------------------------------------------------------


def test_gold_stub_accuracy(rng):
    items = _mc_items(rng)
    rep = mc_accuracy(GoldStub(items), items, timestamps=False)
    assert rep.values["accuracy_none"] == rep.values["accuracy_per_token"] == 1.0


def test_uniform_tie_break(rng):
    items = _mc_items(rng, n=30)
    rep = mc_accuracy(UniformBackend(), items)
    for mode in ("none", "per-token"):
        expected = []
        for it in items:
            # every token has log p = -ln 259 under the stub
            scores = [-len(c.encode()) * math.log(259) for c in it.choices]
            if mode == "per-token":
                scores = [s / len(c.encode()) for s, c in zip(scores, it.choices)]
            best = max(scores)
            expected.append(next(j for j, s in enumerate(scores) if abs(s - best) < 1e-9))
        key = "none" if mode == "none" else "per_token"
        assert rep.values[f"predictions_{key}"] == expected
        hits = sum(p == it.gold for p, it in zip(expected, items)) / len(items)
        assert rep.values[f"accuracy_{key}"] == hits
    assert rep.values["predictions_per_token"] == [0] * len(items)


def test_argmax_shift_invariance(tiny_model, rng):
    items = _mc_items(rng)
    base = mc_accuracy(LocalBackend(tiny_model), items)
    for shift in (-100.0, 3.5, 1e4):
        shifted = mc_accuracy(ShiftedBackend(LocalBackend(tiny_model), shift), items)
        assert shifted.values["predictions_none"] == base.values["predictions_none"]


def test_argmax_first():
    assert argmax_first([1.0, 3.0, 3.0]) == 1
    assert argmax_first([-2.0, -2.0]) == 0


def test_choice_scores_match_direct(tiny_model):
    be = LocalBackend(tiny_model)
    item = MCItem("x", "Up?", ("yes", "no way"), 0)
    raw, norm = choice_scores(be, item)
    ids = be.tokenizer.encode("Up? no way")
    lp = be.log_probs(ids)
    direct = sum(lp[i - 1, ids[i]] for i in range(4, len(ids)))
    assert raw[1] == pytest.approx(direct, abs=1e-9)
    assert norm[1] == pytest.approx(direct / 6, abs=1e-9)


def test_continuation_too_long(tiny_model):
    with pytest.raises(ContextOverflowError):
        LocalBackend(tiny_model).continuation_logprob("q", "z" * 40)


def test_mc_refuses_remote():
    with pytest.raises(UnsupportedCapabilityError):
        mc_accuracy(RemoteChatBackend("http://127.0.0.1:9", "m"), [MCItem("a", "q", ("x", "y"), 0)])


# -- remote chat ---------------------------------------------------------------------------


def test_remote_chat_wire_format(monkeypatch):
    monkeypatch.setenv("CHAT_API_TOKEN", "tok")

    def handler(method, path, q, body):
        return 200, {"choices": [{"message": {"role": "assistant", "content": "echo " + body["messages"][-1]["content"]}}]}

    with Stub(handler) as stub:
        be = RemoteChatBackend(stub.url + "/v1/chat", "desk-ft", system_prompt="analyst")
        assert be.generate("hi", GenerationParams()) == "echo hi"
        method, path, _, body, headers = stub.requests[0]
    assert (method, path) == ("POST", "/v1/chat")
    assert body == {"model": "desk-ft", "temperature": 0.0, "messages": [
        {"role": "system", "content": "analyst"}, {"role": "user", "content": "hi"}]}
    assert headers["Authorization"] == "Bearer tok"


def test_remote_failures_recorded_per_item():
    calls = []

    def handler(*a):
        calls.append(1)
        return 503, {}

    with Stub(handler) as stub:
        be = RemoteChatBackend(stub.url, "m", backoff=0.0, max_retries=2)
        with pytest.raises(RemoteError):
            be.chat([{"role": "user", "content": "x"}])
        assert len(calls) == 3
        rep = summarization_eval(be, [SummarizationItem("a", "t", "r"), SummarizationItem("b", "t", "r", candidate="r")])
    assert rep.values["completed"] == 1 and rep.values["failed"] == 1
    assert "a" in rep.values["failures"]


# -- comparison ----------------------------------------------------------------------------


def test_compare_local_and_remote(tiny_model, tmp_path, rng):
    suite = EvalSuite(
        perplexity_chunks=[rng.integers(3, 259, size=16)],
        summarization_items=[SummarizationItem("a", "x", "y", candidate="y")],
        mc_items=[MCItem("a", "q", ("x", "y"), 0)],
    )
    with Stub(lambda *a: (200, {"choices": [{"message": {"content": "y"}}]})) as stub:
        backends = [LocalBackend(tiny_model, name="a"), LocalBackend(tiny_model.copy(), name="b"),
                    RemoteChatBackend(stub.url, "r")]
        reports = compare_backends(backends, suite, timestamps=False)
    assert len(reports) == 3 * 3
    status = {(r.backend_id, r.metric): r.status for r in reports}
    assert status[("r", "perplexity")] == status[("r", "mc_accuracy")] == "SKIPPED"
    assert status[("r", "rouge")] == "OK"
    a = {r.metric: r.values for r in reports if r.backend_id == "a"}
    b = {r.metric: r.values for r in reports if r.backend_id == "b"}
    assert a == b
    write_reports(reports, tmp_path / "r.json", {"seed": 0})
    payload = json.loads((tmp_path / "r.json").read_text())
    assert len(payload["reports"]) == 9
    assert "SKIPPED" in format_table(reports)


def test_compare_needs_two():
    with pytest.raises(ContractError):
        compare_backends([UniformBackend()], EvalSuite())
