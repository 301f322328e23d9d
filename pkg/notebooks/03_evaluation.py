# %% [markdown]
# # Evaluation harness
# Perplexity, ROUGE, multiple choice and preference tallies against the
# fixture datasets. The uniform backend is the floor every model should beat.

# %%
from pathlib import Path

from desklm.corpus import build_chunks, load_corpus
from desklm.evalharness import (
    EvalSuite,
    LocalBackend,
    UniformBackend,
    aggregate_preferences,
    compare_backends,
    format_table,
    read_mc_items,
    read_summarization_items,
    read_votes_csv,
    rouge_l,
    rouge_n,
)
from desklm.model import GenerationParams, TransformerConfig, init_model

FIX = Path(__file__).resolve().parent.parent / "tests" / "fixtures"

# %%
print(rouge_n("the cat sat", "the cat", 1))
print(rouge_l("a b c d", "a c d"))

# %%
suite = EvalSuite(
    perplexity_chunks=build_chunks(load_corpus(FIX / "heldout")),
    summarization_items=read_summarization_items(FIX / "summarization.jsonl"),
    mc_items=read_mc_items(FIX / "mc.jsonl"),
    generation=GenerationParams(max_new_tokens=16),
)
backends = [UniformBackend(), LocalBackend(init_model(TransformerConfig(seed=0)), name="random-init")]
print(format_table(compare_backends(backends, suite, timestamps=False)))

# %%
votes = read_votes_csv(FIX / "votes.csv")
print(aggregate_preferences(votes, ["gpt4", "desk-ft", "llama-base"]))
