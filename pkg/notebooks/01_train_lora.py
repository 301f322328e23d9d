# %% [markdown]
# # Adapter fine-tuning on a tiny corpus
# Loads the test fixture corpus, attaches rank-4 adapters to the query and
# value projections and trains them for a few epochs. Runs in about a minute.

# %%
from pathlib import Path

from desklm.corpus import build_chunks, load_corpus, split_corpus
from desklm.lora import attach_adapters, merge
from desklm.model import GenerationParams, TransformerConfig, generate, init_model
from desklm.training import TrainConfig, mean_chunk_nll, train_lm

FIX = Path(__file__).resolve().parent.parent / "tests" / "fixtures"

# %%
chunks = build_chunks(load_corpus(FIX / "corpus"))
print(len(chunks), "chunks of", chunks[0].ids.size, "tokens")

# %%
base = init_model(TransformerConfig(seed=0))
ads = attach_adapters(base, rank=4, alpha=8.0, seed=0)
print("base nll", round(mean_chunk_nll(base, chunks), 3))
hist = train_lm(base, ads, chunks, TrainConfig(epochs=10, lr=1e-2, seed=0))
print("epoch losses", [round(x, 3) for x in hist.losses])
print("adapted nll", round(mean_chunk_nll(base, chunks, ads), 3))

# %%
# folding the adapters in gives a plain model with the same outputs
merged = merge(base, ads)
print(generate(merged, "Oil ", GenerationParams(max_new_tokens=40)))
