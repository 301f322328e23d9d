# %% [markdown]
# # Chat JSONL and the command line
# Builds the hosted fine-tuning file from the fixture Q&A set, validates it
# and drives the same steps through ``desklm.cli.dispatch``.

# %%
import tempfile
from pathlib import Path

from desklm.cli import dispatch
from desklm.instructions import build_jsonl, read_instruction_items, validate_jsonl

FIX = Path(__file__).resolve().parent.parent / "tests" / "fixtures"
out = Path(tempfile.mkdtemp())

# %%
items = read_instruction_items(FIX / "instructions.csv")
summary = build_jsonl(items, out / "chat.jsonl")
print(summary.written, summary.per_category)
print("valid:", validate_jsonl(out / "chat.jsonl").ok)

# %%
dispatch(["validate-instructions", str(out / "chat.jsonl")])
dispatch(["train-lm", "--seed", "7", "--corpus-dir", str(FIX / "corpus"), "--out-dir", str(out / "run"),
          "--epochs", "1", "--no-timestamps"])
print(sorted(p.name for p in (out / "run").iterdir()))
