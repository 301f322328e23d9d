# %% [markdown]
# # Headlines to return buckets, then a regression head
# Joins fixture headlines to next-day returns, prints the buckets and
# fits a small adapter + head to them.

# %%
from pathlib import Path

from desklm.labels import bucket_of, build_labeled_dataset, read_headlines_csv
from desklm.lora import attach_adapters
from desklm.model import TransformerConfig, init_model
from desklm.prices import CsvPriceSource
from desklm.training import RegressionHead, TrainConfig, classification_metrics, predict_bucket, train_classifier

FIX = Path(__file__).resolve().parent.parent / "tests" / "fixtures"

# %%
for pct in (-7.0, -0.3, 0.0, 2.5, 9.9):
    print(f"{pct:+.1f}% ->", bucket_of(pct).label)

# %%
rows, skipped = build_labeled_dataset(read_headlines_csv(FIX / "headlines.csv"), CsvPriceSource(FIX / "prices.csv"))
for r in rows:
    print(f"{r.bucket.label:>4}  {r.return_pct:+6.2f}%  {r.headline.text}")
print("skipped:", skipped.counts)

# %%
w = init_model(TransformerConfig(seed=1))
ads = attach_adapters(w, seed=1)
head = RegressionHead.create(w.config.model_dim, seed=1)
train_classifier(w, ads, head, rows, TrainConfig(epochs=60, lr=3e-3, weight_decay=0.0))
print(classification_metrics(w, ads, head, rows))
print(predict_bucket(w, ads, head, rows[0].headline.text))
