"""Article loading, fixed-length chunking and train/test splitting.

The pipeline: load every ``.txt`` file under a directory, join the tokenized
articles with an end-of-sequence id after each one, and cut the stream into
consecutive non-overlapping chunks (the trailing partial chunk is dropped).
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CorpusError
from .tokenizer import EOS_ID, ByteTokenizer

log = logging.getLogger(__name__)

DEFAULT_CHUNK_LEN = 512


@dataclass(frozen=True)
class Article:
    source_id: str
    text: str
    date: dt.date | None = None

    def __post_init__(self):
        if not " ".join(self.text.split()):
            raise CorpusError(f"article {self.source_id!r} is empty after whitespace normalisation")


@dataclass(frozen=True)
class TokenChunk:
    ids: np.ndarray
    sources: tuple[str, ...] = field(default=())

    def __len__(self) -> int:
        return int(self.ids.size)


def read_manifest(path: str | Path) -> dict[str, dt.date]:
    """Sidecar CSV with columns ``path,date``; paths relative to the corpus root."""
    dates: dict[str, dt.date] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            dates[Path(row["path"]).as_posix()] = dt.date.fromisoformat(row["date"].strip())
    return dates


def load_corpus(directory: str | Path, manifest: str | Path | None = None) -> list[Article]:
    root = Path(directory)
    if not root.is_dir():
        raise CorpusError(f"corpus directory {root} does not exist")
    dates = read_manifest(manifest) if manifest else {}
    files = sorted(root.rglob("*.txt"), key=lambda p: p.relative_to(root).as_posix())
    articles: list[Article] = []
    seen: set[bytes] = set()
    for path in files:
        rel = path.relative_to(root).as_posix()
        try:
            raw = path.read_bytes()
            text = raw.decode("utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            log.warning("skipping unreadable file %s: %s", rel, exc)
            continue
        if raw in seen:
            log.info("dropping %s: exact duplicate of an earlier article", rel)
            continue
        if not text.strip():
            log.warning("skipping empty file %s", rel)
            continue
        seen.add(raw)
        articles.append(Article(rel, text, dates.get(rel)))
    if not articles:
        raise CorpusError(f"no usable .txt articles under {root}")
    return articles


def token_stream(articles: Sequence[Article], tokenizer: ByteTokenizer | None = None) -> tuple[np.ndarray, list[str]]:
    """Concatenated ids (eos after every article) plus a per-token source id list."""
    tok = tokenizer or ByteTokenizer()
    ids: list[int] = []
    owners: list[str] = []
    for art in articles:
        piece = tok.encode(art.text) + [EOS_ID]
        ids.extend(piece)
        owners.extend([art.source_id] * len(piece))
    return np.asarray(ids, dtype=np.int64), owners


def build_chunks(
    articles: Sequence[Article],
    tokenizer: ByteTokenizer | None = None,
    chunk_len: int = DEFAULT_CHUNK_LEN,
) -> list[TokenChunk]:
    if chunk_len < 2:
        raise CorpusError("chunk_len must be at least 2")
    stream, owners = token_stream(articles, tokenizer)
    if stream.size < chunk_len:
        raise CorpusError(
            f"corpus has {stream.size} tokens; at least {chunk_len} are needed for one chunk"
        )
    chunks = []
    for start in range(0, stream.size - chunk_len + 1, chunk_len):
        span = owners[start : start + chunk_len]
        sources = tuple(dict.fromkeys(span))
        chunks.append(TokenChunk(stream[start : start + chunk_len].copy(), sources))
    return chunks


def _hash_key(source_id: str) -> str:
    return hashlib.sha256(source_id.encode("utf-8")).hexdigest()


def split_corpus(
    articles: Sequence[Article],
    test_fraction: float | None = None,
    cutoff_date: dt.date | str | None = None,
) -> tuple[list[Article], list[Article]]:
    """Disjoint (train, test) partition.

    Date mode sends articles dated on or after ``cutoff_date`` to test.
    Fraction mode ranks articles by a hash of their source id and sends the
    first ``round(n * test_fraction)`` to test. Input order is kept in both.
    """
    if (test_fraction is None) == (cutoff_date is None):
        raise CorpusError("give exactly one of test_fraction or cutoff_date")
    if cutoff_date is not None:
        if isinstance(cutoff_date, str):
            cutoff_date = dt.date.fromisoformat(cutoff_date)
        undated = [a.source_id for a in articles if a.date is None]
        if undated:
            raise CorpusError(f"date split needs dates for: {', '.join(undated)}")
        test_ids = {a.source_id for a in articles if a.date >= cutoff_date}
    else:
        if not 0.0 < test_fraction < 1.0:
            raise CorpusError("test_fraction must lie strictly between 0 and 1")
        n_test = int(round(len(articles) * test_fraction))
        ranked = sorted(articles, key=lambda a: (_hash_key(a.source_id), a.source_id))
        test_ids = {a.source_id for a in ranked[:n_test]}
    train = [a for a in articles if a.source_id not in test_ids]
    test = [a for a in articles if a.source_id in test_ids]
    if not train:
        raise CorpusError("split leaves the training set empty")
    return train, test


def save_chunks(chunks: Sequence[TokenChunk], path: str | Path) -> None:
    """Write chunks as an (n x chunk_len) int32 ``.npy`` array."""
    arr = np.stack([c.ids for c in chunks]).astype(np.int32) if chunks else np.zeros((0, 0), np.int32)
    with open(path, "wb") as fh:
        np.save(fh, arr, allow_pickle=False)


def load_chunks(path: str | Path) -> list[TokenChunk]:
    arr = np.load(path, allow_pickle=False)
    return [TokenChunk(row.astype(np.int64)) for row in arr]
