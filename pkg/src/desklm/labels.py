"""Headline -> next-day return -> ordinal bucket.

Buckets are half-open intervals in percent:

    D5+ (-inf, -5]   D5 (-5, -4]  ...  D2 (-2, -1]  D1 (-1, 0]
    U1  (0, 1]       U2 (1, 2]    ...  U5 (4, 5]    U5+ (5, inf)

with integer codes -6..-1 and +1..+6. Zero belongs to D1.
"""

from __future__ import annotations

import bisect
import csv
import datetime as dt
import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ContractError, UnlabelableError, ValidationError

MAX_GAP_DAYS = 5
LOOKBACK_DAYS = 31


class ReturnBucket(enum.IntEnum):
    D5_PLUS = -6
    D5 = -5
    D4 = -4
    D3 = -3
    D2 = -2
    D1 = -1
    U1 = 1
    U2 = 2
    U3 = 3
    U4 = 4
    U5 = 5
    U5_PLUS = 6

    @property
    def code(self) -> int:
        return int(self)

    @property
    def label(self) -> str:
        return self.name.replace("_PLUS", "+")

    @classmethod
    def from_label(cls, label: str) -> "ReturnBucket":
        return cls[label.strip().replace("+", "_PLUS")]


def bucket_of(return_pct: float) -> ReturnBucket:
    r = float(return_pct)
    if not math.isfinite(r):
        raise ContractError(f"return must be finite, got {return_pct!r}")
    if r > 0:
        return ReturnBucket(min(math.ceil(r), 6))
    if r <= -5:
        return ReturnBucket.D5_PLUS
    return ReturnBucket(-(math.floor(-r) + 1))


def code_to_bucket(code: int) -> ReturnBucket:
    """Total inverse of ``.code``: clamps to [-6, 6] and sends 0 to D1."""
    code = max(-6, min(6, int(code)))
    return ReturnBucket(code if code != 0 else -1)


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def decode_score(raw: float) -> ReturnBucket:
    """Round a regression output half away from zero, then :func:`code_to_bucket`."""
    return code_to_bucket(round_half_away(raw))


# -- records ----------------------------------------------------------------------


@dataclass(frozen=True)
class Headline:
    text: str
    ticker: str
    date: dt.date

    def __post_init__(self):
        if not self.text.strip() or not self.ticker.strip():
            raise ValidationError("headline text and ticker must be non-empty")


@dataclass(frozen=True)
class PriceSeries:
    ticker: str
    dates: tuple[dt.date, ...]
    closes: tuple[float, ...]

    def __post_init__(self):
        if len(self.dates) != len(self.closes):
            raise ValidationError(f"{self.ticker}: dates and closes differ in length")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise ValidationError(f"{self.ticker}: trading dates must be strictly increasing")
        if any(not (c > 0 and math.isfinite(c)) for c in self.closes):
            raise ValidationError(f"{self.ticker}: adjusted closes must be positive")

    @classmethod
    def from_pairs(cls, ticker: str, pairs: Iterable[tuple[dt.date, float]]) -> "PriceSeries":
        pairs = sorted(pairs)
        return cls(ticker, tuple(d for d, _ in pairs), tuple(float(c) for _, c in pairs))


@dataclass(frozen=True)
class LabeledHeadline:
    headline: Headline
    return_pct: float
    bucket: ReturnBucket


@dataclass
class SkipReport:
    counts: Counter = field(default_factory=Counter)
    rows: list[tuple[int, str]] = field(default_factory=list)

    def add(self, index: int, reason: str) -> None:
        self.counts[reason] += 1
        self.rows.append((index, reason))

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> dict:
        return {"counts": dict(self.counts), "rows": [{"index": i, "reason": r} for i, r in self.rows]}


def next_day_return(series: PriceSeries, date: dt.date) -> float:
    """Percent change from the last close on/before ``date`` to the next close.

    The next close must come within five calendar days.
    """
    if not series.dates:
        raise UnlabelableError("unknown_ticker", f"no prices for {series.ticker}")
    i = bisect.bisect_right(series.dates, date) - 1
    if i < 0:
        raise UnlabelableError("out_of_range", f"{date} precedes the first trading day of {series.ticker}")
    if i + 1 >= len(series.dates):
        raise UnlabelableError("out_of_range", f"no trading day after {series.dates[i]} for {series.ticker}")
    t0, t1 = series.dates[i], series.dates[i + 1]
    if (t1 - t0).days > MAX_GAP_DAYS:
        raise UnlabelableError("price_gap", f"{series.ticker}: {t0} -> {t1} exceeds {MAX_GAP_DAYS} days")
    c0, c1 = series.closes[i], series.closes[i + 1]
    return 100.0 * (c1 - c0) / c0


def build_labeled_dataset(
    headlines: Sequence[Headline], source, workers: int = 1
) -> tuple[list[LabeledHeadline], SkipReport]:
    """Label every headline that can be joined to a next-day return.

    ``source.get_series(ticker, start, end)`` returns a :class:`PriceSeries`
    or ``None`` for an unknown ticker. Output keeps input order.
    """
    windows: dict[str, tuple[dt.date, dt.date]] = {}
    for h in headlines:
        lo, hi = windows.get(h.ticker, (h.date, h.date))
        windows[h.ticker] = (min(lo, h.date), max(hi, h.date))

    def fetch(ticker: str):
        lo, hi = windows[ticker]
        # reach back far enough that a long pre-date gap reads as price_gap
        # rather than out_of_range
        return ticker, source.get_series(
            ticker, lo - dt.timedelta(days=LOOKBACK_DAYS), hi + dt.timedelta(days=MAX_GAP_DAYS + 2)
        )

    tickers = sorted(windows)
    if workers > 1 and len(tickers) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            series = dict(pool.map(fetch, tickers))
    else:
        series = dict(fetch(t) for t in tickers)

    labeled: list[LabeledHeadline] = []
    report = SkipReport()
    for idx, h in enumerate(headlines):
        s = series.get(h.ticker)
        if s is None:
            report.add(idx, "unknown_ticker")
            continue
        try:
            r = next_day_return(s, h.date)
        except UnlabelableError as exc:
            report.add(idx, exc.reason)
            continue
        labeled.append(LabeledHeadline(h, r, bucket_of(r)))
    return labeled, report


# -- files ------------------------------------------------------------------------


def read_headlines_csv(path: str | Path) -> list[Headline]:
    """Headlines CSV with at least ``headline,ticker,date`` columns."""
    out: list[Headline] = []
    problems: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"headline", "ticker", "date"} - set(reader.fieldnames or [])
        if missing:
            raise ValidationError(f"headlines CSV lacks columns: {', '.join(sorted(missing))}")
        for line, row in enumerate(reader, start=2):
            try:
                out.append(
                    Headline(
                        row["headline"].strip(),
                        row["ticker"].strip().upper(),
                        dt.date.fromisoformat(row["date"].strip()[:10]),
                    )
                )
            except (ValueError, AttributeError) as exc:
                problems.append(f"line {line}: {exc}")
    if problems:
        raise ValidationError(f"{len(problems)} invalid headline rows", problems)
    return out


def write_labeled_csv(rows: Sequence[LabeledHeadline], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["headline", "ticker", "date", "return_pct", "label", "code"])
        for r in rows:
            h = r.headline
            w.writerow([h.text, h.ticker, h.date.isoformat(), repr(r.return_pct), r.bucket.label, r.bucket.code])


def read_labeled_csv(path: str | Path) -> list[LabeledHeadline]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            h = Headline(row["headline"], row["ticker"], dt.date.fromisoformat(row["date"]))
            r = float(row["return_pct"])
            out.append(LabeledHeadline(h, r, bucket_of(r)))
    return out

