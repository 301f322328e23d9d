"""Daily adjusted-close price sources: CSV fixtures and an HTTP backend."""

from __future__ import annotations

import csv
import datetime as dt
import logging
import os
import time
from collections import defaultdict
from pathlib import Path

import requests

from .errors import PriceSourceError, ValidationError
from .labels import PriceSeries

log = logging.getLogger(__name__)

TOKEN_ENV = "PRICE_API_TOKEN"


class CsvPriceSource:
    """Prices from a CSV with columns ``ticker,date,adj_close``."""

    def __init__(self, path: str | Path):
        rows: dict[str, list[tuple[dt.date, float]]] = defaultdict(list)
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = {"ticker", "date", "adj_close"} - set(reader.fieldnames or [])
            if missing:
                raise ValidationError(f"price CSV lacks columns: {', '.join(sorted(missing))}")
            for row in reader:
                rows[row["ticker"].strip().upper()].append(
                    (dt.date.fromisoformat(row["date"].strip()), float(row["adj_close"]))
                )
        self._series = {t: PriceSeries.from_pairs(t, pairs) for t, pairs in rows.items()}

    def get_series(self, ticker: str, start: dt.date | None = None, end: dt.date | None = None):
        return self._series.get(ticker.upper())


class HttpPriceSource:
    """``GET <base>/daily?ticker=T&start=D1&end=D2`` -> ``[{date, adjClose}, ...]``.

    A 404 or an empty list means the ticker is unknown. Connection errors,
    timeouts and 5xx responses are retried with exponential backoff.
    """

    def __init__(
        self,
        base_url: str,
        token: str | None = None,
        timeout: float = 10.0,
        max_retries: int = 3,
        backoff: float = 0.5,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.token = token if token is not None else os.environ.get(TOKEN_ENV)
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.session = session or requests.Session()

    def _get(self, params: dict) -> requests.Response:
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.session.get(
                    f"{self.base_url}/daily", params=params, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last = exc
                log.warning("price request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code >= 500 or resp.status_code == 429:
                last = PriceSourceError(f"HTTP {resp.status_code}")
                log.warning("price backend returned %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            return resp
        raise PriceSourceError(f"price backend unreachable after {self.max_retries} retries: {last}")

    def get_series(self, ticker: str, start: dt.date, end: dt.date):
        resp = self._get({"ticker": ticker, "start": start.isoformat(), "end": end.isoformat()})
        if resp.status_code == 404:
            return None
        if resp.status_code != 200:
            raise PriceSourceError(f"price backend returned HTTP {resp.status_code} for {ticker}")
        try:
            records = resp.json()
            pairs = [(dt.date.fromisoformat(r["date"][:10]), float(r["adjClose"])) for r in records]
        except (ValueError, KeyError, TypeError) as exc:
            raise PriceSourceError(f"malformed price payload for {ticker}: {exc}") from exc
        if not pairs:
            return None
        return PriceSeries.from_pairs(ticker, pairs)
