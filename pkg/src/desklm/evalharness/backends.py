"""Model backends the harness can evaluate.

Local backends expose token log-probabilities and generation. Remote chat
backends only generate text, so probability-based metrics refuse them.
"""

from __future__ import annotations

import logging
import os
import time
from pathlib import Path
from typing import Sequence

import numpy as np
import requests

from ..errors import ContextOverflowError, RemoteError
from ..lora import load_adapters
from ..model import GenerationParams, TransformerWeights, forward, generate_ids, load_checkpoint
from ..tensor import log_softmax_np
from ..tokenizer import BOS_ID, ByteTokenizer

log = logging.getLogger(__name__)


class LocalBackend:
    kind = "local"
    supports_logprobs = True

    def __init__(self, weights: TransformerWeights, adapters=None, name: str = "local"):
        self.weights = weights
        self.adapters = adapters
        self.name = name
        self.tokenizer = ByteTokenizer()

    @classmethod
    def from_files(cls, checkpoint: str | Path, adapters: str | Path | None = None, name: str | None = None):
        weights = load_checkpoint(checkpoint)
        ads = load_adapters(adapters) if adapters else None
        return cls(weights, ads, name or Path(checkpoint).stem)

    @property
    def context_length(self) -> int:
        return self.weights.config.context_length

    @property
    def vocab_size(self) -> int:
        return self.weights.config.vocab_size

    def logits(self, ids: Sequence[int]) -> np.ndarray:
        return forward(self.weights, ids, self.adapters).data

    def log_probs(self, ids: Sequence[int]) -> np.ndarray:
        """(t x V) float64 log-softmax of the logits at every position."""
        return log_softmax_np(np.asarray(self.logits(ids), dtype=np.float64))

    def continuation_logprob(self, context: str, continuation: str) -> tuple[float, int]:
        """Sum of log p over the continuation's tokens, and their count.

        The context is cut from the left when the pair exceeds the window.
        """
        ctx = self.tokenizer.encode(context) or [BOS_ID]
        cont = self.tokenizer.encode(continuation)
        if not cont:
            return 0.0, 0
        room = self.context_length - len(cont)
        if room < 1:
            raise ContextOverflowError("continuation does not fit in the context window")
        ctx = ctx[-room:]
        ids = ctx + cont
        lp = self.log_probs(ids)
        positions = np.arange(len(ctx), len(ids))
        return float(lp[positions - 1, np.asarray(ids)[positions]].sum()), len(cont)

    def generate(self, prompt: str, params: GenerationParams) -> str:
        ids = self.tokenizer.encode(prompt)[-(self.context_length - 1):]
        return self.tokenizer.decode(generate_ids(self.weights, ids, params, self.adapters))


class UniformBackend(LocalBackend):
    """All-zero logits: every token has probability 1/V."""

    def __init__(self, vocab_size: int = 259, context_length: int = 512, name: str = "uniform"):
        self.name = name
        self.adapters = None
        self.tokenizer = ByteTokenizer()
        self._vocab = vocab_size
        self._context = context_length

    @property
    def context_length(self) -> int:
        return self._context

    @property
    def vocab_size(self) -> int:
        return self._vocab

    def logits(self, ids):
        return np.zeros((len(ids), self._vocab), dtype=np.float32)

    def generate(self, prompt, params):
        return ""


class RemoteChatBackend:
    """Chat-completion endpoint: POST {model, messages, temperature}.

    The bearer token is read from the environment variable ``token_env``.
    """

    kind = "remote-chat"
    supports_logprobs = False

    def __init__(
        self,
        url: str,
        model: str,
        token_env: str = "CHAT_API_TOKEN",
        timeout: float = 30.0,
        max_retries: int = 3,
        backoff: float = 0.5,
        name: str | None = None,
        system_prompt: str | None = None,
    ):
        self.url = url
        self.model = model
        self.token_env = token_env
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.name = name or model
        self.system_prompt = system_prompt
        self.session = requests.Session()

    context_length = None

    def chat(self, messages: list[dict], temperature: float = 0.0) -> str:
        token = os.environ.get(self.token_env)
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        payload = {"model": self.model, "messages": messages, "temperature": temperature}
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.session.post(self.url, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last = exc
                log.warning("chat request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code >= 500 or resp.status_code == 429:
                last = RemoteError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise RemoteError(f"chat endpoint returned HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise RemoteError(f"malformed chat response: {exc}") from exc
        raise RemoteError(f"chat endpoint failed after {self.max_retries} retries: {last}")

    def generate(self, prompt: str, params: GenerationParams) -> str:
        messages = []
        if self.system_prompt:
            messages.append({"role": "system", "content": self.system_prompt})
        messages.append({"role": "user", "content": prompt})
        temperature = 0.0 if params.strategy == "greedy" else params.temperature
        return self.chat(messages, temperature)
