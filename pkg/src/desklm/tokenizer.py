"""Byte-level tokenizer: one id per UTF-8 byte, offset past three reserved ids."""

from __future__ import annotations

from typing import Iterable

from .errors import EncodingError, VocabularyError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
NUM_RESERVED = 3


class ByteTokenizer:
    """Reversible text <-> id mapping with ``vocab_size == 259``.

    Byte ``b`` maps to id ``b + 3``; ids 0, 1, 2 are pad, begin-of-sequence
    and end-of-sequence and never come out of :meth:`encode`.
    """

    pad_id = PAD_ID
    bos_id = BOS_ID
    eos_id = EOS_ID
    offset = NUM_RESERVED
    vocab_size = 256 + NUM_RESERVED

    def encode(self, text: str | bytes) -> list[int]:
        if isinstance(text, str):
            try:
                raw = text.encode("utf-8")
            except UnicodeEncodeError as exc:
                # lone surrogates; report the offset in the utf-8 prefix
                offset = len(text[: exc.start].encode("utf-8", errors="surrogatepass"))
                raise EncodingError(f"text is not valid UTF-8 at byte offset {offset}", offset) from exc
        else:
            raw = bytes(text)
            try:
                raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise EncodingError(f"invalid UTF-8 at byte offset {exc.start}", exc.start) from exc
        return [b + NUM_RESERVED for b in raw]

    def decode(self, ids: Iterable[int]) -> str:
        """Inverse of :meth:`encode`; reserved ids decode to nothing.

        Byte runs that are not valid UTF-8 (possible for sampled ids) are
        replaced with U+FFFD.
        """
        out = bytearray()
        for i in ids:
            i = int(i)
            if i < 0 or i >= self.vocab_size:
                raise VocabularyError(f"id {i} outside vocabulary of size {self.vocab_size}")
            if i >= NUM_RESERVED:
                out.append(i - NUM_RESERVED)
        return out.decode("utf-8", errors="replace")

    def __len__(self) -> int:
        return self.vocab_size
