"""Byte-level tokenizer: 256 raw byte values plus a few special slots."""

from __future__ import annotations

PAD = 256
BOS = 257
EOS = 258
REC = 259

VOCAB_SIZE = 260

#: Fixed sentinel sequence prepended when decoding text back out of a memory vector.
RECON_PROMPT = (REC, REC, REC, REC)


class ByteTokenizer:
    """Deterministic tokenizer over UTF-8 bytes. No vocab files, no ambiguity."""

    vocab_size = VOCAB_SIZE

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids) -> str:
        raw = bytes(i for i in ids if 0 <= i < 256)
        return raw.decode("utf-8", errors="replace")

    def token_len(self, text: str) -> int:
        return len(text.encode("utf-8"))

    def split_windows(self, text: str, max_tokens: int) -> list[str]:
        """Greedy fixed-size token windows, no overlap.

        Window boundaries never split a multi-byte UTF-8 character, so the
        concatenation of the returned chunks equals the input exactly and each
        chunk encodes to at most ``max_tokens`` tokens.
        """
        if max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        data = text.encode("utf-8")
        chunks: list[str] = []
        i = 0
        while i < len(data):
            j = min(i + max_tokens, len(data))
            # back off to a character boundary (0b10xxxxxx marks continuations)
            while j < len(data) and j > i and (data[j] & 0xC0) == 0x80:
                j -= 1
            if j == i:  # single char wider than the window; keep it whole
                j = i + 1
                while j < len(data) and (data[j] & 0xC0) == 0x80:
                    j += 1
            chunks.append(data[i:j].decode("utf-8"))
            i = j
        return chunks
