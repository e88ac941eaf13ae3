"""Corpus handling: byte-level tokenization, calibration sampling, splits."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

#: byte-identity vocabulary plus one reserved special token
N_BYTES = 256
RESERVED = 256
VOCAB_SIZE = 257


def tokenize(raw) -> np.ndarray:
    """Map bytes to token ids (identity); str is UTF-8 encoded first."""
    if isinstance(raw, str):
        raw = raw.encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def detokenize(ids: np.ndarray) -> bytes:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= N_BYTES):
        raise ValueError("detokenize: id outside byte range")
    return ids.astype(np.uint8).tobytes()


class Corpus:
    """Raw byte corpus with a train/holdout split (disjoint byte ranges)."""

    def __init__(self, raw: bytes, holdout_frac: float = 0.1):
        if not raw:
            raise ValueError("corpus is empty")
        if not 0.0 < holdout_frac < 1.0:
            raise ValueError("holdout_frac must be in (0, 1)")
        self.raw = raw
        self.split = int(len(raw) * (1.0 - holdout_frac))
        if self.split <= 0 or self.split >= len(raw):
            raise ValueError("corpus too small for the requested split")
        self._train_tokens: np.ndarray | None = None
        self._holdout_tokens: np.ndarray | None = None

    @classmethod
    def from_file(cls, path: str | os.PathLike, holdout_frac: float = 0.1) -> "Corpus":
        with open(path, "rb") as f:
            return cls(f.read(), holdout_frac=holdout_frac)

    @property
    def train_bytes(self) -> bytes:
        return self.raw[: self.split]

    @property
    def holdout_bytes(self) -> bytes:
        return self.raw[self.split:]

    @property
    def train_tokens(self) -> np.ndarray:
        if self._train_tokens is None:
            self._train_tokens = tokenize(self.train_bytes)
        return self._train_tokens

    @property
    def holdout_tokens(self) -> np.ndarray:
        if self._holdout_tokens is None:
            self._holdout_tokens = tokenize(self.holdout_bytes)
        return self._holdout_tokens


@dataclass
class CalibrationSet:
    n_samples: int
    seq_len: int
    seed: int
    tokens: np.ndarray  # [n_samples, seq_len] int64

    @property
    def total_tokens(self) -> int:
        return self.n_samples * self.seq_len


def sample_calibration(corpus: Corpus, n_samples: int, seq_len: int, seed: int) -> CalibrationSet:
    """Draw window starts uniformly from the train split, deterministic per seed."""
    train = corpus.train_tokens
    if len(train) < n_samples * seq_len:
        raise ValueError(
            f"corpus train split has {len(train)} tokens, need at least "
            f"{n_samples * seq_len} for {n_samples} samples of length {seq_len}"
        )
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    starts = rng.integers(0, len(train) - seq_len + 1, size=n_samples)
    tokens = np.stack([train[s: s + seq_len] for s in starts])
    return CalibrationSet(n_samples=n_samples, seq_len=seq_len, seed=seed, tokens=tokens)


# ---------------------------------------------------------------------------
# synthetic corpus: a word-structured byte language for desk-scale runs

_SENT_LEN = (4, 12)


def synthesize_corpus(n_bytes: int, seed: int = 0) -> bytes:
    """Generate structured pseudo-text: Zipf-distributed invented words,
    sentence punctuation, occasional numerals. Enough local structure for a
    small byte-level decoder to beat the unigram baseline by a wide margin.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    letters = "abcdefghijklmnopqrstuvwxyz"
    n_words = 384
    words = []
    seen = set()
    while len(words) < n_words:
        length = int(rng.integers(2, 10))
        w = "".join(letters[i] for i in rng.integers(0, 26, size=length))
        if w not in seen:
            seen.add(w)
            words.append(w)
    ranks = np.arange(1, n_words + 1, dtype=np.float64)
    probs = 1.0 / (ranks + 2.7)
    probs /= probs.sum()

    out = bytearray()
    sent_in_par = 0
    while len(out) < n_bytes:
        k = int(rng.integers(*_SENT_LEN))
        idx = rng.choice(n_words, size=k, p=probs)
        toks = [words[i] for i in idx]
        if rng.random() < 0.08:
            toks.insert(int(rng.integers(0, len(toks))), str(int(rng.integers(0, 100))))
        if len(toks) > 5 and rng.random() < 0.3:
            toks[len(toks) // 2] += ","
        sentence = " ".join(toks)
        sentence = sentence[0].upper() + sentence[1:] + "."
        out += sentence.encode("ascii")
        sent_in_par += 1
        if sent_in_par >= 8:
            out += b"\n"
            sent_in_par = 0
        else:
            out += b" "
    return bytes(out[:n_bytes])
