"""Token sources: byte-level corpus plus the copy and modular-sum synthetic tasks.

Batches carry a loss mask. The corpus source trains on every position; the
synthetic tasks mask their prompt positions (a random prompt has an
irreducible log(alphabet) floor per position, so training and reporting focus
on the answer span, the part the model can actually learn).
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ConfigError, InputError, IoError

BOS = 256
EOS = 257
BYTE_VOCAB = 258

# synthetic-task token layout
PAD = 0
DELIM = 1
SYMBOL_OFFSET = 2
DIGIT_OFFSET = 2  # digits 0-9 -> ids 2..11
PLUS = 12
EQUALS = 13
MODULUS = 97


class Batch(NamedTuple):
    inputs: np.ndarray  # [b, l] int64
    targets: np.ndarray  # [b, l] int64, inputs shifted left by one
    loss_mask: np.ndarray  # [b, l] bool, positions that count toward the loss


def tokenize_bytes(data: bytes) -> np.ndarray:
    return np.array([BOS] + list(data) + [EOS], dtype=np.int64)


def detokenize_bytes(ids) -> bytes:
    return bytes(int(i) for i in np.asarray(ids) if 0 <= int(i) < 256)


def load_corpus(path: str) -> np.ndarray:
    """Byte-tokenize a file: ids 0-255 raw bytes, 256 BOS, 257 EOS."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise IoError(f"cannot read corpus {path!r}: {e}") from e
    return tokenize_bytes(raw)


class CorpusSource:
    """Random fixed-length windows over one long token stream."""

    task = "corpus"

    def __init__(self, tokens: np.ndarray):
        self.tokens = np.asarray(tokens, dtype=np.int64)

    @property
    def vocab(self) -> int:
        return BYTE_VOCAB

    def sample(self, batch: int, seq_len: int, rng: np.random.Generator) -> Batch:
        tokens = self.tokens
        if len(tokens) < seq_len + 1:
            reps = (seq_len + 1) // max(len(tokens), 1) + 1
            tokens = np.tile(tokens, reps)
        starts = rng.integers(0, len(tokens) - seq_len, size=batch)
        rows = np.stack([tokens[s : s + seq_len + 1] for s in starts])
        return Batch(rows[:, :-1], rows[:, 1:], np.ones((batch, seq_len), dtype=bool))


class CopySource:
    """Random prefix, delimiter, then the prefix again; loss on the copy."""

    task = "copy"

    def __init__(self, vocab: int, alphabet: int = 32):
        if vocab < SYMBOL_OFFSET + 2:
            raise ConfigError(f"copy task needs vocab >= {SYMBOL_OFFSET + 2}, got {vocab}")
        self._vocab = vocab
        self.alphabet = min(alphabet, vocab - SYMBOL_OFFSET)

    @property
    def vocab(self) -> int:
        return self._vocab

    def sample(self, batch: int, seq_len: int, rng: np.random.Generator) -> Batch:
        if seq_len % 2 != 0:
            raise ConfigError(f"copy task needs an even seq_len, got {seq_len}")
        p = seq_len // 2
        prefix = rng.integers(SYMBOL_OFFSET, SYMBOL_OFFSET + self.alphabet, size=(batch, p))
        rows = np.concatenate(
            [prefix, np.full((batch, 1), DELIM, dtype=np.int64), prefix], axis=1
        ).astype(np.int64)
        mask = np.zeros((batch, seq_len), dtype=bool)
        mask[:, p : 2 * p] = True  # targets covering the copied prefix
        return Batch(rows[:, :-1], rows[:, 1:], mask)


class TwinCopySource:
    """Two random prefixes with delimiters; the answer copies the far prefix.

    Layout: [P1 | delim 1 | P2 | delim 0 | answer], so seq_len must be 3p+1
    (no padding is ever emitted; id 0 serves as the second delimiter here).
    `far_prob` is the per-token probability that the answer copies P1 rather
    than the position-matched P2 token. Training data generated below 1.0
    teaches a model to hedge its attention between the two sources, which is
    the starting point the low-frequency adapters are fine-tuned out of.
    """

    task = "twincopy"

    def __init__(self, vocab: int, far_prob: float = 1.0, alphabet: int = 32):
        if vocab < SYMBOL_OFFSET + 2:
            raise ConfigError(f"twincopy task needs vocab >= {SYMBOL_OFFSET + 2}, got {vocab}")
        if not (0.0 <= far_prob <= 1.0):
            raise ConfigError(f"far_prob must lie in [0, 1], got {far_prob}")
        self._vocab = vocab
        self.far_prob = far_prob
        self.alphabet = min(alphabet, vocab - SYMBOL_OFFSET)

    @property
    def vocab(self) -> int:
        return self._vocab

    def sample(self, batch: int, seq_len: int, rng: np.random.Generator) -> Batch:
        if seq_len % 3 != 1:
            raise ConfigError(f"twincopy needs seq_len = 3p+1, got {seq_len}")
        p = (seq_len - 1) // 3
        far = rng.integers(SYMBOL_OFFSET, SYMBOL_OFFSET + self.alphabet, size=(batch, p))
        near = rng.integers(SYMBOL_OFFSET, SYMBOL_OFFSET + self.alphabet, size=(batch, p))
        pick_far = rng.random(size=(batch, p)) < self.far_prob
        answer = np.where(pick_far, far, near)
        rows = np.concatenate(
            [
                far,
                np.full((batch, 1), DELIM, dtype=np.int64),
                near,
                np.full((batch, 1), PAD, dtype=np.int64),
                answer,
            ],
            axis=1,
        ).astype(np.int64)
        mask = np.zeros((batch, seq_len), dtype=bool)
        mask[:, 2 * p + 1 :] = True
        return Batch(rows[:, :-1], rows[:, 1:], mask)


class ModSumSource:
    """x + y = (x + y) mod 97, two-digit zero-padded; loss on the answer digits."""

    task = "modsum"

    def __init__(self, vocab: int):
        if vocab < EQUALS + 1:
            raise ConfigError(f"modsum task needs vocab >= {EQUALS + 1}, got {vocab}")
        self._vocab = vocab

    @property
    def vocab(self) -> int:
        return self._vocab

    @staticmethod
    def _digits(n: np.ndarray) -> np.ndarray:
        return np.stack([DIGIT_OFFSET + n // 10, DIGIT_OFFSET + n % 10], axis=-1)

    def sample(self, batch: int, seq_len: int, rng: np.random.Generator) -> Batch:
        if seq_len < 7:
            raise ConfigError(f"modsum task needs seq_len >= 7, got {seq_len}")
        x = rng.integers(0, MODULUS, size=batch)
        y = rng.integers(0, MODULUS, size=batch)
        z = (x + y) % MODULUS
        plus = np.full((batch, 1), PLUS, dtype=np.int64)
        eq = np.full((batch, 1), EQUALS, dtype=np.int64)
        expr = np.concatenate([self._digits(x), plus, self._digits(y), eq, self._digits(z)], axis=1)
        pad = np.full((batch, seq_len + 1 - expr.shape[1]), PAD, dtype=np.int64)
        rows = np.concatenate([expr, pad], axis=1).astype(np.int64)
        mask = np.zeros((batch, seq_len), dtype=bool)
        mask[:, 5:7] = True  # targets covering the two answer digits
        return Batch(rows[:, :-1], rows[:, 1:], mask)


def make_source(task: str, vocab: int, corpus_path: str = "", twin_far: float = 1.0):
    if task == "corpus":
        if not corpus_path:
            raise ConfigError("corpus task needs corpus_path")
        return CorpusSource(load_corpus(corpus_path))
    if task == "copy":
        return CopySource(vocab)
    if task == "twincopy":
        return TwinCopySource(vocab, far_prob=twin_far)
    if task == "modsum":
        return ModSumSource(vocab)
    raise ConfigError(f"unknown task {task!r}")


def make_batch(source, batch: int, seq_len: int, rng: np.random.Generator) -> Batch:
    if batch < 1 or seq_len < 1:
        raise InputError(f"batch and seq_len must be positive, got {batch}, {seq_len}")
    return source.sample(batch, seq_len, rng)


def answer_accuracy(logits: np.ndarray, batch: Batch) -> float:
    """Fraction of masked positions where the argmax matches the target."""
    pred = np.argmax(logits, axis=-1)
    m = batch.loss_mask
    total = int(m.sum())
    if total == 0:
        return 0.0
    return float((pred[m] == batch.targets[m]).sum() / total)
