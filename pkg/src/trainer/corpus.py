import logging
import os
from dataclasses import dataclass
from typing import Iterator, List, Tuple

import numpy as np

VOCAB_SIZE = 256
VALIDATION_FRACTION = 0.05

Batch = Tuple[np.ndarray, np.ndarray]


class CorpusError(Exception):
    pass


def ingest_corpus(path: str) -> np.ndarray:
    """Read a file as byte-level tokens (values 0..255)."""
    if not path or not os.path.isfile(path):
        raise CorpusError(f"Corpus file '{path}' does not exist")
    with open(path, "rb") as corpus_file:
        raw = corpus_file.read()
    if not raw:
        raise CorpusError(f"Corpus file '{path}' is empty")
    logging.info(f"Loaded corpus of {len(raw)} bytes from {path}")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


@dataclass
class ByteCorpus:
    tokens: np.ndarray
    validation_fraction: float = VALIDATION_FRACTION

    @classmethod
    def from_file(cls, path: str, validation_fraction: float = VALIDATION_FRACTION) -> "ByteCorpus":
        return cls(ingest_corpus(path), validation_fraction)

    @property
    def split_index(self) -> int:
        return len(self.tokens) - int(round(len(self.tokens) * self.validation_fraction))

    @property
    def train(self) -> np.ndarray:
        return self.tokens[:self.split_index]

    @property
    def validation(self) -> np.ndarray:
        return self.tokens[self.split_index:]


def _windows(tokens: np.ndarray, starts: np.ndarray, seq_len: int) -> Batch:
    offsets = np.arange(seq_len)
    inputs = tokens[starts[:, None] + offsets]
    targets = tokens[starts[:, None] + offsets + 1]
    return inputs, targets


class BatchSampler:
    """Random training windows drawn from a seeded generator whose state can be saved and restored."""

    def __init__(self, tokens: np.ndarray, batch_size: int, seq_len: int, seed: int = 0):
        if len(tokens) < seq_len + 1:
            raise CorpusError(f"Training split of {len(tokens)} tokens is shorter than one window of {seq_len + 1}")
        self.tokens = tokens
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.rng = np.random.default_rng(seed)

    def sample(self) -> Batch:
        starts = self.rng.integers(0, len(self.tokens) - self.seq_len, size=self.batch_size)
        return _windows(self.tokens, starts, self.seq_len)

    def __iter__(self) -> Iterator[Batch]:
        while True:
            yield self.sample()

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def validation_batches(tokens: np.ndarray, count: int, batch_size: int, seq_len: int) -> List[Batch]:
    """Fixed, evenly spaced validation windows, identical on every call."""
    if len(tokens) < seq_len + 1:
        raise CorpusError(f"Validation split of {len(tokens)} tokens is shorter than one window of {seq_len + 1}")
    last_start = len(tokens) - seq_len - 1
    starts = np.linspace(0, last_start, count * batch_size).round().astype(np.int64)
    return [_windows(tokens, chunk, seq_len) for chunk in np.split(starts, count)]
