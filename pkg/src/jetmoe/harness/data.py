"""Byte-level corpora and JSON-lines fine-tuning datasets.

SFT lines look like ``{"prompt": [ids...], "response": [ids...]}`` and
preference lines like ``{"prompt": [...], "chosen": [...], "rejected": [...]}``.
Token ids are explicit integers, so no tokenizer is involved.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import DataError, DegenerateBatchError


def read_corpus(path) -> np.ndarray:
    """Raw bytes of a file as uint8 token ids."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"corpus not found: {path}")
    data = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if data.size == 0:
        raise DataError(f"corpus is empty: {path}")
    return data


class ByteBatcher:
    """Random fixed-length windows from a byte corpus.

    Each window holds ``seq_len + 1`` bytes: inputs are the first ``seq_len``,
    targets the last ``seq_len``. Sampling uses the generator passed to
    :meth:`sample`, so a checkpointed generator state resumes the stream.
    """

    def __init__(self, corpus: np.ndarray, seq_len: int):
        if len(corpus) < seq_len + 1:
            raise DegenerateBatchError(f"corpus of {len(corpus)} bytes is shorter than one "
                                       f"window of {seq_len + 1}")
        self.corpus = corpus.astype(np.int64)
        self.seq_len = seq_len

    def sample(self, rng: np.random.Generator, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        starts = rng.integers(0, len(self.corpus) - self.seq_len, size=batch_size)
        win = self.corpus[starts[:, None] + np.arange(self.seq_len + 1)]
        return win[:, :-1], win[:, 1:]


def windows(corpus: np.ndarray, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping evaluation windows (inputs, targets)."""
    n = (len(corpus) - 1) // seq_len
    if n < 1:
        raise DegenerateBatchError(f"corpus of {len(corpus)} bytes is shorter than one window")
    c = corpus.astype(np.int64)
    idx = np.arange(n)[:, None] * seq_len + np.arange(seq_len)
    return c[idx], c[idx + 1]


@dataclass(frozen=True)
class SftExample:
    prompt: tuple[int, ...]
    response: tuple[int, ...]


@dataclass(frozen=True)
class PreferenceExample:
    prompt: tuple[int, ...]
    chosen: tuple[int, ...]
    rejected: tuple[int, ...]


def _ids(value, key: str, lineno: int, vocab_size: int | None) -> tuple[int, ...]:
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise DataError(f"line {lineno}: {key!r} must be a list of integer token ids")
    if any(v < 0 or (vocab_size is not None and v >= vocab_size) for v in value):
        raise DataError(f"line {lineno}: {key!r} has token ids outside [0, {vocab_size})")
    return tuple(value)


def _read_jsonl(path, keys: tuple[str, ...], nonempty: tuple[str, ...], vocab_size):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(obj, dict) or set(keys) - set(obj):
            raise DataError(f"{path}:{lineno}: expected keys {list(keys)}")
        vals = {k: _ids(obj[k], k, lineno, vocab_size) for k in keys}
        for k in nonempty:
            if not vals[k]:
                raise DataError(f"{path}:{lineno}: empty {k!r}")
        rows.append(vals)
    if not rows:
        raise DataError(f"dataset is empty: {path}")
    return rows


def load_sft(path, vocab_size: int | None = None) -> list[SftExample]:
    return [SftExample(**r) for r in _read_jsonl(path, ("prompt", "response"), ("response",), vocab_size)]


def load_preferences(path, vocab_size: int | None = None) -> list[PreferenceExample]:
    rows = _read_jsonl(path, ("prompt", "chosen", "rejected"), ("chosen", "rejected"), vocab_size)
    return [PreferenceExample(**r) for r in rows]


def write_jsonl(path, examples) -> None:
    Path(path).write_text("".join(json.dumps({k: list(v) for k, v in asdict(e).items()}) + "\n"
                                  for e in examples))


def pack_responses(pairs, max_len: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-padded next-token batch from (prompt, response) pairs.

    Returns inputs, targets and a mask that is 1 exactly where the target is
    a response token.
    """
    seqs = [tuple(p) + tuple(r) for p, r in pairs]
    length = max(len(s) for s in seqs) - 1
    if max_len is not None and length > max_len:
        raise DataError(f"example of {length + 1} tokens exceeds the model context of {max_len}")
    if length < 1:
        raise DataError("examples need at least two tokens")
    b = len(seqs)
    inputs = np.zeros((b, length), dtype=np.int64)
    targets = np.zeros((b, length), dtype=np.int64)
    mask = np.zeros((b, length), dtype=np.int64)
    for i, ((p, _), s) in enumerate(zip(pairs, seqs)):
        n = len(s) - 1
        inputs[i, :n] = s[:-1]
        targets[i, :n] = s[1:]
        mask[i, max(len(p) - 1, 0):n] = 1
    return inputs, targets, mask


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches covering ``range(n)`` once."""
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
