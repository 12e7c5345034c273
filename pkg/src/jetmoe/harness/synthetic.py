"""Deterministic toy data: a pseudo-English byte corpus and token-id datasets."""
from __future__ import annotations

import numpy as np

from .data import PreferenceExample, SftExample

_ONSETS = ["b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "th", "st", "ch"]
_VOWELS = ["a", "e", "i", "o", "u", "ea", "ou", "ai"]
_CODAS = ["", "", "n", "r", "s", "t", "l", "nd", "ck"]


def make_corpus(n_bytes: int = 100_000, seed: int = 0, n_words: int = 300) -> bytes:
    """Sentences over a fixed random lexicon with Zipf-like word frequencies."""
    rng = np.random.default_rng(seed)
    lexicon = []
    while len(lexicon) < n_words:
        syl = rng.integers(1, 4)
        word = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS) for _ in range(syl))
        if word not in lexicon:
            lexicon.append(word)
    freq = 1.0 / np.arange(1, n_words + 1)
    freq /= freq.sum()
    parts: list[str] = []
    size = 0
    while size < n_bytes:
        words = rng.choice(lexicon, size=rng.integers(4, 14), p=freq)
        sentence = " ".join(words).capitalize() + rng.choice([".", ".", ".", "?", "!"]) + " "
        if rng.random() < 0.1:
            sentence += "\n"
        parts.append(sentence)
        size += len(sentence)
    return "".join(parts).encode()[:n_bytes]


def make_sft(n: int = 64, seed: int = 0, vocab_size: int = 256) -> list[SftExample]:
    """Prompt -> response pairs where the response reverses the prompt."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        prompt = rng.integers(97, 123, size=rng.integers(3, 8)).tolist()
        out.append(SftExample(tuple(prompt) + (ord("="),), tuple(prompt[::-1]) + (ord("\n"),)))
    return out


def make_preferences(n: int = 32, seed: int = 0, vocab_size: int = 256) -> list[PreferenceExample]:
    """Pairs preferring an upper-cased echo of the prompt over a random reply."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        prompt = rng.integers(97, 123, size=rng.integers(3, 8)).tolist()
        chosen = [c - 32 for c in prompt]
        rejected = rng.integers(33, 127, size=len(prompt)).tolist()
        out.append(PreferenceExample(tuple(prompt) + (ord(":"),), tuple(chosen), tuple(rejected)))
    return out
