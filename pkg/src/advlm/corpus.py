"""Vocabulary, corpus loading and truncated-BPTT batching.

Corpora are plain UTF-8 text, whitespace tokenized, one segment per line;
``<eos>`` is appended to every line.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import CorpusTooSmall, EmptyCorpus, IoFailure

EOS = "<eos>"
UNK = "<unk>"


class Vocabulary:
    """Dense token <-> id mapping; ``<unk>`` is always present."""

    def __init__(self, itos: Sequence[str]):
        self.itos = list(itos)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        if UNK not in self.stoi:
            raise ValueError(f"vocabulary must contain {UNK}")
        self.unk_id = self.stoi[UNK]

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        unk = self.unk_id
        return np.fromiter((self.stoi.get(w, unk) for w in tokens), dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[int(i)] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise IoFailure(f"cannot read vocabulary {path}: {e}") from e
        return cls(text.splitlines())


def build_vocab(stream: Iterable[str]) -> Vocabulary:
    """Ids in first-occurrence order; ``<eos>`` and ``<unk>`` appended if unseen."""
    seen: dict[str, None] = {}
    for w in stream:
        seen.setdefault(w, None)
    if not seen:
        raise EmptyCorpus("cannot build a vocabulary from an empty stream")
    for special in (EOS, UNK):
        seen.setdefault(special, None)
    return Vocabulary(list(seen))


def tokenize_lines(lines: Iterable[str]) -> list[str]:
    out: list[str] = []
    for line in lines:
        words = line.split()
        if words:
            out.extend(words)
            out.append(EOS)
    return out


def read_tokens(path) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return tokenize_lines(fh)
    except OSError as e:
        raise IoFailure(f"cannot read corpus file {path}: {e}") from e


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # [T, b]
    targets: np.ndarray  # [T, b], inputs shifted by one position

    @property
    def shape(self) -> tuple[int, int]:
        return self.inputs.shape


def batchify(ids, batch_size: int, bptt: int) -> list[Batch]:
    """Split ``ids`` into ``batch_size`` contiguous lanes and cut full windows of ``bptt``.

    Lane ``j`` holds ``ids[j * L:(j + 1) * L]`` with ``L = len(ids) // batch_size``;
    the trailing remainder and any partial final window are dropped.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if batch_size < 1 or bptt < 1:
        raise ValueError("batch size and bptt must be positive")
    if len(ids) < batch_size * (bptt + 1):
        raise CorpusTooSmall(f"{len(ids)} tokens cannot fill {batch_size} lanes of {bptt + 1}")
    lane = len(ids) // batch_size
    data = ids[: lane * batch_size].reshape(batch_size, lane).T
    n = (lane - 1) // bptt
    return [
        Batch(np.ascontiguousarray(data[i * bptt : (i + 1) * bptt]), np.ascontiguousarray(data[i * bptt + 1 : (i + 1) * bptt + 1]))
        for i in range(n)
    ]


def iter_batches(ids, batch_size: int, bptt: int) -> Iterator[Batch]:
    yield from batchify(ids, batch_size, bptt)


@dataclass
class Corpus:
    vocab: Vocabulary
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "valid", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    @classmethod
    def from_tokens(cls, train: list[str], valid: list[str], test: list[str], vocab: Vocabulary | None = None) -> "Corpus":
        vocab = vocab or build_vocab(train)
        return cls(vocab, vocab.encode(train), vocab.encode(valid), vocab.encode(test))

    @classmethod
    def load(cls, train_path, valid_path, test_path, vocab: Vocabulary | None = None) -> "Corpus":
        for p in (train_path, valid_path, test_path):
            if not Path(p).is_file():
                raise IoFailure(f"corpus file not found: {p}")
        return cls.from_tokens(read_tokens(train_path), read_tokens(valid_path), read_tokens(test_path), vocab)


# -- synthetic text ------------------------------------------------------------

def synthetic_sentences(
    n_tokens: int,
    vocab_size: int = 2000,
    seed: int = 0,
    n_topics: int = 16,
    successors: int = 8,
    mean_length: float = 18.0,
) -> list[list[str]]:
    """Sentences from a topic-mixed sparse bigram source over ``w0 .. w{V-1}``.

    Each sentence draws a topic; each word then follows the previous word's
    sparse successor table (p=0.55), the topic's Zipfian distribution
    (p=0.3), or the global Zipfian unigram (p=0.15).
    """
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, vocab_size + 1)
    unigram = 1.0 / ranks
    unigram /= unigram.sum()
    succ = rng.choice(vocab_size, size=(vocab_size, successors), p=unigram)
    succ_cdf = np.cumsum(rng.dirichlet(np.full(successors, 0.5), size=vocab_size), axis=1)
    topic_words = [rng.permutation(vocab_size)[: vocab_size // 4] for _ in range(n_topics)]
    topic_p = 1.0 / np.arange(1, vocab_size // 4 + 1) ** 1.1
    topic_p /= topic_p.sum()

    sentences: list[list[str]] = []
    total = 0
    while total < n_tokens:
        z = rng.integers(n_topics)
        length = max(3, int(rng.exponential(mean_length)))
        prev = topic_words[z][rng.choice(len(topic_p), p=topic_p)]
        words = [prev]
        src = rng.random(length - 1)
        picks_uni = rng.choice(vocab_size, size=length - 1, p=unigram)
        picks_topic = topic_words[z][rng.choice(len(topic_p), size=length - 1, p=topic_p)]
        picks_succ = rng.random(length - 1)
        for j in range(length - 1):
            if src[j] < 0.55:
                cdf = succ_cdf[prev]
                w = succ[prev][min(int(np.searchsorted(cdf, picks_succ[j] * cdf[-1])), successors - 1)]
            elif src[j] < 0.85:
                w = picks_topic[j]
            else:
                w = picks_uni[j]
            words.append(w)
            prev = w
        sentences.append([f"w{w}" for w in words])
        total += length + 1
    return sentences


def synthetic_splits(n_tokens: int, vocab_size: int = 2000, seed: int = 0) -> dict[str, list[str]]:
    """Lines for train (about ``n_tokens`` tokens), valid and test (about 10% each)."""
    lines = [" ".join(s) for s in synthetic_sentences(int(n_tokens * 1.2), vocab_size, seed)]
    n = len(lines)
    cut_a, cut_b = int(n / 1.2), int(n * 1.1 / 1.2)
    return {"train": lines[:cut_a], "valid": lines[cut_a:cut_b], "test": lines[cut_b:]}


def synthetic_corpus(n_tokens: int, vocab_size: int = 2000, seed: int = 0) -> Corpus:
    splits = synthetic_splits(n_tokens, vocab_size, seed)
    return Corpus.from_tokens(*(tokenize_lines(splits[k]) for k in ("train", "valid", "test")))


def write_synthetic_corpus(out_dir, n_tokens: int, vocab_size: int = 2000, seed: int = 0) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, lines in synthetic_splits(n_tokens, vocab_size, seed).items():
        paths[name] = out / f"{name}.txt"
        paths[name].write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return paths
