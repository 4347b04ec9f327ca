import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advlm.corpus import (
    EOS,
    UNK,
    Corpus,
    Vocabulary,
    batchify,
    build_vocab,
    read_tokens,
    synthetic_corpus,
    tokenize_lines,
    write_synthetic_corpus,
)
from advlm.errors import CorpusTooSmall, EmptyCorpus, IoFailure
from advlm.models import LanguageModel, lm_forward
from advlm.trainer import evaluate
from oracles import xent_bruteforce


def test_build_vocab_example():
    v = build_vocab("a b a <eos>".split())
    assert v.itos == ["a", "b", EOS, UNK]
    assert len(v) == 4


def test_build_vocab_idempotent():
    stream = tokenize_lines(["the cat sat", "on the mat"])
    assert build_vocab(stream) == build_vocab(stream)
    assert build_vocab(stream).stoi == build_vocab(list(stream)).stoi


def test_build_vocab_empty():
    with pytest.raises(EmptyCorpus):
        build_vocab([])


def test_unk_present_in_text_is_not_duplicated():
    v = build_vocab(["x", UNK, "y", EOS])
    assert v.itos == ["x", UNK, "y", EOS]


PTB_TRAIN = os.environ.get("ADVLM_PTB_TRAIN")


@pytest.mark.skipif(not PTB_TRAIN, reason="set ADVLM_PTB_TRAIN to the PTB ptb.train.txt to run")
def test_ptb_vocabulary_size():
    assert len(build_vocab(read_tokens(PTB_TRAIN))) == 10000


def test_tokenize_appends_eos_and_skips_blank_lines():
    assert tokenize_lines(["a b", "", "  c  "]) == ["a", "b", EOS, "c", EOS]


def test_batchify_example():
    batches = batchify(np.arange(1, 14), 2, 3)
    assert batches[0].inputs.tolist() == [[1, 7], [2, 8], [3, 9]]
    assert batches[0].targets.tolist() == [[2, 8], [3, 9], [4, 10]]
    assert len(batches) == 1  # lanes of 6 leave one full window with a shifted target


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 400), st.integers(1, 6), st.integers(1, 9))
def test_batchify_accounting_and_shift(extra, b, steps):
    n = b * (steps + 1) + extra
    ids = np.arange(n)
    batches = batchify(ids, b, steps)
    assert sum(x.targets.size for x in batches) == b * steps * len(batches) <= n - b
    lane = n // b
    for i, x in enumerate(batches):
        assert x.shape == (steps, b)
        for j in range(b):
            assert np.array_equal(x.inputs[:, j], ids[j * lane + i * steps : j * lane + (i + 1) * steps])
            assert np.array_equal(x.targets[:, j], x.inputs[:, j] + 1)
        if i:
            assert np.array_equal(batches[i - 1].targets[-1], x.inputs[0])


def test_batchify_too_small():
    with pytest.raises(CorpusTooSmall):
        batchify(np.arange(7), 2, 3)


def test_batchify_deterministic():
    ids = np.random.default_rng(0).integers(0, 50, 1000)
    a, b = batchify(ids, 4, 7), batchify(ids, 4, 7)
    assert all(np.array_equal(x.inputs, y.inputs) and np.array_equal(x.targets, y.targets) for x, y in zip(a, b))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["a", "b", "c", "dog", "<eos>"]), min_size=1, max_size=40))
def test_encode_decode_round_trip(tokens):
    vocab = build_vocab(tokens)
    assert vocab.decode(vocab.encode(tokens)) == tokens


def test_oov_maps_to_unk():
    vocab = build_vocab(["a", "b"])
    ids = vocab.encode(["a", "zebra", "b", "yak"])
    assert vocab.decode(ids) == ["a", UNK, "b", UNK]


def test_vocab_save_load(tmp_path):
    vocab = build_vocab(tokenize_lines(["x y z", "z y"]))
    vocab.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt") == vocab
    assert (tmp_path / "vocab.txt").read_text().splitlines()[vocab.stoi["z"]] == "z"


def test_corpus_load_and_missing_file(tmp_path):
    for name, text in [("train", "a b c\nb c\n"), ("valid", "a q\n"), ("test", "c\n")]:
        (tmp_path / f"{name}.txt").write_text(text)
    c = Corpus.load(tmp_path / "train.txt", tmp_path / "valid.txt", tmp_path / "test.txt")
    assert c.vocab.decode(c.valid) == ["a", UNK, EOS]
    with pytest.raises(IoFailure, match="nope.txt"):
        Corpus.load(tmp_path / "train.txt", tmp_path / "nope.txt", tmp_path / "test.txt")


def test_single_lane_eval_equals_unbatched_stream():
    rng = np.random.default_rng(3)
    vocab_size = 7
    model = LanguageModel.create(vocab_size, 3, 4, 1, seed=1)
    ids = rng.integers(0, vocab_size, 60)
    steps = 5
    res = evaluate(model, ids, batch_size=1, bptt=steps)
    n_windows = (len(ids) - 1) // steps
    count = n_windows * steps
    # Reference: one forward over the whole usable stream, per-token NLL from the brute-force softmax.
    logits, _ = lm_forward(ids[:count].reshape(-1, 1), None, model)
    targets = ids[1 : count + 1]
    nll = [xent_bruteforce(list(logits.data[t, 0]), int(targets[t])) for t in range(count)]
    assert res.token_count == count
    assert abs(res.nll - sum(nll) / count) < 1e-10
    assert abs(res.perplexity - math.exp(sum(nll) / count)) < 1e-10 * res.perplexity


def test_synthetic_corpus_is_reproducible(tmp_path):
    a = synthetic_corpus(5000, 300, seed=2)
    b = synthetic_corpus(5000, 300, seed=2)
    assert a.vocab == b.vocab and np.array_equal(a.train, b.train)
    assert 5000 <= len(a.train) < 5200
    assert len(a.valid) > 0 and len(a.test) > 0
    paths = write_synthetic_corpus(tmp_path, 5000, 300, seed=2)
    c = Corpus.load(paths["train"], paths["valid"], paths["test"])
    assert c.vocab == a.vocab and np.array_equal(c.valid, a.valid)
