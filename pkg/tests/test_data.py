"""Tokenization, splits, masking statistics, and the fixed-window dataset."""

import numpy as np
import pytest

from rstbench.data import (MASK_ID, N_SPECIALS, PAD_ID, WindowDataset,
                           bundled_corpus_path, fixed_validation_set,
                           load_and_tokenize, sample_masked_batch, split_rho)


@pytest.fixture(scope="module")
def corpus():
    return load_and_tokenize(bundled_corpus_path())


def test_tokenize_two_chars(tmp_path):
    path = tmp_path / "tiny.txt"
    path.write_text("ab", encoding="utf-8")
    c = load_and_tokenize(path)
    assert c.vocab_size == 4  # PAD, MASK, 'a', 'b'
    assert c.char_to_id == {"a": 2, "b": 3}
    np.testing.assert_array_equal(c.tokens, [2, 3])


def test_tokenize_deterministic(tmp_path):
    path = tmp_path / "x.txt"
    path.write_text("hello world hello", encoding="utf-8")
    a = load_and_tokenize(path)
    b = load_and_tokenize(path)
    assert np.array_equal(a.tokens, b.tokens)
    assert a.char_to_id == b.char_to_id


def test_empty_file_rejected(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("", encoding="utf-8")
    with pytest.raises(ValueError, match="empty"):
        load_and_tokenize(path)


def test_bundled_corpus_properties(corpus):
    assert len(corpus) >= 1_000_000
    assert corpus.vocab_size <= 256 + N_SPECIALS
    assert corpus.tokens.min() >= N_SPECIALS  # raw text never yields PAD/MASK
    assert PAD_ID == 0 and MASK_ID == 1


def test_split_rho_sizes():
    from rstbench.data import Corpus
    c = Corpus(np.arange(1000) + N_SPECIALS, {}, ["<pad>", "<mask>"])
    a, b, m = split_rho(c)
    assert (len(a), len(b), len(m)) == (200, 10, 790)
    recombined = np.concatenate([a.tokens, b.tokens, m.tokens])
    np.testing.assert_array_equal(recombined, c.tokens)


def test_split_rho_degenerate_and_invalid():
    from rstbench.data import Corpus
    c = Corpus(np.arange(100), {}, [])
    a, b, m = split_rho(c, (1.0, 0.0, 0.0))
    assert (len(a), len(b), len(m)) == (100, 0, 0)
    with pytest.raises(ValueError, match="sum to 1"):
        split_rho(c, (0.5, 0.1, 0.1))


def test_sample_masked_batch_shapes_and_flags(corpus):
    rng = np.random.default_rng(0)
    batch = sample_masked_batch(corpus.tokens, 4, 32, 0.15, rng, corpus.vocab_size)
    assert batch.input_ids.shape == batch.targets.shape == batch.mask.shape == (4, 32)
    assert batch.mask.any(axis=1).all()  # every example has a masked position
    # targets at masked positions always carry original tokens
    assert np.all(batch.targets[batch.mask] >= N_SPECIALS)


def test_sample_masked_batch_deterministic(corpus):
    a = sample_masked_batch(corpus.tokens, 4, 32, 0.15, np.random.default_rng(9),
                            corpus.vocab_size)
    b = sample_masked_batch(corpus.tokens, 4, 32, 0.15, np.random.default_rng(9),
                            corpus.vocab_size)
    assert np.array_equal(a.input_ids, b.input_ids)
    assert np.array_equal(a.targets, b.targets)
    assert np.array_equal(a.mask, b.mask)


def test_sample_masked_batch_too_short():
    with pytest.raises(ValueError, match="shorter"):
        sample_masked_batch(np.arange(10), 1, 32, 0.15, np.random.default_rng(0), 20)


def test_masked_fraction_statistics(corpus):
    rng = np.random.default_rng(1)
    rate = 0.15
    n_examples, seq = 10_000, 64
    total = 0
    for _ in range(n_examples // 100):
        batch = sample_masked_batch(corpus.tokens, 100, seq, rate, rng, corpus.vocab_size)
        total += int(batch.mask.sum())
    n_positions = n_examples * seq
    sigma = np.sqrt(rate * (1 - rate) / n_positions)
    assert abs(total / n_positions - rate) <= 3 * sigma + (1 - rate) ** seq


def test_mask_action_mixture(corpus):
    # of selected positions: ~80% MASK, ~10% random, ~10% unchanged
    rng = np.random.default_rng(2)
    batch = sample_masked_batch(corpus.tokens, 2000, 64, 0.15, rng, corpus.vocab_size)
    sel = batch.mask
    masked = (batch.input_ids[sel] == MASK_ID).mean()
    unchanged = (batch.input_ids[sel] == batch.targets[sel]).mean()
    n = int(sel.sum())
    assert abs(masked - 0.8) <= 3 * np.sqrt(0.8 * 0.2 / n)
    # "unchanged" includes the 10% keep plus random draws that hit the original
    assert 0.08 <= unchanged <= 0.14


def test_fixed_validation_set_identical_across_calls(corpus):
    a = fixed_validation_set(corpus.tokens[:50_000], 3, 4, 32, seed=123,
                             vocab_size=corpus.vocab_size)
    b = fixed_validation_set(corpus.tokens[:50_000], 3, 4, 32, seed=123,
                             vocab_size=corpus.vocab_size)
    c = fixed_validation_set(corpus.tokens[:50_000], 3, 4, 32, seed=124,
                             vocab_size=corpus.vocab_size)
    for ba, bb in zip(a, b):
        assert np.array_equal(ba.input_ids, bb.input_ids)
        assert np.array_equal(ba.mask, bb.mask)
    assert any(not np.array_equal(ba.input_ids, bc.input_ids) for ba, bc in zip(a, c))
    assert fixed_validation_set(corpus.tokens[:50_000], 0, 4, 32, 1, corpus.vocab_size) == []


def test_window_dataset_deterministic_random_access(corpus):
    ds = WindowDataset(corpus.tokens[:10_000], 32, corpus.vocab_size, mask_seed=7)
    assert len(ds) == 10_000 // 32
    a = ds.batch_of([0, 5, 11])
    b = ds.batch_of([5])
    np.testing.assert_array_equal(a.input_ids[1], b.input_ids[0])
    np.testing.assert_array_equal(a.mask[1], b.mask[0])
    # windows are contiguous, non-overlapping slices
    np.testing.assert_array_equal(a.targets[0], corpus.tokens[:32])
    np.testing.assert_array_equal(a.targets[2], corpus.tokens[11 * 32:12 * 32])
