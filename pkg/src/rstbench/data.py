"""Corpus loading, char-level tokenization, MLM masking, batch sampling.

Tokenization is character-level with a deterministic vocabulary (distinct
codepoints sorted), plus reserved PAD and MASK ids that raw text can never
produce. Masking follows the 15% / 80-10-10 recipe: of the selected
positions, 80% become MASK, 10% a random regular token, 10% stay
unchanged; every selected position is flagged and its original token kept
in the targets.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

PAD_ID = 0
MASK_ID = 1
N_SPECIALS = 2


@dataclass
class Corpus:
    tokens: np.ndarray            # int64 token ids in file order
    char_to_id: dict[str, int]
    id_to_char: list[str]         # index 0/1 are the PAD/MASK placeholders

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_char)

    def slice(self, start: int, stop: int) -> "Corpus":
        return Corpus(self.tokens[start:stop], self.char_to_id, self.id_to_char)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class MaskedBatch:
    input_ids: np.ndarray   # int64 [B, S], masked positions replaced
    targets: np.ndarray     # int64 [B, S], original tokens
    mask: np.ndarray        # bool  [B, S], selected positions


def load_and_tokenize(path) -> Corpus:
    text = Path(path).read_text(encoding="utf-8")
    if not text:
        raise ValueError(f"empty corpus file: {path}")
    codepoints = np.frombuffer(text.encode("utf-32-le"), dtype=np.uint32)
    uniq = np.unique(codepoints)
    tokens = np.searchsorted(uniq, codepoints).astype(np.int64) + N_SPECIALS
    chars = [chr(c) for c in uniq]
    char_to_id = {c: i + N_SPECIALS for i, c in enumerate(chars)}
    return Corpus(tokens, char_to_id, ["<pad>", "<mask>"] + chars)


def bundled_corpus_path() -> Path:
    return Path(resources.files("rstbench").joinpath("assets/corpus.txt"))


def split_rho(corpus: Corpus, fractions=(0.20, 0.01, 0.79)):
    """Contiguous (proxy_train, proxy_val, main) splits in corpus order."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    n = len(corpus)
    n1 = int(n * fractions[0])
    n2 = int(n * fractions[1])
    return (corpus.slice(0, n1),
            corpus.slice(n1, n1 + n2),
            corpus.slice(n1 + n2, n))


def sample_masked_batch(tokens: np.ndarray, batch_size: int, seq_len: int,
                        mask_rate: float, rng: np.random.Generator,
                        vocab_size: int) -> MaskedBatch:
    """Uniform random windows (with replacement) masked per the MLM recipe.

    Every example carries at least one masked position: if the rate draw
    selects none, one uniformly chosen position is forced.
    """
    tokens = np.asarray(tokens)
    if len(tokens) < seq_len:
        raise ValueError(f"corpus slice of {len(tokens)} tokens shorter than seq_len {seq_len}")
    offsets = rng.integers(0, len(tokens) - seq_len + 1, size=batch_size)
    windows = np.stack([tokens[o:o + seq_len] for o in offsets])
    return _mask_windows(windows, mask_rate, rng, vocab_size)


def _mask_windows(windows: np.ndarray, mask_rate: float,
                  rng: np.random.Generator, vocab_size: int) -> MaskedBatch:
    b, s = windows.shape
    targets = windows.copy()
    selected = rng.random((b, s)) < mask_rate
    # Draw counts are fixed regardless of data so streams stay aligned.
    forced = rng.integers(0, s, size=b)
    action = rng.random((b, s))
    rand_tok = rng.integers(N_SPECIALS, vocab_size, size=(b, s))

    empty = ~selected.any(axis=1)
    selected[np.nonzero(empty)[0], forced[empty]] = True

    input_ids = windows.copy()
    to_mask = selected & (action < 0.8)
    to_rand = selected & (action >= 0.8) & (action < 0.9)
    input_ids[to_mask] = MASK_ID
    input_ids[to_rand] = rand_tok[to_rand]
    return MaskedBatch(input_ids.astype(np.int64), targets.astype(np.int64), selected)


def fixed_validation_set(val_tokens: np.ndarray, n_batches: int, batch_size: int,
                         seq_len: int, seed: int,
                         vocab_size: int, mask_rate: float = 0.15) -> list[MaskedBatch]:
    """Deterministic held-out batches, identical across method runs."""
    rng = np.random.default_rng(seed)
    return [sample_masked_batch(val_tokens, batch_size, seq_len, mask_rate, rng, vocab_size)
            for _ in range(n_batches)]


class WindowDataset:
    """Fixed universe of examples: contiguous non-overlapping windows with a
    deterministic per-example mask (needed by the proxy-loss table)."""

    def __init__(self, tokens: np.ndarray, seq_len: int, vocab_size: int,
                 mask_rate: float = 0.15, mask_seed: int = 0):
        self.tokens = np.asarray(tokens)
        self.seq_len = seq_len
        self.vocab_size = vocab_size
        self.mask_rate = mask_rate
        self.mask_seed = mask_seed
        self.n_examples = len(self.tokens) // seq_len
        if self.n_examples < 1:
            raise ValueError("token slice shorter than one window")

    def __len__(self) -> int:
        return self.n_examples

    def batch_of(self, ids) -> MaskedBatch:
        ids = np.asarray(ids)
        windows = np.stack([self.tokens[i * self.seq_len:(i + 1) * self.seq_len] for i in ids])
        parts = []
        for i, window in zip(ids, windows):
            rng = np.random.default_rng(np.random.SeedSequence([self.mask_seed, int(i)]))
            parts.append(_mask_windows(window[None, :], self.mask_rate, rng, self.vocab_size))
        return MaskedBatch(
            np.concatenate([p.input_ids for p in parts]),
            np.concatenate([p.targets for p in parts]),
            np.concatenate([p.mask for p in parts]))
