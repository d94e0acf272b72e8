"""Length bucketing, padding, MLM corruption and corpus statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateVocab, NoValidLines, OutOfRange, UnlexableCharacter, EmptyInput
from .tokenizer import (
    MASK,
    MAX_FRAMED_LENGTH,
    NUM_SPECIAL,
    PAD,
    TokenSequence,
    Vocabulary,
    tokenize,
)

DEFAULT_BOUNDARIES = ((1, 42), (43, 66), (67, 122), (123, 202))
DEFAULT_MIN_EMIT = (1, 1, 1, 50)


@dataclass(frozen=True)
class BucketSpec:
    boundaries: tuple[tuple[int, int], ...] = DEFAULT_BOUNDARIES
    min_emit: tuple[int, ...] = DEFAULT_MIN_EMIT

    def __post_init__(self):
        b = tuple((int(lo), int(hi)) for lo, hi in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        object.__setattr__(self, "min_emit", tuple(int(x) for x in self.min_emit))
        if len(self.min_emit) != len(b):
            raise ValueError("min_emit needs one entry per bucket")
        expect = 1
        for lo, hi in b:
            if lo != expect or hi < lo:
                raise ValueError(f"bucket intervals must be contiguous from 1; got {b}")
            expect = hi + 1
        if expect != MAX_FRAMED_LENGTH + 1:
            raise ValueError(f"bucket intervals must end at {MAX_FRAMED_LENGTH}")
        if any(m < 1 for m in self.min_emit):
            raise ValueError("min_emit entries must be >= 1")

    def __len__(self):
        return len(self.boundaries)


def assign_bucket(framed_length: int, spec: BucketSpec = BucketSpec()) -> int:
    for i, (lo, hi) in enumerate(spec.boundaries):
        if lo <= framed_length <= hi:
            return i
    raise OutOfRange(f"length {framed_length} outside [1, {MAX_FRAMED_LENGTH}]")


def pad_ids(seqs: Sequence[TokenSequence], length: int | None = None):
    """Right-pad sequences into an id matrix and a 1/0 padding mask."""
    width = max(len(s) for s in seqs) if length is None else length
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=np.int64)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s.ids
        mask[r, : len(s)] = 1
    return ids, mask


@dataclass
class Bucket:
    index: int
    rows: list[TokenSequence]
    ids: np.ndarray
    mask: np.ndarray
    weight: float = 0.0

    @property
    def n_rows(self) -> int:
        return len(self.rows)


@dataclass
class BucketedBatch:
    buckets: list[Bucket] = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return sum(b.n_rows for b in self.buckets)

    def __bool__(self):
        return bool(self.buckets)


def empty_carry(spec: BucketSpec) -> list[list[TokenSequence]]:
    return [[] for _ in spec.boundaries]


def bucketize(minibatch, spec: BucketSpec = BucketSpec(), carry=None, flush: bool = False):
    """Split a minibatch into length buckets.

    Rows held over in ``carry`` from earlier minibatches join their bucket
    first.  A bucket is emitted once it holds at least ``min_emit`` rows,
    otherwise its rows stay in the returned carry.  ``flush=True`` emits
    every non-empty bucket regardless of threshold (end of epoch).
    """
    carry = empty_carry(spec) if carry is None else [list(q) for q in carry]
    for seq in minibatch:
        carry[assign_bucket(len(seq), spec)].append(seq)

    batch = BucketedBatch()
    for i, rows in enumerate(carry):
        if rows and (flush or len(rows) >= spec.min_emit[i]):
            ids, mask = pad_ids(rows)
            batch.buckets.append(Bucket(i, rows, ids, mask))
            carry[i] = []
    total = batch.n_rows
    for b in batch.buckets:
        b.weight = b.n_rows / total
    return batch, carry


@dataclass
class MaskedBatch:
    input_ids: np.ndarray
    labels: np.ndarray
    loss_mask: np.ndarray
    padding_mask: np.ndarray | None = None


def apply_mlm_corruption(
    ids: np.ndarray,
    vocab: Vocabulary,
    seed: int,
    select_p: float = 0.15,
    mask_p: float = 0.8,
    random_p: float = 0.1,
    padding_mask: np.ndarray | None = None,
) -> MaskedBatch:
    """BERT-style corruption restricted to non-special positions.

    Each maskable position is selected with probability ``select_p``; a
    selected position independently becomes the mask id (``mask_p``), a
    uniformly drawn regular token (``random_p``) or stays unchanged.
    """
    if len(vocab) <= NUM_SPECIAL:
        raise DegenerateVocab("vocabulary has no regular tokens to sample replacements from")
    ids = np.asarray(ids, dtype=np.int64)
    rng = np.random.default_rng(seed)
    maskable = ids >= NUM_SPECIAL
    selected = (rng.random(ids.shape) < select_p) & maskable
    choice = rng.random(ids.shape)
    replacement = rng.integers(NUM_SPECIAL, len(vocab), size=ids.shape)

    inputs = ids.copy()
    to_mask = selected & (choice < mask_p)
    to_random = selected & (choice >= mask_p) & (choice < mask_p + random_p)
    inputs[to_mask] = MASK
    inputs[to_random] = replacement[to_random]
    if padding_mask is None:
        padding_mask = (ids != PAD).astype(np.int64)
    return MaskedBatch(inputs, ids.copy(), selected.astype(np.int64), padding_mask)


@dataclass
class CorpusStats:
    n: int
    min: int
    max: int
    mean: float
    std: float
    unique_tokens: int
    skipped: int = 0

    def rows(self):
        return [
            ("n_molecules", self.n),
            ("min_length", self.min),
            ("max_length", self.max),
            ("mean_length", self.mean),
            ("std_length", self.std),
            ("unique_tokens", self.unique_tokens),
            ("skipped_lines", self.skipped),
        ]


def corpus_stats(corpus: Iterable[str]) -> CorpusStats:
    """Framed-length statistics in one pass (Welford); std is the population std."""
    n = skipped = 0
    mean = m2 = 0.0
    lo, hi = math.inf, -math.inf
    tokens: set[str] = set()
    for line in corpus:
        try:
            toks = tokenize(line.strip())
        except (EmptyInput, UnlexableCharacter):
            skipped += 1
            continue
        length = len(toks) + 2
        tokens.update(toks)
        n += 1
        delta = length - mean
        mean += delta / n
        m2 += delta * (length - mean)
        lo, hi = min(lo, length), max(hi, length)
    if n == 0:
        raise NoValidLines(skipped)
    return CorpusStats(n, int(lo), int(hi), mean, math.sqrt(m2 / n), len(tokens), skipped)
