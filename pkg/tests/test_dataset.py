import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chemlm.dataset import (
    BucketSpec,
    apply_mlm_corruption,
    assign_bucket,
    bucketize,
    corpus_stats,
    empty_carry,
    pad_ids,
)
from chemlm.errors import DegenerateVocab, NoValidLines, OutOfRange
from chemlm.tokenizer import BOS, EOS, MASK, NUM_SPECIAL, TokenSequence, build_vocabulary


def seq(length, line_id=None):
    return TokenSequence(tuple([BOS] + [5] * (length - 2) + [EOS]), "C" * (length - 2), True, line_id)


@pytest.mark.parametrize("length,bucket", [(1, 0), (42, 0), (43, 1), (66, 1), (67, 2), (122, 2), (123, 3), (202, 3)])
def test_bucket_boundaries(length, bucket):
    assert assign_bucket(length) == bucket


def test_bucket_out_of_range():
    with pytest.raises(OutOfRange):
        assign_bucket(203)
    with pytest.raises(OutOfRange):
        assign_bucket(0)


def test_bad_spec_rejected():
    with pytest.raises(ValueError):
        BucketSpec(((1, 40), (42, 202)), (1, 1))
    with pytest.raises(ValueError):
        BucketSpec(((1, 100),), (1,))


def test_threshold_carries_last_bucket():
    batch, carry = bucketize([seq(10), seq(50), seq(80), seq(150)])
    assert [(b.index, b.n_rows) for b in batch.buckets] == [(0, 1), (1, 1), (2, 1)]
    assert [len(q) for q in carry] == [0, 0, 0, 1]


def test_threshold_reached():
    batch, carry = bucketize([seq(150) for _ in range(50)])
    assert [(b.index, b.n_rows) for b in batch.buckets] == [(3, 50)]
    assert all(not q for q in carry)


def test_carry_accumulates_across_minibatches_and_flushes():
    carry = empty_carry(BucketSpec())
    emitted = 0
    for _ in range(4):
        batch, carry = bucketize([seq(150) for _ in range(12)], carry=carry)
        emitted += sum(b.n_rows for b in batch.buckets)
    assert emitted == 0 and len(carry[3]) == 48
    batch, carry = bucketize([seq(150) for _ in range(3)], carry=carry)
    assert batch.buckets[0].n_rows == 51
    batch, carry = bucketize([seq(150)], carry=carry, flush=True)
    assert batch.buckets[0].n_rows == 1 and not carry[3]


def test_homogeneous_batch_has_no_pad_columns():
    batch, _ = bucketize([seq(20) for _ in range(5)])
    assert len(batch.buckets) == 1
    assert batch.buckets[0].ids.shape == (5, 20)
    assert batch.buckets[0].mask.all()


def test_pad_ids():
    ids, mask = pad_ids([seq(3), seq(5)])
    assert ids.shape == (2, 5)
    assert mask.tolist() == [[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]]
    assert ids[0, 3:].tolist() == [0, 0]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 202), min_size=1, max_size=300), st.integers(1, 64))
def test_partition_conservation(lengths, bs):
    seqs = [seq(max(n, 2), i) for i, n in enumerate(lengths)]
    carry = empty_carry(BucketSpec())
    seen = []
    for start in range(0, len(seqs), bs):
        last = start + bs >= len(seqs)
        batch, carry = bucketize(seqs[start : start + bs], carry=carry, flush=last)
        for b in batch.buckets:
            lo, hi = BucketSpec().boundaries[b.index]
            assert all(lo <= len(r) <= hi for r in b.rows)
            seen.extend(r.line_id for r in b.rows)
            if b.index == 3 and not last:
                assert b.n_rows >= 50
        assert sum(b.weight for b in batch.buckets) == pytest.approx(1.0) or not batch.buckets
    assert sorted(seen) == list(range(len(seqs)))


def test_corruption_noop_when_select_zero():
    v = build_vocabulary(["CCO"])
    ids = np.array([[BOS, 5, 5, 6, EOS]])
    mb = apply_mlm_corruption(ids, v, seed=0, select_p=0.0)
    assert (mb.input_ids == mb.labels).all()
    assert not mb.loss_mask.any()


def test_corruption_skips_specials():
    v = build_vocabulary(["CCO"])
    ids = np.tile([BOS, EOS, 0, 0], (500, 1))
    mb = apply_mlm_corruption(ids, v, seed=1, select_p=1.0)
    assert not mb.loss_mask.any()
    assert (mb.input_ids == ids).all()


def test_corruption_random_tokens_are_regular():
    v = build_vocabulary(["CCONS"])
    ids = np.full((200, 30), 5)
    mb = apply_mlm_corruption(ids, v, seed=2, select_p=1.0, mask_p=0.0, random_p=1.0)
    assert mb.input_ids.min() >= NUM_SPECIAL and mb.input_ids.max() < len(v)


def test_corruption_needs_regular_tokens():
    v = build_vocabulary(["C"])
    from chemlm.tokenizer import Vocabulary, SPECIAL_TOKENS

    with pytest.raises(DegenerateVocab):
        apply_mlm_corruption(np.array([[BOS, EOS]]), Vocabulary(SPECIAL_TOKENS), seed=0)
    assert apply_mlm_corruption(np.array([[BOS, 5, EOS]]), v, seed=0).labels.shape == (1, 3)


def test_corruption_is_seeded():
    v = build_vocabulary(["CCONS"])
    ids = np.random.default_rng(0).integers(5, len(v), (8, 20))
    a = apply_mlm_corruption(ids, v, seed=7)
    b = apply_mlm_corruption(ids, v, seed=7)
    assert (a.input_ids == b.input_ids).all() and (a.loss_mask == b.loss_mask).all()


def test_corpus_stats_example():
    s = corpus_stats(["CC", "CCC"])
    assert (s.min, s.max, s.mean, s.n) == (4, 5, 4.5, 2)
    assert s.std == pytest.approx(0.5)


def test_corpus_stats_single_and_empty():
    assert corpus_stats(["CCO"]).std == 0.0
    with pytest.raises(NoValidLines):
        corpus_stats([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 120), min_size=1, max_size=60))
def test_corpus_stats_matches_numpy(lengths):
    s = corpus_stats(["C" * n for n in lengths])
    framed = np.asarray(lengths) + 2
    assert s.mean == pytest.approx(framed.mean())
    assert s.std == pytest.approx(framed.std(), abs=1e-9)
