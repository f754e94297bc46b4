import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from llmr.retriever import (
    ContrastiveItem,
    build_dense_index,
    contrastive_loss,
    distill_loss,
    embed_candidate,
    embed_query,
    init_bi_encoder,
    knn_search,
    load_dense_index,
    match_score,
    retriever_batch_loss,
    retriever_loss,
    save_dense_index,
    softmax,
    train_retriever,
)
from llmr.reward import TrainingInstance, init_cross_encoder

from conftest import make_pool

LN5 = 1.6094379124341003


def unit_rows(n, d, seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


# -- loss identities ---------------------------------------------------------


def test_contrastive_uniform_candidates_is_log_count():
    # all candidates identical: the softmax is uniform over the batch
    vec = np.ones(4) / 2.0
    item = ContrastiveItem(
        query_vec=vec,
        cand_vecs=np.tile(vec, (5, 1)),
        target_scores=np.array([1.0, 0.0, 0.0, 0.0, 0.0]),
    )
    assert contrastive_loss([item], tau=0.5) == pytest.approx(LN5, abs=1e-9)


def test_contrastive_pools_negatives_across_the_batch():
    vec = np.ones(4) / 2.0
    items = [
        ContrastiveItem(
            query_vec=vec,
            cand_vecs=np.tile(vec, (5, 1)),
            target_scores=np.array([1.0, 0.0, 0.0, 0.0, 0.0]),
        )
        for _ in range(2)
    ]
    # 2 items x 5 candidates: each softmax runs over all 10
    assert contrastive_loss(items, tau=0.5) == pytest.approx(math.log(10), abs=1e-9)


def test_contrastive_rejects_empty_batch():
    with pytest.raises(ValueError):
        contrastive_loss([], tau=0.1)


def test_distill_kl_of_identical_scores_is_zero():
    scores = np.array([0.4, -1.2, 3.0, 0.0])
    assert distill_loss(scores, scores) == pytest.approx(0.0, abs=1e-12)


def test_distill_kl_is_positive_for_different_scores():
    r = np.array([2.0, 0.0, -1.0])
    s = np.array([-1.0, 0.0, 2.0])
    assert distill_loss(r, s) > 0.0


def test_distill_kl_hand_value():
    r = np.array([math.log(0.75), math.log(0.25)])
    s = np.array([math.log(0.5), math.log(0.5)])
    expected = 0.75 * math.log(0.75 / 0.5) + 0.25 * math.log(0.25 / 0.5)
    assert distill_loss(r, s) == pytest.approx(expected, abs=1e-12)


def test_distill_rejects_bad_shapes():
    with pytest.raises(ValueError):
        distill_loss([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        distill_loss([], [])


def test_combined_loss_arithmetic_is_exact():
    assert retriever_loss(0.7, 0.3, alpha=0.2) == 0.2 * 0.7 + 0.3
    assert retriever_loss(1.5, 0.0, alpha=0.0) == 0.0
    with pytest.raises(ValueError):
        retriever_loss(1.0, 1.0, alpha=-0.1)


@given(
    hnp.arrays(
        np.float64,
        st.integers(min_value=1, max_value=8),
        elements=st.floats(min_value=-20, max_value=20),
    )
)
@settings(max_examples=50)
def test_softmax_is_a_distribution(scores):
    p = softmax(scores)
    assert p.min() >= 0.0
    assert p.sum() == pytest.approx(1.0, abs=1e-9)


@given(
    st.integers(min_value=2, max_value=6),
    st.integers(min_value=0, max_value=2**31 - 1),
)
@settings(max_examples=40)
def test_distill_kl_never_negative(n, seed):
    rng = np.random.default_rng(seed)
    r, s = rng.normal(size=(2, n)) * 3
    assert distill_loss(r, s) >= -1e-12


# -- model plumbing ----------------------------------------------------------


def test_init_rejects_nonpositive_tau():
    with pytest.raises(ValueError):
        init_bi_encoder(["a"], d_emb=4, d_out=3, tau=0.0, seed=0)


def test_match_score_is_scaled_dot(two_task_pool):
    model = init_bi_encoder(["sun", "moon", "day"], d_emb=6, d_out=4, tau=0.05, seed=2)
    ex = two_task_pool.examples[0]
    direct = float(embed_query(model, "sun moon") @ embed_candidate(model, ex)) / 0.05
    assert match_score(model, "sun moon", ex) == pytest.approx(direct, abs=1e-12)


def test_batch_loss_variant_behaviour(two_task_pool):
    ids = [ex.example_id for ex in two_task_pool.examples if ex.task_id == "alpha"]
    inst = TrainingInstance(
        query_id=ids[0],
        positive_id=ids[1],
        negative_ids=(ids[2], ids[3]),
        llm_scores=(-0.5, -2.0, -4.0),
    )
    vocab = ["sun", "moon", "warm", "cold", "day", "night"]
    model = init_bi_encoder(vocab, d_emb=8, d_out=6, tau=0.1, seed=4)
    targets = [np.array([3.0, 1.0, 0.0])]
    total_full, cont, dist = retriever_batch_loss(
        model, [inst], two_task_pool, targets, alpha=0.2, variant="full"
    )
    assert total_full == pytest.approx(0.2 * cont + dist, abs=1e-12)
    total_nr, cont_nr, dist_nr = retriever_batch_loss(
        model, [inst], two_task_pool, [np.array([1.0, 0.0, 0.0])], alpha=0.2, variant="no_reward"
    )
    assert dist_nr == 0.0
    assert total_nr == pytest.approx(cont_nr, abs=1e-12)


def test_train_retriever_validates_inputs(two_task_pool):
    model = init_bi_encoder(["sun"], d_emb=4, d_out=3, tau=0.1, seed=0)
    with pytest.raises(ValueError):
        train_retriever([], two_task_pool, model, None, 0.2, 1e-3, 1, 4, 0, variant="no_reward")
    inst = TrainingInstance("alpha:1", "alpha:2", ("alpha:3",), (0.0, -1.0))
    with pytest.raises(ValueError):
        train_retriever([inst], two_task_pool, model, None, 0.2, 1e-3, 1, 4, 0, variant="bogus")
    with pytest.raises(ValueError):
        train_retriever([inst], two_task_pool, model, None, 0.2, 1e-3, 1, 4, 0, variant="full")


def test_train_retriever_reduces_loss(two_task_pool):
    ids = [ex.example_id for ex in two_task_pool.examples if ex.task_id == "alpha"]
    instances = [
        TrainingInstance(
            query_id=ids[q],
            positive_id=ids[(q + 1) % 4],
            negative_ids=(ids[(q + 2) % 4], ids[(q + 3) % 4]),
            llm_scores=(0.0, -1.0, -2.0),
        )
        for q in range(4)
    ]
    vocab = ["sun", "moon", "warm", "cold", "day", "night", "dim", "bright"]
    model = init_bi_encoder(vocab, d_emb=10, d_out=8, tau=0.1, seed=9)
    reward_model = init_cross_encoder(vocab, d_emb=10, d_out=8, seed=10)
    curve = train_retriever(
        instances, two_task_pool, model, reward_model,
        alpha=0.2, lr=1e-2, steps=50, batch_size=4, seed=1,
    )
    assert len(curve) == 50
    totals = [t for t, _, _ in curve]
    assert all(math.isfinite(t) for t in totals)
    assert totals[-1] < totals[0]


# -- dense index -------------------------------------------------------------


@pytest.fixture
def indexed(two_task_pool):
    vocab = ["sun", "moon", "warm", "cold", "day", "night", "plus", "one", "two", "three"]
    model = init_bi_encoder(vocab, d_emb=8, d_out=6, tau=0.05, seed=21)
    return model, build_dense_index(two_task_pool, model)


def test_knn_matches_matrix_oracle(indexed, two_task_pool):
    model, index = indexed
    for query in ("sun warm", "two plus one", "night", "zzz"):
        got = knn_search(index, model, query, k=5)
        q = embed_query(model, query)
        oracle = sorted(
            ((ex.example_id, float(embed_candidate(model, ex) @ q) / model.tau)
             for ex in two_task_pool.examples),
            key=lambda item: (-item[1], item[0]),
        )[:5]
        assert [d for d, _ in got] == [d for d, _ in oracle]
        for (_, a), (_, b) in zip(got, oracle):
            assert a == pytest.approx(b, abs=1e-9)


def test_knn_excludes_requested_id(indexed):
    model, index = indexed
    ids = [d for d, _ in knn_search(index, model, "sun", k=10, exclude_id="alpha:1")]
    assert "alpha:1" not in ids
    assert len(ids) == 7


def test_knn_rejects_bad_k(indexed):
    model, index = indexed
    with pytest.raises(ValueError):
        knn_search(index, model, "sun", k=0)


def test_knn_refuses_foreign_model(indexed, two_task_pool):
    _, index = indexed
    other = init_bi_encoder(["sun", "moon"], d_emb=8, d_out=6, tau=0.05, seed=99)
    with pytest.raises(ValueError):
        knn_search(index, other, "sun", k=3)


def test_dense_index_roundtrip(tmp_path, indexed):
    model, index = indexed
    save_dense_index(index, tmp_path / "idx")
    loaded = load_dense_index(tmp_path / "idx")
    assert loaded.ids == index.ids
    assert loaded.model_hash == index.model_hash
    assert np.array_equal(loaded.matrix, index.matrix)
    assert knn_search(loaded, model, "sun warm", k=3) == knn_search(index, model, "sun warm", k=3)


def test_dense_index_detects_tamper(tmp_path, indexed):
    _, index = indexed
    save_dense_index(index, tmp_path / "idx")
    blob = bytearray((tmp_path / "idx.bin").read_bytes())
    blob[7] ^= 0x10
    (tmp_path / "idx.bin").write_bytes(bytes(blob))
    with pytest.raises(ValueError):
        load_dense_index(tmp_path / "idx")
