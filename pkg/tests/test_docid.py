"""Identifier-scheme oracles: k-means fits, nearest-centroid encoding, TU layout."""

import numpy as np
import pytest

from genirlab.autograd import ContractError
from genirlab.backbone import EOS_ID
from genirlab.docid import (
    SCHEME_SPQ,
    SCHEME_TU,
    Docid,
    DocumentRecord,
    PQCodebook,
    collision_rate,
    dump_docid_map,
    fit_pq_codebook,
    load_docid_map,
    pq_encode,
    tu_encode,
)


class TestCodebookFit:
    def test_k_points_k_clusters_recovers_points(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(6, 4))
        cb = fit_pq_codebook(pts, n_subspaces=1, n_centroids=6, token_base=100, seed=1)
        got = {tuple(np.round(c, 9)) for c in cb.centroids[0]}
        want = {tuple(np.round(p, 9)) for p in pts}
        assert got == want

    def test_all_identical_points_degenerate(self):
        pts = np.tile([1.0, 2.0], (8, 1))
        cb = fit_pq_codebook(pts, n_subspaces=1, n_centroids=4, token_base=0, seed=0)
        for c in cb.centroids[0]:
            assert np.array_equal(c, [1.0, 2.0])

    def test_two_means_toy_oracle(self):
        pts = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
        cb = fit_pq_codebook(pts, n_subspaces=1, n_centroids=2, token_base=0, seed=0)
        got = sorted(map(tuple, cb.centroids[0]))
        assert np.allclose(got, [(0.0, 0.5), (10.0, 0.5)])

    def test_fit_preconditions(self):
        with pytest.raises(ContractError):
            fit_pq_codebook(np.ones((3, 4)), n_subspaces=3, n_centroids=2, token_base=0)
        with pytest.raises(ContractError):
            fit_pq_codebook(np.ones((3, 4)), n_subspaces=2, n_centroids=5, token_base=0)

    def test_save_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        cb = fit_pq_codebook(
            rng.normal(size=(40, 8)), 2, 4, token_base=448, seed=3, fit_corpus_tag="slice0"
        )
        path = tmp_path / "codebook.ckpt"
        cb.save(path)
        loaded = PQCodebook.load(path)
        assert np.array_equal(loaded.centroids, cb.centroids)
        assert loaded.token_base == 448
        assert loaded.fit_corpus_tag == "slice0"


class TestPqEncode:
    def test_exact_centroid_embedding(self):
        rng = np.random.default_rng(2)
        cb = fit_pq_codebook(rng.normal(size=(64, 8)), 4, 8, token_base=100, seed=0)
        j = 5
        emb = np.concatenate([cb.centroids[m][j] for m in range(4)])
        docid = pq_encode(emb, cb)
        assert docid.scheme == SCHEME_SPQ
        assert docid.tokens == tuple(100 + m * 8 + j for m in range(4))

    def test_tie_breaks_to_lower_centroid_index(self):
        centroids = np.zeros((1, 3, 2))
        centroids[0, 0] = [1.0, 0.0]
        centroids[0, 1] = [-1.0, 0.0]
        centroids[0, 2] = [5.0, 0.0]
        cb = PQCodebook(centroids=centroids, token_base=10)
        docid = pq_encode(np.array([0.0, 0.0]), cb)  # equidistant from 0 and 1
        assert docid.tokens == (10,)

    def test_matches_bruteforce_scan(self):
        rng = np.random.default_rng(7)
        cb = fit_pq_codebook(rng.normal(size=(100, 16)), 4, 8, token_base=200, seed=1)
        for _ in range(1000):
            emb = rng.normal(size=16)
            got = pq_encode(emb, cb)
            expected = []
            for m in range(4):
                chunk = emb[m * 4 : (m + 1) * 4]
                best_j, best_d = 0, np.inf
                for j in range(8):
                    d = float(((cb.centroids[m][j] - chunk) ** 2).sum())
                    if d < best_d:
                        best_j, best_d = j, d
                expected.append(200 + m * 8 + best_j)
            assert got.tokens == tuple(expected)

    def test_dimension_mismatch(self):
        cb = PQCodebook(centroids=np.zeros((2, 3, 4)), token_base=0)
        with pytest.raises(ContractError):
            pq_encode(np.zeros(6), cb)


class TestTuEncode:
    def test_reversed_path_and_domain(self):
        docid = tu_encode([5, 6], [30, 31], 40)
        assert docid.scheme == SCHEME_TU
        assert docid.tokens == (5, 6, 31, 30, 40, EOS_ID)

    def test_title_capped_at_twenty(self):
        title = list(range(100, 130))
        docid = tu_encode(title, [], 40, cap=50)
        assert docid.tokens[:20] == tuple(range(100, 120))
        assert docid.tokens[20] == 40

    def test_overall_cap_and_eos(self):
        docid = tu_encode(list(range(100, 118)), list(range(50, 60)), 40, cap=24)
        assert len(docid.tokens) == 25  # cap + EOS
        assert docid.tokens[-1] == EOS_ID

    def test_pad_removed_and_determinism(self):
        a = tu_encode([5, 0, 6], [0, 30], 40)
        b = tu_encode([5, 6], [30], 40)
        assert a.tokens == b.tokens

    def test_empty_title_rejected(self):
        with pytest.raises(ContractError):
            tu_encode([], [1], 2)


class TestCollisionRate:
    def test_all_distinct(self):
        ids = [Docid((i,), SCHEME_TU) for i in range(5)]
        assert collision_rate(ids) == 0.0

    def test_two_of_three_shared(self):
        ids = [Docid((1,), SCHEME_TU), Docid((1,), SCHEME_TU), Docid((2,), SCHEME_TU)]
        assert collision_rate(ids) == pytest.approx(2 / 3)

    def test_three_x_one_y(self):
        ids = [Docid((9,), SCHEME_SPQ)] * 3 + [Docid((7,), SCHEME_SPQ)]
        assert collision_rate(ids) == pytest.approx(3 / 4)

    def test_zero_iff_unique(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            toks = rng.integers(0, 5, size=(6, 2))
            ids = [Docid(tuple(int(x) for x in row), SCHEME_TU) for row in toks]
            unique = len({d.tokens for d in ids}) == len(ids)
            assert (collision_rate(ids) == 0.0) == unique


def test_codebook_frozen_encoding_is_stable():
    rng = np.random.default_rng(11)
    base = rng.normal(size=(50, 8))
    cb = fit_pq_codebook(base, 2, 4, token_base=0, seed=2)
    later = rng.normal(size=(20, 8))
    first = [pq_encode(e, cb).tokens for e in later]
    # fitting again on different data must not be implied; same codebook re-encodes identically
    second = [pq_encode(e, cb).tokens for e in later]
    assert first == second


def test_document_record_requires_normalized_embedding():
    v = np.array([3.0, 4.0])
    with pytest.raises(ContractError):
        DocumentRecord("d0", v, (5,), (6,), 7, (8, 9))
    DocumentRecord("d0", v / 5.0, (5,), (6,), 7, (8, 9))


def test_docid_map_roundtrip(tmp_path):
    assignments = {
        "d0": Docid((4, 5, EOS_ID), SCHEME_TU),
        "d1": Docid((448, 465), SCHEME_SPQ),
    }
    path = tmp_path / "docids.tsv"
    dump_docid_map(assignments, path)
    assert load_docid_map(path) == assignments
