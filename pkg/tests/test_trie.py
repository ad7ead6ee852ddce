"""Trie contracts, beam-search oracles, and constrained-decode fuzzing."""

import numpy as np
import pytest

from genirlab.autograd import ContractError
from genirlab.backbone import BackboneConfig, EOS_ID, GenIRModel
from genirlab.trie import (
    PrefixTrie,
    ScoredDocid,
    constrained_beam_search,
    constrained_beam_search_batch,
)

from helpers import ToyScorer, exhaustive_ranking, random_trie


class TestTrieBasics:
    def test_insert_and_valid_next(self):
        trie = PrefixTrie()
        trie.insert([1, 2, EOS_ID], "a")
        assert 1 in trie.valid_next([])
        assert trie.valid_next([1]) == [2]
        assert trie.valid_next([1, 2]) == [EOS_ID]

    def test_duplicate_docids_accumulate_dockeys(self):
        trie = PrefixTrie()
        trie.insert([4, 5], "a")
        trie.insert([4, 5], "b")
        node = trie.node_at([4, 5])
        assert node.terminal and node.dockeys == {"a", "b"}
        assert len(trie) == 1

    def test_branching(self):
        trie = PrefixTrie()
        trie.insert([1, 2], "a")
        trie.insert([1, 3], "b")
        assert trie.valid_next([1]) == [2, 3]

    def test_empty_trie_and_invalid_paths(self):
        trie = PrefixTrie()
        assert trie.valid_next([]) == []
        trie.insert([7], "x")
        assert trie.valid_next([9]) == []  # not a path
        assert trie.valid_next([7]) == []  # terminal-only node

    def test_empty_docid_rejected(self):
        with pytest.raises(ContractError):
            PrefixTrie().insert([], "a")

    def test_valid_next_matches_prefix_filter_oracle(self):
        rng = np.random.default_rng(0)
        trie, docids = random_trie(rng, vocab_size=12, n_docids=50)
        all_ids = list(docids)
        for _ in range(200):
            probe = all_ids[rng.integers(len(all_ids))]
            cut = int(rng.integers(0, len(probe) + 1))
            prefix = probe[:cut]
            expected = sorted(
                {d[cut] for d in all_ids if len(d) > cut and d[:cut] == prefix}
            )
            assert trie.valid_next(prefix) == expected

    def test_sorted_list_roundtrip(self):
        rng = np.random.default_rng(3)
        trie, _ = random_trie(rng, vocab_size=9, n_docids=30)
        listed = trie.to_sorted_list()
        rebuilt = PrefixTrie()
        for tokens, keys in listed:
            for k in keys:
                rebuilt.insert(tokens, k)
        assert rebuilt.to_sorted_list() == listed


class TestBeamSearch:
    def test_single_docid_forced_path(self):
        model = ToyScorer(vocab_size=16, seed=1)
        trie = PrefixTrie()
        trie.insert([5, 9, EOS_ID], "only")
        out = constrained_beam_search(model, [3, 4], trie, beam_size=4)
        assert len(out) == 1
        assert out[0].tokens == (5, 9, EOS_ID)
        assert out[0].dockeys == ("only",)
        # forced path: every step is a singleton softmax, logprob exactly 0
        assert out[0].logprob == pytest.approx(0.0, abs=1e-12)

    def test_zero_hook_identical_to_hookless(self):
        model = ToyScorer(vocab_size=20, seed=2)
        rng = np.random.default_rng(5)
        trie, _ = random_trie(rng, vocab_size=20, n_docids=12)
        plain = constrained_beam_search(model, [3, 7], trie, beam_size=5)
        zero = constrained_beam_search(
            model, [3, 7], trie, beam_size=5, hook=lambda k, p, h, v: np.zeros(len(v))
        )
        assert plain == zero

    def test_beam_equals_exhaustive_oracle(self):
        for seed in range(5):
            model = ToyScorer(vocab_size=24, seed=seed)
            rng = np.random.default_rng(100 + seed)
            trie, _ = random_trie(rng, vocab_size=24, n_docids=8)
            got = constrained_beam_search(model, [4, 5, 6], trie, beam_size=len(trie))
            want = exhaustive_ranking(model, [4, 5, 6], trie)
            assert len(got) == len(want)
            for g, (lp, tokens, keys) in zip(got, want):
                assert g.tokens == tokens
                assert g.dockeys == keys
                assert g.logprob == pytest.approx(lp, abs=1e-9)

    def test_beam_oracle_with_real_backbone(self):
        cfg = BackboneConfig(
            vocab_size=48, d_model=32, n_heads=4, d_ff=64, max_query_len=6, max_docid_len=6
        )
        model = GenIRModel(cfg)
        rng = np.random.default_rng(9)
        trie, _ = random_trie(rng, vocab_size=48, n_docids=10, max_len=4)
        got = constrained_beam_search(model, [5, 6, 7], trie, beam_size=len(trie))
        want = exhaustive_ranking(model, [5, 6, 7], trie)
        for g, (lp, tokens, keys) in zip(got, want):
            assert g.tokens == tokens
            assert g.logprob == pytest.approx(lp, abs=1e-9)

    def test_validity_fuzz_random_hooks(self):
        rng = np.random.default_rng(77)
        checked = 0
        for trial in range(60):
            model = ToyScorer(vocab_size=16, seed=trial)
            trie, docids = random_trie(rng, vocab_size=16, n_docids=int(rng.integers(2, 20)))
            hook_rng = np.random.default_rng(trial)

            def hook(k, prefix, hidden, valid):
                return hook_rng.normal(scale=5.0, size=len(valid))

            queries = [[int(t) for t in rng.integers(3, 16, size=3)] for _ in range(4)]
            batches = constrained_beam_search_batch(
                model, queries, trie, beam_size=3, hooks=hook
            )
            for ranked in batches:
                for item in ranked:
                    assert item.tokens in docids
                    checked += 1
        assert checked > 100

    def test_monotone_beams(self):
        model = ToyScorer(vocab_size=20, seed=3)
        rng = np.random.default_rng(11)
        trie, _ = random_trie(rng, vocab_size=20, n_docids=15)
        query = [4, 9]
        tops = []
        for beam in (1, 2, 4, 8, 16):
            out = constrained_beam_search(model, query, trie, beam_size=beam)
            assert out
            tops.append(out[0].logprob)
        assert all(b >= a - 1e-12 for a, b in zip(tops, tops[1:]))

    def test_hook_changes_order_not_support(self):
        model = ToyScorer(vocab_size=18, seed=4)
        rng = np.random.default_rng(13)
        trie, _ = random_trie(rng, vocab_size=18, n_docids=6)
        full = len(trie)
        plain = constrained_beam_search(model, [5], trie, beam_size=full)
        hook_rng = np.random.default_rng(0)
        biased = constrained_beam_search(
            model,
            [5],
            trie,
            beam_size=full,
            hook=lambda k, p, h, v: hook_rng.normal(scale=3.0, size=len(v)),
        )
        assert {r.tokens for r in plain} == {r.tokens for r in biased}

    def test_expanded_protocol_consistency(self):
        model = ToyScorer(vocab_size=20, seed=6)
        rng = np.random.default_rng(21)
        first = [(tuple(int(t) for t in rng.integers(3, 20, size=3)), f"a{i}") for i in range(6)]
        second = [(tuple(int(t) for t in rng.integers(3, 20, size=3)), f"b{i}") for i in range(4)]

        grown = PrefixTrie()
        for tokens, key in first:
            grown.insert(tokens, key)
        for tokens, key in second:
            grown.insert(tokens, key)

        fresh = PrefixTrie()
        for tokens, key in first + second:
            fresh.insert(tokens, key)

        q = [4, 5]
        assert constrained_beam_search(model, q, grown, 5) == constrained_beam_search(
            model, q, fresh, 5
        )

    def test_empty_trie_returns_nothing(self):
        model = ToyScorer(vocab_size=8, seed=0)
        assert constrained_beam_search(model, [3], PrefixTrie(), beam_size=3) == []

    def test_beam_size_contract(self):
        model = ToyScorer(vocab_size=8, seed=0)
        with pytest.raises(ContractError):
            constrained_beam_search(model, [3], PrefixTrie(), beam_size=0)
