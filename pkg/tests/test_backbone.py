"""Backbone contracts: tying, masking, adapters, NLL training."""

import math

import numpy as np
import pytest

import genirlab.autograd as ag
from genirlab.autograd import ContractError, Tensor
from genirlab.backbone import (
    BOS_ID,
    EOS_ID,
    BackboneConfig,
    GenIRModel,
    SupervisionPair,
    batch_nll,
    make_batch,
    train_nll,
)
from genirlab.optim import OptimizerConfig


def small_config(**overrides):
    base = dict(
        vocab_size=64,
        d_model=32,
        n_heads=4,
        d_ff=64,
        max_query_len=8,
        max_docid_len=6,
        init_seed=7,
    )
    base.update(overrides)
    return BackboneConfig(**base)


def random_pairs(n, rng, vocab=64, docid_len=3):
    pairs = []
    for i in range(n):
        q = tuple(int(t) for t in rng.integers(3, vocab - 10, size=5))
        docid = tuple(int(t) for t in rng.integers(3, vocab, size=docid_len)) + (EOS_ID,)
        pairs.append(SupervisionPair(q, docid, "query2docid", dockey=f"d{i}"))
    return pairs


def test_encode_deterministic_and_shaped():
    model = GenIRModel(small_config())
    query = [5, 9, 11]
    m1 = model.encode(query)
    m2 = model.encode(query)
    assert m1.shape == (3, 32)
    assert m1.tobytes() == m2.tobytes()


def test_encode_pad_suffix_does_not_change_real_positions():
    model = GenIRModel(small_config())
    toks = np.array([[5, 9, 11, 0, 0]], dtype=np.int64)
    toks_longer = np.array([[5, 9, 11, 0, 0, 0, 0]], dtype=np.int64)
    lens = np.array([3])
    with ag.no_grad():
        a = model.encode_batch(toks, lens).data[0, :3]
        b = model.encode_batch(toks_longer, lens).data[0, :3]
    assert np.allclose(a, b, atol=1e-12)


def test_encode_contract_errors():
    model = GenIRModel(small_config())
    with pytest.raises(ContractError):
        model.encode([])
    with pytest.raises(ContractError):
        model.encode(list(range(9)))  # longer than max_query_len


def test_decode_step_prefix_cap():
    model = GenIRModel(small_config())
    memory = model.encode([5, 6])[None, :, :]
    with pytest.raises(ContractError):
        model.decode_step(np.zeros((1, 7), dtype=np.int64), memory, np.array([2]))


def test_zero_hidden_gives_zero_logits():
    model = GenIRModel(small_config())
    h = Tensor(np.zeros((2, 32)))
    with ag.no_grad():
        logits = model.logits_from_hidden(h)
    assert not logits.data.any()


def test_tied_projection_identity():
    model = GenIRModel(small_config())
    memory = model.encode([4, 8, 15])
    h, logits = model.decode_step(
        np.array([[7, 9]], dtype=np.int64), memory[None, :, :], np.array([3])
    )
    explicit = h @ model.params[GenIRModel.EMBED].data.T
    assert np.abs(logits - explicit).max() < 1e-12


def test_perturbing_one_embedding_row_changes_only_that_logit():
    model = GenIRModel(small_config())
    query = [4, 8, 15]
    prefix = np.array([[7, 9]], dtype=np.int64)
    memory = model.encode(query)
    _, before = model.decode_step(prefix, memory[None, :, :], np.array([3]))
    tau = 50  # token absent from query and prefix
    bump = np.random.default_rng(9).normal(0.0, 0.5, size=32)
    model.params[GenIRModel.EMBED].data[tau] += bump
    memory2 = model.encode(query)
    _, after = model.decode_step(prefix, memory2[None, :, :], np.array([3]))
    delta = np.abs(after - before)[0]
    assert delta[tau] > 1e-6
    mask = np.ones_like(delta, dtype=bool)
    mask[tau] = False
    assert delta[mask].max() < 1e-12


def test_uniform_model_nll_is_log_vocab():
    model = GenIRModel(small_config())
    for name, t in model.params.items():
        t.data[:] = 0.0
        if name.endswith(".g"):
            t.data[:] = 1.0
    pairs = random_pairs(4, np.random.default_rng(0))
    batch = make_batch(pairs)
    with ag.no_grad():
        loss = batch_nll(model, batch)
    assert loss.item() == pytest.approx(math.log(64), abs=1e-9)


def test_single_pair_nll_matches_hand_recomputation():
    model = GenIRModel(small_config())
    pair = random_pairs(1, np.random.default_rng(5))[0]
    batch = make_batch([pair])
    with ag.no_grad():
        loss = batch_nll(model, batch)
        _, logits = model.teacher_forced(batch.queries, batch.qlens, batch.dec_inputs)
    by_hand = 0.0
    for k, tok in enumerate(pair.docid_tokens):
        row = logits.data[0, k]
        by_hand -= row[tok] - np.log(np.exp(row - row.max()).sum()) - row.max()
    by_hand /= len(pair.docid_tokens)
    assert loss.item() == pytest.approx(by_hand, abs=1e-10)


def test_memorization_sanity_run():
    model = GenIRModel(small_config())
    rng = np.random.default_rng(0)
    pairs = []
    for i in range(10):
        q = tuple(int(t) for t in rng.integers(3, 40, size=5))
        pairs.append(SupervisionPair(q, (44 + i, EOS_ID), "query2docid", dockey=f"d{i}"))
    hist = train_nll(
        model, pairs, OptimizerConfig(kind="adamw", lr=1e-3), epochs=200, batch_size=10, seed=1
    )
    assert hist[-1]["train_nll"] < hist[0]["train_nll"]
    batch = make_batch(pairs)
    with ag.no_grad():
        _, logits = model.teacher_forced(batch.queries, batch.qlens, batch.dec_inputs)
    pred = logits.data[:, 0, :].argmax(axis=1)
    assert (pred == batch.targets[:, 0]).mean() == 1.0


def test_nll_decreases_on_random_pairs():
    model = GenIRModel(small_config())
    pairs = random_pairs(20, np.random.default_rng(2))
    hist = train_nll(
        model, pairs, OptimizerConfig(kind="adamw", lr=1e-3), epochs=10, batch_size=8, seed=3
    )
    assert hist[-1]["train_nll"] < hist[0]["train_nll"]


class TestAdapters:
    def test_fresh_adapter_is_exact_noop(self):
        base = GenIRModel(small_config())
        adapted = GenIRModel(small_config())
        adapted.attach_adapter(rank=4)
        query = [4, 8, 15]
        prefix = np.array([[7]], dtype=np.int64)
        mem_a = base.encode(query)
        mem_b = adapted.encode(query)
        assert np.array_equal(mem_a, mem_b)
        _, la = base.decode_step(prefix, mem_a[None], np.array([3]))
        _, lb = adapted.decode_step(prefix, mem_b[None], np.array([3]))
        assert np.array_equal(la, lb)

    def test_adapter_param_count(self):
        model = GenIRModel(small_config())
        r = 4
        model.attach_adapter(rank=r)
        d, d_ff = 32, 64
        per_attn = 2 * d * r
        per_ffn = r * (d + d_ff)
        expected = (4 * per_attn + 2 * per_ffn) * 2 + (8 * per_attn + 2 * per_ffn) * 2
        # enc: 4 attn + 2 ffn per layer; dec: self+cross (8 attn) + 2 ffn per layer
        assert model.adapter_value_count() == expected

    def test_training_adapters_leaves_backbone_bytes_unchanged(self):
        model = GenIRModel(small_config())
        model.attach_adapter(rank=2)
        model.params.freeze(*model.backbone_names())
        before = model.params.state_hash(model.backbone_names())
        pairs = random_pairs(8, np.random.default_rng(1))
        train_nll(
            model, pairs, OptimizerConfig(kind="adamw", lr=1e-2), epochs=3, batch_size=8
        )
        assert model.params.state_hash(model.backbone_names()) == before
        # adapters actually moved (B nonzero init, A gets gradient, then output shifts)
        assert model.params.state_hash(model.adapter_names()) != GenIRModel(
            small_config()
        ).params.state_hash([])
        moved = any(model.params[n].data.any() for n in model.adapter_names() if n.endswith(".A"))
        assert moved
