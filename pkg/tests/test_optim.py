"""Masked-step, freeze, and schedule contracts."""

import numpy as np
import pytest

from genirlab.autograd import ContractError
from genirlab.checkpoint import load_params, save_params
from genirlab.optim import (
    Optimizer,
    OptimizerConfig,
    ParameterSet,
    RowGradientMask,
    WarmupDecaySchedule,
    masked_step,
)


def make_params(seed=0, shape=(6, 4)):
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    params.add("w", rng.normal(size=shape))
    return params


def set_grad(params, name, grad):
    params[name].grad = np.asarray(grad, dtype=np.float64)


def test_empty_mask_is_noop_byte_identical(tmp_path):
    params = make_params()
    set_grad(params, "w", np.ones((6, 4)))
    before = tmp_path / "before.ckpt"
    after = tmp_path / "after.ckpt"
    save_params(params, before)
    masked_step(params, [RowGradientMask.of("w", [])], OptimizerConfig(kind="adamw", lr=0.1))
    save_params(params, after)
    assert before.read_bytes() == after.read_bytes()


def test_single_row_sgd():
    params = make_params()
    w0 = params["w"].data.copy()
    grad = np.zeros((6, 4))
    grad[1] = 2.0
    grad[0] = 7.0  # must be ignored: row 0 not allowed
    set_grad(params, "w", grad)
    masked_step(
        params,
        [RowGradientMask.of("w", [1])],
        OptimizerConfig(kind="sgd", lr=0.1, schedule="constant"),
    )
    w1 = params["w"].data
    assert np.array_equal(w1[1], w0[1] - 0.1 * 2.0)
    for r in (0, 2, 3, 4, 5):
        assert w1[r].tobytes() == w0[r].tobytes()


def scalar_adamw_reference(w, g, m, v, t, lr, b1, b2, eps):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh = m / (1 - b1**t)
    vh = v / (1 - b2**t)
    return w - lr * mh / (np.sqrt(vh) + eps), m, v


def test_masked_adamw_matches_scalar_reference():
    cfg = OptimizerConfig(kind="adamw", lr=0.05, schedule="constant")
    params = make_params(seed=3)
    w0 = params["w"].data.copy()
    opt = Optimizer(params, cfg)
    rng = np.random.default_rng(7)

    ref_w = w0.copy()
    ref_m = np.zeros_like(w0)
    ref_v = np.zeros_like(w0)
    allowed = [2, 5]
    for t in range(1, 4):
        grad = rng.normal(size=w0.shape)
        set_grad(params, "w", grad)
        opt.step([RowGradientMask.of("w", allowed)])
        for r in allowed:
            ref_w[r], ref_m[r], ref_v[r] = scalar_adamw_reference(
                ref_w[r], grad[r], ref_m[r], ref_v[r], t, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps
            )

    assert np.allclose(params["w"].data, ref_w, atol=1e-15)
    # untouched rows and their moment buffers are bit-identical / zero
    for r in (0, 1, 3, 4):
        assert params["w"].data[r].tobytes() == w0[r].tobytes()
        assert not opt._m["w"][r].any()
        assert not opt._v["w"][r].any()


def test_frozen_parameter_never_moves():
    params = make_params()
    params.add("b", np.ones(4))
    params.freeze("b")
    set_grad(params, "w", np.ones((6, 4)))
    set_grad(params, "b", np.ones(4))
    before = params["b"].data.copy()
    opt = Optimizer(params, OptimizerConfig(kind="adamw", lr=0.5, schedule="constant"))
    for _ in range(3):
        opt.step()
    assert params["b"].data.tobytes() == before.tobytes()
    assert not np.array_equal(params["w"].data, make_params()["w"].data)


def test_mask_out_of_range_rejected():
    params = make_params()
    set_grad(params, "w", np.ones((6, 4)))
    opt = Optimizer(params, OptimizerConfig(kind="sgd"))
    with pytest.raises(ContractError):
        opt.step([RowGradientMask.of("w", [6])])


def test_mask_unknown_parameter_rejected():
    params = make_params()
    opt = Optimizer(params, OptimizerConfig(kind="sgd"))
    with pytest.raises(ContractError):
        opt.step([RowGradientMask.of("nope", [0])])


def test_warmup_decay_shape():
    sched = WarmupDecaySchedule(base_lr=1.0, total_steps=20, warmup_frac=0.1)
    lrs = [sched.lr_at(s) for s in range(20)]
    assert lrs[0] == pytest.approx(0.5)
    assert lrs[1] == pytest.approx(1.0)
    assert max(lrs) == pytest.approx(1.0)
    assert lrs[-1] == pytest.approx(0.0)
    assert all(a >= b for a, b in zip(lrs[1:], lrs[2:]))  # decay is monotone


def test_state_hash_detects_changes():
    params = make_params()
    h0 = params.state_hash()
    assert params.state_hash() == h0
    params["w"].data[0, 0] += 1e-12
    assert params.state_hash() != h0


def test_checkpoint_roundtrip(tmp_path):
    params = make_params(seed=9)
    params.add("scalarish", np.array(3.25))
    params.freeze("scalarish")
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_params(params, p1)
    loaded = load_params(p1)
    assert loaded.names() == params.names()
    assert loaded.frozen_names() == params.frozen_names()
    for name, tensor in params.items():
        assert np.array_equal(loaded[name].data, tensor.data)
    save_params(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ContractError):
        load_params(path)
