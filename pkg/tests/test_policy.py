from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest

from mergeguide.checkpoint import Checkpoint, CheckpointError
from mergeguide.policy import (
    ACTION_GROUP,
    BOA,
    BOT,
    EOA,
    EOT,
    PAD,
    THOUGHT_GROUP,
    VOCAB_SIZE,
    CosineSchedule,
    GradAccumulator,
    NonFiniteError,
    PolicySpec,
    clip_grad_norm,
    context_windows,
    decode,
    encode,
    forward,
    from_checkpoint,
    init_params,
    log_softmax,
    logprobs,
    optimizer_step,
    sample_response,
    sample_responses,
    sampling_distribution,
    to_checkpoint,
    token_groups,
    zero_params,
)

GOLDEN = Path(__file__).parent / "golden"
SMALL = PolicySpec(embed_dim=4, hidden_dim=6, context_window=3, max_thought_len=8)


def reference_forward(params, obs, window):
    """Scalar loop evaluation of one row."""
    d = params["embed.tok"].shape[1]
    z = []
    for j in range(d):
        z.append(sum(float(obs[i]) * float(params["embed.obs"][i, j]) for i in range(len(obs))))
    for t in window:
        z.extend(float(params["embed.tok"][t, j]) for j in range(d))

    def layer(x, w, b, act):
        out = []
        for j in range(w.shape[1]):
            s = float(b[j]) + sum(x[i] * float(w[i, j]) for i in range(len(x)))
            out.append(math.tanh(s) if act else s)
        return out

    h1 = layer(z, params["hidden1.weight"], params["hidden1.bias"], True)
    h2 = layer(h1, params["hidden2.weight"], params["hidden2.bias"], True)
    logits = layer(h2, params["head.weight"], params["head.bias"], False)
    value = layer(h2, params["value.weight"], params["value.bias"], False)[0]
    return np.array(logits), value


def rand_obs(rng, n=1):
    return rng.normal(size=(n, SMALL.obs_dim))


def test_vocab_layout():
    assert VOCAB_SIZE == 22
    assert decode(encode(["1", "+", "<bot>"])) == ["1", "+", "<bot>"]
    with pytest.raises(ValueError):
        encode(["11"])


def test_zero_network_is_uniform():
    p = zero_params(SMALL)
    logits, values, _ = forward(p, rand_obs(np.random.default_rng(0), 3), np.full((3, 3), PAD))
    np.testing.assert_allclose(np.exp(log_softmax(logits)), 1 / 22)
    assert np.all(values == 0)


def test_forward_matches_reference_loops():
    rng = np.random.default_rng(1)
    p = init_params(SMALL, rng)
    p = {k: (v + 0.1 * rng.standard_normal(v.shape)).astype(np.float32) for k, v in p.items()}
    obs = rand_obs(rng, 4)
    win = rng.integers(0, VOCAB_SIZE, size=(4, 3))
    logits, values, _ = forward(p, obs, win)
    for i in range(4):
        ref_l, ref_v = reference_forward(p, obs[i], win[i])
        np.testing.assert_allclose(logits[i], ref_l, rtol=1e-10, atol=1e-12)
        assert values[i] == pytest.approx(ref_v, rel=1e-10, abs=1e-12)


def test_forward_is_deterministic_and_batch_independent():
    rng = np.random.default_rng(2)
    p = init_params(SMALL, rng)
    obs = rand_obs(rng, 70)
    win = rng.integers(0, VOCAB_SIZE, size=(70, 3))
    a = forward(p, obs, win)[0]
    b = forward(p, obs, win)[0]
    assert a.tobytes() == b.tobytes()
    single = np.concatenate([forward(p, obs[i : i + 1], win[i : i + 1])[0] for i in range(70)])
    assert single.tobytes() == a.tobytes()


def test_forward_shape_errors():
    p = zero_params(SMALL)
    with pytest.raises(ValueError):
        forward(p, np.zeros((2, SMALL.obs_dim)), np.zeros((3, 3), dtype=int))
    with pytest.raises(ValueError):
        forward(p, np.zeros((1, SMALL.obs_dim)), np.zeros((1, 5), dtype=int))


def test_context_windows():
    w = context_windows([5], [BOT, 3], 3)
    assert w.tolist() == [[PAD, PAD, 5], [PAD, 5, BOT]]


def test_token_groups():
    toks = [BOT, 1, 2, EOT, BOA, 3, EOA]
    assert token_groups(toks).tolist() == [THOUGHT_GROUP] * 4 + [ACTION_GROUP] * 3


def test_logprobs_uniform_and_errors():
    out = logprobs(zero_params(SMALL), np.zeros(SMALL.obs_dim), [], [BOT, 1, EOT])
    np.testing.assert_allclose(out, math.log(1 / 22))
    with pytest.raises(ValueError):
        logprobs(zero_params(SMALL), np.zeros(SMALL.obs_dim), [], [])
    with pytest.raises(ValueError):
        logprobs(zero_params(SMALL), np.zeros(SMALL.obs_dim), [], [99])


def test_recorded_logprobs_match_teacher_forcing():
    rng = np.random.default_rng(3)
    p = init_params(SMALL, rng, scale=2.0)
    obs = rand_obs(rng, 6)
    prefixes = [[1, 12], [], [3], [4, 12, 5], [], [7]]
    resp = sample_responses(p, obs, prefixes, 1.0, 1.0, rng, SMALL.max_thought_len)
    for o, pre, r in zip(obs, prefixes, resp):
        np.testing.assert_allclose(r.logprobs, logprobs(p, o, pre, r.tokens), atol=1e-6)
        np.testing.assert_allclose(r.sample_logprobs, r.logprobs, atol=1e-12)
        assert r.groups.tolist() == token_groups(r.tokens).tolist()[: len(r.tokens)] or not r.well_formed


def test_response_structure_is_parsed():
    rng = np.random.default_rng(4)
    p = init_params(SMALL, rng)
    for r in sample_responses(p, rand_obs(rng, 40), [[]] * 40, 1.0, 1.0, rng, 4):
        if r.well_formed:
            t = r.tokens
            assert t[0] == BOT and t[-3] == BOA and t[-1] == EOA and t[-4] == EOT
            assert r.thought == t[1:-4] and r.action == t[-2] and len(r.thought) <= 4
        else:
            assert r.action is None


def test_near_zero_temperature_is_greedy():
    rng = np.random.default_rng(5)
    p = init_params(SMALL, rng, scale=3.0)
    obs = rand_obs(rng, 1)
    r = sample_response(p, obs, [], 1e-6, 1.0, rng, 6)
    ctx = []
    for t in r.tokens:
        logits = forward(p, obs, context_windows([], ctx + [t], 3)[-1:])[0][0]
        assert t == int(np.argmax(logits))
        ctx.append(t)


def test_neutral_penalty_is_plain_softmax():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(5, VOCAB_SIZE))
    present = rng.random((5, VOCAB_SIZE)) < 0.5
    plain = np.exp(log_softmax(logits / 0.7))
    np.testing.assert_allclose(sampling_distribution(logits, present, 0.7, 1.0), plain)
    a = sample_response(init_params(SMALL, np.random.default_rng(0)), np.zeros(SMALL.obs_dim),
                        [], 1.0, 1.0, np.random.default_rng(9), 8)
    assert a.tokens == sample_response(init_params(SMALL, np.random.default_rng(0)),
                                       np.zeros(SMALL.obs_dim), [], 1.0, 1.0,
                                       np.random.default_rng(9), 8).tokens


def test_penalty_discourages_repeats():
    logits = np.array([[2.0, -1.0, 0.5]])
    present = np.array([[True, True, False]])
    base = sampling_distribution(logits, np.zeros_like(present), 1.0, 1.2)[0]
    pen = sampling_distribution(logits, present, 1.0, 1.2)[0]
    # present tokens lose mass relative to the untouched one
    assert pen[0] / pen[2] < base[0] / base[2] and pen[1] / pen[2] < base[1] / base[2]


def test_seeded_sampling_golden():
    from mergeguide.trainer import TrainConfig, sft_initialize

    golden = json.loads((GOLDEN / "policy.json").read_text())
    config = TrainConfig(sft_init_hands=150, sft_init_epochs=2)
    p, _ = sft_initialize(init_params(config.policy_spec(), np.random.default_rng(0)), config,
                          np.random.default_rng(1))
    # one-hot hands: (1,2,3,4), (1,2,3,5), ...
    obs = sum(np.eye(44)[[11 * slot + (i + slot) % 10 for i in range(5)]] for slot in range(4))
    rs = sample_responses(p, obs, [[]] * 5, 1.0, 1.2, np.random.default_rng(1), 32)
    assert [r.tokens for r in rs] == golden["sample_tokens"]
    assert any(r.well_formed for r in rs)


def test_sampling_argument_errors():
    p = zero_params(SMALL)
    with pytest.raises(ValueError):
        sample_response(p, np.zeros(SMALL.obs_dim), [], 0.0, 1.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_response(p, np.zeros(SMALL.obs_dim), [], 1.0, 0.5, np.random.default_rng(0))


def test_checkpoint_conversion():
    p = init_params(SMALL, np.random.default_rng(7))
    ck = to_checkpoint(p, SMALL, step_id=3)
    back, spec = from_checkpoint(ck)
    assert spec == SMALL
    assert all(back[k].tobytes() == p[k].tobytes() for k in p)
    with pytest.raises(CheckpointError):
        from_checkpoint(Checkpoint({"x": [1.0]}))
    bad = dict(ck.params)
    bad["head.bias"] = np.zeros(5, dtype=np.float32)
    with pytest.raises(CheckpointError):
        from_checkpoint(Checkpoint(bad))


# --- optimizer ------------------------------------------------------------------


def test_schedule_values():
    s = CosineSchedule()
    assert s.lr(0) == 1e-5
    assert s.lr(25) == 1e-9 and s.lr(40) == 1e-9
    expected = 1e-9 + 0.5 * (1e-5 - 1e-9) * (1 + math.cos(math.pi * 12 / 25))
    assert s.lr(12) == pytest.approx(expected, rel=1e-15)
    assert s.lr(12) == pytest.approx(5.3144e-06, rel=1e-4)


def test_optimizer_step():
    p = init_params(SMALL, np.random.default_rng(8))
    zero = {k: np.zeros(v.shape) for k, v in p.items()}
    out = optimizer_step(p, zero, 0, CosineSchedule(0.1, 0.1, 1))
    assert all(out[k].tobytes() == p[k].tobytes() for k in p)
    g = {k: np.ones(v.shape) for k, v in p.items()}
    out = optimizer_step(p, g, 0, CosineSchedule(0.0, 0.0, 1))
    assert all(out[k].tobytes() == p[k].tobytes() for k in p)
    out = optimizer_step(p, g, 0, CosineSchedule(0.5, 0.5, 1))
    np.testing.assert_allclose(out["head.bias"], p["head.bias"] - 0.5)
    with pytest.raises(NonFiniteError):
        optimizer_step(p, {"head.bias": np.full(22, np.nan)}, 0)
    with pytest.raises(NonFiniteError):
        optimizer_step(p, {"head.bias": np.full(22, 1e300)}, 0, CosineSchedule(1e10, 1e10, 1))


def test_clip_grad_norm():
    g = {"a": np.array([3.0, 4.0])}
    out, n = clip_grad_norm(g, 1.0)
    assert n == 5.0 and np.allclose(out["a"], [0.6, 0.8])
    out, _ = clip_grad_norm(g, 0.0)
    assert out["a"].tolist() == [3.0, 4.0]
    out, _ = clip_grad_norm(g, 10.0)
    assert out["a"].tolist() == [3.0, 4.0]


def test_grad_accumulator_averages():
    acc = GradAccumulator(2)
    assert not acc.add({"a": np.array([1.0])})
    assert acc.add({"a": np.array([3.0])})
    assert acc.pop()["a"].tolist() == [2.0]
    assert not acc
    with pytest.raises(ValueError):
        GradAccumulator(0)
