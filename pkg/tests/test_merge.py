from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergeguide import checkpoint as ck
from mergeguide.checkpoint import Checkpoint, CheckpointBuffer, CheckpointError, ShapeMismatchError
from mergeguide.merge import (
    MergeConfig,
    compute_weights,
    elect_signs,
    merge,
    selective_average,
    trim,
    trim_flat,
)

GOLDEN = Path(__file__).parent / "golden"


def ckpt(values, step=0, name="w"):
    return Checkpoint({name: np.asarray(values, dtype=np.float32)}, step_id=step)


def reference_recursion(n, alpha):
    """Literal smoothing recursion merged_k = a*c_k + (1-a)*merged_{k-1}
    with merged_1 = c_1, tracked as coefficient vectors."""
    coef = [1.0]
    for _ in range(n - 1):
        coef = [(1 - alpha) * c for c in coef] + [alpha]
    return coef


# --- weights ------------------------------------------------------------------


def test_weights_examples():
    assert compute_weights(3, MergeConfig(weighting="sma")) == pytest.approx([1 / 3] * 3, abs=0)
    for a in (0.1, 0.5, 0.9):
        for mode in ("recursive", "closed_form"):
            assert compute_weights(1, MergeConfig(weighting="ema", alpha=a, ema_mode=mode)) == [1.0]
    for mode in ("recursive", "closed_form"):
        assert compute_weights(3, MergeConfig(weighting="ema", alpha=0.5, ema_mode=mode)) == [0.25, 0.25, 0.5]


@pytest.mark.parametrize("alpha", [0.1, 0.3, 0.5, 0.7, 0.9])
@pytest.mark.parametrize("n", [1, 2, 5, 12])
def test_weights_match_reference_recursion(alpha, n):
    ref = reference_recursion(n, alpha)
    for mode in ("recursive", "closed_form"):
        w = compute_weights(n, MergeConfig(weighting="ema", alpha=alpha, ema_mode=mode))
        assert w == pytest.approx(ref, rel=1e-12, abs=1e-15)
        assert math.fsum(w) == pytest.approx(1.0, abs=1e-12)
        assert all(x >= 0 for x in w)


def test_early_step_bias_of_recursion():
    # the oldest checkpoint keeps the undistributed mass, more than its successor
    w = compute_weights(6, MergeConfig(weighting="ema", alpha=0.5))
    assert w[0] == w[1] == 0.5**5


def test_weights_errors():
    with pytest.raises(ValueError):
        compute_weights(0, MergeConfig())
    for bad in ({"alpha": 0.0}, {"alpha": 1.0}, {"density_k": 0.0}, {"density_k": 1.5},
                {"method": "dare"}, {"weighting": "wma"}, {"ema_mode": "other"}):
        with pytest.raises(ValueError):
            MergeConfig(**bad)


# --- trim / elect / average -----------------------------------------------------


def test_trim_examples():
    d = np.array([0.5, -0.1, 0.3, 0.05])
    np.testing.assert_array_equal(trim_flat(d, 1.0), d)
    np.testing.assert_array_equal(trim_flat(d, 0.5), [0.5, 0, 0.3, 0])
    np.testing.assert_array_equal(trim_flat(np.zeros(5), 0.3), np.zeros(5))


def test_trim_is_global_across_tensors():
    delta = Checkpoint({"a": [0.1, 0.2], "b": [0.9, 0.05]})
    out = trim(delta, 0.5)
    assert out.params["a"].tolist() == [0.0, np.float32(0.2)]
    assert out.params["b"].tolist() == [np.float32(0.9), 0.0]


def test_trim_count_uses_ceiling():
    d = np.arange(1.0, 11.0)
    assert np.count_nonzero(trim_flat(d, 0.7)) == 7
    assert np.count_nonzero(trim_flat(d, 0.71)) == 8
    assert np.count_nonzero(trim_flat(d, 0.01)) == 1


def test_elect_examples():
    single = elect_signs([ckpt([0.5, -0.2, 0.0])], [1.0])["w"]
    assert single.tolist() == [1, -1, 0]
    three = elect_signs([ckpt([0.5]), ckpt([-0.2]), ckpt([-0.2])], [1 / 3] * 3)["w"]
    assert three.tolist() == [1]
    tie = elect_signs([ckpt([0.3]), ckpt([-0.3])], [0.5, 0.5])["w"]
    assert tie.tolist() == [0]


def test_selective_average_examples():
    deltas = [ckpt([0.5, 0.5]), ckpt([-0.2, 0.5]), ckpt([-0.2, 0.5])]
    signs = {"w": np.array([1, 0], dtype=np.int8)}
    out = selective_average(deltas, [0.5, 0.25, 0.25], signs)
    assert out.params["w"].tolist() == [0.5, 0.0]
    same = [ckpt([0.25, -1.0])] * 3
    out = selective_average(same, [1 / 3] * 3, elect_signs(same, [1 / 3] * 3))
    assert out.params["w"].tolist() == [0.25, -1.0]


# --- merge ----------------------------------------------------------------------


def hand_fixture():
    base = ckpt([0.0, 0.0, 0.0, 0.0])
    c1 = ckpt([0.5, -0.1, 0.3, 0.05], step=1)
    c2 = ckpt([-0.4, 0.2, 0.1, -0.6], step=2)
    return CheckpointBuffer(base, [c1, c2])


def test_hand_fixture_merge():
    # trim k=0.5: c1 -> [0.5, 0, 0.3, 0], c2 -> [-0.4, 0, 0, -0.6]
    # votes: +0.05, 0, +0.15, -0.3 -> signs [+, 0, +, -]
    merged = merge(hand_fixture(), MergeConfig("ties", density_k=0.5))
    assert merged.params["w"].tolist() == np.array([0.5, 0.0, 0.3, -0.6], dtype=np.float32).tolist()
    assert merged.step_id == 2
    assert ck.to_bytes(merged) == (GOLDEN / "ties_hand_fixture.gtck").read_bytes()


def test_empty_buffer_errors():
    with pytest.raises(CheckpointError):
        merge(CheckpointBuffer(ckpt([0.0])), MergeConfig())


def test_incompatible_history_errors():
    with pytest.raises(ShapeMismatchError):
        CheckpointBuffer(ckpt([0.0]), [ckpt([0.0, 1.0], step=1)])


def test_linear_ema_recursive_is_literal_recursion():
    hist = [ckpt([1.0, 2.0], 1), ckpt([3.0, -2.0], 2), ckpt([0.5, 0.5], 3)]
    out = merge(CheckpointBuffer(ckpt([0.0, 0.0]), hist),
                MergeConfig("linear", weighting="ema", alpha=0.5, ema_mode="recursive"))
    m = np.array([1.0, 2.0])
    for c in hist[1:]:
        m = 0.5 * c.params["w"].astype(np.float64) + 0.5 * m
    assert out.params["w"].tolist() == m.astype(np.float32).tolist()


def _random_buffer(rng, n, same_signs=False, identical=False):
    shape = {"a": (3, 2), "b": (4,)}
    base = Checkpoint({k: rng.normal(size=s) for k, s in shape.items()})
    signs = {k: rng.choice([-1.0, 1.0], size=s) for k, s in shape.items()}
    first = None
    hist = []
    for i in range(n):
        if identical and first is not None:
            hist.append(first.replace(step_id=i + 1))
            continue
        params = {}
        for k, s in shape.items():
            d = rng.normal(size=s)
            if same_signs:
                d = signs[k] * (np.abs(d) + 0.01)
            params[k] = base.params[k] + d
        c = Checkpoint(params, step_id=i + 1)
        first = first or c
        hist.append(c)
    return CheckpointBuffer(base, hist)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6),
       st.sampled_from(["ties", "linear"]), st.sampled_from(["sma", "ema"]),
       st.floats(0.05, 0.95), st.floats(0.05, 1.0))
def test_idempotent_on_identical(seed, n, method, weighting, alpha, density):
    rng = np.random.default_rng(seed)
    buf = _random_buffer(rng, n, identical=True)
    # the buffer's first entry is the anchor, as in the trainer
    buf = CheckpointBuffer(buf.history[0].replace(step_id=0), buf.history)
    out = merge(buf, MergeConfig(method, density, weighting, alpha))
    for k, v in buf.history[0].params.items():
        np.testing.assert_array_max_ulp(out.params[k], v, maxulp=1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.sampled_from(["sma", "ema"]), st.floats(0.05, 0.95))
def test_ties_full_density_same_signs_equals_linear(seed, n, weighting, alpha):
    buf = _random_buffer(np.random.default_rng(seed), n, same_signs=True)
    a = merge(buf, MergeConfig("ties", 1.0, weighting, alpha))
    b = merge(buf, MergeConfig("linear", 1.0, weighting, alpha))
    assert ck.to_bytes(a) == ck.to_bytes(b)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_sma_merge_is_order_invariant(seed, n):
    rng = np.random.default_rng(seed)
    buf = _random_buffer(rng, n)
    perm = rng.permutation(n)
    shuffled = CheckpointBuffer(buf.base, [buf.history[i].replace(step_id=j + 1) for j, i in enumerate(perm)])
    for method in ("ties", "linear"):
        a = merge(buf, MergeConfig(method, 0.6))
        b = merge(shuffled, MergeConfig(method, 0.6))
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()


def test_merge_is_deterministic():
    buf = _random_buffer(np.random.default_rng(3), 5)
    outs = {ck.to_bytes(merge(buf, MergeConfig("ties", 0.8, "ema", 0.3))) for _ in range(3)}
    assert len(outs) == 1


def test_linear_sma_matches_plain_mean():
    buf = _random_buffer(np.random.default_rng(4), 4)
    out = merge(buf, MergeConfig("linear"))
    for k in out.params:
        ref = np.mean([c.params[k].astype(np.float64) for c in buf.history], axis=0)
        np.testing.assert_allclose(out.params[k], ref, rtol=1e-6, atol=1e-6)
