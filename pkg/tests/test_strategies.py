"""Baselines and the Bernoulli ablation."""

import math

import numpy as np
import pytest

from ldar import diffcore as dc
from ldar import policy as pol
from ldar import strategies as st
from ldar.diffcore import Tape, Tensor
from ldar.errors import UsageError

SMALL = pol.PolicyConfig(d_model=16, n_layers=1, n_heads=2, n_frequencies=4)


# ---------------------------------------------------------------------------
# top_k / long_context


def test_top_k_argmax():
    assert st.top_k([0.2, 0.9, 0.5], 1) == [1]


def test_top_k_equals_long_context_at_n():
    s = [0.3, 0.1, 0.7]
    assert st.top_k(s, 3) == st.long_context(s) == [0, 1, 2]
    assert st.top_k(s, 10) == [0, 1, 2]


def test_top_k_tie_goes_to_lower_index():
    # Brute-force oracle: stable sort on (-score, index).
    s = [0.5, 0.5, 0.1]
    oracle = sorted(sorted(range(3)), key=lambda i: -s[i])[:1]
    assert st.top_k(s, 1) == sorted(oracle) == [0]


def test_top_k_rejects_bad_k():
    with pytest.raises(UsageError):
        st.top_k([0.1], 0)


def test_top_k_nesting_property():
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = rng.uniform(-1, 1, rng.integers(1, 30))
        for k in range(1, len(s)):
            assert set(st.top_k(s, k)) <= set(st.top_k(s, k + 1))


# ---------------------------------------------------------------------------
# adaptive_k


def brute_force_adaptive_k(scores):
    """O(N^2) oracle: try every cut point, take the largest gap (first wins)."""
    s = list(scores)
    n = len(s)
    if n == 1:
        return [0]
    desc = []
    remaining = list(range(n))
    while remaining:  # selection sort by (-score, index)
        best = remaining[0]
        for j in remaining[1:]:
            if s[j] > s[best]:
                best = j
        desc.append(best)
        remaining.remove(best)
    best_cut, best_gap = 1, -1.0
    for cut in range(1, n):
        gap = s[desc[cut - 1]] - s[desc[cut]]
        if gap > best_gap:
            best_cut, best_gap = cut, gap
    return sorted(desc[:best_cut])


def test_adaptive_k_documented_example():
    s = [0.9, 0.85, 0.5, 0.45]
    assert st.adaptive_k(s) == [0, 1]


def test_adaptive_k_single_passage():
    assert st.adaptive_k([0.3]) == [0]


def test_adaptive_k_all_equal_takes_top_one():
    assert st.adaptive_k([0.4, 0.4, 0.4]) == [0]


def test_adaptive_k_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(300):
        n = int(rng.integers(2, 60))
        s = rng.uniform(-1, 1, n)
        assert st.adaptive_k(s) == brute_force_adaptive_k(s)


# ---------------------------------------------------------------------------
# strategy specs


def test_parse_strategy_kinds():
    assert st.parse_strategy("top_k:5") == st.StrategySpec("top_k", k=5)
    assert st.parse_strategy("long_context").kind == "long_context"
    assert st.parse_strategy("adaptive_k").kind == "adaptive_k"
    spec = st.parse_strategy("ldar_checkpoint:/tmp/x.ckpt")
    assert spec.kind == "ldar_checkpoint" and spec.path == "/tmp/x.ckpt"
    assert st.parse_strategy("top_k:5").label == "top_5"


def test_parse_strategy_rejects_garbage():
    for bad in ("top_k:x", "top_k:0", "nonsense", "ldar_checkpoint:",
                "long_context:3"):
        with pytest.raises(UsageError):
            st.parse_strategy(bad)


# ---------------------------------------------------------------------------
# Bernoulli policy


def zeroed_head_policy(seed=0):
    policy = st.BernoulliPolicy(SMALL, seed=seed)
    policy.params["head.select.w"].data[:] = 0.0
    policy.params["head.select.b"].data[:] = 0.0
    return policy


def test_zero_logits_give_half_probability():
    policy = zeroed_head_policy()
    logits, _ = policy.token_logits(np.linspace(-1, 1, 6))
    assert np.allclose(logits.data, 0.0)
    from ldar.specials import sigmoid

    assert np.allclose(sigmoid(logits.data), 0.5)


def test_bernoulli_log_prob_closed_form():
    # Three passages, p = 0.5 each, all selected: 3 * ln(1/2).
    logits = Tensor(np.zeros((3, 1)))
    node = st.bernoulli_log_prob(logits, np.ones((3, 1)))
    assert node.item() == pytest.approx(3 * math.log(0.5), rel=1e-12)


def test_bernoulli_log_prob_gradient_fd():
    rng = np.random.default_rng(2)
    h = 1e-6
    worst = 0.0
    for _ in range(20):
        raw = rng.normal(size=(5, 1))
        mask = (rng.random((5, 1)) < 0.5).astype(float)
        t = Tensor(raw.copy(), requires_grad=True, name="l")
        with Tape() as tape:
            node = st.bernoulli_log_prob(t, mask)
            grads = dc.backward(tape, node)

        def value(arr):
            return st.bernoulli_log_prob(Tensor(arr), mask).item()

        for i in range(5):
            up, down = raw.copy(), raw.copy()
            up[i, 0] += h
            down[i, 0] -= h
            fd = (value(up) - value(down)) / (2 * h)
            g = grads["l"][i, 0]
            worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), 1e-3))
    assert worst < 1e-4


def test_bernoulli_rollout_log_prob_consistent():
    policy = st.BernoulliPolicy(SMALL, seed=3)
    rng = np.random.default_rng(0)
    scores = rng.uniform(-1, 1, 9)
    out = policy.rollout(scores, np.random.default_rng(5))
    logits, order = policy.token_logits(scores)
    from ldar.specials import sigmoid

    p = sigmoid(logits.data).ravel()
    mask = np.zeros(9, dtype=bool)
    inv = {int(o): r for r, o in enumerate(order)}
    for idx in out.selection:
        mask[inv[idx]] = True
    expect = float(np.sum(np.where(mask, np.log(p), np.log1p(-p))))
    assert out.log_prob_node.item() == pytest.approx(expect, rel=1e-10)


def test_bernoulli_deterministic_mode():
    policy = zeroed_head_policy()
    policy.params["head.select.b"].data[:] = 2.0  # p ~ 0.88 for every token
    scores = np.linspace(-1, 1, 7)
    assert policy.deterministic_selection(scores) == list(range(7))
    policy.params["head.select.b"].data[:] = -2.0  # p ~ 0.12: empty -> top-1
    assert policy.deterministic_selection(scores) == [6]


def test_bernoulli_empty_sample_forced_to_top_one():
    policy = zeroed_head_policy()
    policy.params["head.select.b"].data[:] = -40.0  # p ~ 0: always empty
    scores = np.array([0.2, 0.9, -0.5])
    out = policy.rollout(scores, np.random.default_rng(0))
    assert out.selection == [1]  # highest-similarity passage


def test_bernoulli_batch_matches_single():
    policy = st.BernoulliPolicy(SMALL, seed=4)
    rng = np.random.default_rng(1)
    scores = [rng.uniform(-1, 1, 8) for _ in range(3)]
    single = [policy.rollout(s, np.random.default_rng(100 + i)).selection
              for i, s in enumerate(scores)]
    logits_ok = policy.rollout_batch(scores, np.random.default_rng(0))
    assert len(logits_ok.selections) == 3
    assert logits_ok.log_prob_values.shape == (3,)
    # same per-instance seeds give the same masks as the single path
    for i, s in enumerate(scores):
        again = policy.rollout_batch([s], np.random.default_rng(100 + i))
        assert again.selections[0] == single[i]


# ---------------------------------------------------------------------------
# band vs Bernoulli selection structure


def rank_set(scores, selection):
    order = np.argsort(np.asarray(scores), kind="stable")
    pos = {int(o): r for r, o in enumerate(order)}
    return sorted(pos[i] for i in selection)


def test_band_contiguous_bernoulli_not():
    band = pol.BandPolicy(SMALL, seed=5)
    bern = st.BernoulliPolicy(SMALL, seed=5)
    rng = np.random.default_rng(6)
    bern_noncontiguous = 0
    for _ in range(40):
        scores = rng.uniform(-1, 1, 15)
        sel_band, _ = band.selection(scores, rng)
        ranks = rank_set(scores, sel_band)
        assert ranks == list(range(ranks[0], ranks[-1] + 1))
        sel_bern = bern.rollout(scores, rng).selection
        if sel_bern:
            r = rank_set(scores, sel_bern)
            if r != list(range(r[0], r[-1] + 1)):
                bern_noncontiguous += 1
    assert bern_noncontiguous > 0
