import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from refine.rewards import RewardSpec, reward_binary, reward_cosine, reward_hybrid


def test_cosine_examples():
    h = np.array([[1.0, 2.0], [-3.0, 0.5]])
    assert np.isclose(reward_cosine(h, h), 1.0)
    assert np.isclose(reward_cosine([[1.0, 0.0]], [[0.0, 3.0]]), 0.0)
    assert np.isclose(reward_cosine([[1.0, 1.0]], [[1.0, 0.0]]), 1 / np.sqrt(2), atol=1e-4)


def test_cosine_zero_row_scores_zero_and_logs(caplog):
    with caplog.at_level(logging.WARNING, logger="refine.rewards"):
        r = reward_cosine([[0.0, 0.0], [1.0, 0.0]], [[1.0, 0.0], [1.0, 0.0]])
    assert np.isclose(r, 0.5)
    assert "zero-norm" in caplog.text


def test_cosine_shape_mismatch():
    with pytest.raises(ValueError):
        reward_cosine(np.ones((2, 3)), np.ones((3, 3)))


def test_binary_examples():
    assert reward_binary([1, 2, 3], [1, 2, 3]) == 1.0
    assert reward_binary([1, 2, 3], [4, 5, 6]) == 0.0
    assert reward_binary([5, 7, 9, 2, 4], [5, 7, 1, 2, 4]) == 0.8
    with pytest.raises(ValueError):
        reward_binary([1, 2], [1, 2, 3])


def test_hybrid_examples():
    h = np.array([[1.0, 2.0]])
    assert np.isclose(reward_hybrid(h, h, [3], [3]), 2.0)
    assert np.isclose(reward_hybrid([[1.0, 0.0]], [[0.0, 1.0]], [1], [2]), 0.0)
    r = reward_hybrid([[1.0, 1.0]] * 5, [[1.0, 0.0]] * 5, [5, 7, 9, 2, 4], [5, 7, 1, 2, 4])
    assert np.isclose(r, 1.5071, atol=1e-4)


def test_reward_spec_dispatch_and_validation():
    h = np.array([[1.0, 0.0]])
    assert RewardSpec("binary")(h, h, [1], [2]) == 0.0
    assert RewardSpec("cosine")(h, h, [1], [2]) == 1.0
    assert RewardSpec("hybrid")(h, h, [1], [1]) == 2.0
    with pytest.raises(ValueError):
        RewardSpec("edit_distance")


hid = arrays(np.float64, (3, 4), elements=st.floats(-10, 10))
toks = arrays(np.int64, 5, elements=st.integers(0, 257))


@given(hid, hid, st.floats(0.01, 100), st.floats(0.01, 100))
def test_cosine_range_and_scale_invariance(a, b, s1, s2):
    r = reward_cosine(a, b)
    assert -1.0 <= r <= 1.0
    assert np.isclose(reward_cosine(a * s1, b * s2), r, atol=1e-9)


@given(toks, toks, st.permutations(list(range(258))))
def test_binary_symmetry_and_relabeling(p, g, perm):
    perm = np.array(perm)
    r = reward_binary(p, g)
    assert 0.0 <= r <= 1.0
    assert r == reward_binary(g, p)
    assert r == reward_binary(perm[p], perm[g])


@given(hid, hid, toks, toks)
def test_hybrid_is_sum_and_in_range(a, b, p, g):
    r = reward_hybrid(a, b, p, g)
    assert np.isclose(r, reward_cosine(a, b) + reward_binary(p, g))
    assert -1.0 <= r <= 2.0
