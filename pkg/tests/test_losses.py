import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from partlab import autodiff as ad
from partlab.autodiff import ContractError, Tape, Tensor, grad_check
from partlab.losses import (LossMask, SharpenConfig, bce_masked, consistency_loss, pseudo_loss,
                            sharpen, sharpen_values, total_loss)

GRID = np.linspace(0.0, 1.0, 1001)
INF = SharpenConfig(t=math.inf)


def _mask(states):
    return LossMask.from_states(np.asarray(states))


# ------------------------------------------------------------------ sharpen


@pytest.mark.parametrize("a,t,expected", [
    (0.8, 1.0, 1.0), (0.8, 4.0, 0.85), (0.5, 4.0, 0.375), (0.0, 4.0, 0.0), (1.0, 4.0, 1.0),
    (0.0, 1.0, 0.0), (1.0, 8.0, 1.0),
])
def test_sharpen_examples(a, t, expected):
    assert sharpen_values(a, SharpenConfig(t=t)) == pytest.approx(expected, abs=1e-15)


def test_sharpen_t1_is_hard():
    out = sharpen_values(GRID, SharpenConfig(t=1.0))
    assert set(np.unique(out).tolist()) <= {0.0, 1.0}


def test_sharpen_infinite_is_identity():
    assert sharpen_values(GRID, INF).tobytes() == GRID.tobytes()


@pytest.mark.parametrize("t", [2.0, 4.0, 8.0])
def test_sharpen_bounded_shift(t):
    assert np.all(np.abs(sharpen_values(GRID, SharpenConfig(t=t)) - GRID) <= 1.0 / t)


@pytest.mark.parametrize("t", [1.0, 2.0, 4.0, 8.0])
def test_sharpen_branches(t):
    cfg = SharpenConfig(t=t)
    out = sharpen_values(GRID, cfg)
    up, down = GRID > cfg.tau, GRID <= cfg.tau
    assert np.all(out[up] >= GRID[up]) and np.all(out[down] <= GRID[down])
    assert np.all(np.diff(out[up]) >= 0) and np.all(np.diff(out[down]) >= 0)


def test_sharpen_detaches():
    a = Tensor(np.array([0.2, 0.9]), requires_grad=True)
    with Tape() as tape:
        s = sharpen(a)
    assert not s.requires_grad and len(tape) == 0
    assert isinstance(sharpen(np.array([0.3])), np.ndarray)


@pytest.mark.parametrize("kwargs", [{"t": 0.0}, {"t": -1.0}, {"tau": 0.0}, {"tau": 1.0}])
def test_sharpen_config_validation(kwargs):
    with pytest.raises(ContractError):
        SharpenConfig(**kwargs)


# ------------------------------------------------------------------ terms


def test_bce_examples():
    assert bce_masked(Tensor([[0.5]]), _mask([[1]])).item() == pytest.approx(0.693147, abs=1e-6)
    assert bce_masked(Tensor([[1.0]]), _mask([[1]])).item() == pytest.approx(0.0, abs=1e-11)
    assert bce_masked(Tensor([[0.3]]), _mask([[-1]])).item() == 0.0


def test_pseudo_example():
    a = Tensor(np.full((2, 2), 0.8))
    assert pseudo_loss(a, _mask(np.full((2, 2), -1))).item() == pytest.approx(0.0025, abs=1e-15)
    assert pseudo_loss(a, _mask(np.full((2, 2), -1)), INF).item() == 0.0
    hard = Tensor(np.array([[0.0, 1.0]]))
    assert pseudo_loss(hard, _mask([[-1, -1]])).item() == 0.0


def test_consistency_example():
    a_w = Tensor(np.full((1, 3), 0.8))
    a_s = Tensor(np.full((1, 3), 0.7))
    assert consistency_loss(a_s, a_w, _mask([[-1, -1, -1]])).item() == pytest.approx(0.0225,
                                                                                       abs=1e-15)
    exact = Tensor(sharpen_values(a_w.values, SharpenConfig()))
    assert consistency_loss(exact, a_w, _mask([[-1, -1, -1]])).item() == 0.0


def test_consistency_no_gradient_into_weak_view():
    a_w = Tensor(np.array([[0.8, 0.3]]), requires_grad=True)
    a_s = Tensor(np.array([[0.6, 0.4]]), requires_grad=True)
    with Tape() as tape:
        ad.backward(consistency_loss(a_s, a_w, _mask([[-1, -1]])), tape)
    assert np.all(a_w.grad == 0.0) and np.any(a_s.grad != 0.0)


def test_all_known_and_all_unknown():
    rng = np.random.default_rng(0)
    a_w, a_s = Tensor(rng.uniform(0.1, 0.9, (3, 4))), Tensor(rng.uniform(0.1, 0.9, (3, 4)))
    known = total_loss(a_w, a_s, _mask(rng.integers(0, 2, (3, 4))))
    assert known.l_pseudo.item() == 0.0 and known.l_consist.item() == 0.0
    assert known.l_total.item() == known.l_bce.item() and known.n_unknown == 0
    unknown = total_loss(a_w, a_s, _mask(np.full((3, 4), -1)))
    assert unknown.l_bce.item() == 0.0 and unknown.n_known == 0


def test_hand_computed_total():
    """2 samples x 3 classes, every term written out by hand."""
    a_w = [[0.9, 0.2, 0.6], [0.4, 0.7, 0.1]]
    a_s = [[0.8, 0.3, 0.5], [0.45, 0.6, 0.2]]
    states = [[1, 0, -1], [-1, 1, -1]]
    # known: (0,0) y=1, (0,1) y=0, (1,1) y=1
    bce = -(math.log(0.9) + math.log(1 - 0.2) + math.log(0.7)) / 3
    # unknown: (0,2) a=0.6 -> 0.6 + 0.4/4 = 0.7; (1,0) 0.4 -> 0.3; (1,2) 0.1 -> 0.075
    targets = [0.7, 0.3, 0.075]
    weak_u, strong_u = [0.6, 0.4, 0.1], [0.5, 0.45, 0.2]
    pseudo = sum((w - t) ** 2 for w, t in zip(weak_u, targets)) / 3
    consist = sum((s - t) ** 2 for s, t in zip(strong_u, targets)) / 3
    out = total_loss(Tensor(a_w), Tensor(a_s), _mask(states)).values()
    assert out["l_bce"] == pytest.approx(bce, abs=1e-12)
    assert out["l_pseudo"] == pytest.approx(pseudo, abs=1e-12)
    assert out["l_consist"] == pytest.approx(consist, abs=1e-12)
    assert out["l_total"] == pytest.approx(bce + pseudo + consist, abs=1e-12)


probs = arrays(np.float64, (3, 4), elements=st.floats(0.01, 0.99))
tri = arrays(np.int8, (3, 4), elements=st.sampled_from([-1, 0, 1]))


@settings(max_examples=60, deadline=None)
@given(probs, probs, tri, arrays(np.float64, (3, 4), elements=st.floats(-9, 9)))
def test_unknown_placeholders_are_invisible(a_w, a_s, states, junk):
    mask = _mask(states)
    noisy = LossMask(mask.known, np.where(mask.known, mask.targets, junk))
    first = total_loss(Tensor(a_w), Tensor(a_s), mask).values()
    second = total_loss(Tensor(a_w), Tensor(a_s), noisy).values()
    assert all(float(first[k]).hex() == float(second[k]).hex() for k in first)


@settings(max_examples=60, deadline=None)
@given(probs, probs, tri, probs)
def test_masked_out_inputs_are_invisible(a_w, a_s, states, other):
    """Known entries of a_s do not touch any term; nor do unknown entries of a_w touch bce."""
    mask = _mask(states)
    a_s2 = np.where(mask.known, other, a_s)
    assert consistency_loss(Tensor(a_s), Tensor(a_w), mask).item() == \
        consistency_loss(Tensor(a_s2), Tensor(a_w), mask).item()
    a_w2 = np.where(mask.known, a_w, other)
    assert bce_masked(Tensor(a_w), mask).item() == bce_masked(Tensor(a_w2), mask).item()


def test_total_gradient_oracle():
    rng = np.random.default_rng(5)
    states = np.array([[1, -1, 0, -1, 1], [0, 1, -1, -1, 0], [-1, 0, 1, 0, -1],
                       [1, 1, -1, 0, -1]])
    mask = _mask(states)
    z_w = rng.normal(size=(4, 5))
    z_s = z_w + rng.normal(scale=0.3, size=(4, 5))
    target = sharpen_values(1 / (1 + np.exp(-z_w)), SharpenConfig())

    def fn(z):
        # the sharpened target is a stop-gradient, so hold it fixed
        a_w = ad.sigmoid(z)
        a_s = ad.sigmoid(ad.add(z, z_s - z_w))
        return total_loss(a_w, a_s, mask, target=target).l_total

    assert grad_check(fn, z_w, 1e-5) < 1e-4
