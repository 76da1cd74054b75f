import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cisunet.loss import (DICE_SMOOTH, PROB_FLOOR, LossWeights, cross_entropy, dice_ce,
                          dice_loss, one_hot)


def loop_dice(s, g, smooth=DICE_SMOOTH):
    inter = total_g = total_s = 0.0
    for idx in np.ndindex(*s.shape):
        inter += g[idx] * s[idx]
        total_g += g[idx]
        total_s += s[idx]
    return 1.0 - (2.0 * inter + smooth) / (total_g + total_s + smooth)


def loop_ce(s, g, floor=PROB_FLOOR):
    b, c = s.shape[:2]
    spatial = s.shape[2:]
    acc = 0.0
    n = 0
    for bi in range(b):
        for vox in np.ndindex(*spatial):
            n += 1
            for ci in range(c):
                acc -= g[(bi, ci, *vox)] * math.log(max(s[(bi, ci, *vox)], floor))
    return acc / n


def random_instance(rng):
    c = int(rng.integers(2, 5))
    dims = tuple(int(v) for v in rng.integers(1, 7, size=3))
    b = int(rng.integers(1, 3))
    logits = torch.from_numpy(rng.normal(size=(b, c, *dims)) * 3)
    labels = torch.from_numpy(rng.integers(0, c, size=(b, *dims)))
    s = torch.softmax(logits, dim=1)
    g = one_hot(labels, c).double()
    return s, g


def test_vectorized_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        s, g = random_instance(rng)
        assert abs(dice_loss(s, g).item() - loop_dice(s.numpy(), g.numpy())) < 1e-10
        assert abs(cross_entropy(s, g).item() - loop_ce(s.numpy(), g.numpy())) < 1e-10


def test_perfect_prediction_is_near_zero():
    labels = torch.tensor([[[[0, 1], [1, 0]]]])
    g = one_hot(labels, 2).double()
    assert dice_loss(g, g).item() == pytest.approx(0.0, abs=1e-6)
    assert cross_entropy(g, g).item() == pytest.approx(0.0, abs=1e-6)


def test_uniform_two_class():
    labels = torch.tensor([[[[0, 1], [1, 0]]]])
    g = one_hot(labels, 2).double()
    s = torch.full_like(g, 0.5)
    assert dice_loss(s, g).item() == pytest.approx(0.5, abs=1e-6)
    assert cross_entropy(s, g).item() == pytest.approx(math.log(2), abs=1e-6)


def test_uniform_four_class_ce():
    labels = torch.arange(4).reshape(1, 1, 2, 2)
    g = one_hot(labels, 4).double()
    s = torch.full_like(g, 0.25)
    assert cross_entropy(s, g).item() == pytest.approx(math.log(4), abs=1e-6)
    # 1 - 2*(4*0.25)/(4 + 4)
    assert dice_loss(s, g).item() == pytest.approx(0.75, abs=1e-6)


def test_dice_ce_zero_logits_two_class():
    labels = torch.tensor([[[[0, 1], [1, 0]]]])
    logits = torch.zeros(1, 2, 1, 2, 2, dtype=torch.float64)
    assert dice_ce(logits, labels).item() == pytest.approx(0.5 + math.log(2), abs=1e-6)


def test_weights_scale_terms():
    labels = torch.tensor([[[[0, 1], [1, 0]]]])
    logits = torch.zeros(1, 2, 1, 2, 2, dtype=torch.float64)
    only_ce = dice_ce(logits, labels, LossWeights(dice=0.0, ce=2.0)).item()
    assert only_ce == pytest.approx(2 * math.log(2), abs=1e-9)
    with pytest.raises(ValueError):
        LossWeights(dice=-1.0)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    logits = torch.from_numpy(rng.normal(size=(1, 3, 3, 3, 2))).requires_grad_(True)
    labels = torch.from_numpy(rng.integers(0, 3, size=(1, 3, 3, 2)))
    dice_ce(logits, labels).backward()
    h = 1e-6
    flat = logits.detach().clone().view(-1)
    for i in range(flat.numel()):
        plus, minus = flat.clone(), flat.clone()
        plus[i] += h
        minus[i] -= h
        fd = (dice_ce(plus.view_as(logits), labels) - dice_ce(minus.view_as(logits), labels)) / (2 * h)
        assert abs(fd.item() - logits.grad.view(-1)[i].item()) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    s, g = random_instance(rng)
    perm = torch.from_numpy(rng.permutation(s.shape[1]))
    assert dice_loss(s[:, perm], g[:, perm]).item() == pytest.approx(dice_loss(s, g).item(), abs=1e-12)
    assert cross_entropy(s[:, perm], g[:, perm]).item() == pytest.approx(
        cross_entropy(s, g).item(), abs=1e-12)


def test_one_hot_rejects_out_of_range():
    with pytest.raises(ValueError, match="label value 5"):
        one_hot(torch.tensor([[0, 5]]), 3)
    with pytest.raises(ValueError, match="-1"):
        one_hot(torch.tensor([[0, -1]]), 3)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        dice_loss(torch.zeros(1, 2, 2), torch.zeros(1, 3, 2))


def test_zero_probability_is_floored():
    g = torch.tensor([[1.0, 0.0]]).double()
    s = torch.tensor([[0.0, 1.0]]).double()
    assert math.isfinite(cross_entropy(s, g).item())
