import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cisunet.metrics import (CaseMetrics, aggregate, dsc, evaluate_case, evaluate_cases,
                             extract_surface, is_undefined, msd, surface_voxels, symmetric_msd)


def brute_msd(a, b):
    total = 0.0
    for p in a:
        total += min(math.dist(p, q) for q in b)
    return total / len(a)


def random_mask(rng, shape, p=0.3):
    return rng.random(shape) < p


def test_dsc_special_cases():
    a = np.zeros((4, 4, 4), bool)
    a[:2] = True
    b = np.zeros_like(a)
    b[2:] = True
    assert dsc(a, a) == 1.0
    assert dsc(a, b) == 0.0
    c = np.zeros_like(a)
    c[:1] = True
    # |a|=32, |c|=16, overlap 16 -> 32/48
    assert dsc(a, c) == 2 * 16 / 48
    half = np.zeros_like(a)
    half[:1] = True
    half2 = np.zeros_like(a)
    half2[:1, :2] = True
    half2[1:2, 2:] = True
    assert dsc(half, half2) == 0.5
    assert dsc(np.zeros_like(a), np.zeros_like(a)) == 1.0


def test_cube_surface_has_26_points():
    m = np.zeros((5, 5, 5), bool)
    m[1:4, 1:4, 1:4] = True
    assert surface_voxels(m).sum() == 26


def test_border_counts_as_background():
    m = np.ones((3, 3, 3), bool)
    assert surface_voxels(m).sum() == 26


def test_msd_translation_and_asymmetry():
    a = np.zeros((12, 12, 12), bool)
    a[2:5, 2:5, 2:5] = True
    b = np.roll(a, 3, axis=0)
    sa, sb = extract_surface(a), extract_surface(b)
    # not pure translation distance: near faces are closer
    assert msd(sa, sb) == pytest.approx(brute_msd(sa, sb), abs=1e-12)
    single = np.zeros_like(a)
    single[3, 3, 3] = True
    big = np.zeros_like(a)
    big[3, 3, 3] = True
    big[3, 3, 8] = True
    # every point of the single set is on the larger set: 0 one way, 2.5 the other
    assert msd(extract_surface(single), extract_surface(big)) == 0.0
    assert msd(extract_surface(big), extract_surface(single)) == 2.5


def test_msd_point_shift():
    p = np.array([[0.0, 0.0, 0.0]])
    q = np.array([[3.0, 0.0, 0.0]])
    assert msd(p, q) == 3.0


def test_msd_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(20):
        shape = tuple(int(v) for v in rng.integers(4, 17, size=3))
        spacing = tuple(rng.uniform(0.5, 2.0, size=3))
        a = extract_surface(random_mask(rng, shape, 0.15), spacing)
        b = extract_surface(random_mask(rng, shape, 0.15), spacing)
        if len(a) == 0 or len(b) == 0:
            continue
        assert abs(msd(a, b) - brute_msd(a, b)) < 1e-9


def test_spacing_scaling_is_linear():
    rng = np.random.default_rng(2)
    a = random_mask(rng, (10, 10, 10))
    b = random_mask(rng, (10, 10, 10))
    base = msd(extract_surface(a), extract_surface(b))
    scaled = msd(extract_surface(a, (2.0, 2.0, 2.0)), extract_surface(b, (2.0, 2.0, 2.0)))
    assert scaled == 2.0 * base


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 4), st.integers(0, 4), st.integers(0, 4))
def test_translation_invariance(seed, dx, dy, dz):
    rng = np.random.default_rng(seed)
    a = np.zeros((16, 16, 16), bool)
    b = np.zeros_like(a)
    a[4:10, 4:10, 4:10] = random_mask(rng, (6, 6, 6), 0.6)
    b[4:10, 4:10, 4:10] = random_mask(rng, (6, 6, 6), 0.6)
    if not a.any() or not b.any():
        return
    shift = (dx, dy, dz)
    ref = msd(extract_surface(a), extract_surface(b))
    moved = msd(extract_surface(np.roll(a, shift, (0, 1, 2))),
                extract_surface(np.roll(b, shift, (0, 1, 2))))
    assert moved == pytest.approx(ref, abs=1e-12)
    assert dsc(np.roll(a, shift, (0, 1, 2)), np.roll(b, shift, (0, 1, 2))) == dsc(a, b)


def test_empty_sets_are_undefined():
    pts = np.zeros((1, 3))
    assert is_undefined(msd(np.zeros((0, 3)), pts))
    assert is_undefined(msd(pts, np.zeros((0, 3))))
    assert is_undefined(symmetric_msd(pts, np.zeros((0, 3))))


def test_symmetric_msd_is_symmetric():
    rng = np.random.default_rng(5)
    a = extract_surface(random_mask(rng, (8, 8, 8)))
    b = extract_surface(random_mask(rng, (8, 8, 8)))
    assert symmetric_msd(a, b) == pytest.approx(symmetric_msd(b, a), abs=1e-12)


def test_evaluate_case_validates_inputs():
    with pytest.raises(ValueError, match="shape"):
        evaluate_case(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
    with pytest.raises(ValueError, match="spacing"):
        evaluate_case(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), spacing=(1, 1, 1),
                      gt_spacing=(2, 2, 2))


def test_evaluate_case_missing_class():
    gt = np.zeros((6, 6, 6), int)
    gt[1:3, 1:3, 1:3] = 1
    gt[4:, 4:, 4:] = 2
    pred = np.where(gt == 2, 0, gt)
    m = evaluate_case(pred, gt, class_ids=[1, 2])
    assert m.dsc[1] == 1.0 and m.msd_mm[1] == 0.0
    assert m.dsc[2] == 0.0 and m.undefined(2)


def test_aggregate_means_and_skips():
    cases = [CaseMetrics("a", [1], {1: 0.6}, {1: 2.0}),
             CaseMetrics("b", [1], {1: 0.8}, {1: float("nan")})]
    s = aggregate(cases)
    assert s.mean_dsc[1] == pytest.approx(0.7, abs=1e-12)
    assert s.mean_msd[1] == 2.0
    assert s.undefined_count[1] == 1
    assert s.n_cases == 2


def test_evaluate_cases_thread_pool_matches_serial():
    rng = np.random.default_rng(9)
    pairs = [(str(i), rng.integers(0, 3, (8, 8, 8)), rng.integers(0, 3, (8, 8, 8)), (1, 1, 1))
             for i in range(4)]
    serial = evaluate_cases(pairs, class_ids=[1, 2])
    pooled = evaluate_cases(pairs, class_ids=[1, 2], workers=3)
    for x, y in zip(serial, pooled):
        assert x.dsc == y.dsc and x.msd_mm == y.msd_mm
