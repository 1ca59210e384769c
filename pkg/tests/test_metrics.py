import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage
from scipy.spatial.distance import cdist

from crossmod.metrics import (
    AGGREGATE_SUBJECT,
    RegionMetrics,
    aggregate,
    dice_score,
    evaluate_subject,
    extent_diagonal,
    hd95,
    read_csv_report,
    sensitivity,
    specificity,
    surface,
)
from crossmod.volume import LabelVolume, RegionMask


# ------------------------------------------------------------ brute force


def brute_counts(p, g):
    tp = fp = fn = tn = 0
    for a, b in zip(p.ravel().tolist(), g.ravel().tolist()):
        if a and b:
            tp += 1
        elif a:
            fp += 1
        elif b:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def brute_surface(m):
    out = np.zeros_like(m)
    n = m.shape
    for idx in zip(*np.nonzero(m)):
        for ax in range(3):
            for d in (-1, 1):
                j = list(idx)
                j[ax] += d
                if not 0 <= j[ax] < n[ax] or not m[tuple(j)]:
                    out[idx] = True
    return out


def brute_hd95(p, g, spacing=(1.0, 1.0, 1.0)):
    sp = np.argwhere(brute_surface(p)) * np.asarray(spacing)
    sg = np.argwhere(brute_surface(g)) * np.asarray(spacing)
    d = cdist(sp, sg)
    return max(np.percentile(d.min(axis=1), 95), np.percentile(d.min(axis=0), 95))


# --------------------------------------------------------------- examples


def test_dice_examples():
    a = np.zeros((4, 4, 4), bool)
    a[0, 0, :2] = True
    assert dice_score(a, a) == 1.0
    b = np.zeros_like(a)
    b[3, 3, 3] = True
    assert dice_score(a, b) == 0.0
    g = np.zeros_like(a)
    g[0, 0, 1:4] = True
    assert dice_score(a, g) == pytest.approx(0.4, abs=1e-15)
    assert dice_score(np.zeros_like(a), np.zeros_like(a)) == 1.0
    with pytest.raises(ValueError):
        dice_score(a, a[:3])


def test_sensitivity_specificity_examples():
    g = np.array([1, 1, 1, 0, 0, 0, 0, 0], bool).reshape(2, 2, 2)
    p = np.array([1, 1, 0, 1, 0, 0, 0, 0], bool).reshape(2, 2, 2)
    assert sensitivity(p, g) == pytest.approx(2 / 3, abs=1e-15)
    assert specificity(p, g) == pytest.approx(4 / 5, abs=1e-15)
    assert sensitivity(g, g) == specificity(g, g) == 1.0
    assert sensitivity(~g, g) == specificity(~g, g) == 0.0
    empty = np.zeros_like(g)
    assert sensitivity(empty, empty) == 1.0
    full = np.ones_like(g)
    assert specificity(full, full) == 1.0


def test_hd95_examples():
    a = np.zeros((8, 8, 8), bool)
    b = np.zeros_like(a)
    a[2, 2, 2] = True
    b[5, 2, 2] = True
    assert hd95(a, b) == pytest.approx(3.0)
    assert hd95(a, a) == 0.0
    assert hd95(a, b, spacing=(2.0, 1.0, 1.0)) == pytest.approx(6.0)
    assert hd95(np.zeros_like(a), np.zeros_like(a)) == 0.0
    assert hd95(a, np.zeros_like(a), spacing=(1, 2, 3)) == pytest.approx(extent_diagonal((8, 8, 8), (1, 2, 3)))
    assert extent_diagonal((8, 8, 8), (1, 1, 1)) == pytest.approx(np.sqrt(192))


def test_hd95_spacing_mismatch():
    m = np.ones((2, 2, 2), bool)
    with pytest.raises(ValueError, match="spacing"):
        hd95(RegionMask("WT", m, (1, 1, 1)), RegionMask("WT", m, (1, 1, 2)))


def test_surface_matches_brute_force(rng):
    for _ in range(20):
        m = rng.random((6, 7, 5)) < rng.uniform(0.2, 0.9)
        np.testing.assert_array_equal(surface(m), brute_surface(m))


def test_region_metrics_range_checked():
    with pytest.raises(ValueError):
        RegionMetrics("WT", 1.2, 1, 1, 0)
    with pytest.raises(ValueError):
        RegionMetrics("WT", 1, 1, 1, -1)


# ----------------------------------------------------------------- oracles


def test_counting_oracle_200_pairs():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        p = rng.random((8, 8, 8)) < rng.uniform(0, 1)
        g = rng.random((8, 8, 8)) < rng.uniform(0, 1)
        tp, fp, fn, tn = brute_counts(p, g)
        d = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
        assert abs(dice_score(p, g) - d) <= 1e-12
        assert abs(sensitivity(p, g) - (1.0 if tp + fn == 0 else tp / (tp + fn))) <= 1e-12
        assert abs(specificity(p, g) - (1.0 if tn + fp == 0 else tn / (tn + fp))) <= 1e-12


def test_hd95_all_pairs_oracle():
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 60:
        shape = tuple(rng.integers(4, 12, 3))
        spacing = tuple(rng.choice([0.5, 1.0, 1.5, 2.0], 3))
        p = ndimage.binary_dilation(rng.random(shape) < 0.03, iterations=int(rng.integers(0, 2)))
        g = ndimage.binary_dilation(rng.random(shape) < 0.03, iterations=int(rng.integers(0, 2)))
        if not p.any() or not g.any() or surface(p).sum() > 500 or surface(g).sum() > 500:
            continue
        assert abs(hd95(p, g, spacing) - brute_hd95(p, g, spacing)) <= 1e-9
        checked += 1


def test_exhaustive_small_grid():
    # every mask pair on a 2x2x1 grid, embedded in a 4^3 volume
    cells = list(itertools.product([0, 1], repeat=4))
    for a in cells:
        for b in cells:
            p = np.zeros((4, 4, 4), bool)
            g = np.zeros((4, 4, 4), bool)
            p[1:3, 1:3, 1] = np.reshape(a, (2, 2)).astype(bool)
            g[1:3, 1:3, 1] = np.reshape(b, (2, 2)).astype(bool)
            tp, fp, fn, tn = brute_counts(p, g)
            assert dice_score(p, g) == (1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
            assert sensitivity(p, g) == (1.0 if tp + fn == 0 else tp / (tp + fn))
            assert specificity(p, g) == tn / (tn + fp)
            if p.any() and g.any():
                assert abs(hd95(p, g) - brute_hd95(p, g)) <= 1e-12


# -------------------------------------------------------------- properties


masks_8 = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s).random((2, 6, 6, 6)) < 0.3)


@settings(max_examples=50, deadline=None)
@given(masks_8)
def test_symmetry(pg):
    p, g = pg
    assert dice_score(p, g) == dice_score(g, p)
    assert hd95(p, g) == hd95(g, p)
    assert sensitivity(p, g) == specificity(~p, ~g) or not g.any()


@settings(max_examples=30, deadline=None)
@given(masks_8, st.permutations([0, 1, 2]))
def test_axis_permutation_invariance(pg, axes):
    p, g = pg
    pt, gt = p.transpose(axes), g.transpose(axes)
    assert dice_score(pt, gt) == dice_score(p, g)
    assert sensitivity(pt, gt) == sensitivity(p, g)
    assert specificity(pt, gt) == specificity(p, g)
    assert hd95(pt, gt) == pytest.approx(hd95(p, g), abs=1e-12)


def test_hd95_zero_on_identical_and_positive_on_shifted():
    rng = np.random.default_rng(5)
    m = np.zeros((10, 10, 10), bool)
    m[2:6, 3:7, 2:5] = rng.random((4, 4, 3)) < 0.8
    assert hd95(m, m) == 0.0
    assert hd95(m, np.roll(m, 3, axis=0)) > 0


# -------------------------------------------------------- subject / report


def _labels(rng, shape=(10, 10, 10)):
    lab = np.zeros(shape, np.int16)
    lab[2:8, 2:8, 2:8] = 2
    lab[3:7, 3:7, 3:7] = 4
    lab[4:6, 4:6, 4:6] = 1
    return LabelVolume(lab)


def test_evaluate_subject_identity(rng):
    gt = _labels(rng)
    res = evaluate_subject(gt, gt)
    assert [r.region for r in res] == ["WT", "TC", "ET"]
    assert all(r.dice == 1 and r.hd95 == 0 for r in res)


def test_evaluate_subject_empty_prediction(rng):
    gt = _labels(rng)
    res = evaluate_subject(LabelVolume(np.zeros(gt.shape, np.int16)), gt)
    for r in res:
        assert (r.dice, r.sensitivity, r.specificity) == (0.0, 0.0, 1.0)


def test_evaluate_subject_dilated_prediction(rng):
    gt = _labels(rng)
    pred = gt.labels.copy()
    grown = ndimage.binary_dilation(gt.labels > 0) & (gt.labels == 0)
    pred[grown] = 2
    res = evaluate_subject(LabelVolume(pred), gt)
    wt_p, wt_g = pred > 0, gt.labels > 0
    tp, fp, fn, tn = brute_counts(wt_p, wt_g)
    assert res[0].dice == 2 * tp / (2 * tp + fp + fn)
    assert res[0].specificity == tn / (tn + fp)
    assert res[0].hd95 == pytest.approx(brute_hd95(wt_p, wt_g), abs=1e-9)
    assert res[1].dice == 1.0 and res[2].dice == 1.0


def test_evaluate_subject_shape_mismatch(rng):
    with pytest.raises(ValueError):
        evaluate_subject(_labels(rng, (10, 10, 10)), _labels(rng, (10, 10, 11)))


def _fake(dice):
    return [RegionMetrics(r, dice, 1.0, 1.0, 0.0) for r in ("WT", "TC", "ET")]


def test_aggregate_examples():
    one = aggregate({"s1": _fake(0.8)})
    assert one.region_means["WT"]["dice"] == 0.8 and one.average["dice"] == pytest.approx(0.8)
    two = aggregate({"s1": _fake(0.8), "s2": _fake(0.6)})
    assert two.region_means["TC"]["dice"] == pytest.approx(0.7)
    with pytest.raises(ValueError):
        aggregate({})


def test_aggregate_permutation(rng):
    items = [(f"s{i}", _fake(float(v))) for i, v in enumerate(rng.random(6))]
    a = aggregate(items)
    b = aggregate([items[i] for i in rng.permutation(6)])
    assert a.to_csv() == b.to_csv()


def test_csv_round_trip(rng):
    items = {f"s{i}": [RegionMetrics(r, *rng.random(3), float(rng.uniform(0, 9))) for r in ("WT", "TC", "ET")]
             for i in range(3)}
    rep = aggregate(items)
    rows = read_csv_report(rep.to_csv())
    assert len(rows) == 3 * 3 + 4
    per = [r for r in rows if r[0] != AGGREGATE_SUBJECT]
    agg = {r[1]: r[2:] for r in rows if r[0] == AGGREGATE_SUBJECT}
    for k, region in enumerate(("WT", "TC", "ET")):
        vals = np.array([r[2:] for r in per if r[1] == region])
        np.testing.assert_allclose(agg[region], vals.mean(axis=0), rtol=0, atol=1e-15)
    np.testing.assert_allclose(agg["average"], np.mean([agg[r] for r in ("WT", "TC", "ET")], axis=0), atol=1e-15)
