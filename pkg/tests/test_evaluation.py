import csv
import itertools
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from medmusnet import evaluation as ev

N_INSTANCES = 120


# ---------------------------------------------------------------------------
# oracles written directly from the definitions, using python sets


def components_as_sets(mask):
    pts = {tuple(int(c) for c in p) for p in zip(*np.nonzero(mask))}
    comps = []
    while pts:
        seed = pts.pop()
        comp, frontier = {seed}, [seed]
        while frontier:
            cur = frontier.pop()
            for off in itertools.product((-1, 0, 1), repeat=len(cur)):
                nb = tuple(c + o for c, o in zip(cur, off))
                if nb in pts:
                    pts.remove(nb)
                    comp.add(nb)
                    frontier.append(nb)
        comps.append(comp)
    return comps


def oracle_match(pred, gt, thr=Fraction(1, 5)):
    P, G = components_as_sets(pred), components_as_sets(gt)
    detected = [any(Fraction(len(p & g), len(g)) > thr for p in P) for g in G]
    useful = [any(Fraction(len(p & g), len(g)) > thr for g in G) for p in P]
    return sum(detected), len(G) - sum(detected), sum(not u for u in useful)


def oracle_dsc(pred, gt):
    p = {tuple(x) for x in np.argwhere(pred)}
    g = {tuple(x) for x in np.argwhere(gt)}
    if not p and not g:
        return None
    return 2 * len(p & g) / (len(p) + len(g))


def oracle_sectors(pred, gt, regions, n):
    tp = fp = fn = tn = 0
    for r in range(1, n + 1):
        p = any(pred[idx] and regions[idx] == r for idx in np.ndindex(regions.shape))
        g = any(gt[idx] and regions[idx] == r for idx in np.ndindex(regions.shape))
        tp += p and g
        fp += p and not g
        fn += g and not p
        tn += not p and not g
    return tp, fp, fn, tn


def blobs(rng, shape, n):
    m = np.zeros(shape, dtype=bool)
    for _ in range(n):
        c = [rng.integers(0, s) for s in shape]
        r = [rng.integers(0, 3) for _ in shape]
        m[tuple(slice(max(0, ci - ri), ci + ri + 1) for ci, ri in zip(c, r))] = True
    return m


# ---------------------------------------------------------------------------


def test_dsc_examples():
    a = np.zeros((4, 4, 4), bool)
    assert ev.dsc(a, a) is None
    b = a.copy()
    b[0, 0, 0] = True
    assert ev.dsc(b, b) == 1.0
    assert ev.dsc(b, a) == 0.0
    with pytest.raises(ValueError):
        ev.dsc(a, np.zeros((4, 4, 3)))


def test_dsc_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(N_INSTANCES):
        p, g = rng.random((2, 5, 6, 4)) < rng.uniform(0, 0.4)
        assert ev.dsc(p, g) == oracle_dsc(p, g)


def test_twenty_percent_boundary_is_not_detection():
    gt = np.zeros((1, 1, 20), bool)
    gt[0, 0, :10] = True
    pred = np.zeros_like(gt)
    pred[0, 0, 8:12] = True  # covers exactly 2 of 10 ground-truth voxels
    m = ev.match_lesions(ev.lesions_from_mask(pred, "prediction"), ev.lesions_from_mask(gt, "ground-truth"))
    assert (m.counts.tp, m.counts.fn, m.counts.fp) == (0, 1, 1)
    pred[0, 0, 7] = True  # 3 of 10
    m = ev.match_lesions(ev.lesions_from_mask(pred, "prediction"), ev.lesions_from_mask(gt, "ground-truth"))
    assert (m.counts.tp, m.counts.fn, m.counts.fp) == (1, 0, 0)


def test_one_prediction_can_detect_two_lesions():
    gt = np.zeros((1, 1, 9), bool)
    gt[0, 0, 0:3] = gt[0, 0, 5:8] = True
    pred = np.zeros_like(gt)
    pred[0, 0, 1:7] = True
    m = ev.match_lesions(ev.lesions_from_mask(pred, "p"), ev.lesions_from_mask(gt, "g"))
    assert m.counts.tp == 2 and m.counts.fp == 0


def test_match_lesions_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(N_INSTANCES):
        shape = (6, 7, 5)
        gt = blobs(rng, shape, rng.integers(0, 4))
        pred = blobs(rng, shape, rng.integers(0, 4))
        m = ev.match_lesions(ev.lesions_from_mask(pred, "p"), ev.lesions_from_mask(gt, "g"))
        assert (m.counts.tp, m.counts.fn, m.counts.fp) == oracle_match(pred, gt)


def test_iou_mode_is_stricter():
    gt = np.zeros((1, 1, 20), bool)
    gt[0, 0, :5] = True
    pred = np.zeros_like(gt)
    pred[0, 0, :20] = True  # covers all of gt, IoU 0.25
    P, G = ev.lesions_from_mask(pred, "p"), ev.lesions_from_mask(gt, "g")
    assert ev.match_lesions(P, G, 0.2, "gt").counts.tp == 1
    assert ev.match_lesions(P, G, 0.3, "iou").counts.tp == 0


def test_sector_partition_structure():
    x, y, z = np.mgrid[:21, :21, :30]
    prostate = ((x - 10) ** 2 + (y - 10) ** 2) <= 81
    sm = ev.sector_partition(prostate, 13, 3)
    assert sm.n_regions == 39
    assert set(np.unique(sm.regions[prostate])) == set(range(1, 40))
    assert np.all(sm.regions[~prostate] == 0)
    # thirds along the probe axis hold roughly a third of the gland each
    per_third = sm.counts.reshape(3, 13).sum(axis=1)
    assert np.all(np.abs(per_third - prostate.sum() / 3) <= prostate.sum(axis=(0, 1))[0])


def test_sector_confusion_matches_oracle():
    rng = np.random.default_rng(2)
    x, y, z = np.mgrid[:9, :9, :6]
    prostate = ((x - 4) ** 2 + (y - 4) ** 2) <= 16
    sm = ev.sector_partition(prostate, 5, 3)
    for _ in range(N_INSTANCES):
        pred = blobs(rng, prostate.shape, rng.integers(0, 3)) & prostate
        gt = blobs(rng, prostate.shape, rng.integers(0, 3)) & prostate
        c = ev.sector_confusion(pred, gt, sm)
        assert (c.tp, c.fp, c.fn, c.tn) == oracle_sectors(pred, gt, sm.regions, sm.n_regions)


def test_sector_min_voxels():
    regions = np.array([[[1, 1, 2, 2]]])
    sm = ev.SectorMap(regions, 2, 1, np.array([2, 2]))
    pred = np.array([[[1, 0, 1, 1]]])
    gt = np.zeros_like(pred)
    assert ev.sector_confusion(pred, gt, sm, min_voxels=2).fp == 1
    assert ev.sector_confusion(pred, gt, sm, min_voxels=1).fp == 2


def metrics_oracle(tp, fp, fn, tn):
    def r(a, b):
        return None if b == 0 else Fraction(a, b)

    sens, ppv = r(tp, tp + fn), r(tp, tp + fp)
    f1 = None if sens is None or ppv is None or sens + ppv == 0 else 2 * sens * ppv / (sens + ppv)
    return dict(
        sensitivity=sens,
        specificity=r(tn, tn + fp),
        accuracy=r(tp + tn, tp + fp + fn + tn),
        ppv=ppv,
        npv=r(tn, tn + fn),
        f1=f1,
    )


@given(st.integers(0, 30), st.integers(0, 30), st.integers(0, 30), st.integers(0, 30))
def test_metrics_match_exact_fractions(tp, fp, fn, tn):
    rep = ev.metrics(ev.ConfusionCounts(tp, fp, fn, tn))
    for k, v in metrics_oracle(tp, fp, fn, tn).items():
        got = getattr(rep, k)
        if v is None:
            assert got is None
        else:
            assert got == float(v)


def test_metrics_exhaustive_small_counts():
    # every count vector with entries 0..3 (256 instances)
    for tp, fp, fn, tn in itertools.product(range(4), repeat=4):
        rep = ev.metrics(ev.ConfusionCounts(tp, fp, fn, tn))
        for k, v in metrics_oracle(tp, fp, fn, tn).items():
            got = getattr(rep, k)
            assert (got is None) == (v is None)
            if v is not None:
                assert got == float(v)


def test_undefined_ratios_are_none():
    rep = ev.metrics(ev.ConfusionCounts(0, 0, 0, 5))
    assert rep.sensitivity is None and rep.ppv is None and rep.f1 is None
    assert rep.specificity == 1.0


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        ev.ConfusionCounts(-1, 0, 0, 0)


def test_patient_counts():
    pairs = [(True, True), (True, False), (False, True), (False, False), (True, True)]
    c = ev.patient_counts(pairs)
    assert (c.tp, c.fp, c.fn, c.tn) == (2, 1, 1, 1)


def test_report_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    x, y, z = np.mgrid[:9, :9, :6]
    prostate = ((x - 4) ** 2 + (y - 4) ** 2) <= 16
    results = []
    for i in range(3):
        gt = blobs(rng, prostate.shape, 2) & prostate
        pred = blobs(rng, prostate.shape, 2) & prostate
        results.append(ev.evaluate_case(f"case{i}", pred, gt, prostate, sectors=5))
    rep = ev.cohort_report(results)
    ev.write_report(rep, tmp_path / "m.csv", tmp_path / "m.json")
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert len(rows) >= 9
    data = json.loads(open(tmp_path / "m.json").read())
    assert "summary" in data
