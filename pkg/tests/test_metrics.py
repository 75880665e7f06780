import math

import numpy as np
import pytest

from neuromamba.errors import ParameterError, ShapeError
from neuromamba.metrics import adapted_rand_error, contingency, evaluate, variation_of_information


def counting_oracle(gt, pred, ignore_background=True):
    table = {}
    for g, p in zip(gt.ravel().tolist(), pred.ravel().tolist()):
        if ignore_background and g == 0:
            continue
        table[(g, p)] = table.get((g, p), 0) + 1
    return table


def vi_oracle(gt, pred):
    table = counting_oracle(gt, pred)
    n = sum(table.values())
    row, col = {}, {}
    for (g, p), c in table.items():
        row[g] = row.get(g, 0) + c
        col[p] = col.get(p, 0) + c
    split = -sum(c / n * math.log(c / row[g]) for (g, p), c in table.items())
    merge = -sum(c / n * math.log(c / col[p]) for (g, p), c in table.items())
    return split, merge


def arand_pair_oracle(gt, pred):
    """Counts ordered voxel pairs (self-pairs included) sharing a label in gt, pred, or both."""
    g = gt.ravel()
    keep = g != 0
    g, p = g[keep], pred.ravel()[keep]
    same_g = g[:, None] == g[None, :]
    same_p = p[:, None] == p[None, :]
    both = np.count_nonzero(same_g & same_p)
    precision = both / np.count_nonzero(same_p)
    recall = both / np.count_nonzero(same_g)
    return 1.0 - 2 * precision * recall / (precision + recall)


def random_pair(rng):
    shape = tuple(int(s) for s in rng.integers(1, 17, size=3))
    while np.prod(shape) > 4096 or np.prod(shape) < 2:
        shape = tuple(int(s) for s in rng.integers(1, 17, size=3))
    gt = rng.integers(0, int(rng.integers(2, 9)), size=shape).astype(np.uint64)
    gt.flat[0] = 1  # keep at least two evaluated voxels
    gt.flat[-1] = 1
    pred = rng.integers(0, int(rng.integers(1, 9)), size=shape).astype(np.uint64)
    return gt, pred


def test_contingency_examples():
    gt = np.ones(4, dtype=np.uint64)
    pred = np.array([5, 5, 6, 6], dtype=np.uint64)
    assert contingency(gt, pred).as_dict() == {(1, 5): 2, (1, 6): 2}
    same = np.array([1, 2, 2, 3], dtype=np.uint64)
    assert contingency(same, same).as_dict() == {(1, 1): 1, (2, 2): 2, (3, 3): 1}
    with pytest.raises(ShapeError):
        contingency(np.ones(3), np.ones(4))


def test_contingency_matches_counting_oracle(rng):
    for _ in range(20):
        gt, pred = random_pair(rng)
        for ignore in (True, False):
            tab = contingency(gt, pred, ignore_background=ignore)
            assert tab.as_dict() == counting_oracle(gt, pred, ignore)
            assert tab.counts.sum() == tab.n
            assert tab.gt_marginal().sum() == tab.n == tab.pred_marginal().sum()


def test_vi_and_arand_examples():
    gt = np.ones(4, dtype=np.uint64)
    pred = np.array([1, 1, 2, 2], dtype=np.uint64)
    split, merge, total = variation_of_information(contingency(gt, pred))
    assert split == pytest.approx(math.log(2), abs=1e-15) and merge == 0.0 and total == split
    assert adapted_rand_error(contingency(gt, pred)) == pytest.approx(1 / 3, abs=1e-15)
    assert evaluate(pred, pred) == {"vi_split": 0.0, "vi_merge": 0.0, "vi": 0.0, "arand": 0.0}


def test_swap_exchanges_split_and_merge(rng):
    for _ in range(20):
        gt, pred = random_pair(rng)
        gt[gt == 0] = 1
        pred[pred == 0] = 1
        s1, m1, t1 = variation_of_information(contingency(gt, pred))
        s2, m2, t2 = variation_of_information(contingency(pred, gt))
        assert s1 == m2 and m1 == s2
        assert t1 == pytest.approx(t2, abs=1e-15)


def test_metrics_match_oracles_200_pairs(rng):
    for _ in range(200):
        gt, pred = random_pair(rng)
        tab = contingency(gt, pred)
        split, merge, _ = variation_of_information(tab)
        o_split, o_merge = vi_oracle(gt, pred)
        assert abs(split - o_split) <= 1e-12 and abs(merge - o_merge) <= 1e-12
        arand = adapted_rand_error(tab)
        assert abs(arand - arand_pair_oracle(gt, pred)) <= 1e-12
        assert 0.0 <= arand <= 1.0


def test_relabel_invariance(rng):
    for _ in range(20):
        gt, pred = random_pair(rng)
        base = evaluate(gt, pred)
        perm = rng.permutation(100) + 1
        gt2 = np.where(gt == 0, 0, perm[gt.astype(np.int64)]).astype(np.uint64)
        pred2 = perm[pred.astype(np.int64)].astype(np.uint64)
        moved = evaluate(gt2, pred2)
        for k in base:
            assert moved[k] == pytest.approx(base[k], abs=1e-12)


def test_background_handling():
    gt = np.array([0, 0, 1, 1], dtype=np.uint64)
    pred = np.array([0, 1, 0, 0], dtype=np.uint64)
    assert contingency(gt, pred).n == 2
    assert evaluate(gt, pred)["vi"] == 0.0
    with_bg = evaluate(gt, pred, ignore_background=False)
    assert with_bg["vi"] > 0


def test_degenerate_tables():
    with pytest.raises(ParameterError):
        variation_of_information(contingency(np.zeros(3, np.uint64), np.ones(3, np.uint64)))
    with pytest.raises(ParameterError):
        adapted_rand_error(contingency(np.array([1], np.uint64), np.array([1], np.uint64)))
