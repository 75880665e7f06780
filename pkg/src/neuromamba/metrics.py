"""Variation of information and adapted Rand error from a contingency table.

Natural logarithms throughout.  With ``ignore_background`` (the default) only
voxels whose ground-truth label is nonzero are evaluated; prediction label 0
is an ordinary label.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class ContingencyTable:
    """Sparse joint counts: ``counts[k]`` voxels carry gt ``gt_labels[k]`` and pred ``pred_labels[k]``."""

    gt_labels: np.ndarray
    pred_labels: np.ndarray
    counts: np.ndarray
    n: int

    def as_dict(self) -> Dict[Tuple[int, int], int]:
        return {(int(i), int(j)): int(c) for i, j, c in
                zip(self.gt_labels, self.pred_labels, self.counts)}

    def gt_marginal(self) -> np.ndarray:
        _, inv = np.unique(self.gt_labels, return_inverse=True)
        return np.bincount(inv.ravel(), weights=self.counts).astype(np.int64)

    def pred_marginal(self) -> np.ndarray:
        _, inv = np.unique(self.pred_labels, return_inverse=True)
        return np.bincount(inv.ravel(), weights=self.counts).astype(np.int64)


def contingency(gt: np.ndarray, pred: np.ndarray, ignore_background: bool = True) -> ContingencyTable:
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ShapeError(f"gt {gt.shape} and pred {pred.shape} dims differ")
    g = gt.ravel().astype(np.uint64)
    p = pred.ravel().astype(np.uint64)
    if ignore_background:
        keep = g != 0
        g, p = g[keep], p[keep]
    if g.size == 0:
        return ContingencyTable(g, p, np.zeros(0, dtype=np.int64), 0)
    pairs, counts = np.unique(np.stack([g, p], axis=1), axis=0, return_counts=True)
    return ContingencyTable(pairs[:, 0], pairs[:, 1], counts.astype(np.int64), int(g.size))


def _joint_and_marginals(tab: ContingencyTable):
    nij = tab.counts.astype(np.float64)
    _, gi = np.unique(tab.gt_labels, return_inverse=True)
    _, pj = np.unique(tab.pred_labels, return_inverse=True)
    gi, pj = gi.ravel(), pj.ravel()
    ni = np.bincount(gi, weights=nij)
    nj = np.bincount(pj, weights=nij)
    return nij, gi, pj, ni, nj


def variation_of_information(tab: ContingencyTable) -> Tuple[float, float, float]:
    """``(split, merge, total)``: split = H(pred | gt), merge = H(gt | pred)."""
    if tab.n <= 0:
        raise ParameterError("variation of information of an empty table")
    nij, gi, pj, ni, nj = _joint_and_marginals(tab)
    n = float(tab.n)
    # fsum is order independent, so swapping gt and pred swaps the terms bit-exactly
    split = -math.fsum(nij / n * np.log(nij / ni[gi])) + 0.0
    merge = -math.fsum(nij / n * np.log(nij / nj[pj])) + 0.0
    return split, merge, split + merge


def adapted_rand_error(tab: ContingencyTable) -> float:
    """``1 - F`` of pair precision/recall computed from squared counts."""
    if tab.n <= 1:
        raise ParameterError("adapted Rand error needs at least two evaluated voxels")
    nij, _, _, ni, nj = _joint_and_marginals(tab)
    sum_ij = float(np.sum(nij * nij))
    precision = sum_ij / float(np.sum(nj * nj))
    recall = sum_ij / float(np.sum(ni * ni))
    return 1.0 - 2.0 * precision * recall / (precision + recall)


def evaluate(gt: np.ndarray, pred: np.ndarray, ignore_background: bool = True) -> Dict[str, float]:
    tab = contingency(gt, pred, ignore_background)
    split, merge, vi = variation_of_information(tab)
    return {"vi_split": split, "vi_merge": merge, "vi": vi, "arand": adapted_rand_error(tab)}
