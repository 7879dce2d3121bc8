"""Rank correlation metrics and per-video evaluation."""

from __future__ import annotations

import math
import warnings
from typing import Sequence

import numpy as np
from scipy import stats

from .shots import ShotSegmentation, summarize


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("rank correlation needs at least two values")
    return x, y


def _constant(v: np.ndarray) -> bool:
    return bool(np.all(v == v[0]))


def kendall_tau(x, y) -> float:
    """Kendall's tau-b. NaN when either vector is constant (correlation undefined)."""
    x, y = _pair(x, y)
    if _constant(x) or _constant(y):
        return math.nan
    return float(stats.kendalltau(x, y, variant="b").statistic)


def spearman_rho(x, y) -> float:
    """Pearson correlation of average ranks. NaN when either vector is constant."""
    x, y = _pair(x, y)
    if _constant(x) or _constant(y):
        return math.nan
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return float(stats.spearmanr(x, y).statistic)


def nanmean(values: Sequence[float]) -> float:
    """Mean over defined values; NaN if none are defined."""
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def evaluate_video(pred, annotations, protocol: str = "score",
                   segmentation: ShotSegmentation | None = None,
                   budget_ratio: float = 0.15) -> tuple[float, float]:
    """Average (tau, rho) of a prediction against every annotator.

    ``protocol="score"`` correlates frame scores directly. ``protocol="summary"``
    turns the prediction into a binary knapsack summary (using ``segmentation``)
    and correlates it with each annotator's binary summary; if no segmentation is
    given the prediction must already be a 0/1 mask. Annotators whose
    correlation is undefined are skipped.
    """
    annotations = [np.asarray(a, dtype=np.float64) for a in annotations]
    if not annotations:
        raise ValueError("no annotations to evaluate against")
    pred = np.asarray(pred, dtype=np.float64)
    if any(a.shape != pred.shape for a in annotations):
        raise ValueError("prediction and annotations differ in length")
    if protocol == "summary":
        if segmentation is not None:
            pred = summarize(pred, segmentation, budget_ratio).mask.astype(np.float64)
        elif not np.all((pred == 0) | (pred == 1)):
            raise ValueError("summary protocol needs a segmentation or a binary mask")
    elif protocol != "score":
        raise ValueError(f"unknown protocol {protocol!r}")
    taus = [kendall_tau(pred, a) for a in annotations]
    rhos = [spearman_rho(pred, a) for a in annotations]
    return nanmean(taus), nanmean(rhos)
