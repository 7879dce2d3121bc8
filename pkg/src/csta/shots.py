"""Shot segmentation (kernel temporal segmentation) and knapsack summary selection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_BUDGET = 0.15
DEFAULT_PENALTY = 0.3


@dataclass(frozen=True)
class ShotSegmentation:
    n_frames: int
    change_points: tuple[int, ...]

    def __post_init__(self):
        cps = tuple(int(c) for c in self.change_points)
        object.__setattr__(self, "change_points", cps)
        prev = 0
        for c in cps:
            if not prev < c < self.n_frames:
                raise ValueError(f"change points must be strictly increasing inside (0, {self.n_frames}): {cps}")
            prev = c

    @property
    def bounds(self) -> list[tuple[int, int]]:
        """Half-open [start, end) intervals, one per shot."""
        edges = [0, *self.change_points, self.n_frames]
        return list(zip(edges[:-1], edges[1:]))

    @property
    def lengths(self) -> list[int]:
        return [b - a for a, b in self.bounds]

    def __len__(self) -> int:
        return len(self.change_points) + 1


@dataclass(frozen=True)
class SummarySelection:
    shots: tuple[int, ...]
    mask: np.ndarray
    n_selected: int
    value: float


# -- KTS ----------------------------------------------------------------------

def gram_matrix(features: np.ndarray, kernel: str = "linear", gamma: float | None = None) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if kernel == "linear":
        return f @ f.T
    if kernel == "rbf":
        sq = (f * f).sum(axis=1)
        dist = np.maximum(sq[:, None] + sq[None, :] - 2.0 * f @ f.T, 0.0)
        if gamma is None:
            med = np.median(dist[dist > 0]) if np.any(dist > 0) else 1.0
            gamma = 1.0 / med
        return np.exp(-gamma * dist)
    raise ValueError(f"unknown kernel {kernel!r}")


def segment_costs(gram: np.ndarray) -> np.ndarray:
    """cost[i, j] = within-segment scatter of frames [i, j) (zero when j <= i)."""
    n = gram.shape[0]
    diag = np.concatenate([[0.0], np.cumsum(np.diag(gram))])
    block = np.zeros((n + 1, n + 1))
    block[1:, 1:] = gram.cumsum(0).cumsum(1)
    i = np.arange(n + 1)[:, None]
    j = np.arange(n + 1)[None, :]
    length = np.maximum(j - i, 1)
    inner = block[j, j] - block[i, j] - block[j, i] + block[i, i]
    cost = (diag[j] - diag[i]) - inner / length
    cost[j <= i] = 0.0
    return np.maximum(cost, 0.0)


def _dp(cost: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """best[k, l]: minimal cost of splitting frames [0, l) into k+1 segments."""
    n = cost.shape[0] - 1
    best = np.full((m + 1, n + 1), np.inf)
    back = np.zeros((m + 1, n + 1), dtype=int)
    best[0, 1:] = cost[0, 1:]
    for k in range(1, m + 1):
        for l in range(k + 1, n + 1):
            cand = best[k - 1, k:l] + cost[k:l, l]
            idx = int(np.argmin(cand))
            best[k, l] = cand[idx]
            back[k, l] = idx + k
    return best, back


def _backtrack(back: np.ndarray, k: int, n: int) -> list[int]:
    cps = []
    cur = n
    for kk in range(k, 0, -1):
        cur = int(back[kk, cur])
        cps.append(cur)
    return sorted(cps)


def kts_segment(features: np.ndarray, max_changes: int, penalty: float | None = None,
                kernel: str = "linear") -> ShotSegmentation:
    """Kernel temporal segmentation by dynamic programming.

    With ``penalty=None`` exactly ``max_changes`` change points are placed so the
    total within-segment scatter is minimal. With a penalty weight ``g`` the
    number of changes ``k <= max_changes`` is chosen by minimising
    ``cost_k + g * k * log(T) * cost_0 / T``; ``cost_0 / T`` puts the penalty on
    the scale of the per-frame scatter.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError(f"features must be T×d, got shape {f.shape}")
    n = f.shape[0]
    if n < 2:
        raise ValueError("KTS needs at least two frames")
    if not 0 <= max_changes < n:
        raise ValueError(f"max_changes must be in [0, {n}), got {max_changes}")
    if not np.all(np.isfinite(f)):
        raise ValueError("features contain non-finite values")
    cost = segment_costs(gram_matrix(f, kernel))
    best, back = _dp(cost, max_changes)
    if penalty is None:
        k = max_changes
    else:
        if penalty < 0:
            raise ValueError("penalty must be non-negative")
        scale = best[0, n] / n
        objective = [best[k, n] + penalty * k * math.log(n) * scale for k in range(max_changes + 1)]
        k = int(np.argmin(objective))
    return ShotSegmentation(n, tuple(_backtrack(back, k, n)))


def auto_max_changes(n_frames: int, min_shot: int = 2) -> int:
    return max(0, min(n_frames - 1, n_frames // min_shot - 1))


def segment_video(features: np.ndarray, change_points=None, penalty: float = DEFAULT_PENALTY) -> ShotSegmentation:
    """Stored change points win; otherwise run KTS with automatic model selection."""
    n = len(features)
    if change_points is not None:
        return ShotSegmentation(n, tuple(change_points))
    if n < 2:
        return ShotSegmentation(n, ())
    return kts_segment(features, auto_max_changes(n), penalty=penalty)


# -- selection ------------------------------------------------------------------

def shot_scores(scores: np.ndarray, seg: ShotSegmentation) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != seg.n_frames:
        raise ValueError(f"{len(scores)} scores for a {seg.n_frames}-frame segmentation")
    return np.array([scores[a:b].mean() for a, b in seg.bounds])


def _better(a: tuple, b: tuple | None) -> bool:
    """Higher value, then fewer frames, then lexicographically smaller index tuple."""
    if b is None:
        return True
    if a[0] != b[0]:
        return a[0] > b[0]
    if a[1] != b[1]:
        return a[1] < b[1]
    return a[2] < b[2]


def knapsack(values, weights, capacity: int) -> tuple[tuple[int, ...], float, int]:
    """Exact 0/1 knapsack over integer weights; returns (indices, value, weight).

    Values are summed in index order so the result is bit-identical to
    summing the chosen subset directly.
    """
    values = [float(v) for v in values]
    weights = [int(w) for w in weights]
    capacity = max(int(capacity), 0)
    # best[c]: best (value, weight, indices) using capacity <= c
    best: list[tuple] = [(0.0, 0, ())] * (capacity + 1)
    for i, (v, w) in enumerate(zip(values, weights)):
        if w > capacity:
            continue
        nxt = list(best)
        for c in range(w, capacity + 1):
            pv, pw, pidx = best[c - w]
            cand = (pv + v, pw + w, pidx + (i,))
            if _better(cand, nxt[c]):
                nxt[c] = cand
        best = nxt
    value, weight, idx = best[capacity]
    return idx, value, weight


def knapsack_select(scores, lengths, n_frames: int | None = None,
                    budget_ratio: float = DEFAULT_BUDGET) -> SummarySelection:
    """Pick shots maximising the summed shot score with at most floor(budget_ratio*T) frames."""
    scores = list(scores)
    lengths = [int(x) for x in lengths]
    if not scores:
        raise ValueError("no shots to select from")
    if len(scores) != len(lengths):
        raise ValueError("scores and lengths differ in length")
    total = sum(lengths)
    if n_frames is not None and n_frames != total:
        raise ValueError(f"shot lengths sum to {total}, expected {n_frames}")
    capacity = math.floor(budget_ratio * total + 1e-9)
    idx, value, weight = knapsack(scores, lengths, capacity)
    mask = np.zeros(total, dtype=np.uint8)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    for i in idx:
        mask[starts[i]:starts[i] + lengths[i]] = 1
    return SummarySelection(idx, mask, weight, value)


def summarize(scores: np.ndarray, seg: ShotSegmentation, budget_ratio: float = DEFAULT_BUDGET) -> SummarySelection:
    """Frame scores -> shot means -> knapsack -> binary frame mask."""
    return knapsack_select(shot_scores(scores, seg), seg.lengths, seg.n_frames, budget_ratio)
