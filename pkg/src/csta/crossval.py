"""Five-fold, multi-repeat evaluation protocol.

Partition rule: for repeat ``r`` with seed ``s_r``, videos are shuffled with
``numpy.random.default_rng(s_r).permutation(n)`` and the permutation is cut
into ``folds`` contiguous chunks by ``numpy.array_split``. Chunk ``k`` is the
test set of fold ``k``; everything else trains. Fold ``k`` of repeat ``r``
trains with seed ``s_r * 1000 + k``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataio import Dataset
from .metrics import nanmean
from .model import ModelConfig
from .trainer import SplitResult, TrainConfig, mean_metrics, train_split

log = logging.getLogger(__name__)


def fold_partition(n_videos: int, folds: int, seed: int) -> list[list[int]]:
    if folds < 2:
        raise ValueError("need at least two folds")
    if n_videos < folds:
        raise ValueError(f"{n_videos} videos cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(n_videos)
    return [sorted(int(i) for i in chunk) for chunk in np.array_split(perm, folds)]


def default_seeds(repeats: int, base: int = 0) -> list[int]:
    return [base + r for r in range(repeats)]


@dataclass
class FoldResult:
    repeat: int
    fold: int
    seed: int
    test_ids: list[str]
    best_epoch: int
    tau: float
    rho: float
    per_video: dict[str, tuple[float, float]]


@dataclass
class EvalReport:
    seeds: list[int]
    folds: list[FoldResult] = field(default_factory=list)

    def repeat_means(self) -> list[tuple[float, float]]:
        out = []
        for r in range(len(self.seeds)):
            rows = [f for f in self.folds if f.repeat == r]
            out.append((nanmean([f.tau for f in rows]), nanmean([f.rho for f in rows])))
        return out

    @property
    def tau(self) -> float:
        return nanmean([t for t, _ in self.repeat_means()])

    @property
    def rho(self) -> float:
        return nanmean([r for _, r in self.repeat_means()])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "repeat", "fold", "seed", "video", "best_epoch", "tau", "rho"])
        for f in self.folds:
            for vid, (t, r) in f.per_video.items():
                w.writerow(["video", f.repeat, f.fold, f.seed, vid, f.best_epoch, _fmt(t), _fmt(r)])
        for f in self.folds:
            w.writerow(["fold", f.repeat, f.fold, f.seed, "", f.best_epoch, _fmt(f.tau), _fmt(f.rho)])
        for r, (t, rh) in enumerate(self.repeat_means()):
            w.writerow(["repeat", r, "", self.seeds[r], "", "", _fmt(t), _fmt(rh)])
        w.writerow(["overall", "", "", "", "", "", _fmt(self.tau), _fmt(self.rho)])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"repeats: {len(self.seeds)}  seeds: {self.seeds}"]
        for f in self.folds:
            lines.append(f"  repeat {f.repeat} fold {f.fold}: tau {f.tau:+.4f} rho {f.rho:+.4f} "
                         f"(best epoch {f.best_epoch}, test {', '.join(f.test_ids)})")
        for r, (t, rh) in enumerate(self.repeat_means()):
            lines.append(f"repeat {r}: tau {t:+.4f} rho {rh:+.4f}")
        lines.append(f"overall: tau {self.tau:+.4f} rho {self.rho:+.4f}")
        return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def _run_fold(args) -> tuple[FoldResult, SplitResult]:
    dataset, repeat, fold, seed, test_idx, train_cfg, model_config, budget_ratio, kts_penalty = args
    test_set = set(test_idx)
    train = [v for i, v in enumerate(dataset.videos) if i not in test_set]
    test = [dataset.videos[i] for i in test_idx]
    fold_seed = seed * 1000 + fold
    cfg = TrainConfig(**{**train_cfg.__dict__, "seed": fold_seed})
    res = train_split(train, test, cfg, model_config, budget_ratio, kts_penalty)
    tau, rho = mean_metrics(res.per_video)
    log.info("repeat %d fold %d: best epoch %d tau %.4f rho %.4f", repeat, fold, res.best_epoch, tau, rho)
    return FoldResult(repeat, fold, seed, [v.id for v in test], res.best_epoch, tau, rho, res.per_video), res


def cross_validate(dataset: Dataset, model_config: ModelConfig, train_cfg: TrainConfig, folds: int = 5,
                   repeats: int = 10, seeds: list[int] | None = None, jobs: int = 1,
                   budget_ratio: float = 0.15, kts_penalty: float | None = None, keep_models: bool = False):
    """Train and score every fold of every repeat.

    Returns the report, plus the per-fold :class:`SplitResult` list when
    ``keep_models`` is set. Results are ordered by (repeat, fold) whatever
    ``jobs`` is.
    """
    seeds = list(seeds) if seeds is not None else default_seeds(repeats)
    if len(seeds) != repeats:
        raise ValueError(f"{len(seeds)} seeds for {repeats} repeats")
    tasks = []
    for r, seed in enumerate(seeds):
        for k, test_idx in enumerate(fold_partition(len(dataset), folds, seed)):
            tasks.append((dataset, r, k, seed, test_idx, train_cfg, model_config, budget_ratio, kts_penalty))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]
    report = EvalReport(seeds, [fr for fr, _ in results])
    if keep_models:
        return report, [sr for _, sr in results]
    return report
