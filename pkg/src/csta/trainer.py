"""Adam optimiser and the per-split training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .dataio import VideoRecord
from .metrics import evaluate_video, nanmean
from .model import CstaModel, ModelConfig, forward, predict
from .shots import segment_video

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 1
    learning_rate: float = 1e-3
    weight_decay: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout: float = 0.6
    decoupled_weight_decay: bool = False
    max_grad_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ValueError("learning_rate and eps must be positive, weight_decay non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must be in [0, 1)")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, tn.Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
              cfg: TrainConfig) -> OptimizerState:
    """One bias-corrected Adam update, in place on ``params``.

    Weight decay is the coupled L2 form (``g += wd * w``) unless
    ``cfg.decoupled_weight_decay`` is set.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient for {name!r} ({bad} entries) at step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        w = p.data.astype(np.float64)
        g = g.astype(np.float64)
        if cfg.weight_decay and not cfg.decoupled_weight_decay:
            g = g + cfg.weight_decay * w
        m = state.m.get(name, np.zeros_like(w))
        v = state.v.get(name, np.zeros_like(w))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        update = cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
        if cfg.weight_decay and cfg.decoupled_weight_decay:
            update = update + cfg.learning_rate * cfg.weight_decay * w
        p.data[...] = (w - update).astype(p.dtype)
        state.m[name], state.v[name] = m, v
    return state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    test_tau: float
    test_rho: float

    @property
    def score(self) -> float:
        return nanmean([self.test_tau, self.test_rho])


@dataclass
class SplitResult:
    best_epoch: int
    best_state: dict[str, np.ndarray]
    curve: list[EpochLog]
    per_video: dict[str, tuple[float, float]]
    model_config: ModelConfig
    final_state: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def best(self) -> EpochLog:
        return self.curve[self.best_epoch - 1]

    def model(self, final: bool = False) -> CstaModel:
        m = CstaModel(self.model_config)
        m.load_state_dict(self.final_state if final else self.best_state)
        return m


def evaluate_model(model: CstaModel, videos: list[VideoRecord], budget_ratio: float = 0.15,
                   kts_penalty: float | None = None) -> dict[str, tuple[float, float]]:
    """Per-video (tau, rho); summary-annotated videos go through shots + knapsack first."""
    out = {}
    for v in videos:
        scores = predict(model, v.features)
        if v.annotation_kind == "summaries":
            kw = {} if kts_penalty is None else {"penalty": kts_penalty}
            seg = segment_video(v.features, v.change_points, **kw)
            out[v.id] = evaluate_video(scores, v.annotations, "summary", seg, budget_ratio)
        else:
            out[v.id] = evaluate_video(scores, v.annotations, "score")
    return out


def mean_metrics(per_video: dict[str, tuple[float, float]]) -> tuple[float, float]:
    return (nanmean([t for t, _ in per_video.values()]), nanmean([r for _, r in per_video.values()]))


def train_loss(model: CstaModel, videos: list[VideoRecord]) -> float:
    """Mean MSE over videos in inference mode."""
    with tn.no_grad():
        return float(np.mean([tn.mse_loss(forward(model, v.features), v.target).item() for v in videos]))


def train_split(train_videos: list[VideoRecord], test_videos: list[VideoRecord], cfg: TrainConfig,
                model_config: ModelConfig, budget_ratio: float = 0.15,
                kts_penalty: float | None = None) -> SplitResult:
    """Train on one split and keep the epoch with the best mean test (tau, rho)."""
    if not train_videos:
        raise ValueError("empty training set")
    overlap = {v.id for v in train_videos} & {v.id for v in test_videos}
    if overlap:
        raise ValueError(f"train and test share videos: {sorted(overlap)}")
    model_config = ModelConfig(**{**model_config.to_dict(), "stages": model_config.stages,
                                  "dropout": cfg.dropout, "seed": cfg.seed})
    model = CstaModel(model_config)
    params = model.parameters()
    rng = np.random.default_rng([cfg.seed, 1])
    state = OptimizerState()
    curve: list[EpochLog] = []
    best: tuple[float, int, dict, dict] | None = None

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_videos))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_videos[i] for i in order[start:start + cfg.batch_size]]
            model.zero_grad()
            batch_loss = None
            for v in batch:
                scores = forward(model, v.features, training=True, rng=rng)
                loss = tn.mse_loss(scores, v.target)
                losses.append(loss.item())
                batch_loss = loss if batch_loss is None else tn.add(batch_loss, loss)
            if len(batch) > 1:
                batch_loss = tn.mul(batch_loss, 1.0 / len(batch))
            batch_loss.backward()
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            if cfg.max_grad_norm:
                clip_grad_norm(grads, cfg.max_grad_norm)
            adam_step(params, grads, state, cfg)

        per_video = evaluate_model(model, test_videos, budget_ratio, kts_penalty) if test_videos else {}
        tau, rho = mean_metrics(per_video) if per_video else (math.nan, math.nan)
        entry = EpochLog(epoch, float(np.mean(losses)), tau, rho)
        curve.append(entry)
        log.debug("epoch %d loss %.5f tau %.4f rho %.4f", epoch, entry.train_loss, tau, rho)
        score = entry.score
        key = -math.inf if math.isnan(score) else score
        if best is None or key > best[0]:
            best = (key, epoch, model.state_dict(), per_video)

    _, best_epoch, best_state, best_per_video = best
    return SplitResult(best_epoch, best_state, curve, best_per_video, model_config, model.state_dict())
