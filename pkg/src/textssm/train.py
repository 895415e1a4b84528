"""AdamW training and grounding evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .grounding import DEFAULT_NMS_IOU, DEFAULT_THRESHOLDS, EvalItem, MapTable, ground, map_suite
from .model import ModelConfig, TmMamba, load_checkpoint, loss_ce, save_checkpoint
from .synthetic import QueryEmbeddingProvider, SyntheticItem

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AdamWState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: Sequence[np.ndarray]) -> "AdamWState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamWState, lr: float, wd: float) -> None:
    """In-place decoupled AdamW update.

    ``theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)``
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged("non-finite gradient passed to adamw_step")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + wd * p
        p -= lr * update


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


@dataclass
class TrainConfig:
    learning_rate: float = 2e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 12
    seed: int = 0
    grad_clip_norm: float = 1.0
    val_fraction: float = 0.2
    eval_every: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    text_control: bool = True
    relational: bool = True
    bidirectional: bool = True

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be non-negative")
        if self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Budget preset sized so twelve runs fit in half an hour on one core."""
        model = ModelConfig(D=16, expansion=1, N=8, num_blocks=2)
        return cls(**{"model": model, "learning_rate": 3e-3, "epochs": 6, **overrides})

    def model_config(self) -> ModelConfig:
        d = asdict(self.model)
        d.update(text_control=self.text_control, relational=self.relational, bidirectional=self.bidirectional)
        return ModelConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def stack_batch(items: Sequence[SyntheticItem], embed: QueryEmbeddingProvider):
    motion = np.stack([it.motion for it in items])
    labels = np.stack([it.labels for it in items])
    q = embed([it.query_id for it in items])
    return motion, q, labels


def _predict_chunk(args):
    model, chunk, embed = args
    lengths = {it.motion.shape[1] for it in chunk}
    if len(lengths) > 1:
        return [model(it.motion, embed([it.query_id])[0]).s.data for it in chunk]
    motion, q, _ = stack_batch(chunk, embed)
    return list(model(motion, q).s.data)


def predict_scores(
    model: TmMamba, items: Sequence[SyntheticItem], embed: QueryEmbeddingProvider, batch_size: int = 16, workers: int = 1
) -> list[np.ndarray]:
    """Frame scores per item, in input order; ``workers > 1`` spreads batches over processes."""
    jobs = [(model, items[i : i + batch_size], embed) for i in range(0, len(items), batch_size)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_predict_chunk, jobs))
    else:
        parts = [_predict_chunk(j) for j in jobs]
    return [s for p in parts for s in p]


def evaluate_scores(
    scores: Sequence[np.ndarray],
    items: Sequence[SyntheticItem],
    thresholds=DEFAULT_THRESHOLDS,
    nms_iou: float = DEFAULT_NMS_IOU,
) -> MapTable:
    evals = [
        EvalItem(ground(s, thresholds, nms_iou), list(it.segments), query=int(it.query_id))
        for s, it in zip(scores, items)
    ]
    return map_suite(evals)


def evaluate(
    model: TmMamba, items, embed: QueryEmbeddingProvider, thresholds=DEFAULT_THRESHOLDS, nms_iou=DEFAULT_NMS_IOU, workers: int = 1
) -> MapTable:
    c = model.config
    for it in items:
        if it.motion.shape[0] != c.V or it.motion.shape[2] != c.C_in:
            raise ValueError(
                f"corpus item shape {it.motion.shape} does not match model (V={c.V}, C_in={c.C_in})"
            )
    return evaluate_scores(predict_scores(model, items, embed, workers=workers), items, thresholds, nms_iou)


@dataclass
class TrainResult:
    model: TmMamba
    history: list[dict]
    embed: QueryEmbeddingProvider


def train(
    config: TrainConfig,
    train_items: Sequence[SyntheticItem],
    val_items: Sequence[SyntheticItem] | None = None,
    num_motifs: int | None = None,
) -> TrainResult:
    """Minimize mean frame cross-entropy with AdamW; logs loss and val mAP per epoch."""
    if len(train_items) == 0:
        raise ValueError("training corpus is empty")
    mc = config.model_config()
    num_motifs = num_motifs or (max(it.query_id for it in train_items) + 1)
    embed = QueryEmbeddingProvider(num_motifs, mc.D, seed=config.seed)
    model = TmMamba(mc, seed=config.seed)
    params = model.parameters()
    state = AdamWState.fresh([p.data for p in params])
    rng = np.random.default_rng([config.seed, 1])
    history = []
    n = len(train_items)
    for epoch in range(config.epochs):
        t0 = time.time()
        order = rng.permutation(n)
        losses = []
        for b in range(0, n, config.batch_size):
            batch = [train_items[i] for i in order[b : b + config.batch_size]]
            motion, q, labels = stack_batch(batch, embed)
            model.zero_grad()
            try:
                with ad.Tape() as tape:
                    loss = loss_ce(model(motion, q), labels)
                tape.backward(loss)
            except ad.NonFiniteError as e:
                raise TrainingDiverged(f"epoch {epoch} batch {b // config.batch_size}: {e}") from e
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingDiverged(f"epoch {epoch}: loss became {lv}")
            grads = [p.grad for p in params]
            clip_grad_norm(grads, config.grad_clip_norm)
            adamw_step([p.data for p in params], grads, state, config.learning_rate, config.weight_decay)
            losses.append(lv)
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "seconds": time.time() - t0}
        if val_items and ((epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1):
            rec["val_map"] = evaluate(model, val_items, embed).average
        log.info("epoch %d: %s", epoch, rec)
        history.append(rec)
    return TrainResult(model, history, embed)


# ---------------------------------------------------------------- persistence


def save_run(result: TrainResult, path, config: TrainConfig | None = None) -> None:
    """Checkpoint plus the query table needed to evaluate it later."""
    extra = {"query_table": result.embed.table.tolist(), "history": result.history}
    if config is not None:
        extra["train_config"] = config.to_dict()
    save_checkpoint(result.model, path, extra=extra)


def load_run(path) -> tuple[TmMamba, QueryEmbeddingProvider]:
    model = load_checkpoint(path)
    manifest = json.loads((Path(path) / "manifest.json").read_text())
    table = np.asarray(manifest.get("extra", {}).get("query_table", []), dtype=np.float64)
    if table.ndim != 2 or table.shape[1] != model.config.D:
        raise ValueError(f"checkpoint {path} has no usable query table")
    embed = QueryEmbeddingProvider(table.shape[0], model.config.D)
    embed.table = table
    return model, embed


# ---------------------------------------------------------------- ablation

ABLATIONS = {
    "full": {},
    "no_relational": {"relational": False},
    "unidirectional": {"bidirectional": False},
    "no_text_control": {"text_control": False},
}


def run_ablation(
    base: TrainConfig,
    train_items: Sequence[SyntheticItem],
    val_items: Sequence[SyntheticItem],
    seeds: Sequence[int] = (0, 1, 2),
    variants: Sequence[str] = tuple(ABLATIONS),
    num_motifs: int | None = None,
) -> dict[str, dict[int, float]]:
    """Average val mAP for each variant and seed, trained from scratch."""
    out: dict[str, dict[int, float]] = {v: {} for v in variants}
    for seed in seeds:
        for v in variants:
            cfg = TrainConfig(**{**asdict(base), "seed": seed, **ABLATIONS[v]})
            res = train(cfg, train_items, None, num_motifs=num_motifs)
            out[v][seed] = evaluate(res.model, val_items, res.embed).average
            log.info("ablation %s seed %d: %.2f", v, seed, out[v][seed])
    return out
