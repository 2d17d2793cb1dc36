"""Finetuning loop with a frozen original model and validation-based selection."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .distributions import softmax
from .errors import EmptyDataset, NonFiniteLoss
from .model import Batch, SequenceModel, gradients
from .objective import AnnotatedSequence, ObjectiveConfig, Targets, build_targets, loss_closure, position_losses

log = logging.getLogger(__name__)

OPTIMIZERS = ("adaptive-moment", "plain-gradient-descent")
_ALIASES = {"adam": "adaptive-moment", "sgd": "plain-gradient-descent", "gd": "plain-gradient-descent"}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    steps: int = 20_000
    eval_every: int = 200
    learning_rate: float = 1e-3
    optimizer: str = "adaptive-moment"
    seed: int = 0
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "optimizer", _ALIASES.get(self.optimizer, self.optimizer))
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.steps < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1, steps >= 0")
        if self.steps and self.eval_every > self.steps:
            raise ValueError("eval_every must not exceed steps")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "objective" in d and isinstance(d["objective"], dict):
            d["objective"] = ObjectiveConfig(**d["objective"])
        return cls(**d)


class PreparedData:
    """A dataset encoded once for one model family, with frozen targets attached."""

    def __init__(self, model: SequenceModel, original: SequenceModel,
                 data: Sequence[AnnotatedSequence], cfg: ObjectiveConfig):
        if not data:
            raise EmptyDataset("dataset is empty")
        self.data = list(data)
        self.batch = model.encode([s.pair for s in self.data])
        offsets = self.batch.offsets
        original_probs = softmax(original.scores(self.batch)) if cfg.needs_targets else None
        parts = [
            build_targets(s, None if original_probs is None else original_probs[offsets[i]:offsets[i + 1]], cfg)
            for i, s in enumerate(self.data)
        ]
        self.targets = Targets.concat(parts)

    def __len__(self):
        return len(self.data)

    def subset(self, idx: np.ndarray) -> tuple[Batch, Targets]:
        off = self.batch.offsets
        pos = np.concatenate([np.arange(off[i], off[i + 1]) for i in idx])
        lengths = off[np.asarray(idx) + 1] - off[np.asarray(idx)]
        batch = Batch(
            inputs=[self.batch.inputs[i] for i in idx],
            seq_idx=np.repeat(np.arange(len(idx)), lengths),
            trailing=self.batch.trailing[pos],
            tokens=self.batch.tokens[pos],
            offsets=np.concatenate([[0], np.cumsum(lengths)]),
        )
        return batch, self.targets.select(pos)


def _set_parameters(model: SequenceModel, flat: np.ndarray) -> None:
    model.parameters[...] = flat


def dataset_loss(model: SequenceModel, prepared: PreparedData, cfg: ObjectiveConfig) -> float:
    """Mean per-sequence objective over a prepared dataset, in dataset order."""
    val, _ = position_losses(model.scores(prepared.batch), prepared.targets, cfg)
    per_seq = np.add.reduceat(val, prepared.batch.offsets[:-1]) if len(val) else np.zeros(len(prepared))
    return float(per_seq.sum() / len(prepared))


def validation_loss(model: SequenceModel, original: SequenceModel,
                    val_set: Sequence[AnnotatedSequence], objective_cfg: ObjectiveConfig) -> float:
    if not val_set:
        raise EmptyDataset("validation set is empty")
    return dataset_loss(model, PreparedData(model, original, val_set, objective_cfg), objective_cfg)


class _BatchStream:
    """Sequential epochs over seed-shuffled orders."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        out = []
        need = self.batch_size
        while need:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            take = min(need, self.n - self.pos)
            out.append(self.order[self.pos:self.pos + take])
            self.pos += take
            need -= take
        return np.concatenate(out)


def train(original: SequenceModel, train_set: Sequence[AnnotatedSequence],
          val_set: Sequence[AnnotatedSequence], cfg: TrainConfig,
          log_path=None) -> tuple[SequenceModel, list[dict]]:
    """Finetune a copy of ``original``; return the best-validation snapshot and the log."""
    if not train_set or not val_set:
        raise EmptyDataset("train and validation sets must be non-empty")
    original_hash = original.param_hash()
    ocfg = cfg.objective
    model = original.prepare([s.pair for s in list(train_set) + list(val_set)])
    model = model.with_parameters(model.parameters.copy())
    train_data = PreparedData(model, original, train_set, ocfg)
    val_data = PreparedData(model, original, val_set, ocfg)

    rng = np.random.default_rng(cfg.seed)
    stream = _BatchStream(len(train_data), cfg.batch_size, rng)
    theta = model.parameters.copy()
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)

    best_val = dataset_loss(model, val_data, ocfg)
    best_theta = theta.copy()
    records = [{"step": 0, "train_loss": None, "val_loss": best_val, "checkpointed": True}]
    running, count = 0.0, 0
    for step in range(1, cfg.steps + 1):
        batch, tg = train_data.subset(stream.next())
        try:
            loss, grad = gradients(model, batch, loss_closure(tg, ocfg))
        except NonFiniteLoss as exc:
            log.warning("step %d: %s; keeping last good snapshot", step, exc)
            records.append({"step": step, "train_loss": None, "val_loss": None,
                            "checkpointed": False, "error": str(exc)})
            break
        running += loss
        count += 1
        if cfg.optimizer == "adaptive-moment":
            m1 = cfg.beta1 * m1 + (1 - cfg.beta1) * grad
            m2 = cfg.beta2 * m2 + (1 - cfg.beta2) * grad * grad
            mhat = m1 / (1 - cfg.beta1 ** step)
            vhat = m2 / (1 - cfg.beta2 ** step)
            theta = theta - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        else:
            theta = theta - cfg.learning_rate * grad
        _set_parameters(model, theta)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            val = dataset_loss(model, val_data, ocfg)
            improved = bool(np.isfinite(val) and val < best_val)
            if improved:
                best_val, best_theta = val, theta.copy()
            records.append({"step": step, "train_loss": running / count, "val_loss": val,
                            "checkpointed": improved})
            running, count = 0.0, 0

    if original.param_hash() != original_hash:
        raise RuntimeError("original model parameters changed during training")
    if log_path is not None:
        write_log(records, log_path)
    return model.with_parameters(best_theta), records


def write_log(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def with_objective(cfg: TrainConfig, objective: ObjectiveConfig, **changes) -> TrainConfig:
    return replace(cfg, objective=objective, **changes)
