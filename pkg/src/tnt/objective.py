"""Per-sequence losses for targeted negative training and the baselines.

Every loss here is a sum of per-position terms that depend only on that
position's score vector, so each term comes with a closed-form gradient with
respect to the scores.  Model code turns that into parameter gradients.

Method names: the two letters after ``TN-`` name the divergence used at
negative and positive positions respectively (F forward KL to the target,
R reverse KL to the smoothed target); ``+LL`` replaces the positive-position
divergence by the realized token's negative log-likelihood.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .distributions import (
    DEFAULT_SMOOTHING,
    DEFAULT_UL_CLAMP,
    logsumexp,
    project_out_negatives,
    smooth_distribution,
)
from .errors import LengthMismatch, TotalMassRemoved

log = logging.getLogger(__name__)

TNT_METHODS = ("TN-FF", "TN-RR", "TN-RF", "TN-F+LL", "TN-R+LL")
BASELINE_METHODS = ("NL+LL", "UL+LL")
METHODS = TNT_METHODS + BASELINE_METHODS
# plain maximum likelihood, used for base training
LL = "LL"

# (negative-position term, positive-position term)
_TERMS = {
    "TN-FF": ("fwd", "fwd"),
    "TN-RR": ("rev", "rev"),
    "TN-RF": ("rev", "fwd"),
    "TN-F+LL": ("fwd", "ll"),
    "TN-R+LL": ("rev", "ll"),
    "NL+LL": ("nl", "ll"),
    "UL+LL": ("ul", "ll"),
    LL: ("ll", "ll"),
}


@dataclass(frozen=True)
class TokenAnnotation:
    position: int
    negative_ids: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "negative_ids", frozenset(int(i) for i in self.negative_ids))
        if not self.negative_ids:
            raise ValueError("an annotation needs at least one negative id")
        if self.position < 0:
            raise ValueError("position must be non-negative")


@dataclass(frozen=True)
class AnnotatedSequence:
    input: tuple[int, ...]
    output: tuple[int, ...]
    annotations: tuple[TokenAnnotation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "input", tuple(int(t) for t in self.input))
        object.__setattr__(self, "output", tuple(int(t) for t in self.output))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        positions = [a.position for a in self.annotations]
        if any(b <= a for a, b in zip(positions, positions[1:])):
            raise ValueError("annotation positions must be strictly increasing")
        if positions and positions[-1] >= len(self.output):
            raise ValueError("annotation position beyond output length")

    def negatives_at(self) -> list[frozenset[int]]:
        neg = [frozenset()] * len(self.output)
        for a in self.annotations:
            neg[a.position] = a.negative_ids
        return neg

    @property
    def pair(self):
        return self.input, self.output


@dataclass(frozen=True)
class ObjectiveConfig:
    method: str = "TN-FF"
    alpha: float = 1.0
    smoothing_eps: float = DEFAULT_SMOOTHING
    ul_clamp: float = DEFAULT_UL_CLAMP
    logit_penalty_coeff: float = 1e-4

    def __post_init__(self):
        if self.method not in _TERMS:
            raise ValueError(f"unknown method {self.method!r}; choose from {sorted(_TERMS)}")
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError("alpha must be finite and non-negative")
        if self.smoothing_eps <= 0 or not 0 < self.ul_clamp < 1:
            raise ValueError("smoothing_eps must be > 0 and ul_clamp in (0, 1)")
        if self.logit_penalty_coeff < 0 or not np.isfinite(self.logit_penalty_coeff):
            raise ValueError("logit_penalty_coeff must be finite and >= 0")

    @property
    def needs_targets(self) -> bool:
        return self.method in TNT_METHODS

    def to_dict(self) -> dict:
        return asdict(self)


def target_distribution(p_o_t, neg_t: Iterable[int] = ()) -> np.ndarray:
    neg_t = list(neg_t)
    if not neg_t:
        return np.asarray(p_o_t, dtype=np.float64)
    return project_out_negatives(p_o_t, neg_t)


@dataclass
class Targets:
    """Per-position quantities fixed for the whole update run.

    ``is_negative[t]`` is true when the realized token is itself in the
    position's negative set; only those positions get the alpha-weighted
    negative term.  ``skip[t]`` marks positions whose negative set removes
    all original mass.
    """

    tokens: np.ndarray
    is_negative: np.ndarray
    target: np.ndarray | None = None
    log_smoothed: np.ndarray | None = None
    skip: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.skip is None:
            self.skip = np.zeros(len(self.tokens), dtype=bool)

    def select(self, idx: np.ndarray) -> "Targets":
        return Targets(
            tokens=self.tokens[idx],
            is_negative=self.is_negative[idx],
            target=None if self.target is None else self.target[idx],
            log_smoothed=None if self.log_smoothed is None else self.log_smoothed[idx],
            skip=self.skip[idx],
        )

    @staticmethod
    def concat(parts: Sequence["Targets"]) -> "Targets":
        has_target = parts[0].target is not None
        return Targets(
            tokens=np.concatenate([p.tokens for p in parts]),
            is_negative=np.concatenate([p.is_negative for p in parts]),
            target=np.concatenate([p.target for p in parts]) if has_target else None,
            log_smoothed=np.concatenate([p.log_smoothed for p in parts]) if has_target else None,
            skip=np.concatenate([p.skip for p in parts]),
        )


def build_targets(seq: AnnotatedSequence, original_probs: np.ndarray | None, cfg: ObjectiveConfig) -> Targets:
    """Fix the per-position targets of one sequence from the frozen original's conditionals."""
    tokens = np.asarray(seq.output, dtype=np.int64)
    negs = seq.negatives_at()
    is_neg = np.array([int(x) in n for x, n in zip(seq.output, negs)], dtype=bool)
    if not cfg.needs_targets:
        return Targets(tokens=tokens, is_negative=is_neg)
    if original_probs is None or len(original_probs) != len(tokens):
        raise LengthMismatch("original conditionals must cover every output position")
    target = np.array(original_probs, dtype=np.float64, copy=True)
    skip = np.zeros(len(tokens), dtype=bool)
    for t, neg in enumerate(negs):
        if neg:
            try:
                target[t] = project_out_negatives(target[t], neg)
            except TotalMassRemoved:
                log.warning("position %d: every supported token is negative; skipping", t)
                skip[t] = True
                target[t] = 1.0 / target.shape[1]
    log_smoothed = np.log(smooth_distribution(target, cfg.smoothing_eps))
    return Targets(tokens=tokens, is_negative=is_neg, target=target, log_smoothed=log_smoothed, skip=skip)


def _fwd(logp, p, tg: Targets):
    t = tg.target
    pos = t > 0
    logt = np.log(np.where(pos, t, 1.0))
    val = np.where(pos, t * (logt - logp), 0.0).sum(axis=1)
    return val, p - t


def _rev(logp, p, tg: Targets):
    f = logp - tg.log_smoothed
    val = (p * f).sum(axis=1)
    return val, p * (f - val[:, None])


def _ll(logp, p, tg: Targets):
    n = len(tg.tokens)
    val = -logp[np.arange(n), tg.tokens]
    grad = p.copy()
    grad[np.arange(n), tg.tokens] -= 1.0
    return val, grad


def _nl(logp, p, tg: Targets):
    val, grad = _ll(logp, p, tg)
    return -val, -grad


def _ul(logp, p, tg: Targets, clamp: float):
    rows = np.arange(len(tg.tokens))
    px = p[rows, tg.tokens]
    # 1 - p(x) from the other entries directly; subtraction loses it as p(x) -> 1
    others = logp.copy()
    others[rows, tg.tokens] = -np.inf
    rest = np.exp(logsumexp(others))
    live = rest > clamp
    val = -np.log(np.where(live, rest, clamp))
    grad = -px[:, None] * p
    grad[rows, tg.tokens] += px
    grad = np.where(live[:, None], grad / np.where(live, rest, 1.0)[:, None], 0.0)
    return val, grad


def position_losses(scores: np.ndarray, tg: Targets, cfg: ObjectiveConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-position loss values ``(N,)`` and their gradients ``(N, V)`` w.r.t. scores."""
    scores = np.asarray(scores, dtype=np.float64)
    lse = logsumexp(scores)
    logp = scores - lse[:, None]
    p = np.exp(logp)
    neg_term, pos_term = _TERMS[cfg.method]
    fns = {"fwd": _fwd, "rev": _rev, "ll": _ll, "nl": _nl,
           "ul": lambda a, b, c: _ul(a, b, c, cfg.ul_clamp)}
    val = np.zeros(len(scores))
    grad = np.zeros_like(scores)
    neg = tg.is_negative
    for term, mask, weight in ((neg_term, neg, cfg.alpha), (pos_term, ~neg, 1.0)):
        if not mask.any():
            continue
        v, g = fns[term](logp, p, tg)
        val = np.where(mask, weight * v, val)
        grad = np.where(mask[:, None], weight * g, grad)
    c = cfg.logit_penalty_coeff
    if c:
        val = val + c * lse ** 2
        grad = grad + (2.0 * c * lse)[:, None] * p
    keep = ~tg.skip
    return np.where(keep, val, 0.0), np.where(keep[:, None], grad, 0.0)


def loss_closure(tg: Targets, cfg: ObjectiveConfig):
    def closure(scores):
        val, grad = position_losses(scores, tg, cfg)
        return float(val.sum()), grad
    return closure


def sequence_loss(model_scores, original_conditionals, seq: AnnotatedSequence,
                  cfg: ObjectiveConfig) -> tuple[float, np.ndarray]:
    """Loss of one annotated sequence and its gradient w.r.t. the model's scores.

    ``model_scores`` are the model's pre-softmax scores, one row per output
    position; ``original_conditionals`` are the frozen original's
    distributions at the same positions (unused by the baselines).
    """
    model_scores = np.asarray(model_scores, dtype=np.float64)
    if len(model_scores) != len(seq.output):
        raise LengthMismatch(f"{len(model_scores)} score rows for {len(seq.output)} output tokens")
    if original_conditionals is not None and len(original_conditionals) != len(seq.output):
        raise LengthMismatch("original conditionals do not match output length")
    tg = build_targets(seq, original_conditionals, cfg)
    return loss_closure(tg, cfg)(model_scores)
