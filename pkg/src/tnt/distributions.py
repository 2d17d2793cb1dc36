"""Simplex-level math over a finite token vocabulary.

Distributions are plain float64 numpy arrays whose last axis runs over the
vocabulary, so every function here also works row-wise on a ``(N, V)`` batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import TargetNotPositive, TotalMassRemoved

MASS_EPS = 1e-12
SUM_TOL = 1e-9
DEFAULT_SMOOTHING = 1e-6
DEFAULT_UL_CLAMP = 1e-9


@dataclass(frozen=True)
class Vocab:
    """Token alphabet with reserved ids.

    ``bos`` and ``pad`` may be ``None`` for toy alphabets; context windows are
    left-padded with a sentinel index equal to ``size`` regardless.
    """

    size: int
    eos: int
    bos: int | None = None
    pad: int | None = None
    names: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        reserved = self.reserved
        if self.size < 2:
            raise ValueError("vocabulary needs at least two tokens")
        if len(set(reserved)) != len(reserved):
            raise ValueError(f"reserved ids must be distinct, got {reserved}")
        if any(not 0 <= r < self.size for r in reserved):
            raise ValueError(f"reserved ids must lie in [0, {self.size})")
        if self.size - len(reserved) < 1:
            raise ValueError("vocabulary has no non-reserved tokens")
        if self.names and len(self.names) != self.size:
            raise ValueError("names must have one entry per id")

    @property
    def reserved(self) -> tuple[int, ...]:
        return tuple(r for r in (self.pad, self.bos, self.eos) if r is not None)

    def name(self, token: int) -> str:
        return self.names[token] if self.names else str(token)

    def to_dict(self) -> dict:
        return {"size": self.size, "eos": self.eos, "bos": self.bos,
                "pad": self.pad, "names": list(self.names)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(size=d["size"], eos=d["eos"], bos=d.get("bos"),
                   pad=d.get("pad"), names=tuple(d.get("names") or ()))


def check_distribution(p, tol: float = SUM_TOL) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("distribution has negative or non-finite entries")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ValueError("distribution does not sum to one")
    return p


def negative_mask(neg: Iterable[int], size: int) -> np.ndarray:
    mask = np.zeros(size, dtype=bool)
    ids = list(neg)
    if ids:
        ids_arr = np.asarray(ids, dtype=np.int64)
        if ids_arr.min() < 0 or ids_arr.max() >= size:
            raise ValueError(f"negative ids {ids} outside vocabulary of size {size}")
        mask[ids_arr] = True
    return mask


def logsumexp(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    m = scores.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(scores - m).sum(axis=-1, keepdims=True)))[..., 0]


def log_softmax(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    return scores - logsumexp(scores)[..., None]


def softmax(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def project_masked(p: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero the entries under ``mask`` and renormalize the rest (row-wise)."""
    p = np.asarray(p, dtype=np.float64)
    kept = np.where(mask, 0.0, p)
    mass = kept.sum(axis=-1, keepdims=True)
    if np.any(mass < MASS_EPS):
        raise TotalMassRemoved("kept mass below %g" % MASS_EPS)
    return kept / mass


def project_out_negatives(p, neg: Iterable[int]) -> np.ndarray:
    """KL-closest distribution to ``p`` that puts no mass on ``neg``.

    The minimizer of KL(q || p) subject to q_i = 0 on the negative set keeps
    the ratios of the surviving entries, so it is ``p`` restricted and
    renormalized.
    """
    p = check_distribution(p)
    return project_masked(p, negative_mask(neg, p.shape[-1]))


def smooth_distribution(p, eps: float = DEFAULT_SMOOTHING) -> np.ndarray:
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = np.asarray(p, dtype=np.float64)
    return (p + eps) / (1.0 + p.shape[-1] * eps)


def forward_kl(target, model_log_probs) -> float | np.ndarray:
    """KL(target || model) with the 0 log 0 = 0 convention."""
    target = np.asarray(target, dtype=np.float64)
    logq = np.asarray(model_log_probs, dtype=np.float64)
    pos = target > 0
    logt = np.log(np.where(pos, target, 1.0))
    terms = np.where(pos, target * (logt - np.where(pos, logq, 0.0)), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def reverse_kl(target, model_probs) -> float | np.ndarray:
    """KL(model || target); ``target`` must be strictly positive."""
    target = np.asarray(target, dtype=np.float64)
    q = np.asarray(model_probs, dtype=np.float64)
    if np.any(target <= 0):
        raise TargetNotPositive("reverse KL needs a smoothed (strictly positive) target")
    pos = q > 0
    logq = np.log(np.where(pos, q, 1.0))
    terms = np.where(pos, q * (logq - np.log(target)), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def nl_token_loss(log_prob_of_negative_token: float) -> float:
    return float(log_prob_of_negative_token)


def ul_token_loss(prob_of_negative_token: float, clamp: float = DEFAULT_UL_CLAMP) -> float:
    return float(-np.log(max(1.0 - prob_of_negative_token, clamp)))


def ll_token_loss(log_prob_of_realized_token: float) -> float:
    return float(-log_prob_of_realized_token)


def total_variation(p: Sequence[float], q: Sequence[float]) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
