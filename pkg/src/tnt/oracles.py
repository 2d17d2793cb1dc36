"""Independent brute-force verifiers.

Nothing here reuses the projection or loss code it is meant to check: the
projection oracle searches a simplex lattice, and sequence-level quantities
come from explicit enumeration of every output up to a length bound.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import InfeasibleConstraint, SpaceTooLarge, ZeroOriginalMass
from .model import SequenceModel

MAX_ENUMERATION = 10 ** 6


@lru_cache(maxsize=16)
def _compositions(parts: int, total: int) -> np.ndarray:
    """All nonnegative integer vectors of length ``parts`` summing to ``total``."""
    if math.comb(total + parts - 1, parts - 1) > 5 * 10 ** 6:
        raise SpaceTooLarge("lattice too large; use fewer free coordinates or a coarser grid")
    head = np.zeros((1, 0), dtype=np.int16)
    sums = np.zeros(1, dtype=np.int64)
    for _ in range(parts - 1):
        counts = total - sums + 1
        owner = np.repeat(np.arange(len(head)), counts)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        vals = np.arange(counts.sum()) - np.repeat(starts, counts)
        head = np.concatenate([head[owner], vals[:, None].astype(np.int16)], axis=1)
        sums = sums[owner] + vals
    return np.concatenate([head, (total - sums)[:, None].astype(np.int16)], axis=1)


def brute_force_projection(p, neg: Iterable[int], grid: int = 200) -> np.ndarray:
    """Lattice minimizer of KL(q || p) over q with q_i = 0 on ``neg``."""
    p = np.asarray(p, dtype=np.float64)
    V = len(p)
    if V > 5 or grid > 200:
        raise ValueError("brute force limited to V <= 5 and grid <= 200")
    neg = set(int(i) for i in neg)
    free = [i for i in range(V) if i not in neg]
    if not free or p[free].sum() <= 0:
        raise InfeasibleConstraint("no probability mass outside the negative set")
    q = _compositions(len(free), grid).astype(np.float64) / grid
    pf = p[free]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * (np.log(q) - np.log(pf)), 0.0)
    kl = terms.sum(axis=1)
    best = q[int(np.argmin(kl))]
    out = np.zeros(V)
    out[free] = best
    return out


@dataclass
class SequenceDistribution:
    """Probabilities of every EOS-terminated output up to ``max_len``.

    Outputs that reach ``max_len`` without EOS are kept separately as
    truncated prefixes; the two maps together partition the unit mass.
    """

    terminated: dict[tuple[int, ...], float]
    unterminated: dict[tuple[int, ...], float] = field(default_factory=dict)

    @property
    def unterminated_mass(self) -> float:
        return float(sum(self.unterminated.values()))

    @property
    def total_mass(self) -> float:
        return float(sum(self.terminated.values()))

    def atoms(self) -> dict[tuple[int, ...], float]:
        out = dict(self.terminated)
        for k, v in self.unterminated.items():
            out[k + ("<trunc>",)] = v
        return out


def _check_space(V: int, max_len: int):
    if V ** max_len > MAX_ENUMERATION:
        raise SpaceTooLarge(f"{V}^{max_len} sequences exceed {MAX_ENUMERATION}")


def _expand(model: SequenceModel, input: Sequence[int], max_len: int) -> SequenceDistribution:
    V, eos = model.vocab.size, model.vocab.eos
    _check_space(V, max_len)
    inp = tuple(int(t) for t in input)
    live: list[tuple[tuple[int, ...], float]] = [((), 1.0)]
    done: dict[tuple[int, ...], float] = {}
    for _ in range(max_len):
        if not live:
            break
        prefixes = [list(pr) for pr, _ in live]
        probs = _softmax_rows(model.next_scores([inp] * len(live), prefixes))
        nxt = []
        for (prefix, mass), row in zip(live, probs):
            for tok in range(V):
                m = mass * row[tok]
                if m == 0.0:
                    continue
                seq = prefix + (tok,)
                if tok == eos:
                    done[seq] = m
                else:
                    nxt.append((seq, m))
        live = nxt
    return SequenceDistribution(done, dict(live))


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def exhaustive_sequence_distribution(model: SequenceModel, input: Sequence[int],
                                     max_len: int) -> SequenceDistribution:
    """Chain-rule probability of every output of ``model`` up to ``max_len`` tokens."""
    return _expand(model, input, max_len)


def conditioned_distribution(dist: SequenceDistribution,
                             is_clean: Callable[[tuple[int, ...]], bool]) -> dict:
    """p(x) * 1[x clean], renormalized over all atoms (terminated and truncated)."""
    atoms = {}
    for seq, m in dist.terminated.items():
        atoms[seq] = m if is_clean(seq) else 0.0
    for seq, m in dist.unterminated.items():
        atoms[seq + ("<trunc>",)] = m if is_clean(seq) else 0.0
    z = sum(atoms.values())
    if z <= 0:
        raise InfeasibleConstraint("every sequence is flagged")
    return {k: v / z for k, v in atoms.items() if v > 0}


def atom_total_variation(a: Mapping, b: Mapping) -> float:
    keys = set(a) | set(b)
    return 0.5 * float(sum(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys))


# -- token-level KL-constrained RL as reverse KL to a reward tilt ------------------

@dataclass
class RewardSpec:
    """Per-step rewards r_t(x_{<=t}) and temperature ``beta``.

    ``rewards`` is either a callable on the output prefix (including the
    current token) or a mapping from prefix tuples to values, missing ones
    counting as zero.
    """

    beta: float
    rewards: Callable[[tuple[int, ...]], float] | Mapping[tuple[int, ...], float]

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    def __call__(self, prefix: tuple[int, ...]) -> float:
        if callable(self.rewards):
            return float(self.rewards(prefix))
        return float(self.rewards.get(prefix, 0.0))


def _sequence_reward(seq: Sequence[int], rewards: RewardSpec) -> float:
    return sum(rewards(tuple(seq[:t + 1])) for t in range(len(seq)))


def tilted_distribution(dist_o: SequenceDistribution, rewards: RewardSpec) -> tuple[dict, float]:
    """p_o(x) exp(sum_t r_t / beta) normalized over all atoms; returns (distribution, log Z)."""
    logw = {}
    for seq, m in dist_o.terminated.items():
        logw[seq] = math.log(m) + _sequence_reward(seq, rewards) / rewards.beta
    for seq, m in dist_o.unterminated.items():
        logw[seq + ("<trunc>",)] = math.log(m) + _sequence_reward(seq, rewards) / rewards.beta
    vals = np.array(list(logw.values()))
    top = vals.max()
    log_z = float(top + np.log(np.exp(vals - top).sum()))
    return {k: math.exp(v - log_z) for k, v in logw.items()}, log_z


@dataclass
class EquivalenceResult:
    lhs: float
    rhs: float
    kl: float
    log_z: float

    @property
    def difference(self) -> float:
        return abs(self.lhs - self.rhs)


def token_rl_equivalence_check(p_theta: SequenceModel, p_o: SequenceModel, rewards: RewardSpec,
                               input: Sequence[int], max_len: int) -> EquivalenceResult:
    """Compare the token-level KL-regularized objective with KL(p_theta || reward tilt of p_o).

    ``lhs`` is E_{x~p_theta} sum_t [-r_t/beta + log p_theta(x_t|.) - log p_o(x_t|.)],
    accumulated token by token.  ``rhs`` is KL(p_theta || p_new) - log Z from a
    separate enumeration of both models at sequence level.  They agree when
    the identity holds.
    """
    V, eos = p_theta.vocab.size, p_theta.vocab.eos
    _check_space(V, max_len)
    inp = tuple(int(t) for t in input)

    # token-level accumulation along p_theta's tree
    lhs = 0.0
    live = [((), 1.0, 0.0)]
    for _ in range(max_len):
        if not live:
            break
        prefixes = [list(pr) for pr, _, _ in live]
        pt = _softmax_rows(p_theta.next_scores([inp] * len(live), prefixes))
        po = _softmax_rows(p_o.next_scores([inp] * len(live), prefixes))
        nxt = []
        for (prefix, mass, acc), rt, ro in zip(live, pt, po):
            for tok in range(V):
                if rt[tok] == 0.0:
                    continue
                if ro[tok] == 0.0:
                    raise ZeroOriginalMass(f"original assigns zero to token {tok} after {prefix}")
                seq = prefix + (tok,)
                term = -rewards(seq) / rewards.beta + math.log(rt[tok]) - math.log(ro[tok])
                m = mass * rt[tok]
                if tok == eos:
                    lhs += m * (acc + term)
                else:
                    nxt.append((seq, m, acc + term))
        live = nxt
    lhs += sum(m * acc for _, m, acc in live)

    # sequence-level side
    atoms_theta = exhaustive_sequence_distribution(p_theta, inp, max_len).atoms()
    p_new, log_z = tilted_distribution(exhaustive_sequence_distribution(p_o, inp, max_len), rewards)
    kl = 0.0
    for seq, m in atoms_theta.items():
        if m > 0:
            q = p_new.get(seq, 0.0)
            if q <= 0:
                raise ZeroOriginalMass(f"tilt assigns zero to {seq}")
            kl += m * (math.log(m) - math.log(q))
    return EquivalenceResult(lhs=lhs, rhs=kl - log_z, kl=kl, log_z=log_z)


# -- fully enumerated tiny task -----------------------------------------------------

@dataclass
class TinyTask:
    """A tabular original model whose every reachable context is enumerable."""

    original: "SequenceModel"
    inputs: list[tuple[int, ...]]
    negative_ids: frozenset[int]
    max_len: int

    def is_clean(self, seq: Sequence[int]) -> bool:
        return not any(t in self.negative_ids for t in seq)


def tiny_task(seed: int = 0, vocab_size: int = 6, max_len: int = 4, n_inputs: int = 2,
              bad_mass: tuple[float, float] = (0.005, 0.03), eos_mass: tuple[float, float] = (0.2, 0.5),
              inputs: Sequence[tuple[int, ...]] | None = None) -> TinyTask:
    """Random full-history tabular model over ``vocab_size`` tokens (EOS = 0).

    The last token is the negative one.  Its conditional probability is kept
    small so that zeroing it position by position stays close to conditioning
    the whole sequence distribution on never emitting it.
    """
    from .distributions import Vocab
    from .model import TabularModel, input_key

    rng = np.random.default_rng(seed)
    vocab = Vocab(size=vocab_size, eos=0)
    bad = vocab_size - 1
    drawn = [tuple(int(t) for t in rng.integers(1, vocab_size - 1, size=2)) for _ in range(n_inputs)]
    inputs = drawn if inputs is None else [tuple(int(t) for t in i) for i in inputs]
    conditionals = {}
    sentinel = vocab.size
    for inp in inputs:
        frontier = [()]
        for depth in range(max_len):
            nxt = []
            for prefix in frontier:
                p = np.empty(vocab_size)
                p[0] = rng.uniform(*eos_mass)
                p[bad] = rng.uniform(*bad_mass)
                rest = rng.dirichlet(np.ones(vocab_size - 2))
                p[1:bad] = (1.0 - p[0] - p[bad]) * rest
                window = (sentinel,) * (max_len - len(prefix)) + prefix
                conditionals[(input_key(inp), window)] = p
                nxt.extend(prefix + (t,) for t in range(1, vocab_size))
            frontier = nxt
    original = TabularModel.from_conditionals(vocab, max_len, conditionals)
    return TinyTask(original=original, inputs=inputs, negative_ids=frozenset({bad}), max_len=max_len)


def tiny_update_dataset(task: TinyTask):
    """Every output atom of the original, annotated with the negative set at every position.

    Listing the known negatives at each position (not only where the realized
    token is negative) gives every enumerated context its projected target.
    """
    from .objective import AnnotatedSequence, TokenAnnotation

    data = []
    for inp in task.inputs:
        dist = exhaustive_sequence_distribution(task.original, inp, task.max_len)
        for seq in list(dist.terminated) + list(dist.unterminated):
            anns = tuple(TokenAnnotation(t, task.negative_ids) for t in range(len(seq)))
            data.append(AnnotatedSequence(inp, seq, anns))
    return data


def token_level_optimum(task: TinyTask):
    """Tabular model whose every conditional is the projected original conditional."""
    from .distributions import project_out_negatives, softmax
    from .model import TabularModel

    orig = task.original
    conds = {key: project_out_negatives(softmax(row), task.negative_ids) for key, row in zip(orig.keys, orig.table)}
    return TabularModel.from_conditionals(orig.vocab, orig.context_order, conds)
