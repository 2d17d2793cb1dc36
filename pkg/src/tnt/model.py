"""Desk-scale autoregressive sequence models.

Both models condition the next-token scores on a summary of the input and the
trailing ``k`` output tokens.  They share the same calling convention:

* ``encode(pairs)`` turns (input, output) pairs into a :class:`Batch` with one
  row per output position (teacher forcing);
* ``scores(batch)`` returns the ``(N, V)`` pre-softmax scores;
* ``backward(batch, dscores)`` maps a gradient on the scores to a flat
  gradient aligned with ``parameters``.

Losses are therefore supplied as closures over the score matrix that return
``(loss, dloss/dscores)``; see :func:`gradients`.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .distributions import Vocab, log_softmax, softmax
from .errors import NonFiniteLoss, TokenOutOfRange

ZERO_SCORE = -1e4

LossClosure = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


@dataclass
class Batch:
    """Flattened teacher-forced positions of several sequences."""

    inputs: list[tuple[int, ...]]
    seq_idx: np.ndarray          # (N,) which sequence each position belongs to
    trailing: np.ndarray         # (N, k) previous output ids, sentinel-padded
    tokens: np.ndarray | None    # (N,) realized output token, None when decoding
    offsets: np.ndarray | None = None  # (B+1,) position ranges per sequence

    @property
    def n_positions(self) -> int:
        return len(self.seq_idx)


def input_key(tokens: Sequence[int]) -> int:
    """Stable 63-bit hash identifying an input sequence."""
    data = np.asarray(tokens, dtype=np.int64).tobytes()
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little") >> 1


def trailing_windows(output: Sequence[int], k: int, sentinel: int) -> np.ndarray:
    out = np.asarray(output, dtype=np.int64)
    if k == 0:
        return np.zeros((len(out), 0), dtype=np.int64)
    padded = np.concatenate([np.full(k, sentinel, dtype=np.int64), out[:-1]]) if len(out) else np.full(k, sentinel)
    return np.lib.stride_tricks.sliding_window_view(padded, k)[: len(out)].copy()


def last_window(prefix: Sequence[int], k: int, sentinel: int) -> np.ndarray:
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    tail = list(prefix[-k:]) if prefix else []
    return np.asarray([sentinel] * (k - len(tail)) + tail, dtype=np.int64)


class SequenceModel:
    kind = "abstract"

    def __init__(self, vocab: Vocab, context_order: int):
        self.vocab = vocab
        self.context_order = int(context_order)

    @property
    def sentinel(self) -> int:
        return self.vocab.size

    # -- subclass surface -------------------------------------------------
    @property
    def parameters(self) -> np.ndarray:
        raise NotImplementedError

    def with_parameters(self, flat: np.ndarray) -> "SequenceModel":
        raise NotImplementedError

    def scores(self, batch: Batch) -> np.ndarray:
        raise NotImplementedError

    def backward(self, batch: Batch, dscores: np.ndarray, cache=None) -> np.ndarray:
        raise NotImplementedError

    def scores_with_cache(self, batch: Batch):
        return self.scores(batch), None

    def prepare(self, pairs) -> "SequenceModel":
        """Return a model able to receive gradients on every context in ``pairs``."""
        return self

    def _hyper(self) -> dict:
        raise NotImplementedError

    def _extra_state(self) -> dict:
        return {}

    # -- shared behaviour -------------------------------------------------
    def _check_ids(self, seq: Sequence[int]):
        for t in seq:
            if not 0 <= int(t) < self.vocab.size:
                raise TokenOutOfRange(f"token {t} outside vocabulary of size {self.vocab.size}")

    def encode(self, pairs) -> Batch:
        inputs, seq_idx, trailing, tokens, offsets = [], [], [], [], [0]
        for i, (inp, out) in enumerate(pairs):
            self._check_ids(inp)
            self._check_ids(out)
            inputs.append(tuple(int(t) for t in inp))
            seq_idx.append(np.full(len(out), i, dtype=np.int64))
            trailing.append(trailing_windows(out, self.context_order, self.sentinel))
            tokens.append(np.asarray(out, dtype=np.int64))
            offsets.append(offsets[-1] + len(out))
        k = self.context_order
        return Batch(
            inputs=inputs,
            seq_idx=np.concatenate(seq_idx) if seq_idx else np.zeros(0, np.int64),
            trailing=np.concatenate(trailing) if trailing else np.zeros((0, k), np.int64),
            tokens=np.concatenate(tokens) if tokens else np.zeros(0, np.int64),
            offsets=np.asarray(offsets, dtype=np.int64),
        )

    def forward_all(self, input: Sequence[int], output: Sequence[int]) -> np.ndarray:
        """Next-token distributions p(. | input, output[:t]) for every t."""
        if len(output) == 0:
            raise ValueError("output must be non-empty")
        return softmax(self.scores(self.encode([(input, output)])))

    def log_probs(self, batch: Batch) -> np.ndarray:
        return log_softmax(self.scores(batch))

    def next_scores(self, inputs: list[tuple[int, ...]], prefixes: list[list[int]]) -> np.ndarray:
        k = self.context_order
        trailing = np.stack([last_window(p, k, self.sentinel) for p in prefixes]) if prefixes else np.zeros((0, k), np.int64)
        batch = Batch(inputs=list(inputs), seq_idx=np.arange(len(inputs)), trailing=trailing, tokens=None)
        return self.scores(batch)

    def greedy_decode(self, input: Sequence[int], max_len: int) -> list[int]:
        return self.greedy_decode_batch([input], max_len)[0]

    def greedy_decode_batch(self, inputs: Sequence[Sequence[int]], max_len: int) -> list[list[int]]:
        """Argmax decoding; ``np.argmax`` breaks ties toward the lowest id."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        for inp in inputs:
            self._check_ids(inp)
        inputs = [tuple(int(t) for t in inp) for inp in inputs]
        outputs: list[list[int]] = [[] for _ in inputs]
        active = list(range(len(inputs)))
        eos = self.vocab.eos
        for _ in range(max_len):
            if not active:
                break
            scores = self.next_scores([inputs[i] for i in active], [outputs[i] for i in active])
            choice = np.argmax(scores, axis=1)
            still = []
            for i, tok in zip(active, choice):
                outputs[i].append(int(tok))
                if tok != eos:
                    still.append(i)
            active = still
        return outputs

    def param_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.parameters).tobytes()).hexdigest()

    def n_parameters(self) -> int:
        return int(self.parameters.size)

    # -- checkpoints --------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": "tnt-checkpoint",
            "version": 1,
            "kind": self.kind,
            "vocab": self.vocab.to_dict(),
            "context_order": self.context_order,
            "hyper": self._hyper(),
            "parameters": [float(x) for x in self.parameters],
            **self._extra_state(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))


def gradients(model: SequenceModel, batch: Batch, loss_closure: LossClosure) -> tuple[float, np.ndarray]:
    """Loss value and exact gradient with respect to the flat parameters."""
    scores, cache = model.scores_with_cache(batch)
    loss, dscores = loss_closure(scores)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")
    grad = model.backward(batch, dscores, cache)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteLoss("non-finite gradient entry")
    return float(loss), grad


class TabularModel(SequenceModel):
    """Explicit score table keyed by (input hash, trailing k output ids).

    Contexts absent from the table score zero everywhere, i.e. they are
    uniform.  ``prepare`` adds zero rows for new contexts, which leaves every
    conditional unchanged but makes them trainable.
    """

    kind = "tabular"

    def __init__(self, vocab: Vocab, context_order: int, keys=(), table=None):
        super().__init__(vocab, context_order)
        self.keys: list[tuple[int, tuple[int, ...]]] = [(int(a), tuple(int(x) for x in b)) for a, b in keys]
        self.index = {key: i for i, key in enumerate(self.keys)}
        if table is None:
            table = np.zeros((len(self.keys), vocab.size))
        self.table = np.asarray(table, dtype=np.float64).reshape(len(self.keys), vocab.size)

    @property
    def parameters(self) -> np.ndarray:
        return self.table.ravel()

    def with_parameters(self, flat) -> "TabularModel":
        return TabularModel(self.vocab, self.context_order, self.keys, np.array(flat, dtype=np.float64))

    def _hyper(self) -> dict:
        return {}

    def _extra_state(self) -> dict:
        return {"keys": [[a, list(b)] for a, b in self.keys]}

    def _context_keys(self, batch: Batch) -> list[tuple[int, tuple[int, ...]]]:
        in_keys = [input_key(inp) for inp in batch.inputs]
        return [(in_keys[s], tuple(w)) for s, w in zip(batch.seq_idx.tolist(), batch.trailing.tolist())]

    def rows(self, batch: Batch) -> np.ndarray:
        return np.asarray([self.index.get(key, -1) for key in self._context_keys(batch)], dtype=np.int64)

    def scores(self, batch: Batch) -> np.ndarray:
        return self._scores_from_rows(self.rows(batch))

    def scores_with_cache(self, batch: Batch):
        rows = self.rows(batch)
        return self._scores_from_rows(rows), rows

    def _scores_from_rows(self, rows):
        out = np.zeros((len(rows), self.vocab.size))
        hit = rows >= 0
        out[hit] = self.table[rows[hit]]
        return out

    def backward(self, batch: Batch, dscores: np.ndarray, cache=None) -> np.ndarray:
        rows = self.rows(batch) if cache is None else cache
        grad = np.zeros_like(self.table)
        hit = rows >= 0
        np.add.at(grad, rows[hit], dscores[hit])
        return grad.ravel()

    def prepare(self, pairs) -> "TabularModel":
        batch = self.encode(pairs) if not isinstance(pairs, Batch) else pairs
        new_keys = []
        seen = set(self.index)
        for key in self._context_keys(batch):
            if key not in seen:
                seen.add(key)
                new_keys.append(key)
        if not new_keys:
            return self
        table = np.vstack([self.table, np.zeros((len(new_keys), self.vocab.size))])
        return TabularModel(self.vocab, self.context_order, self.keys + new_keys, table)

    def context_key(self, input: Sequence[int], prefix: Sequence[int]) -> tuple[int, tuple[int, ...]]:
        return (input_key(input), tuple(last_window(list(prefix), self.context_order, self.sentinel).tolist()))

    @classmethod
    def from_conditionals(cls, vocab: Vocab, context_order: int, conditionals: dict) -> "TabularModel":
        """Realize arbitrary conditionals: scores are log-probabilities, zeros map to ``ZERO_SCORE``."""
        keys = list(conditionals)
        table = np.empty((len(keys), vocab.size))
        for i, key in enumerate(keys):
            p = np.asarray(conditionals[key], dtype=np.float64)
            table[i] = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), ZERO_SCORE)
        return cls(vocab, context_order, keys, table)


class TinyNeuralModel(SequenceModel):
    """One-hidden-layer tanh network over a fixed window plus a bag-of-input embedding.

    features = [E[x_{t-k}], ..., E[x_{t-1}], sum_j Ein[c_j]]
    hidden   = tanh(W1 features + b1)
    logits   = Wout (W2 hidden + b2) + bout
    """

    kind = "neural"
    _segments = ("emb", "in_emb", "w1", "b1", "w2", "b2", "w_out", "b_out")

    def __init__(self, vocab: Vocab, context_order: int = 2, dim: int = 16, hidden: int = 64,
                 params: np.ndarray | None = None, seed: int = 0, init_scale: float = 0.3):
        super().__init__(vocab, context_order)
        self.dim = int(dim)
        self.hidden = int(hidden)
        V, d, h, k = vocab.size, self.dim, self.hidden, self.context_order
        self.shapes = {
            "emb": (V + 1, d),
            "in_emb": (V, d),
            "w1": (h, (k + 1) * d),
            "b1": (h,),
            "w2": (d, h),
            "b2": (d,),
            "w_out": (V, d),
            "b_out": (V,),
        }
        sizes = [int(np.prod(self.shapes[n])) for n in self._segments]
        self._bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        if params is None:
            params = self._init(np.random.default_rng(seed), init_scale)
        self.flat = np.array(params, dtype=np.float64)
        if self.flat.size != self._bounds[-1]:
            raise ValueError(f"expected {self._bounds[-1]} parameters, got {self.flat.size}")

    def _init(self, rng, scale) -> np.ndarray:
        parts = []
        for name in self._segments:
            shape = self.shapes[name]
            if name.startswith("b"):
                parts.append(np.zeros(shape).ravel())
            else:
                fan_in = shape[1] if name.startswith("w") else 1
                parts.append((rng.standard_normal(shape) * scale / np.sqrt(fan_in)).ravel())
        return np.concatenate(parts)

    def segment(self, name: str, flat: np.ndarray | None = None) -> np.ndarray:
        flat = self.flat if flat is None else flat
        i = self._segments.index(name)
        return flat[self._bounds[i]: self._bounds[i + 1]].reshape(self.shapes[name])

    @property
    def parameters(self) -> np.ndarray:
        return self.flat

    def with_parameters(self, flat) -> "TinyNeuralModel":
        return TinyNeuralModel(self.vocab, self.context_order, self.dim, self.hidden, params=flat)

    def _hyper(self) -> dict:
        return {"dim": self.dim, "hidden": self.hidden}

    def _bag(self, inputs: list[tuple[int, ...]]) -> np.ndarray:
        counts = np.zeros((len(inputs), self.vocab.size))
        for i, inp in enumerate(inputs):
            if inp:
                np.add.at(counts[i], np.asarray(inp, dtype=np.int64), 1.0)
        return counts

    def _forward(self, batch: Batch):
        emb, in_emb = self.segment("emb"), self.segment("in_emb")
        w1, b1 = self.segment("w1"), self.segment("b1")
        w2, b2 = self.segment("w2"), self.segment("b2")
        w_out, b_out = self.segment("w_out"), self.segment("b_out")
        counts = self._bag(batch.inputs)
        bag = counts @ in_emb
        n = batch.n_positions
        feats = np.concatenate([emb[batch.trailing].reshape(n, -1), bag[batch.seq_idx]], axis=1)
        hid = np.tanh(feats @ w1.T + b1)
        proj = hid @ w2.T + b2
        logits = proj @ w_out.T + b_out
        return logits, (counts, feats, hid, proj)

    def scores(self, batch: Batch) -> np.ndarray:
        return self._forward(batch)[0]

    def scores_with_cache(self, batch: Batch):
        return self._forward(batch)

    def backward(self, batch: Batch, dscores: np.ndarray, cache=None) -> np.ndarray:
        if cache is None:
            cache = self._forward(batch)[1]
        counts, feats, hid, proj = cache
        w1, w2, w_out = self.segment("w1"), self.segment("w2"), self.segment("w_out")
        grad = np.zeros_like(self.flat)
        g = {name: self.segment(name, grad) for name in self._segments}
        g["w_out"][:] = dscores.T @ proj
        g["b_out"][:] = dscores.sum(axis=0)
        dproj = dscores @ w_out
        g["w2"][:] = dproj.T @ hid
        g["b2"][:] = dproj.sum(axis=0)
        dpre = (dproj @ w2) * (1.0 - hid * hid)
        g["w1"][:] = dpre.T @ feats
        g["b1"][:] = dpre.sum(axis=0)
        dfeats = dpre @ w1
        kd = self.context_order * self.dim
        if kd:
            np.add.at(g["emb"], batch.trailing.ravel(), dfeats[:, :kd].reshape(-1, self.dim))
        dbag = np.zeros((len(batch.inputs), self.dim))
        np.add.at(dbag, batch.seq_idx, dfeats[:, kd:])
        g["in_emb"][:] = counts.T @ dbag
        return grad


def model_from_dict(d: dict) -> SequenceModel:
    if d.get("format") != "tnt-checkpoint":
        raise ValueError("not a checkpoint")
    vocab = Vocab.from_dict(d["vocab"])
    params = np.asarray(d["parameters"], dtype=np.float64)
    if d["kind"] == "tabular":
        keys = [(a, tuple(b)) for a, b in d["keys"]]
        return TabularModel(vocab, d["context_order"], keys, params)
    if d["kind"] == "neural":
        return TinyNeuralModel(vocab, d["context_order"], params=params, **d["hyper"])
    raise ValueError(f"unknown model kind {d['kind']!r}")


def load_model(path) -> SequenceModel:
    return model_from_dict(json.loads(Path(path).read_text()))
