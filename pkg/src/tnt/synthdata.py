"""Synthetic corpora with rule-based token annotations.

Two task kinds share one generator.  An input is a bag of content tokens and
the correct output echoes its distinct content tokens in ascending id order,
followed by EOS.  Unwanted behaviour is injected in a fraction
``corruption_rate`` of the examples and is signalled by a trigger token in the
input, so a trained model reproduces it under greedy decoding:

* ``entity-copy``: the output mentions an entity that is absent from the input
  (a hallucination);
* ``lexicon``: a clean "synonym" token is replaced by its forbidden partner.

Two extra ids make disfluency counters meaningful: a repeat-prone filler whose
echo is doubled, and a ``??`` token that occasionally closes an output.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .distributions import Vocab
from .errors import InvalidSpec
from .model import SequenceModel
from .objective import AnnotatedSequence, TokenAnnotation

KINDS = ("entity-copy", "lexicon")
SPLITS = ("train", "val", "test")

PAD, BOS, EOS, QQ, REPEAT = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "lexicon"
    vocab_size: int = 32
    n_unwanted: int = 8
    n_triggers: int = 2
    min_len: int = 3
    max_len: int = 6
    corruption_rate: float = 0.2
    trigger_noise: float = 0.02
    repeat_rate: float = 0.05
    qq_rate: float = 0.05
    sizes: tuple[int, int, int] = (5000, 500, 500)
    seed: int = 0
    # derived id layout; filled in by __post_init__
    unwanted_ids: tuple[int, ...] = field(default=(), compare=False)
    partner_ids: tuple[int, ...] = field(default=(), compare=False)
    trigger_ids: tuple[int, ...] = field(default=(), compare=False)
    filler_ids: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"kind must be one of {KINDS}")
        if not 0.0 <= self.corruption_rate <= 1.0 or not 0.0 <= self.trigger_noise <= 1.0:
            raise InvalidSpec("rates must lie in [0, 1]")
        if not 0.0 <= self.repeat_rate <= 1.0 or not 0.0 <= self.qq_rate <= 1.0:
            raise InvalidSpec("rates must lie in [0, 1]")
        if not 1 <= self.min_len <= self.max_len:
            raise InvalidSpec("need 1 <= min_len <= max_len")
        if len(self.sizes) != 3 or any(s < 1 for s in self.sizes):
            raise InvalidSpec("sizes must be three positive integers")
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        first = REPEAT + 1
        n = self.n_unwanted
        # lexicon needs a clean partner per forbidden id; entity-copy reuses that block as fillers
        need = first + 2 * n + self.n_triggers + 2
        if self.kind == "entity-copy" and n <= self.max_len + 1:
            raise InvalidSpec("entity-copy needs more entities than input positions")
        if n < 2 or self.n_triggers < 1 or self.vocab_size < need:
            raise InvalidSpec(f"vocab_size {self.vocab_size} too small for this layout (need {need})")
        unwanted = tuple(range(first, first + n))
        partners = tuple(range(first + n, first + 2 * n))
        triggers = tuple(range(self.vocab_size - self.n_triggers, self.vocab_size))
        rest = tuple(range(first + 2 * n, self.vocab_size - self.n_triggers))
        fillers = rest if self.kind == "lexicon" else partners + rest
        object.__setattr__(self, "unwanted_ids", unwanted)
        object.__setattr__(self, "partner_ids", partners if self.kind == "lexicon" else ())
        object.__setattr__(self, "trigger_ids", triggers)
        object.__setattr__(self, "filler_ids", fillers)

    @property
    def vocab(self) -> Vocab:
        names = ["<pad>", "<bos>", "<eos>", "??", "rep"]
        for i in range(len(names), self.vocab_size):
            if i in self.unwanted_ids:
                names.append(("bad" if self.kind == "lexicon" else "ent") + str(i))
            elif i in self.trigger_ids:
                names.append(f"trig{i}")
            else:
                names.append(f"w{i}")
        return Vocab(size=self.vocab_size, eos=EOS, bos=BOS, pad=PAD, names=tuple(names))

    @property
    def qq_id(self) -> int:
        return QQ

    @property
    def repeat_id(self) -> int:
        return REPEAT

    @property
    def decode_max_len(self) -> int:
        # content tokens, up to two inserted ones, a doubled filler, ??, EOS
        return self.max_len + 6

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("unwanted_ids", "partner_ids", "trigger_ids", "filler_ids"):
            d.pop(key)
        d["sizes"] = list(self.sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = {k: v for k, v in d.items() if k not in ("unwanted_ids", "partner_ids", "trigger_ids", "filler_ids")}
        if "sizes" in d:
            d["sizes"] = tuple(d["sizes"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from exc


@dataclass
class Corpus:
    split: str
    pairs: list[tuple[tuple[int, ...], tuple[int, ...]]]

    def __len__(self):
        return len(self.pairs)

    @property
    def inputs(self) -> list[tuple[int, ...]]:
        return [p[0] for p in self.pairs]

    @property
    def outputs(self) -> list[tuple[int, ...]]:
        return [p[1] for p in self.pairs]


def _clean_output(spec: TaskSpec, content: Iterable[int]) -> list[int]:
    out = []
    for tok in sorted(set(content)):
        out.extend([tok, tok] if tok == REPEAT else [tok])
    return out


def _example(spec: TaskSpec, rng: np.random.Generator) -> tuple[tuple[int, ...], tuple[int, ...]]:
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    if spec.kind == "lexicon":
        pool = np.asarray(spec.partner_ids + spec.filler_ids)
    else:
        pool = np.asarray(spec.unwanted_ids + spec.filler_ids)
    content = [int(t) for t in rng.choice(pool, size=length)]
    corrupt = rng.random() < spec.corruption_rate
    if rng.random() < spec.repeat_rate:
        content[int(rng.integers(len(content)))] = REPEAT
    triggered = corrupt or rng.random() < spec.trigger_noise
    add_qq = rng.random() < spec.qq_rate

    if spec.kind == "lexicon":
        if corrupt and not set(content) & set(spec.partner_ids):
            content.append(int(rng.choice(spec.partner_ids)))
        out = _clean_output(spec, content)
        if corrupt:
            swap = dict(zip(spec.partner_ids, spec.unwanted_ids))
            out = [swap.get(t, t) for t in out]
    else:
        entities = sorted(set(content) & set(spec.unwanted_ids))
        if corrupt and not entities:
            content.append(int(rng.choice(spec.unwanted_ids)))
            entities = sorted(set(content) & set(spec.unwanted_ids))
        out = _clean_output(spec, content)
        if corrupt:
            n = len(spec.unwanted_ids)
            start = spec.unwanted_ids.index(entities[0])
            absent = [spec.unwanted_ids[(start + j) % n] for j in range(1, n)
                      if spec.unwanted_ids[(start + j) % n] not in entities]
            if absent:
                out = sorted(out + [absent[0]])
    if triggered:
        content.append(int(rng.choice(spec.trigger_ids)))
    if add_qq:
        out.append(QQ)
    inp = [int(t) for t in rng.permutation(content)]
    return tuple(inp), tuple(out + [EOS])


def generate_corpus(spec: TaskSpec) -> dict[str, Corpus]:
    """Train/val/test splits, each drawn from its own sub-seed of ``spec.seed``."""
    out = {}
    for i, (name, size) in enumerate(zip(SPLITS, spec.sizes)):
        rng = np.random.default_rng([spec.seed, i])
        out[name] = Corpus(name, [_example(spec, rng) for _ in range(size)])
    return out


def annotate(input: Sequence[int], output: Sequence[int], spec: TaskSpec) -> list[TokenAnnotation]:
    """Mark each output position holding an unwanted token; the token is its own negative."""
    unwanted = set(spec.unwanted_ids)
    if spec.kind == "entity-copy":
        present = set(int(t) for t in input)
        flagged = lambda tok: tok in unwanted and tok not in present
    else:
        flagged = lambda tok: tok in unwanted
    return [TokenAnnotation(t, frozenset({int(tok)})) for t, tok in enumerate(output) if flagged(int(tok))]


def annotate_pairs(pairs, spec: TaskSpec) -> list[AnnotatedSequence]:
    return [AnnotatedSequence(inp, out, tuple(annotate(inp, out, spec))) for inp, out in pairs]


def build_update_dataset(model: SequenceModel, inputs, spec: TaskSpec,
                         max_len: int | None = None) -> list[AnnotatedSequence]:
    """Annotated greedy generations of ``model`` for every input of a corpus."""
    if isinstance(inputs, Corpus):
        inputs = inputs.inputs
    inputs = [tuple(i) for i in inputs]
    gens = model.greedy_decode_batch(inputs, max_len or spec.decode_max_len)
    return annotate_pairs(zip(inputs, gens), spec)


# -- files -------------------------------------------------------------------

def record(seq: AnnotatedSequence) -> dict:
    return {
        "input": list(seq.input),
        "output": list(seq.output),
        "neg": [[a.position, sorted(a.negative_ids)] for a in seq.annotations],
    }


def from_record(rec: dict) -> AnnotatedSequence:
    anns = tuple(TokenAnnotation(int(p), frozenset(ids)) for p, ids in rec.get("neg", []))
    return AnnotatedSequence(tuple(rec["input"]), tuple(rec["output"]), anns)


def write_jsonl(seqs: Iterable[AnnotatedSequence], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for seq in seqs:
            f.write(json.dumps(record(seq), separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[AnnotatedSequence]:
    with open(path, encoding="utf-8") as f:
        return [from_record(json.loads(line)) for line in f if line.strip()]


def write_corpus(corpora: dict[str, Corpus], spec: TaskSpec, out_dir) -> dict[str, str]:
    """Write one JSONL per split; returns sha256 digests of the written files."""
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise FileNotFoundError(f"output directory {out_dir} does not exist")
    digests = {}
    for name, corpus in corpora.items():
        path = out_dir / f"{name}.jsonl"
        write_jsonl(annotate_pairs(corpus.pairs, spec), path)
        digests[name] = hashlib.sha256(path.read_bytes()).hexdigest()
    return digests


def read_corpus(path, split: str | None = None) -> Corpus:
    seqs = read_jsonl(path)
    return Corpus(split or Path(path).stem, [(s.input, s.output) for s in seqs])
