"""Similarity metrics, unwanted-behaviour rates, disfluency counts and frontier curves.

Similarity is always measured against the original model's generations.
Metrics read token ids directly; reserved ids (EOS/BOS/PAD) are dropped before
n-gram and LCS matching, while sequence accuracy compares raw sequences.
"""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyCorpus
from .synthdata import TaskSpec, annotate

REPORT_COLUMNS = ("method", "alpha", "split", "bleu", "rouge_l", "seq_acc",
                  "unwanted_rate", "repeats", "random_qq")
SIMILARITY_FIELDS = ("bleu", "rouge_l", "seq_acc")
REPEAT_RUN = 3
RATE_STEP = 0.1


@dataclass
class EvalReport:
    method: str
    alpha: float | None
    split: str
    bleu: float
    rouge_l: float
    seq_acc: float
    unwanted_rate: float
    repeats: int
    random_qq: int
    learning_rate: float | None = field(default=None, compare=False)

    def row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in REPORT_COLUMNS}

    @property
    def key(self) -> tuple[str, float | None]:
        return (self.method, self.alpha)


def _content(seq: Sequence[int], reserved: Iterable[int]) -> list[int]:
    reserved = set(reserved)
    return [int(t) for t in seq if int(t) not in reserved]


def _check(candidates, references):
    if len(candidates) == 0:
        raise EmptyCorpus("no generations to score")
    if len(candidates) != len(references):
        raise ValueError("candidate and reference lists differ in length")


def _ngrams(seq: Sequence[int], n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu(candidates, references, reserved: Iterable[int] = (), max_order: int = 4) -> float:
    """Corpus BLEU-4 (0-100), brevity penalty, add-one smoothing for orders >= 2."""
    _check(candidates, references)
    reserved = tuple(reserved)
    matches = [0] * max_order
    totals = [0] * max_order
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = _content(cand, reserved), _content(ref, reserved)
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            c, r = _ngrams(cand, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(v, r[g]) for g, v in c.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0:
        return 100.0 if ref_len == 0 else 0.0
    if matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / totals[0])
    for n in range(1, max_order):
        log_p += math.log((matches[n] + 1) / (totals[n] + 1))
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return 100.0 * bp * math.exp(log_p / max_order)


def lcs_length(a: Sequence[int], b: Sequence[int]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidates, references, reserved: Iterable[int] = ()) -> float:
    _check(candidates, references)
    reserved = tuple(reserved)
    scores = []
    for cand, ref in zip(candidates, references):
        cand, ref = _content(cand, reserved), _content(ref, reserved)
        if not cand or not ref:
            scores.append(1.0 if cand == ref else 0.0)
            continue
        lcs = lcs_length(cand, ref)
        if lcs == 0:
            scores.append(0.0)
            continue
        p, r = lcs / len(cand), lcs / len(ref)
        scores.append(2 * p * r / (p + r))
    return 100.0 * float(np.mean(scores))


def sequence_accuracy(candidates, references) -> float:
    _check(candidates, references)
    hits = sum(tuple(c) == tuple(r) for c, r in zip(candidates, references))
    return 100.0 * hits / len(candidates)


def unwanted_rate(generations, spec: TaskSpec, inputs=None) -> float:
    """Percent of generations with at least one annotated token.

    ``generations`` is either a list of annotated sequences or, together with
    ``inputs``, a list of raw outputs.
    """
    if len(generations) == 0:
        raise EmptyCorpus("no generations to score")
    if inputs is None:
        flagged = sum(bool(s.annotations) for s in generations)
    else:
        flagged = sum(bool(annotate(i, g, spec)) for i, g in zip(inputs, generations))
    return 100.0 * flagged / len(generations)


def count_word_repeats(generations, reserved: Iterable[int] = (), min_run: int = REPEAT_RUN) -> int:
    """Generations containing a run of one non-reserved token of length >= ``min_run``."""
    reserved = set(reserved)
    count = 0
    for gen in generations:
        run, prev = 0, None
        for tok in gen:
            run = run + 1 if tok == prev else 1
            prev = tok
            if tok not in reserved and run >= min_run:
                count += 1
                break
    return count


def count_random_qq(generations, qq_id: int, reserved: Iterable[int] = ()) -> int:
    """Generations with a ``??`` token anywhere before the last content token."""
    reserved = set(reserved)
    count = 0
    for gen in generations:
        content = [t for t in gen if t not in reserved]
        count += qq_id in content[:-1]
    return count


def evaluate(generations, references, spec: TaskSpec, inputs, method: str,
             alpha: float | None, split: str, learning_rate: float | None = None) -> EvalReport:
    reserved = spec.vocab.reserved
    return EvalReport(
        method=method,
        alpha=alpha,
        split=split,
        bleu=bleu(generations, references, reserved),
        rouge_l=rouge_l(generations, references, reserved),
        seq_acc=sequence_accuracy(generations, references),
        unwanted_rate=unwanted_rate(generations, spec, inputs),
        repeats=count_word_repeats(generations, reserved),
        random_qq=count_random_qq(generations, spec.qq_id, reserved),
        learning_rate=learning_rate,
    )


# -- frontier curves ------------------------------------------------------------

@dataclass
class FrontierCurve:
    label: str
    thresholds: np.ndarray
    values: np.ndarray            # NaN where no run qualifies
    selected: list = field(default_factory=list)

    @property
    def auc(self) -> float:
        return trapezoid_auc(self.thresholds, self.values)


def threshold_grid(max_rate: float, step: float = RATE_STEP) -> np.ndarray:
    n = int(math.ceil(round(max_rate / step, 9)))
    return np.round(np.arange(n + 1) * step, 10)


def trapezoid_auc(thresholds: np.ndarray, values: np.ndarray) -> float:
    y = np.nan_to_num(np.asarray(values, dtype=np.float64), nan=0.0)
    x = np.asarray(thresholds, dtype=np.float64)
    if len(x) < 2:
        return 0.0
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def frontier_curve(reports: Sequence[EvalReport], similarity_field: str = "bleu",
                   validation_reports: Sequence[EvalReport] | None = None,
                   max_rate: float | None = None, label: str = "",
                   step: float = RATE_STEP) -> FrontierCurve:
    """Best test similarity among runs whose validation rate is below each threshold.

    Runs are paired with their validation report by (method, alpha).  At each
    threshold the qualifying run with the highest validation similarity is
    chosen and its test similarity recorded; values are then carried forward
    as a running maximum since every run qualifying at a lower threshold also
    qualifies at a higher one.  Thresholds with no qualifying run are NaN.
    """
    if similarity_field not in SIMILARITY_FIELDS:
        raise ValueError(f"similarity_field must be one of {SIMILARITY_FIELDS}")
    if not reports:
        raise ValueError("no reports")
    val_by_key = {r.key: r for r in (validation_reports if validation_reports is not None else reports)}
    paired = [(r, val_by_key[r.key]) for r in reports if r.key in val_by_key]
    if max_rate is None:
        max_rate = max(v.unwanted_rate for _, v in paired) + step
    grid = threshold_grid(max_rate, step)
    values = np.full(len(grid), np.nan)
    selected = [None] * len(grid)
    best = -np.inf
    for i, tau in enumerate(grid):
        qual = [(t, v) for t, v in paired if v.unwanted_rate < tau - 1e-9]
        if qual:
            t, v = max(qual, key=lambda tv: (getattr(tv[1], similarity_field), -tv[1].unwanted_rate))
            sim = getattr(t, similarity_field)
            if sim >= best:
                best = sim
                selected[i] = t.key
            else:
                selected[i] = selected[i - 1]
            values[i] = best
    return FrontierCurve(label=label, thresholds=grid, values=values, selected=selected)


def composite_curve(curves: Sequence[FrontierCurve], label: str = "") -> FrontierCurve:
    grid = curves[0].thresholds
    for c in curves[1:]:
        if len(c.thresholds) != len(grid) or not np.allclose(c.thresholds, grid):
            raise ValueError("composite curves need a shared threshold grid")
    stack = np.vstack([c.values for c in curves])
    best = np.where(np.isnan(stack), -np.inf, stack).max(axis=0)
    values = np.where(np.isinf(best), np.nan, best)
    return FrontierCurve(label=label, thresholds=grid, values=values)


def reduction_table(test: Sequence[EvalReport], val: Sequence[EvalReport], original_rate: float,
                    reduction: float = 0.75, similarity_field: str = "bleu") -> dict[str, EvalReport]:
    """One test report per method at a fixed reduction of the unwanted rate.

    For each method the run is chosen on validation: highest validation
    similarity among runs whose validation rate is at most ``1 - reduction``
    of ``original_rate`` (the original model's validation rate).  Methods with
    no such run are left out.
    """
    if similarity_field not in SIMILARITY_FIELDS:
        raise ValueError(f"similarity_field must be one of {SIMILARITY_FIELDS}")
    limit = (1.0 - reduction) * original_rate + 1e-9
    by_key = {r.key: r for r in test}
    rows = {}
    for method in dict.fromkeys(r.method for r in test):
        pool = [v for v in val if v.method == method and v.key in by_key and v.unwanted_rate <= limit]
        if pool:
            best = max(pool, key=lambda v: (getattr(v, similarity_field), -v.unwanted_rate))
            rows[method] = by_key[best.key]
    return rows


# -- CSV ------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def _fmt_alpha(a) -> str:
    return "" if a is None else f"{a:g}"


def write_reports_csv(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            row = r.row()
            w.writerow([_fmt_alpha(v) if k == "alpha" else _fmt(v) for k, v in row.items()])


def read_reports_csv(path) -> list[EvalReport]:
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            out.append(EvalReport(
                method=row["method"],
                alpha=float(row["alpha"]) if row["alpha"] else None,
                split=row["split"],
                bleu=float(row["bleu"]),
                rouge_l=float(row["rouge_l"]),
                seq_acc=float(row["seq_acc"]),
                unwanted_rate=float(row["unwanted_rate"]),
                repeats=int(row["repeats"]),
                random_qq=int(row["random_qq"]),
            ))
    return out


def write_curves_csv(curves: Sequence[FrontierCurve], path, similarity_field: str = "bleu") -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("threshold", "method", "similarity"))
        for c in curves:
            for tau, v in zip(c.thresholds, c.values):
                w.writerow((f"{tau:.1f}", c.label, "" if np.isnan(v) else f"{v:.6f}"))


def write_auc_csv(curves: Sequence[FrontierCurve], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("method", "auc"))
        for c in curves:
            w.writerow((c.label, f"{c.auc:.6f}"))
