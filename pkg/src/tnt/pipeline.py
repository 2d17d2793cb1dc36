"""End-to-end experiment: corpus, base model, update data, sweep, reports, curves.

A run directory looks like::

    config.json             resolved configuration
    manifest.json           finished stages, corpus hashes, status
    data/{train,val,test}.jsonl
    base/model.json, base/train_log.jsonl
    update/{train,val,test}.jsonl   annotated base-model generations
    sweep/<cell>/model.json, train_log.jsonl, result.json
    lr_selection.csv
    reports.csv, reports_val.csv, curves.csv, auc.csv

Every stage writes its outputs before it is marked finished, and each sweep
cell is finished once its ``result.json`` exists, so an interrupted run can be
picked up with ``resume=True`` and ends with the same files as an
uninterrupted one.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

from .config import ExperimentConfig, config_from_dict
from .errors import ConfigError
from .evaluation import (
    EvalReport,
    composite_curve,
    evaluate,
    frontier_curve,
    reduction_table,
    write_auc_csv,
    write_curves_csv,
    write_reports_csv,
)
from .model import SequenceModel, TabularModel, TinyNeuralModel, load_model
from .objective import BASELINE_METHODS, TNT_METHODS, AnnotatedSequence
from .synthdata import (
    SPLITS,
    TaskSpec,
    build_update_dataset,
    generate_corpus,
    read_jsonl,
    write_corpus,
    write_jsonl,
)
from .trainer import train

log = logging.getLogger(__name__)

ORIGINAL = "original"


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def new_model(cfg: ExperimentConfig) -> SequenceModel:
    m = cfg.model
    vocab = cfg.task.vocab
    if m.kind == "tabular":
        return TabularModel(vocab, m.context_order)
    return TinyNeuralModel(vocab, m.context_order, m.dim, m.hidden,
                           seed=m.init_seed + cfg.seed, init_scale=m.init_scale)


def cell_name(method: str, alpha: float, lr: float) -> str:
    return f"{method}_a{alpha:g}_lr{lr:g}"


@dataclass(frozen=True)
class Cell:
    method: str
    alpha: float
    lr: float

    @property
    def name(self) -> str:
        return cell_name(self.method, self.alpha, self.lr)


# -- stages -----------------------------------------------------------------------

def train_base(cfg: ExperimentConfig, data_dir, out_dir) -> SequenceModel:
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    train_set = _strip(read_jsonl(data_dir / "train.jsonl"))
    val_set = _strip(read_jsonl(data_dir / "val.jsonl"))
    tcfg = cfg.base_train.train_config(cfg.seed)
    model, _ = train(new_model(cfg), train_set, val_set, tcfg, log_path=out_dir / "train_log.jsonl")
    model.save(out_dir / "model.json")
    return model


def _strip(seqs: list[AnnotatedSequence]) -> list[AnnotatedSequence]:
    # base training is plain likelihood on the corpus targets, annotations unused
    return [AnnotatedSequence(s.input, s.output, ()) for s in seqs]


def finetune(cfg: ExperimentConfig, original: SequenceModel, train_set, val_set,
             method: str, alpha: float, lr: float, out_dir) -> tuple[SequenceModel, float]:
    """Train one sweep cell; returns the selected model and its validation loss."""
    out_dir = Path(out_dir)
    tcfg = cfg.update.train_config(method, alpha, lr, cfg.seed)
    model, records = train(original, train_set, val_set, tcfg, log_path=out_dir / "train_log.jsonl")
    model.save(out_dir / "model.json")
    val_loss = min(r["val_loss"] for r in records if r["val_loss"] is not None)
    return model, val_loss


def evaluate_model(model: SequenceModel, spec: TaskSpec, references: list[AnnotatedSequence],
                   method: str, alpha, split: str, lr=None) -> EvalReport:
    inputs = [s.input for s in references]
    gens = model.greedy_decode_batch(inputs, spec.decode_max_len)
    return evaluate(gens, [s.output for s in references], spec, inputs, method, alpha, split, lr)


def _run_cell(run_dir: str, cell: Cell) -> dict:
    """Worker entry point: everything is read from the run directory."""
    run_dir = Path(run_dir)
    cfg = config_from_dict(json.loads((run_dir / "config.json").read_text(encoding="utf-8")))
    original = load_model(run_dir / "base" / "model.json")
    upd = {s: read_jsonl(run_dir / "update" / f"{s}.jsonl") for s in SPLITS}
    out = run_dir / "sweep" / cell.name
    out.mkdir(parents=True, exist_ok=True)
    model, val_loss = finetune(cfg, original, upd["train"], upd["val"],
                               cell.method, cell.alpha, cell.lr, out)
    result = {
        "method": cell.method,
        "alpha": cell.alpha,
        "learning_rate": cell.lr,
        "val_loss": val_loss,
        "reports": {s: asdict(evaluate_model(model, cfg.task, upd[s], cell.method, cell.alpha, s, cell.lr))
                    for s in ("val", "test")},
    }
    _write_json(out / "result.json", result)
    return result


def _load_result(run_dir: Path, cell: Cell) -> dict | None:
    path = run_dir / "sweep" / cell.name / "result.json"
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    return None


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, run_dir, jobs: int = 1, resume: bool = False):
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.jobs = max(1, int(jobs))
        self.resume = resume
        self.manifest_path = self.run_dir / "manifest.json"

    # manifest bookkeeping
    def _load_manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text(encoding="utf-8"))
        return {"stages": [], "corpus_sha256": {}, "status": "running"}

    def _mark(self, stage: str, **extra) -> None:
        self.manifest.setdefault("stages", [])
        if stage not in self.manifest["stages"]:
            self.manifest["stages"].append(stage)
        self.manifest.update(extra)
        _write_json(self.manifest_path, self.manifest)

    def _done(self, stage: str) -> bool:
        return stage in self.manifest.get("stages", [])

    def _prepare_dir(self) -> None:
        cfg_json = self.cfg.to_json()
        if self.manifest_path.exists():
            if not self.resume:
                raise ConfigError(f"{self.run_dir} already holds a run; pass --resume or choose a new --out")
            old = (self.run_dir / "config.json").read_text(encoding="utf-8")
            if old != cfg_json:
                raise ConfigError(f"config differs from the one recorded in {self.run_dir}; cannot resume")
        self.run_dir.mkdir(parents=True, exist_ok=True)
        for sub in ("data", "base", "update", "sweep"):
            (self.run_dir / sub).mkdir(exist_ok=True)
        (self.run_dir / "config.json").write_text(cfg_json, encoding="utf-8")
        self.manifest = self._load_manifest()
        self.manifest["status"] = "running"
        _write_json(self.manifest_path, self.manifest)

    def run(self) -> list[EvalReport]:
        self._prepare_dir()
        try:
            reports = self._run()
        except BaseException as exc:
            self.manifest["status"] = "failed"
            self.manifest["error"] = f"{type(exc).__name__}: {exc}"
            _write_json(self.manifest_path, self.manifest)
            raise
        self.manifest["status"] = "complete"
        self.manifest.pop("error", None)
        _write_json(self.manifest_path, self.manifest)
        return reports

    def _run(self) -> list[EvalReport]:
        cfg, rd = self.cfg, self.run_dir
        if not self._done("data"):
            log.info("generating corpus")
            digests = write_corpus(generate_corpus(cfg.task), cfg.task, rd / "data")
            self._mark("data", corpus_sha256=digests)

        if not self._done("base"):
            log.info("training base model")
            train_base(cfg, rd / "data", rd / "base")
            self._mark("base", base_model_sha256=_sha256(rd / "base" / "model.json"))
        original = load_model(rd / "base" / "model.json")

        if not self._done("update"):
            log.info("building update datasets from base generations")
            for split in SPLITS:
                inputs = [s.input for s in read_jsonl(rd / "data" / f"{split}.jsonl")]
                write_jsonl(build_update_dataset(original, inputs, cfg.task), rd / "update" / f"{split}.jsonl")
            self._mark("update")
        upd = {s: read_jsonl(rd / "update" / f"{s}.jsonl") for s in ("val", "test")}
        base_reports = {s: evaluate_model(original, cfg.task, upd[s], ORIGINAL, None, s) for s in upd}

        methods = cfg.update.methods
        ucfg = cfg.update
        chosen_lr = {}
        if methods:
            lr_cells = [Cell(m, ucfg.lr_select_alpha, lr) for m in methods for lr in ucfg.lr_grid]
            lr_results = self._run_cells(lr_cells)
            rows = []
            for m in methods:
                cand = [(lr_results[Cell(m, ucfg.lr_select_alpha, lr)]["val_loss"], i, lr)
                        for i, lr in enumerate(ucfg.lr_grid)]
                best = min(cand)
                chosen_lr[m] = best[2]
                rows.extend((m, f"{lr:g}", f"{v:.6f}", int(lr == best[2])) for v, _, lr in cand)
            with open(rd / "lr_selection.csv", "w", newline="", encoding="utf-8") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(("method", "learning_rate", "val_loss", "selected"))
                w.writerows(rows)
            self._mark("lr_sweep")

        cells = [Cell(m, a, chosen_lr[m]) for m in methods for a in ucfg.alpha_grid]
        results = self._run_cells(cells)
        self._mark("alpha_sweep")

        test = [base_reports["test"]] + [EvalReport(**results[c]["reports"]["test"]) for c in cells]
        val = [base_reports["val"]] + [EvalReport(**results[c]["reports"]["val"]) for c in cells]
        write_reports_csv(test, rd / "reports.csv")
        write_reports_csv(val, rd / "reports_val.csv")
        write_curve_files(test, val, rd, ucfg.similarity)
        table = reduction_table(test[1:], val[1:], base_reports["val"].unwanted_rate,
                                similarity_field=ucfg.similarity)
        write_reports_csv(list(table.values()), rd / "reduction_table.csv")
        self._mark("reports")
        return test

    def _run_cells(self, cells: list[Cell]) -> dict[Cell, dict]:
        results = {}
        todo = []
        for c in dict.fromkeys(cells):
            r = _load_result(self.run_dir, c) if self.resume else None
            if r is None:
                todo.append(c)
            else:
                results[c] = r
        if todo:
            log.info("running %d sweep cells (%d already done)", len(todo), len(results))
        if self.jobs == 1 or len(todo) <= 1:
            for c in todo:
                log.info("cell %s", c.name)
                results[c] = _run_cell(str(self.run_dir), c)
        else:
            with ProcessPoolExecutor(max_workers=self.jobs) as pool:
                futures = {c: pool.submit(_run_cell, str(self.run_dir), c) for c in todo}
                for c, fut in futures.items():
                    results[c] = fut.result()
        return results


def build_curves(test: list[EvalReport], val: list[EvalReport], similarity: str = "bleu",
                 max_rate: float | None = None):
    """Per-method frontier curves plus the TNT and baseline composites, on one grid.

    The grid runs up to ``max_rate``, by default the original model's
    validation rate when its row is present and the highest rate otherwise.
    """
    originals = [r for r in val if r.method == ORIGINAL]
    test = [r for r in test if r.method != ORIGINAL]
    val = [r for r in val if r.method != ORIGINAL]
    if not test:
        return []
    if max_rate is None:
        max_rate = originals[0].unwanted_rate if originals else max(r.unwanted_rate for r in val)
    curves = []
    for m in dict.fromkeys(r.method for r in test):
        curves.append(frontier_curve([r for r in test if r.method == m], similarity,
                                     [r for r in val if r.method == m], max_rate=max_rate, label=m))
    for label, family in (("TNT", TNT_METHODS), ("baselines", BASELINE_METHODS)):
        members = [c for c in curves if c.label in family]
        if members:
            curves.append(composite_curve(members, label=label))
    return curves


def write_curve_files(test, val, out_dir, similarity: str = "bleu", max_rate: float | None = None):
    out_dir = Path(out_dir)
    curves = build_curves(test, val, similarity, max_rate)
    write_curves_csv(curves, out_dir / "curves.csv", similarity)
    write_auc_csv(curves, out_dir / "auc.csv")
    return curves


def run_pipeline(cfg: ExperimentConfig, run_dir, jobs: int = 1, resume: bool = False) -> list[EvalReport]:
    return Pipeline(cfg, run_dir, jobs=jobs, resume=resume).run()
