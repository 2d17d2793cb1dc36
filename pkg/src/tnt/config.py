"""Experiment configuration, read from a TOML file.

Every section and key is optional; omitted values take the defaults below.

.. code-block:: toml

    out_dir = "runs/lexicon"
    seed = 0

    [task]               # synthdata.TaskSpec fields
    kind = "lexicon"
    sizes = [5000, 500, 500]
    corruption_rate = 0.2

    [model]
    kind = "neural"      # or "tabular"
    context_order = 2
    dim = 16
    hidden = 64

    [base_train]         # trainer.TrainConfig fields, objective fixed to LL
    steps = 20000
    learning_rate = 1e-3

    [update]
    methods = ["TN-FF", "TN-RR", "TN-RF", "TN-F+LL", "TN-R+LL", "NL+LL", "UL+LL"]
    alpha_grid = [1e-4, 1e-3, 1e-2, 1e-1, 1, 10, 100, 1000, 10000]
    lr_grid = [1e-3, 1e-4, 1e-5, 1e-6]
    steps = 20000
    eval_every = 200
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError, InvalidSpec
from .objective import LL, METHODS, ObjectiveConfig
from .synthdata import TaskSpec
from .trainer import TrainConfig

DEFAULT_ALPHAS = tuple(10.0 ** e for e in range(-4, 5))
DEFAULT_LRS = (1e-3, 1e-4, 1e-5, 1e-6)


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "neural"
    context_order: int = 2
    dim: int = 16
    hidden: int = 64
    init_scale: float = 0.3
    init_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("neural", "tabular"):
            raise ConfigError(f"model.kind must be 'neural' or 'tabular', got {self.kind!r}")
        if self.context_order < 0 or self.dim < 1 or self.hidden < 1:
            raise ConfigError("model sizes must be positive")


@dataclass(frozen=True)
class BaseTrainConfig:
    batch_size: int = 32
    steps: int = 20_000
    eval_every: int = 200
    learning_rate: float = 1e-3
    optimizer: str = "adaptive-moment"
    logit_penalty_coeff: float = 1e-4

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, steps=self.steps, eval_every=self.eval_every,
                           learning_rate=self.learning_rate, optimizer=self.optimizer, seed=seed,
                           objective=ObjectiveConfig(method=LL, logit_penalty_coeff=self.logit_penalty_coeff))


@dataclass(frozen=True)
class UpdateConfig:
    methods: tuple[str, ...] = METHODS
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHAS
    lr_grid: tuple[float, ...] = DEFAULT_LRS
    lr_select_alpha: float = 1.0
    batch_size: int = 32
    steps: int = 20_000
    eval_every: int = 200
    optimizer: str = "adaptive-moment"
    smoothing_eps: float = 1e-6
    ul_clamp: float = 1e-9
    logit_penalty_coeff: float = 1e-4
    similarity: str = "bleu"

    def __post_init__(self):
        for name in ("methods", "alpha_grid", "lr_grid"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown update methods {bad}; choose from {list(METHODS)}")
        if not self.alpha_grid or not self.lr_grid:
            raise ConfigError("alpha_grid and lr_grid must be non-empty")
        if self.similarity not in ("bleu", "rouge_l", "seq_acc"):
            raise ConfigError("similarity must be bleu, rouge_l or seq_acc")

    def objective(self, method: str, alpha: float) -> ObjectiveConfig:
        return ObjectiveConfig(method=method, alpha=alpha, smoothing_eps=self.smoothing_eps,
                               ul_clamp=self.ul_clamp, logit_penalty_coeff=self.logit_penalty_coeff)

    def train_config(self, method: str, alpha: float, lr: float, seed: int) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, steps=self.steps, eval_every=self.eval_every,
                           learning_rate=lr, optimizer=self.optimizer, seed=seed,
                           objective=self.objective(method, alpha))


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    base_train: BaseTrainConfig = field(default_factory=BaseTrainConfig)
    update: UpdateConfig = field(default_factory=UpdateConfig)
    seed: int = 0
    out_dir: str = "runs/experiment"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, task=replace(self.task, seed=seed))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "task": self.task.to_dict(),
            "model": asdict(self.model),
            "base_train": asdict(self.base_train),
            "update": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.update).items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _build(cls, section: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    try:
        return cls(**section)
    except (TypeError, ValueError, InvalidSpec) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    unknown = set(d) - {"task", "model", "base_train", "update", "seed", "out_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    task = d.get("task", {})
    try:
        task_spec = TaskSpec.from_dict(task)
    except InvalidSpec as exc:
        raise ConfigError(f"[task]: {exc}") from exc
    return ExperimentConfig(
        task=task_spec,
        model=_build(ModelConfig, d.get("model", {}), "model"),
        base_train=_build(BaseTrainConfig, d.get("base_train", {}), "base_train"),
        update=_build(UpdateConfig, d.get("update", {}), "update"),
        seed=int(d.get("seed", task_spec.seed)),
        out_dir=str(d.get("out_dir", "runs/experiment")),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return config_from_dict(data)
