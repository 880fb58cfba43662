"""Run configuration: JSON document with nested sections and strict keys."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

from .engine import Regularizer, SolverConfig
from .forest import ForestParams
from .loss import check_alpha
from .sim import SegmentationParams, SplitPlan

TASKS = ("regression", "segmentation")
FUNCTION_CLASSES = ("intercept", "groups", "embedding", "rf-leaf")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "none"
    gamma: float = 0.0

    def build(self) -> Regularizer:
        return Regularizer(self.kind, float(self.gamma))


@dataclass(frozen=True)
class SolverSettings:
    method: str = "auto"
    max_iter: int = 20_000
    step_size: float = 1.0
    tol: float | None = None
    warm_start: bool = True
    threads: int = 1

    def build(self, seed: int = 0) -> SolverConfig:
        return SolverConfig(method=self.method, max_iter=self.max_iter, step_size=self.step_size, tol=self.tol, seed=seed)


@dataclass(frozen=True)
class SplitSettings:
    """Split sizes; ``None`` picks the task default."""

    train: int | None = None
    residual: int | None = None
    calibration: int | None = None
    test: int | None = None
    repetitions: int | None = None


FUNCTION_CLASS_DEFAULTS = {"regression": "rf-leaf", "segmentation": "embedding"}

SPLIT_DEFAULTS = {
    "regression": dict(train=2000, residual=1000, calibration=9000, test=5000, repetitions=10),
    # residual images are carved out only for the rf-leaf class
    "segmentation": dict(train=0, residual=0, calibration=400, test=100, repetitions=20),
}


@dataclass(frozen=True)
class SegmentationSettings:
    count: int = 500
    d1: int = 32
    d2: int = 32
    generator: SegmentationParams = field(default_factory=SegmentationParams)


@dataclass(frozen=True)
class PathSettings:
    data: str | None = None
    output: str | None = None


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce one experiment.

    ``group_edges`` are the ``[lo, hi)`` bins over ``x`` used by the regression
    ``groups`` class (an all-points group is always added). ``pca_target``
    enables PCA on embeddings. With ``refit_feature_map`` off, the forest or
    PCA is fitted once from the master seed and shared by all repetitions,
    so group-wise statistics can be pooled across them.
    """

    task: str = "regression"
    function_class: str | None = None
    alpha: float = 0.1
    seed: int = 0
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    solver: SolverSettings = field(default_factory=SolverSettings)
    split: SplitSettings = field(default_factory=SplitSettings)
    forest: ForestParams = field(default_factory=ForestParams)
    segmentation: SegmentationSettings = field(default_factory=SegmentationSettings)
    group_edges: tuple = ((0.0, 2.0), (2.0, 4.0), (4.0, 6.0), (6.0, 8.0), (8.0, 10.0))
    pca_target: float | None = None
    append_intercept: bool = False
    refit_feature_map: bool = True
    n_directions: int = 20
    paths: PathSettings = field(default_factory=PathSettings)

    def validate(self) -> "RunConfig":
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.function_class is None:
            try:
                full = self.resolved()
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc)) from exc
            return full.validate()
        if self.function_class not in FUNCTION_CLASSES:
            raise ConfigError(f"function_class must be one of {FUNCTION_CLASSES}")
        if self.task == "regression" and self.function_class == "embedding":
            raise ConfigError("the regression task has no embeddings")
        if self.task == "segmentation" and self.function_class == "groups":
            raise ConfigError("the segmentation task has no predefined groups")
        if self.n_directions < 0:
            raise ConfigError("n_directions must be >= 0")
        try:
            check_alpha(self.alpha)
            self.regularizer.build()
            self.solver.build()
            plan = self.split_plan()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.solver.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.pca_target is not None and not 0 < self.pca_target <= 1:
            raise ConfigError("pca_target must lie in (0, 1]")
        if self.task == "segmentation":
            need = plan.calibration + plan.test + (plan.residual if self.function_class == "rf-leaf" else 0)
            if need > self.segmentation.count:
                raise ConfigError(f"splits need {need} images but count is {self.segmentation.count}")
        if self.task == "regression":
            for lo, hi in self.group_edges:
                if not lo < hi:
                    raise ConfigError("group edges must satisfy lo < hi")
        return self

    def split_plan(self) -> SplitPlan:
        sizes = dict(SPLIT_DEFAULTS[self.task])
        sizes.update({k: v for k, v in asdict(self.split).items() if v is not None})
        return SplitPlan(seed=self.seed, **sizes)

    def resolved(self) -> "RunConfig":
        """Copy with the task defaults for function class and splits filled in."""
        plan = self.split_plan()
        split = SplitSettings(**{f.name: getattr(plan, f.name) for f in fields(SplitSettings)})
        fclass = self.function_class or FUNCTION_CLASS_DEFAULTS[self.task]
        return replace(self, split=split, function_class=fclass)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["group_edges"] = [list(e) for e in self.group_edges]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        cfg = _build(cls, doc, "")
        return cfg.validate()

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc)


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in doc.items():
        current = getattr(defaults, name)
        path = f"{where}.{name}" if where else name
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, path)
        elif name == "group_edges":
            try:
                kwargs[name] = tuple((float(lo), float(hi)) for lo, hi in value)
            except (TypeError, ValueError) as exc:
                raise ConfigError("group_edges must be a list of [lo, hi] pairs") from exc
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply dotted-key overrides (``{"solver.threads": 2}``) and revalidate."""
    doc = cfg.to_dict()
    for key, value in overrides.items():
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config section {p!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return RunConfig.from_dict(doc)
