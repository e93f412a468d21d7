"""Experiment configuration: a line-oriented ``section.key = value`` format.

Blank lines and ``#`` comments are ignored. Every key must be known and
every value is validated when the file is parsed, before any compute.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    """Raised for unknown keys, malformed lines or invalid values."""


DATASET_KINDS = ("rotated", "two_object", "spurious", "idx", "quadratic")
FAMILIES = ("example_weight", "augmentation", "attention_mask", "aux_target", "free")


@dataclass(frozen=True)
class DatasetSection:
    kind: str = "rotated"
    mode: str = "non-overlapping"
    train: int = 2000
    validation: int = 500
    test: int = 500
    image_side: int = 0  # 0 picks the generator's default
    num_classes: int = 4
    seed: int = 0
    noise: float = 0.05
    jitter: float = 1.0  # rotated only: max translation in pixels
    background_amplitude: float = 0.5
    images: str = ""
    labels: str = ""
    target: float = 5.0  # optimum of the quadratic toy


@dataclass(frozen=True)
class CommentarySection:
    family: str = "example_weight"
    hidden: int = 16
    sigma: float = 0.0  # 0 means image_side / 4
    grid: int = 8
    target_dim: int = 2
    aux_weight: float = 1.0
    init: float = 2.0  # starting value for the free family
    seed: int = 0


@dataclass(frozen=True)
class StudentSection:
    hidden: int = 32
    activation: str = "relu"


@dataclass(frozen=True)
class MetaSection:
    algorithm: str = "unrolled"
    steps: int = 50


@dataclass(frozen=True)
class InnerSection:
    steps: int = 200
    batch_size: int = 10
    val_batch_size: int = 0  # 0 means the training batch size
    optimizer: str = "adam"
    lr: float = 1e-3
    steps_per_outer: int = 1
    memory_budget: float = 5e8


@dataclass(frozen=True)
class OuterSection:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class NeumannSection:
    terms: int = 1
    alpha: float = 0.0  # 0 means the inner learning rate


@dataclass(frozen=True)
class SeedsSection:
    meta: int = 0
    eval: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class EvalSection:
    steps: int = 400
    log_every: int = 25
    shuffled_baseline: bool = False


@dataclass(frozen=True)
class OutputSection:
    dir: str = "runs/default"
    reproducible: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    commentary: CommentarySection = field(default_factory=CommentarySection)
    student: StudentSection = field(default_factory=StudentSection)
    meta: MetaSection = field(default_factory=MetaSection)
    inner: InnerSection = field(default_factory=InnerSection)
    outer: OuterSection = field(default_factory=OuterSection)
    neumann: NeumannSection = field(default_factory=NeumannSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    def __post_init__(self):
        validate(self)

    @property
    def neumann_alpha(self) -> float:
        return self.neumann.alpha or self.inner.lr

    @property
    def val_batch_size(self) -> int:
        return self.inner.val_batch_size or self.inner.batch_size

    def override(self, **dotted) -> "ExperimentConfig":
        """Return a copy with ``section__key=value`` overrides applied."""
        sections = {}
        for key, value in dotted.items():
            sec, name = key.split("__", 1)
            sections.setdefault(sec, {})[name] = value
        return replace(self, **{s: replace(getattr(self, s), **kv) for s, kv in sections.items()})

    def to_text(self, include_output: bool = True) -> str:
        lines = []
        for sec in fields(self):
            if sec.name == "output" and not include_output:
                continue
            section = getattr(self, sec.name)
            for f in fields(section):
                lines.append(f"{sec.name}.{f.name} = {_format(getattr(section, f.name))}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        """Digest of everything that affects results (the output section excluded)."""
        return hashlib.sha256(self.to_text(include_output=False).encode()).hexdigest()[:16]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _convert(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def validate(cfg: ExperimentConfig) -> None:
    d, c = cfg.dataset, cfg.commentary
    _require(d.kind in DATASET_KINDS, f"dataset.kind must be one of {DATASET_KINDS}")
    _require(d.mode in ("overlapping", "non-overlapping"), "dataset.mode must be overlapping or non-overlapping")
    _require(min(d.train, d.validation, d.test) > 0, "dataset split counts must be positive")
    _require(d.image_side >= 0, "dataset.image_side must be non-negative")
    _require(2 <= d.num_classes <= 10, "dataset.num_classes must be in [2, 10]")
    _require(d.noise >= 0 and d.background_amplitude >= 0, "dataset noise levels must be non-negative")
    _require(d.jitter >= 0, "dataset.jitter must be non-negative")
    if d.kind == "idx":
        _require(bool(d.images and d.labels), "dataset.images and dataset.labels are required for idx data")
    _require(c.family in FAMILIES, f"commentary.family must be one of {FAMILIES}")
    _require((c.family == "free") == (d.kind == "quadratic"),
             "the free family goes with the quadratic dataset and only with it")
    _require(c.hidden >= 1 and c.grid >= 2, "commentary.hidden must be >= 1 and commentary.grid >= 2")
    _require(c.sigma >= 0 and not math.isnan(c.sigma), "commentary.sigma must be positive (0 for the default)")
    _require(c.target_dim >= 1, "commentary.target_dim must be at least 1")
    _require(c.aux_weight >= 0, "commentary.aux_weight must be non-negative")
    _require(cfg.student.hidden >= 1, "student.hidden must be positive")
    _require(cfg.student.activation in ("relu", "tanh"), "student.activation must be relu or tanh")
    _require(cfg.meta.algorithm in ("unrolled", "ift"), "meta.algorithm must be unrolled or ift")
    _require(cfg.meta.steps >= 1, "meta.steps must be at least 1")
    i = cfg.inner
    _require(i.steps >= 1, "inner.steps must be at least 1")
    _require(i.batch_size >= 1 and i.val_batch_size >= 0, "inner batch sizes must be positive")
    _require(i.optimizer in ("sgd", "adam"), "inner.optimizer must be sgd or adam")
    _require(i.lr > 0, "inner.lr must be positive")
    _require(i.steps_per_outer >= 1, "inner.steps_per_outer must be at least 1")
    _require(i.memory_budget > 0, "inner.memory_budget must be positive")
    o = cfg.outer
    _require(o.lr > 0 and o.eps > 0, "outer.lr and outer.eps must be positive")
    _require(0 < o.beta1 < 1 and 0 < o.beta2 < 1, "outer betas must lie in (0, 1)")
    _require(cfg.neumann.terms >= 0, "neumann.terms must be non-negative")
    _require(cfg.neumann.alpha >= 0, "neumann.alpha must be positive (0 for the inner learning rate)")
    _require(len(cfg.seeds.eval) >= 1, "seeds.eval needs at least one seed")
    _require(cfg.eval.steps >= 1 and cfg.eval.log_every >= 1, "eval.steps and eval.log_every must be positive")
    _require(bool(cfg.output.dir), "output.dir must be set")


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    values: dict[str, dict[str, object]] = {}
    section_types = {f.name: f.default_factory for f in fields(ExperimentConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if "." not in key:
            raise ConfigError(f"{source}:{lineno}: key {key!r} needs a section prefix")
        sec, name = key.split(".", 1)
        if sec not in section_types:
            raise ConfigError(f"{source}:{lineno}: unknown section {sec!r}")
        known = {f.name: f for f in fields(section_types[sec]())}
        if name not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if name in values.get(sec, {}):
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        default = getattr(section_types[sec](), name)
        values.setdefault(sec, {})[name] = _convert(raw, default, key)
    try:
        sections = {sec: factory(**values.get(sec, {})) for sec, factory in section_types.items()}
    except TypeError as exc:  # pragma: no cover - guarded by the key check above
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(**sections)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))
