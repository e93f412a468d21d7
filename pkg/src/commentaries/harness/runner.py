"""run_meta / run_eval: the experiment pipeline behind the CLI."""

from __future__ import annotations

import datetime as _dt
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..commentary import Augmentation, AttentionMask, AuxTarget, ExampleWeight, FreeParameters, shuffle_grid
from ..data import Dataset, RotatedSpec, gen_rotated, gen_spurious_background, gen_two_object, load_idx
from ..experiments import InnerSettings, build_problem, identity_of, quadratic_problem, train_student
from ..hypergrad import NonFiniteError, derive_seed, meta_train
from ..metrics import MetricsLog
from ..optim import AdamConfig, SgdConfig
from .artifact import ArtifactIncompatibleError, CommentaryArtifact, params_digest, save_artifact
from .config import ExperimentConfig

log = logging.getLogger(__name__)

ARTIFACT_NAME = "commentary.txt"
META_METRICS = "meta_metrics.csv"
EVAL_METRICS = "eval_metrics.csv"


class DivergenceError(RuntimeError):
    """Meta-training hit a non-finite value; ``metrics`` holds the rows logged so far."""

    def __init__(self, message: str, metrics: MetricsLog, diagnostics: dict | None = None):
        super().__init__(message)
        self.metrics = metrics
        self.diagnostics = diagnostics or {}


def build_dataset(cfg: ExperimentConfig) -> Dataset | None:
    d = cfg.dataset
    counts = (d.train, d.validation, d.test)
    if d.kind == "quadratic":
        return None
    if d.kind == "rotated":
        return gen_rotated(RotatedSpec(d.mode, *counts, image_side=d.image_side or 16, seed=d.seed, noise=d.noise,
                                       jitter=d.jitter))
    if d.kind == "two_object":
        return gen_two_object(counts, image_side=d.image_side or 32, seed=d.seed, num_classes=d.num_classes)
    if d.kind == "spurious":
        return gen_spurious_background(counts, image_side=d.image_side or 16, num_classes=d.num_classes,
                                       seed=d.seed, background_amplitude=d.background_amplitude, noise=d.noise)
    fractions = tuple(np.array(counts, dtype=float) / sum(counts))
    return load_idx(d.images, d.labels, fractions, seed=d.seed)


def build_commentary(cfg: ExperimentConfig, dataset: Dataset | None):
    c = cfg.commentary
    if c.family == "free":
        init = c.init if c.seed == 0 else float(np.random.default_rng(c.seed).uniform(-1.0, 2.0))
        return FreeParameters.create([init])
    if c.family == "example_weight":
        return ExampleWeight.create(dataset.feature_dim, c.hidden, seed=c.seed)
    if c.family == "augmentation":
        return Augmentation.create(dataset.num_classes)
    if c.family == "attention_mask":
        h, w = dataset.image_shape[-2:]
        channels = dataset.image_shape[0]
        return AttentionMask.create(h, w, channels, sigma=c.sigma or None, hidden=c.hidden,
                                    grid=(c.grid, c.grid), seed=c.seed)
    return AuxTarget.create(dataset.feature_dim, c.target_dim, c.hidden, c.aux_weight, seed=c.seed)


def inner_optimizer(cfg: ExperimentConfig):
    i = cfg.inner
    return AdamConfig(lr=i.lr) if i.optimizer == "adam" else SgdConfig(lr=i.lr)


def inner_settings(cfg: ExperimentConfig, horizon: int | None = None) -> InnerSettings:
    i = cfg.inner
    return InnerSettings(
        steps=i.steps,
        batch_size=i.batch_size,
        val_batch_size=cfg.val_batch_size,
        optimizer=inner_optimizer(cfg),
        student_hidden=cfg.student.hidden,
        activation=cfg.student.activation,
        memory_budget=i.memory_budget,
        steps_per_outer=i.steps_per_outer,
        horizon=horizon or i.steps,
    )


def outer_config(cfg: ExperimentConfig) -> AdamConfig:
    o = cfg.outer
    return AdamConfig(lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps)


def _timestamp(cfg: ExperimentConfig) -> str:
    if cfg.output.reproducible:
        return "1970-01-01T00:00:00Z"
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class MetaOutcome:
    artifact: CommentaryArtifact
    metrics: MetricsLog
    artifact_path: Path | None = None
    metrics_path: Path | None = None


def run_meta(cfg: ExperimentConfig, out_dir=None, write: bool = True) -> MetaOutcome:
    """Meta-train the configured commentary; write artifact and metrics to ``out_dir``."""
    out = Path(out_dir or cfg.output.dir)
    dataset = build_dataset(cfg)
    commentary = build_commentary(cfg, dataset)
    if dataset is None:
        problem = quadratic_problem(cfg.dataset.target, optimizer=inner_optimizer(cfg), steps=cfg.inner.steps)
        problem.steps_per_outer = cfg.inner.steps_per_outer
    else:
        problem = build_problem(dataset, commentary, inner_settings(cfg))
    metrics = MetricsLog(timed=not cfg.output.reproducible)
    try:
        learned, metrics = meta_train(
            problem, commentary, cfg.meta.algorithm, cfg.meta.steps, outer_config(cfg),
            seed=cfg.seeds.meta, terms=cfg.neumann.terms, alpha=cfg.neumann_alpha, metrics=metrics,
        )
    except NonFiniteError as exc:
        if write and len(metrics):
            out.mkdir(parents=True, exist_ok=True)
            metrics.write_csv(out / META_METRICS)
        raise DivergenceError(str(exc), metrics, exc.diagnostics) from exc
    artifact = CommentaryArtifact(
        learned,
        config_hash=cfg.hash(),
        meta_seed=cfg.seeds.meta,
        timestamp=_timestamp(cfg),
        extra={"horizon": cfg.inner.steps, "algorithm": cfg.meta.algorithm},
    )
    outcome = MetaOutcome(artifact, metrics)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        outcome.artifact_path = save_artifact(artifact, out / ARTIFACT_NAME)
        outcome.metrics_path = metrics.write_csv(out / META_METRICS)
    return outcome


def check_compatible(artifact: CommentaryArtifact, cfg: ExperimentConfig, dataset: Dataset | None) -> None:
    com = artifact.commentary
    if com.family != cfg.commentary.family:
        raise ArtifactIncompatibleError(f"artifact family {com.family!r} != config family {cfg.commentary.family!r}")
    if dataset is None:
        return
    if isinstance(com, Augmentation) and com.num_classes != dataset.num_classes:
        raise ArtifactIncompatibleError(f"grid side {com.num_classes} != {dataset.num_classes} classes")
    if isinstance(com, ExampleWeight) and com.teacher.in_dim != dataset.feature_dim + 1:
        raise ArtifactIncompatibleError("teacher input width does not match the dataset")
    if isinstance(com, AttentionMask) and (com.height, com.width) != tuple(dataset.image_shape[-2:]):
        raise ArtifactIncompatibleError(f"mask frame {com.height}x{com.width} != image {dataset.image_shape}")
    if isinstance(com, AuxTarget) and com.net.in_dim != dataset.feature_dim:
        raise ArtifactIncompatibleError("aux-target network input width does not match the dataset")


def run_eval(artifact: CommentaryArtifact, cfg: ExperimentConfig, out_dir=None, write: bool = True) -> MetricsLog:
    """Train fresh students with the commentary frozen, plus paired baselines.

    Phases: ``commentary`` (learned), ``baseline`` (identity configuration)
    and, when ``eval.shuffled_baseline`` is set for augmentation,
    ``shuffled`` (the grid with its entries permuted).
    """
    dataset = build_dataset(cfg)
    check_compatible(artifact, cfg, dataset)
    if dataset is None:
        raise ArtifactIncompatibleError("the quadratic toy has no student to evaluate")
    com = artifact.commentary
    before = params_digest(com.params)
    horizon = int(artifact.extra.get("horizon", cfg.inner.steps))
    settings = inner_settings(cfg, horizon=horizon)
    metrics = MetricsLog(timed=not cfg.output.reproducible)
    variants = [("commentary", com), ("baseline", identity_of(com, dataset))]
    if cfg.eval.shuffled_baseline and isinstance(com, Augmentation):
        variants.append(("shuffled", shuffle_grid(com, np.random.default_rng(derive_seed(cfg.seeds.meta, 99)))))
    for seed in cfg.seeds.eval:
        for phase, variant in variants:
            log.info("eval %s seed %d", phase, seed)
            train_student(dataset, variant, settings, cfg.eval.steps, seed, cfg.eval.log_every, metrics, phase)
    if params_digest(com.params) != before:  # pragma: no cover - a bug, not a user error
        raise AssertionError("evaluation modified the commentary parameters")
    if write:
        out = Path(out_dir or cfg.output.dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_csv(out / EVAL_METRICS)
    return metrics
