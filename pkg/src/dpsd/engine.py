"""The alternating transcription loop: generate, annotate privately, update the
student, then update the generator and its latent inputs."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .accountant import PrivacyLedger
from .diffgraph import Graph, make_optimizer
from .losses import GeneratorLossWeights, distillation_gradient, generator_loss, student_loss
from .mechanisms import DATA_SENSITIVE, AnnotationBatch, PrivacyConfig, annotate
from .models import Classifier, Generator, LatentBank, classify, evaluate, generate, init_classifier, init_generator

__all__ = [
    "MetricsRow",
    "RunConfig",
    "RunResult",
    "TrainingAborted",
    "convergence_monitor",
    "evaluate",
    "generator_step",
    "run_dpsd",
    "student_step",
    "toy_config",
    "write_metrics_csv",
]

METRICS_HEADER = ["iter", "loss_s", "loss_g", "test_acc", "epsilon", "ms"]

# named random substreams under the root seed
STREAM_INIT = 1
STREAM_ANNOTATION = 2
STREAM_NOISE = 3
STREAM_REFRESH = 4


def substream(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng([seed, *path])


@dataclass(frozen=True)
class RunConfig:
    iterations: int = 200
    batch_size: int = 256
    lr_student: float = 0.1
    lr_generator: float = 0.01
    optimizer: str = "adam"
    privacy: PrivacyConfig = PrivacyConfig()
    generator_weights: GeneratorLossWeights = GeneratorLossWeights()
    lam: float = 8.0
    nc_form: str = "normalized"
    distillation: str = "dkd"
    temperature: float = 4.0
    latent_dim: int = 8
    student_hidden: tuple[int, ...] = (16, 16)
    generator_hidden: tuple[int, ...] = (32, 32)
    seed: int = 0
    inner_steps: int = 1
    bank_refresh: int = 0
    metrics_path: str | None = None
    record_wallclock: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.lr_student > 0 and self.lr_generator > 0):
            raise ValueError("learning rates must be positive")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.bank_refresh < 0:
            raise ValueError("bank_refresh must be >= 0")
        if self.distillation not in ("dkd", "classic"):
            raise ValueError(f"distillation must be 'dkd' or 'classic', got {self.distillation!r}")


@dataclass
class MetricsRow:
    iter: int
    loss_s: float
    loss_g: float
    test_acc: float
    epsilon: float
    ms: float

    def cells(self) -> list[str]:
        return [str(self.iter)] + [f"{v:.17g}" for v in (self.loss_s, self.loss_g, self.test_acc, self.epsilon, self.ms)]


def write_metrics_csv(rows: Sequence[MetricsRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in rows:
            w.writerow(row.cells())


def read_metrics_csv(path: str | Path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [MetricsRow(int(r["iter"]), *(float(r[k]) for k in METRICS_HEADER[1:])) for r in reader]


@dataclass
class RunResult:
    student: Classifier
    generator: Generator
    bank: LatentBank
    ledger: PrivacyLedger
    metrics: list[MetricsRow] = field(default_factory=list)


class TrainingAborted(RuntimeError):
    """A loss went non-finite; ``last_good`` holds the models from the previous iteration."""

    def __init__(self, message: str, iteration: int, last_good: RunResult):
        super().__init__(message)
        self.iteration = iteration
        self.last_good = last_good


# --------------------------------------------------------------------------
# the two player updates
# --------------------------------------------------------------------------


def student_step(student: Classifier, optimizer, samples: np.ndarray, labels: np.ndarray) -> float:
    """One descent step of the student on the soft-label loss; labels are constants."""
    g = Graph()
    params = student.param_nodes(g)
    probs, _ = student.build(g, g.input(samples, label="samples"), params)
    loss = student_loss(g, probs, labels)
    value = float(loss.value)
    if not math.isfinite(value):
        raise FloatingPointError(f"student loss is {value}")
    grads = g.backward(loss, wrt=params)
    student.set_params(optimizer.step(student.params, [grads[p] for p in params]))
    return value


def generator_step(generator: Generator, bank: LatentBank, gen_optimizer, latent_optimizer,
                   student: Classifier, labels: np.ndarray, weights: GeneratorLossWeights) -> tuple[float, float]:
    """One step of the generator and latents on L_s + L_g with the student frozen.

    Returns the values of (L_s, L_g) before the step.
    """
    g = Graph()
    gen_params = generator.param_nodes(g)
    z = g.param(bank.z, label="latents")
    samples = generator.build(g, z, gen_params)
    probs, feats = student.build(g, samples, student.param_nodes(g, trainable=False))
    ls = student_loss(g, probs, labels)
    lg = generator_loss(g, probs, feats, weights)
    total = ls + lg
    if not math.isfinite(float(total.value)):
        raise FloatingPointError(f"generator loss is {float(total.value)}")
    grads = g.backward(total, wrt=[*gen_params, z])
    generator.set_params(gen_optimizer.step(generator.params, [grads[p] for p in gen_params]))
    bank.z = latent_optimizer.step([bank.z], [grads[z]])[0]
    return float(ls.value), float(lg.value)


# --------------------------------------------------------------------------
# annotation sources
# --------------------------------------------------------------------------

Annotator = Callable[[np.ndarray, np.ndarray], AnnotationBatch]


def central_annotator(teacher: Classifier, cfg: RunConfig) -> Annotator:
    """Annotation by a single local teacher, drawing from the run's named streams."""
    noise_rng = substream(cfg.seed, STREAM_NOISE)
    label_rng = substream(cfg.seed, STREAM_ANNOTATION)
    priv = cfg.privacy

    def annotator(samples: np.ndarray, student_probs: np.ndarray) -> AnnotationBatch:
        teacher_probs, _ = classify(teacher, samples)
        if priv.switch == DATA_SENSITIVE:
            _, grads = distillation_gradient(teacher_probs, student_probs, cfg.distillation, cfg.lam,
                                             cfg.temperature, cfg.nc_form)
            return annotate(priv, teacher_probs, student_probs, grads, cfg.lr_student, noise_rng)
        return annotate(priv, teacher_probs, student_probs, rng=label_rng)

    return annotator


def new_ledger(cfg: RunConfig, n_classes: int) -> PrivacyLedger:
    priv = cfg.privacy
    if priv.switch == DATA_SENSITIVE:
        return PrivacyLedger.for_data(priv.beta, n_classes, cfg.batch_size, priv.sigma, priv.delta)
    return PrivacyLedger.for_labels(priv.epsilon_rr)


def init_players(cfg: RunConfig, data_dim: int, n_classes: int) -> tuple[Classifier, Generator, LatentBank]:
    student = init_classifier([data_dim, *cfg.student_hidden, n_classes], substream(cfg.seed, STREAM_INIT, 0))
    generator = init_generator([cfg.latent_dim, *cfg.generator_hidden, data_dim], substream(cfg.seed, STREAM_INIT, 1))
    bank = LatentBank.draw(cfg.batch_size, cfg.latent_dim, substream(cfg.seed, STREAM_INIT, 2))
    student.meta = {"seed": cfg.seed, "stream": [STREAM_INIT, 0]}
    generator.meta = {"seed": cfg.seed, "stream": [STREAM_INIT, 1]}
    return student, generator, bank


def run_loop(cfg: RunConfig, data_dim: int, n_classes: int, annotator: Annotator,
             eval_data=None) -> RunResult:
    """The alternating loop shared by the central and federated drivers."""
    cfg.privacy.check_classes(n_classes)
    student, generator, bank = init_players(cfg, data_dim, n_classes)
    ledger = new_ledger(cfg, n_classes)
    opt_s = make_optimizer(cfg.optimizer, cfg.lr_student)
    opt_g = make_optimizer(cfg.optimizer, cfg.lr_generator)
    opt_z = make_optimizer(cfg.optimizer, cfg.lr_generator)
    refresh_rng = substream(cfg.seed, STREAM_REFRESH)
    result = RunResult(student, generator, bank, ledger)

    for t in range(cfg.iterations):
        start = time.perf_counter()
        if cfg.bank_refresh and t > 0 and t % cfg.bank_refresh == 0:
            bank.z = LatentBank.draw(cfg.batch_size, cfg.latent_dim, refresh_rng).z
            opt_z = make_optimizer(cfg.optimizer, cfg.lr_generator)
        last_good = RunResult(student.copy(), generator.copy(), LatentBank(bank.z.copy()), ledger, list(result.metrics))

        samples = generate(generator, bank.z)
        student_probs, _ = classify(student, samples)
        # annotations are drawn once per iteration and reused by every inner step
        batch = annotator(samples, student_probs)
        ledger.record_annotation(len(batch))

        try:
            for _ in range(cfg.inner_steps):
                loss_s = student_step(student, opt_s, samples, batch.labels)
            for _ in range(cfg.inner_steps):
                _, loss_g = generator_step(generator, bank, opt_g, opt_z, student, batch.labels,
                                           cfg.generator_weights)
        except FloatingPointError as exc:
            raise TrainingAborted(f"iteration {t}: {exc}", t, last_good) from exc

        acc = evaluate(student, eval_data) if eval_data is not None else math.nan
        ms = (time.perf_counter() - start) * 1e3 if cfg.record_wallclock else 0.0
        result.metrics.append(MetricsRow(t + 1, loss_s, loss_g, acc, ledger.epsilon, ms))

    if cfg.metrics_path:
        write_metrics_csv(result.metrics, cfg.metrics_path)
    return result


def run_dpsd(teacher: Classifier, cfg: RunConfig, eval_data=None) -> RunResult:
    """Transcribe ``teacher`` into a privately trained student.

    The teacher is only queried, never modified. ``eval_data`` (optional) is a
    labeled dataset on which the student is scored after every iteration.
    """
    return run_loop(cfg, teacher.widths[0], teacher.n_classes, central_annotator(teacher, cfg), eval_data)


# --------------------------------------------------------------------------
# convergence
# --------------------------------------------------------------------------


class ConvergenceReport(NamedTuple):
    window: int
    trailing_mean: float
    decrease_ratio: float
    first_quarter_mean: float
    last_quarter_mean: float
    converged: bool


def convergence_monitor(metrics: Sequence[MetricsRow] | Sequence[float]) -> ConvergenceReport:
    """Empirical convergence of the student loss.

    Converged means the last-quarter mean is strictly below the first-quarter
    mean. ``decrease_ratio`` is the last window mean over the window before it.
    """
    losses = np.array([m.loss_s if isinstance(m, MetricsRow) else float(m) for m in metrics])
    if len(losses) < 10:
        raise ValueError(f"need at least 10 rows, got {len(losses)}")
    w = len(losses) // 4
    first, last, prev = losses[:w].mean(), losses[-w:].mean(), losses[-2 * w:-w].mean()
    ratio = last / prev if prev != 0 else math.inf
    return ConvergenceReport(w, float(last), float(ratio), float(first), float(last), bool(last < first))


def with_privacy(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, privacy=replace(cfg.privacy, **changes))


def toy_config(**changes) -> RunConfig:
    """Settings that transcribe small dense classifiers on 2-D toy data reliably.

    The defaults of :class:`RunConfig` are tuned for image-scale networks. At
    toy scale the feature-norm reward drives every sample into one corner of
    the data box, the one-hot reward pulls samples away from decision
    boundaries, and a large non-target weight makes the probability-space
    correction chase the teacher's tail mass. With hard labels and a fast
    generator, the generator also collapses onto a single teacher class. This
    preset drops the first two terms, balances classes with a strong
    batch-mean entropy term, uses ``lam=1`` and small learning rates.
    """
    base = RunConfig(iterations=300, lr_student=0.003, lr_generator=1e-4, lam=1.0,
                     generator_weights=GeneratorLossWeights(onehot=0.0, entropy=100.0, activation=0.0))
    privacy = changes.pop("privacy", None)
    cfg = replace(base, **changes)
    return replace(cfg, privacy=privacy) if privacy is not None else cfg
