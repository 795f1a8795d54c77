"""Federated transcription: several clients each hold a private teacher, the
server holds the student and generator, and only synthetic samples, student
predictions and per-client payloads cross the client/server boundary."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .data import LabeledDataset
from .engine import (STREAM_ANNOTATION, STREAM_NOISE, RunConfig, RunResult, run_loop, substream)
from .losses import distillation_gradient
from .mechanisms import (DATA_SENSITIVE, AnnotationBatch, annotate_label_sensitive, apply_correction,
                         gaussian_perturb, normalize_gradient, topk_mask)
from .models import Classifier, classify, evaluate

__all__ = [
    "AnnotationRequest",
    "Client",
    "FedConfig",
    "FedResult",
    "LocalTransport",
    "aggregate",
    "client_report",
    "fed_flexper",
    "partition_noniid",
    "run_feddpsd",
]


@dataclass(frozen=True)
class FedConfig:
    """A federated run: ``clients`` teachers, Dirichlet partition settings and the
    shared per-run settings. Client dropout is not simulated."""

    run: RunConfig = RunConfig()
    clients: int = 5
    concentration: float = 0.5
    dropout: float = 0.0
    workers: int = 1

    def __post_init__(self):
        if self.clients < 1:
            raise ValueError(f"clients must be >= 1, got {self.clients}")
        if not self.concentration > 0:
            raise ValueError(f"concentration must be > 0, got {self.concentration}")
        if self.dropout != 0:
            raise ValueError("client dropout is not supported; set dropout = 0")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")


# --------------------------------------------------------------------------
# partitioning
# --------------------------------------------------------------------------


def partition_noniid(dataset: LabeledDataset, m: int, concentration: float = 0.5, seed: int = 0,
                     min_classes: int = 1, attempts: int = 1000) -> list[LabeledDataset]:
    """Split ``dataset`` into ``m`` disjoint parts with Dirichlet class proportions.

    For every class a proportion vector over clients is drawn from
    ``Dirichlet(concentration)`` and the (shuffled) rows of that class are cut
    accordingly. Draws are repeated until every part holds rows of at least
    ``min_classes`` classes.
    """
    n = len(dataset)
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if m > n:
        raise ValueError(f"cannot split {n} rows among {m} clients")
    if not concentration > 0:
        raise ValueError(f"concentration must be > 0, got {concentration}")
    if m == 1:
        return [dataset.subset(np.arange(n))]
    rng = np.random.default_rng([seed, 3])
    for _ in range(attempts):
        parts: list[list[np.ndarray]] = [[] for _ in range(m)]
        for cls in range(dataset.n_classes):
            idx = rng.permutation(np.flatnonzero(dataset.y == cls))
            if len(idx) == 0:
                continue
            share = rng.dirichlet(np.full(m, float(concentration)))
            cuts = np.round(np.cumsum(share)[:-1] * len(idx)).astype(int)
            for j, piece in enumerate(np.split(idx, cuts)):
                parts[j].append(piece)
        rows = [np.sort(np.concatenate(p)) if p else np.array([], dtype=np.intp) for p in parts]
        if all(len(np.unique(dataset.y[r])) >= min_classes and len(r) > 0 for r in rows):
            return [dataset.subset(r) for r in rows]
    raise ValueError(f"no Dirichlet({concentration}) draw gave every client {min_classes} classes "
                     f"after {attempts} attempts")


# --------------------------------------------------------------------------
# client side
# --------------------------------------------------------------------------


def fed_flexper(teacher_probs, student_probs, cfg: RunConfig, rng: np.random.Generator) -> np.ndarray:
    """A client's payload for one batch.

    Data-sensitive: per-example masked, normalized distillation gradients with
    no noise (the server adds it once). Label-sensitive: one-hot labels from
    randomized response or the uniform top-k fallback.
    """
    teacher_probs = np.asarray(teacher_probs, dtype=np.float64)
    student_probs = np.asarray(student_probs, dtype=np.float64)
    if teacher_probs.shape != student_probs.shape or teacher_probs.ndim != 2:
        raise ValueError(f"teacher {teacher_probs.shape} and student {student_probs.shape} batches differ")
    priv = cfg.privacy
    priv.check_classes(teacher_probs.shape[1])
    if priv.switch == DATA_SENSITIVE:
        _, grads = distillation_gradient(teacher_probs, student_probs, cfg.distillation, cfg.lam,
                                         cfg.temperature, cfg.nc_form)
        return normalize_gradient(topk_mask(grads, priv.k), priv.beta, priv.h)
    return annotate_label_sensitive(teacher_probs, student_probs, priv, rng).labels


class AnnotationRequest(NamedTuple):
    """What the server sends to each client."""

    samples: np.ndarray
    student_probs: np.ndarray


class Client:
    """Holds a private teacher and its own random stream; answers requests
    with payloads only."""

    def __init__(self, index: int, teacher: Classifier, cfg: RunConfig):
        self.index = index
        self._teacher = teacher
        self._cfg = cfg
        # client 0 shares the central annotation stream so a one-client
        # federation replays the central run exactly
        self._rng = substream(cfg.seed, STREAM_ANNOTATION, *([index] if index else []))

    def respond(self, request: AnnotationRequest) -> np.ndarray:
        teacher_probs, _ = classify(self._teacher, request.samples)
        return fed_flexper(teacher_probs, request.student_probs, self._cfg, self._rng)

    def local_accuracy(self, dataset: LabeledDataset) -> float:
        return evaluate(self._teacher, dataset)


class LocalTransport:
    """In-process stand-in for a network: requests and payloads are copied,
    replies are returned in ascending client order whatever the execution order."""

    def __init__(self, clients: Sequence[Client], workers: int = 1):
        self.clients = list(clients)
        self.workers = workers

    def broadcast(self, request: AnnotationRequest) -> list[np.ndarray]:
        def call(client: Client) -> np.ndarray:
            msg = AnnotationRequest(request.samples.copy(), request.student_probs.copy())
            return np.array(client.respond(msg), dtype=np.float64, copy=True)

        if self.workers > 1 and len(self.clients) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(call, self.clients))
        return [call(c) for c in self.clients]


# --------------------------------------------------------------------------
# server side
# --------------------------------------------------------------------------


def aggregate(payloads: Sequence[np.ndarray], noise_std: float, rng: np.random.Generator | None) -> np.ndarray:
    """``(sum_j O_j + N(0, noise_std^2)) / m`` with one noise draw per coordinate.

    The mean is accumulated as offsets from the first payload, which is the same
    quantity but returns identical payloads unchanged, bit for bit.
    """
    if not payloads:
        raise ValueError("nothing to aggregate")
    shapes = {p.shape for p in payloads}
    if len(shapes) != 1:
        raise ValueError(f"payload shapes disagree: {sorted(shapes)}")
    m = len(payloads)
    base = payloads[0]
    offset = np.zeros_like(base)
    for p in payloads[1:]:
        offset = offset + (p - base)
    mean = base + offset / m
    if noise_std > 0:
        if rng is None:
            raise ValueError("a noisy aggregation needs a random stream")
        mean = mean + gaussian_perturb(np.zeros_like(base), noise_std, rng) / m
    return mean


def fed_annotator(transport: LocalTransport, cfg: RunConfig):
    noise_rng = substream(cfg.seed, STREAM_NOISE)
    priv = cfg.privacy

    def annotator(samples: np.ndarray, student_probs: np.ndarray) -> AnnotationBatch:
        payloads = transport.broadcast(AnnotationRequest(samples, student_probs))
        if priv.switch == DATA_SENSITIVE:
            corrections = aggregate(payloads, priv.sigma * priv.beta, noise_rng)
            labels = apply_correction(student_probs, corrections, cfg.lr_student, priv.annotation_mode,
                                      priv.project_simplex)
            return AnnotationBatch(labels, len(labels), "data")
        labels = aggregate(payloads, 0.0, None)
        return AnnotationBatch(labels, len(labels), "label")

    return annotator


@dataclass
class FedResult(RunResult):
    clients: int = 0
    report: dict = field(default_factory=dict)


def client_report(teachers: Sequence[Classifier], student: Classifier, eval_data: LabeledDataset,
                  local_data: Sequence[LabeledDataset] | None = None) -> dict:
    """Accuracy of every client teacher and of the global student on ``eval_data``."""
    rows = []
    for j, t in enumerate(teachers):
        row = {"client": j, "teacher_acc": evaluate(t, eval_data)}
        if local_data is not None:
            row["local_rows"] = len(local_data[j])
            row["local_classes"] = sorted(int(v) for v in np.unique(local_data[j].y))
        rows.append(row)
    return {"student_acc": evaluate(student, eval_data), "clients": rows}


def run_feddpsd(teachers: Sequence[Classifier], cfg: FedConfig, eval_data: LabeledDataset | None = None,
                report_path: str | Path | None = None) -> FedResult:
    """Transcribe ``teachers`` held by separate clients into one student."""
    if len(teachers) != cfg.clients:
        raise ValueError(f"config expects {cfg.clients} clients, got {len(teachers)} teachers")
    dims = {(t.widths[0], t.n_classes) for t in teachers}
    if len(dims) != 1:
        raise ValueError(f"client teachers disagree on input width or class count: {sorted(dims)}")
    data_dim, n_classes = dims.pop()
    run = cfg.run
    clients = [Client(j, t, run) for j, t in enumerate(teachers)]
    transport = LocalTransport(clients, cfg.workers)
    base = run_loop(run, data_dim, n_classes, fed_annotator(transport, run), eval_data)
    report = client_report(teachers, base.student, eval_data) if eval_data is not None else {}
    if report_path is not None:
        Path(report_path).write_text(json.dumps(report, indent=1) + "\n")
    return FedResult(base.student, base.generator, base.bank, base.ledger, base.metrics, cfg.clients, report)


def with_run(cfg: FedConfig, **changes) -> FedConfig:
    return replace(cfg, run=replace(cfg.run, **changes))


def effective_noise_std(sigma: float, beta: float, m: int) -> float:
    """Per-coordinate noise std left on the averaged annotation."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return sigma * beta / m if math.isfinite(sigma) else math.inf
