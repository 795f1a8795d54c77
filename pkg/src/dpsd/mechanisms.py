"""Private annotation: top-k masking, gradient normalization, Gaussian noise,
randomized response and the data/label switch.

Every random draw goes through an explicit ``numpy.random.Generator`` and
consumes a fixed number of uniforms per sample (two per Gaussian via
Box-Muller, one per randomized-response or uniform label draw), so streams
replay identically no matter which branch a row takes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats

DATA_SENSITIVE = 1
LABEL_SENSITIVE = 0
ANNOTATION_MODES = ("per-example", "batch-averaged")
RR_DOMAINS = ("all-classes", "top-k-set")


def standard_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Box-Muller standard normals; exactly two uniforms per sample."""
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    n = int(np.prod(shape)) if shape else 1
    u = rng.random((n, 2))
    radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
    return (radius * np.cos(2.0 * np.pi * u[:, 1])).reshape(shape)


@dataclass(frozen=True)
class PrivacyConfig:
    """Knobs of the private annotation step.

    ``switch`` is 1 for data-sensitive (Gaussian) and 0 for label-sensitive
    (randomized response) protection. ``epsilon_rr = inf`` disables the
    randomized response entirely, which is only meaningful as a no-privacy
    reference.
    """

    switch: int = DATA_SENSITIVE
    beta: float = 1e-3
    sigma: float = 100.0
    h: float = 1e-4
    k: int = 3
    epsilon_rr: float = 2.0
    delta: float = 1e-5
    annotation_mode: str = "per-example"
    rr_domain: str = "all-classes"
    project_simplex: bool = True

    def __post_init__(self):
        if self.switch not in (0, 1):
            raise ValueError(f"switch must be 0 or 1, got {self.switch!r}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not self.h > 0:
            raise ValueError(f"h must be > 0, got {self.h}")
        if int(self.k) != self.k or self.k < 2:
            raise ValueError(f"k must be an integer >= 2, got {self.k}")
        if not self.epsilon_rr > 0:
            raise ValueError(f"epsilon_rr must be > 0, got {self.epsilon_rr}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.annotation_mode not in ANNOTATION_MODES:
            raise ValueError(f"annotation_mode must be one of {ANNOTATION_MODES}, got {self.annotation_mode!r}")
        if self.rr_domain not in RR_DOMAINS:
            raise ValueError(f"rr_domain must be one of {RR_DOMAINS}, got {self.rr_domain!r}")

    def check_classes(self, n_classes: int) -> None:
        if self.k > n_classes:
            raise ValueError(f"k={self.k} exceeds the class count {n_classes}")


@dataclass
class AnnotationBatch:
    labels: np.ndarray
    mechanisms: int
    mode: str  # "data" or "label"

    def __len__(self) -> int:
        return self.labels.shape[0]


# --------------------------------------------------------------------------
# top-k
# --------------------------------------------------------------------------


def _check_k(k: int, c: int) -> None:
    if not 1 <= k <= c:
        raise ValueError(f"k must satisfy 1 <= k <= {c}, got {k}")


def topk_indices(probs, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries, ascending. Lower index wins ties.

    Accepts a vector or a batch of rows.
    """
    v = np.asarray(probs, dtype=np.float64)
    _check_k(k, v.shape[-1])
    order = np.argsort(-v, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def topk_mask(v, k: int) -> np.ndarray:
    """Keep the ``k`` largest entries (rowwise for a batch) and zero the rest."""
    v = np.asarray(v, dtype=np.float64)
    idx = topk_indices(v, k)
    out = np.zeros_like(v)
    np.put_along_axis(out, idx, np.take_along_axis(v, idx, axis=-1), axis=-1)
    return out


# --------------------------------------------------------------------------
# data-sensitive path
# --------------------------------------------------------------------------


def normalize_gradient(g, beta: float, h: float) -> np.ndarray:
    """``beta * g / (||g||_2 + h)`` over the last axis; the norm stays below ``beta``."""
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("normalize_gradient received non-finite values")
    if not beta > 0 or not h > 0:
        raise ValueError(f"beta and h must be positive, got beta={beta}, h={h}")
    norms = np.sqrt(np.sum(g * g, axis=-1, keepdims=True))
    out = beta * g / (norms + h)
    # when h is negligible the row norm rounds to beta or just above, and the
    # exact value depends on summation order; keep a few ulps of margin
    shrink = 1.0 - 2.0**-48
    for _ in range(8):
        over = np.sqrt(np.sum(out * out, axis=-1, keepdims=True)) >= beta * shrink
        if not over.any():
            break
        out = np.where(over, out * shrink, out)
    return out


def gaussian_perturb(v, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    if noise_std == 0:
        return v.copy()
    return v + noise_std * standard_normal(rng, v.shape)


def project_to_simplex(rows: np.ndarray) -> np.ndarray:
    """Clip negatives to zero and renormalize each row; an all-zero row becomes uniform."""
    clipped = np.maximum(rows, 0.0)
    totals = clipped.sum(axis=-1, keepdims=True)
    uniform = np.full_like(clipped, 1.0 / clipped.shape[-1])
    return np.where(totals > 0, clipped / np.where(totals > 0, totals, 1.0), uniform)


def privatize_gradients(grads, cfg: PrivacyConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-example masked, normalized and noised gradients (the released quantity)."""
    grads = np.asarray(grads, dtype=np.float64)
    bounded = normalize_gradient(topk_mask(grads, cfg.k), cfg.beta, cfg.h)
    return gaussian_perturb(bounded, cfg.sigma * cfg.beta, rng)


def apply_correction(student_probs, corrections, lr_student: float, mode: str,
                     project: bool) -> np.ndarray:
    """Turn privatized per-example corrections into soft labels.

    ``per-example`` subtracts each row's own correction; ``batch-averaged``
    subtracts the batch mean from every row.
    """
    student_probs = np.asarray(student_probs, dtype=np.float64)
    if mode == "per-example":
        labels = student_probs - lr_student * corrections
    elif mode == "batch-averaged":
        labels = student_probs - lr_student * corrections.mean(axis=0)
    else:
        raise ValueError(f"unknown annotation mode {mode!r}")
    return project_to_simplex(labels) if project else labels


def _check_batches(*arrays) -> tuple[int, int]:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"batch shapes disagree: {sorted(shapes)}")
    shape = shapes.pop()
    if len(shape) != 2:
        raise ValueError(f"expected [b, c] batches, got shape {shape}")
    return shape


def annotate_data_sensitive(teacher_probs, student_probs, dkd_grads, cfg: PrivacyConfig,
                            lr_student: float, rng: np.random.Generator) -> AnnotationBatch:
    """Noisy soft labels from student outputs and privatized distillation gradients."""
    if cfg.switch != DATA_SENSITIVE:
        raise ValueError("annotate_data_sensitive requires switch == 1")
    b, c = _check_batches(teacher_probs, student_probs, dkd_grads)
    cfg.check_classes(c)
    corrections = privatize_gradients(dkd_grads, cfg, rng)
    labels = apply_correction(student_probs, corrections, lr_student, cfg.annotation_mode, cfg.project_simplex)
    return AnnotationBatch(labels, b, "data")


# --------------------------------------------------------------------------
# label-sensitive path
# --------------------------------------------------------------------------


def rr_keep_probability(n: int, epsilon: float) -> float:
    """Probability that randomized response over ``n`` outcomes returns the truth."""
    if n < 2:
        raise ValueError(f"randomized response needs at least 2 outcomes, got {n}")
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if math.isinf(epsilon):
        return 1.0
    return 1.0 / (1.0 + (n - 1) * math.exp(-epsilon))


def _rr_from_uniform(u: float, r_pos: int, n: int, p_keep: float) -> int:
    """Position in the domain selected by one uniform."""
    if u < p_keep:
        return r_pos
    other = min(int((u - p_keep) / (1.0 - p_keep) * (n - 1)), n - 2)
    return other if other < r_pos else other + 1


def randomized_response(r: int, domain: Sequence[int], epsilon: float, rng: np.random.Generator) -> int:
    """Return ``r`` w.p. e^eps/(e^eps+n-1), else another domain element uniformly."""
    domain = [int(d) for d in domain]
    if r not in domain:
        raise ValueError(f"true label {r} is not in the domain {domain}")
    n = len(domain)
    p_keep = rr_keep_probability(n, epsilon)
    return domain[_rr_from_uniform(rng.random(), domain.index(r), n, p_keep)]


def annotate_label_sensitive(teacher_probs, student_probs, cfg: PrivacyConfig,
                             rng: np.random.Generator) -> AnnotationBatch:
    """One-hot labels: randomized response when the teacher's class is in the
    student's top-k set, a uniform pick from that set otherwise."""
    if cfg.switch != LABEL_SENSITIVE:
        raise ValueError("annotate_label_sensitive requires switch == 0")
    b, c = _check_batches(teacher_probs, student_probs)
    cfg.check_classes(c)
    targets = np.argmax(teacher_probs, axis=1)
    top = topk_indices(student_probs, cfg.k)
    u = rng.random(b)
    out = np.empty(b, dtype=np.intp)
    all_classes = list(range(c))
    for i in range(b):
        r = int(targets[i])
        candidates = [int(j) for j in top[i]]
        if r in candidates:
            domain = all_classes if cfg.rr_domain == "all-classes" else candidates
            n = len(domain)
            out[i] = domain[_rr_from_uniform(u[i], domain.index(r), n, rr_keep_probability(n, cfg.epsilon_rr))]
        else:
            out[i] = candidates[min(int(u[i] * cfg.k), cfg.k - 1)]
    labels = np.zeros((b, c))
    labels[np.arange(b), out] = 1.0
    return AnnotationBatch(labels, b, "label")


def annotate(cfg: PrivacyConfig, teacher_probs, student_probs, dkd_grads=None, lr_student: float | None = None,
             rng: np.random.Generator | None = None) -> AnnotationBatch:
    """Dispatch on ``cfg.switch``."""
    if rng is None:
        raise ValueError("annotate needs an explicit random stream")
    if cfg.switch == DATA_SENSITIVE:
        if dkd_grads is None or lr_student is None:
            raise ValueError("data-sensitive annotation needs distillation gradients and the student learning rate")
        return annotate_data_sensitive(teacher_probs, student_probs, dkd_grads, cfg, lr_student, rng)
    if cfg.switch == LABEL_SENSITIVE:
        return annotate_label_sensitive(teacher_probs, student_probs, cfg, rng)
    raise ValueError(f"switch must be 0 or 1, got {cfg.switch!r}")


# --------------------------------------------------------------------------
# audit
# --------------------------------------------------------------------------


class RRAudit(NamedTuple):
    counts: np.ndarray
    expected: np.ndarray
    chi2: float
    p_value: float

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    def table(self) -> str:
        n = self.counts.sum()
        lines = ["class  observed  expected  freq      prob"]
        for j, (o, e) in enumerate(zip(self.counts, self.expected)):
            lines.append(f"{j:5d}  {o:8d}  {e:8.1f}  {o / n:.5f}  {e / n:.5f}")
        lines.append(f"chi2 = {self.chi2:.4f}  p = {self.p_value:.4g}")
        return "\n".join(lines)


def rr_frequency_audit(n: int, epsilon: float, trials: int, rng: np.random.Generator,
                       true_class: int = 0) -> RRAudit:
    """Run randomized response ``trials`` times and test the counts against the
    closed-form output distribution."""
    if trials < 10_000:
        raise ValueError(f"an audit needs at least 10^4 trials, got {trials}")
    if not 0 <= true_class < n:
        raise ValueError(f"true_class must lie in [0, {n})")
    p_keep = rr_keep_probability(n, epsilon)
    domain = list(range(n))
    # drive the production mechanism itself, one draw at a time
    picks = np.fromiter((randomized_response(true_class, domain, epsilon, rng) for _ in range(trials)),
                        dtype=np.intp, count=trials)
    counts = np.bincount(picks, minlength=n)
    probs = np.full(n, (1.0 - p_keep) / (n - 1))
    probs[true_class] = p_keep
    expected = probs * trials
    mask = expected > 0
    chi2, p_value = stats.chisquare(counts[mask], expected[mask])
    return RRAudit(counts, expected, float(chi2), float(p_value))
