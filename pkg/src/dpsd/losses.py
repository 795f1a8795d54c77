"""Training objectives, written as graph expressions so that gradients with
respect to the student's probability outputs (not just its weights) are free.

All losses are sums over the batch. Logarithms are floored at ``LOG_FLOOR``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffgraph import Graph, Node

LOG_FLOOR = 1e-12
SIMPLEX_TOL = 1e-6


def _values(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _check_simplex(name: str, p: np.ndarray) -> None:
    if p.ndim != 2:
        raise ValueError(f"{name} must be a [b, c] batch, got shape {p.shape}")
    if np.any(p < -SIMPLEX_TOL) or np.any(np.abs(p.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise ValueError(f"{name} rows must lie on the probability simplex")


def _flog(x: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(x, LOG_FLOOR))


def dkd_loss(g: Graph, teacher_probs, student_probs: Node, lam: float = 8.0,
             nc_form: str = "normalized") -> Node:
    """Decoupled distillation: binary target-class KL plus ``lam`` times a
    non-target term, summed over the batch. The target is the teacher argmax.

    ``nc_form="normalized"`` is the KL between the teacher and student
    distributions restricted to the non-target classes; the student's
    restriction is renormalized by its own non-target mass, so the gradient
    with respect to the student probabilities vanishes when they equal the
    teacher's. ``nc_form="printed"`` is the per-class weighted log-odds form
    ``sum_j p_t/(1-p_t) * log(p_t (1-p_s) / (p_s (1-p_t)))``, which is zero at
    equality but has a non-zero gradient there.
    """
    pt = _values(teacher_probs)
    ps = student_probs.value
    _check_simplex("teacher_probs", pt)
    _check_simplex("student_probs", ps)
    if pt.shape != ps.shape:
        raise ValueError(f"teacher {pt.shape} and student {ps.shape} batches differ")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    b, c = pt.shape
    r = np.argmax(pt, axis=1)
    rows = np.arange(b)
    pt_r = pt[rows, r]

    ps_r = g.pick(student_probs, r)
    tc = (pt_r * _flog(pt_r) + (1 - pt_r) * _flog(1 - pt_r)
          - pt_r * g.log(ps_r, LOG_FLOOR) - (1 - pt_r) * g.log(1.0 - ps_r, LOG_FLOOR))

    nontarget = np.ones((b, c))
    nontarget[rows, r] = 0.0
    if nc_form == "normalized":
        pt_hat = nontarget * pt / np.maximum(1 - pt_r, LOG_FLOOR)[:, None]
        const = np.sum(pt_hat * _flog(pt_hat), axis=1)
        s_mass = g.sum(student_probs * nontarget, axis=1)
        cross = g.sum(g.log(student_probs, LOG_FLOOR) * pt_hat, axis=1)
        nc = const - cross + pt_hat.sum(axis=1) * g.log(s_mass, LOG_FLOOR)
    elif nc_form == "printed":
        weight = nontarget * pt / np.maximum(1 - pt, LOG_FLOOR)
        const = np.sum(weight * (_flog(pt) - _flog(1 - pt)), axis=1)
        log_odds_s = g.log(student_probs, LOG_FLOOR) - g.log(1.0 - student_probs, LOG_FLOOR)
        nc = const - g.sum(log_odds_s * weight, axis=1)
    else:
        raise ValueError(f"unknown nc_form {nc_form!r}")
    return g.sum(tc + lam * nc, label="dkd_loss")


def target_class_kl(pt_r: float, ps_r: float) -> float:
    """Binary KL between (pt_r, 1-pt_r) and (ps_r, 1-ps_r)."""
    return float(pt_r * (_flog(pt_r) - _flog(ps_r)) + (1 - pt_r) * (_flog(1 - pt_r) - _flog(1 - ps_r)))


def student_loss(g: Graph, student_probs: Node, targets) -> Node:
    """Soft-label cross-entropy ``sum_i -sum_j y_ij log(p_ij + 1e-12)``."""
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != student_probs.value.shape:
        raise ValueError(f"targets {y.shape} do not match student outputs {student_probs.value.shape}")
    if np.any(y < 0):
        raise ValueError("targets contain negative entries; project annotations onto the simplex first")
    return -g.sum(g.log(student_probs + LOG_FLOOR) * y, label="student_loss")


@dataclass(frozen=True)
class GeneratorLossWeights:
    """Weights and variants of the three generator terms.

    ``entropy_form``: ``"batch-mean"`` scores the batch-averaged prediction
    ``sum_j pbar_j log pbar_j``; ``"per-sample"`` sums ``p log p`` over every
    row. The batch-mean form is a single term while the other two are sums
    over the batch, so its weight usually needs to grow with the batch size.
    ``activation_form``: ``"maximize"`` rewards large backbone features
    (``-sum ||f||``); ``"literal"`` adds ``+sum ||f||``.
    """

    onehot: float = 1.0
    entropy: float = 1.0
    activation: float = 1.0
    entropy_form: str = "batch-mean"
    activation_form: str = "maximize"

    def __post_init__(self):
        if not all(np.isfinite([self.onehot, self.entropy, self.activation])):
            raise ValueError("generator loss weights must be finite")
        if self.entropy_form not in ("batch-mean", "per-sample"):
            raise ValueError(f"unknown entropy_form {self.entropy_form!r}")
        if self.activation_form not in ("maximize", "literal"):
            raise ValueError(f"unknown activation_form {self.activation_form!r}")


def generator_terms(g: Graph, student_probs: Node, features: Node,
                    weights: GeneratorLossWeights = GeneratorLossWeights()) -> dict[str, Node]:
    """The three unweighted generator terms, keyed ``onehot``, ``entropy``, ``activation``."""
    p = student_probs.value
    if features.value.shape[0] != p.shape[0]:
        raise ValueError("features and probabilities must have the same number of rows")
    b = p.shape[0]
    pseudo = np.argmax(p, axis=1)
    onehot = -g.sum(g.log(g.pick(student_probs, pseudo) + LOG_FLOOR))
    if weights.entropy_form == "batch-mean":
        mean = g.scale(g.sum(student_probs, axis=0), 1.0 / b)
        entropy = g.sum(mean * g.log(mean, LOG_FLOOR))
    else:
        entropy = g.sum(student_probs * g.log(student_probs, LOG_FLOOR))
    norms = g.sum(g.norm(features))
    activation = -norms if weights.activation_form == "maximize" else norms
    return {"onehot": onehot, "entropy": entropy, "activation": activation}


def generator_loss(g: Graph, student_probs: Node, features: Node,
                   weights: GeneratorLossWeights = GeneratorLossWeights()) -> Node:
    terms = generator_terms(g, student_probs, features, weights)
    return (weights.onehot * terms["onehot"] + weights.entropy * terms["entropy"]
            + weights.activation * terms["activation"])


def classic_kd_loss(g: Graph, teacher_probs, student_probs: Node, temperature: float = 4.0) -> Node:
    """``T^2 * sum_i KL(soft(teacher) || soft(student))`` where ``soft`` raises
    probabilities to ``1/T`` and renormalizes."""
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    pt = _values(teacher_probs)
    if pt.shape != student_probs.value.shape:
        raise ValueError("teacher and student batches differ in shape")
    zt = _flog(pt) / temperature
    zt = zt - zt.max(axis=1, keepdims=True)
    qt = np.exp(zt) / np.exp(zt).sum(axis=1, keepdims=True)
    qs = g.softmax(g.scale(g.log(student_probs, LOG_FLOOR), 1.0 / temperature))
    kl = g.sum((_flog(qt) - g.log(qs, LOG_FLOOR)) * qt)
    return g.scale(kl, temperature ** 2, label="kd_loss")


def distillation_loss(g: Graph, teacher_probs, student_probs: Node, kind: str = "dkd", lam: float = 8.0,
                      temperature: float = 4.0, nc_form: str = "normalized") -> Node:
    if kind == "dkd":
        return dkd_loss(g, teacher_probs, student_probs, lam, nc_form)
    if kind == "classic":
        return classic_kd_loss(g, teacher_probs, student_probs, temperature)
    raise ValueError(f"unknown distillation kind {kind!r}; expected 'dkd' or 'classic'")


def distillation_gradient(teacher_probs, student_probs, kind: str = "dkd", lam: float = 8.0,
                          temperature: float = 4.0, nc_form: str = "normalized") -> tuple[float, np.ndarray]:
    """Loss value and its gradient with respect to the student probabilities."""
    g = Graph()
    ps = g.input(student_probs, label="student_probs")
    loss = distillation_loss(g, teacher_probs, ps, kind, lam, temperature, nc_form)
    return float(loss.value), g.backward(loss, wrt=[ps])[ps]
