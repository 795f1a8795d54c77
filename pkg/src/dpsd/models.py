"""Small multilayer classifiers and the latent-to-sample generator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffgraph import Graph, Node, ShapeError, make_optimizer

FORMAT_VERSION = 1


def xavier_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _init_layers(widths: Sequence[int], rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(xavier_uniform(a, b, rng), np.zeros(b)) for a, b in zip(widths[:-1], widths[1:])]


def _check_widths(widths: Sequence[int]) -> list[int]:
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ValueError(f"need at least input and output widths, got {widths}")
    if any(w < 1 for w in widths):
        raise ValueError(f"all widths must be >= 1, got {widths}")
    return widths


_ACTIVATIONS = {
    "relu": lambda x: np.maximum(x, 0.0),
    "tanh": np.tanh,
    "identity": lambda x: x,
}


class _MLP:
    """Shared parameter handling for :class:`Classifier` and :class:`Generator`."""

    widths: list[int]
    layers: list[tuple[np.ndarray, np.ndarray]]
    hidden_activation: str

    @property
    def params(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    def set_params(self, flat: Sequence[np.ndarray]) -> None:
        if len(flat) != 2 * len(self.layers):
            raise ValueError(f"expected {2 * len(self.layers)} arrays, got {len(flat)}")
        new = []
        for (w, b), w2, b2 in zip(self.layers, flat[0::2], flat[1::2]):
            if w.shape != w2.shape or b.shape != b2.shape:
                raise ShapeError(f"parameter shape mismatch: {w.shape}/{b.shape} vs {w2.shape}/{b2.shape}")
            new.append((np.asarray(w2, dtype=np.float64), np.asarray(b2, dtype=np.float64)))
        self.layers = new

    def param_nodes(self, g: Graph, trainable: bool = True) -> list[Node]:
        make = g.param if trainable else g.constant
        return [make(p, label=f"{type(self).__name__.lower()}.p{i}") for i, p in enumerate(self.params)]

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ShapeError(f"{type(self).__name__} expects inputs of width {self.widths[0]}, got shape {x.shape}")
        return x


@dataclass
class Classifier(_MLP):
    """Dense classifier ``widths[0] -> ... -> widths[-1]`` with a softmax head.

    The backbone features are the activations feeding the last affine layer
    (for a network without hidden layers, the raw input).
    """

    widths: list[int]
    layers: list[tuple[np.ndarray, np.ndarray]]
    hidden_activation: str = "relu"
    meta: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return self.widths[-1]

    @property
    def feature_dim(self) -> int:
        return self.widths[-2]

    def logits_and_features(self, x) -> tuple[np.ndarray, np.ndarray]:
        h = self._check_input(x)
        act = _ACTIVATIONS[self.hidden_activation]
        for w, b in self.layers[:-1]:
            h = act(h @ w + b)
        w, b = self.layers[-1]
        return h @ w + b, h

    def build(self, g: Graph, x: Node, params: Sequence[Node]) -> tuple[Node, Node]:
        """Record the network on ``g``; returns (probabilities, features) nodes."""
        h = x
        act = {"relu": g.relu, "tanh": g.tanh, "identity": lambda n: n}[self.hidden_activation]
        for i in range(len(self.layers) - 1):
            h = act(g.affine(h, params[2 * i], params[2 * i + 1]))
        logits = g.affine(h, params[-2], params[-1], label="logits")
        return g.softmax(logits, label="probs"), h

    def copy(self) -> "Classifier":
        return Classifier(list(self.widths), [(w.copy(), b.copy()) for w, b in self.layers],
                          self.hidden_activation, dict(self.meta))


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classify(clf: Classifier, x) -> tuple[np.ndarray, np.ndarray]:
    """Return (probabilities, backbone features) for a batch."""
    logits, feats = clf.logits_and_features(x)
    return _softmax_rows(logits), feats


def init_classifier(widths: Sequence[int], seed: int | np.random.Generator = 0,
                    hidden_activation: str = "relu") -> Classifier:
    widths = _check_widths(widths)
    if widths[-1] < 2:
        raise ValueError(f"a classifier needs at least 2 classes, got {widths[-1]}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    meta = {} if isinstance(seed, np.random.Generator) else {"seed": int(seed)}
    return Classifier(widths, _init_layers(widths, rng), hidden_activation, meta)


@dataclass
class Generator(_MLP):
    """Maps latent vectors to samples in ``[-1, 1]`` through a final tanh."""

    widths: list[int]
    layers: list[tuple[np.ndarray, np.ndarray]]
    hidden_activation: str = "relu"
    meta: dict = field(default_factory=dict)

    @property
    def latent_dim(self) -> int:
        return self.widths[0]

    @property
    def data_dim(self) -> int:
        return self.widths[-1]

    def build(self, g: Graph, z: Node, params: Sequence[Node]) -> Node:
        h = z
        act = {"relu": g.relu, "tanh": g.tanh, "identity": lambda n: n}[self.hidden_activation]
        n = len(self.layers)
        for i in range(n):
            h = g.affine(h, params[2 * i], params[2 * i + 1])
            h = act(h) if i < n - 1 else g.tanh(h, label="samples")
        return h

    def copy(self) -> "Generator":
        return Generator(list(self.widths), [(w.copy(), b.copy()) for w, b in self.layers],
                         self.hidden_activation, dict(self.meta))


def init_generator(widths: Sequence[int], seed: int | np.random.Generator = 0,
                   hidden_activation: str = "relu") -> Generator:
    widths = _check_widths(widths)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    meta = {} if isinstance(seed, np.random.Generator) else {"seed": int(seed)}
    return Generator(widths, _init_layers(widths, rng), hidden_activation, meta)


def generate(gen: Generator, z) -> np.ndarray:
    h = gen._check_input(z)
    act = _ACTIVATIONS[gen.hidden_activation]
    n = len(gen.layers)
    for i, (w, b) in enumerate(gen.layers):
        h = h @ w + b
        h = act(h) if i < n - 1 else np.tanh(h)
    return h


@dataclass
class LatentBank:
    """The trainable batch of latent vectors fed to the generator."""

    z: np.ndarray

    @classmethod
    def draw(cls, count: int, latent_dim: int, rng: np.random.Generator) -> "LatentBank":
        from .mechanisms import standard_normal

        if count < 1 or latent_dim < 1:
            raise ValueError("latent bank needs count >= 1 and latent_dim >= 1")
        return cls(standard_normal(rng, (count, latent_dim)))

    def __len__(self) -> int:
        return self.z.shape[0]


# --------------------------------------------------------------------------
# teacher pretraining
# --------------------------------------------------------------------------


def evaluate(clf: Classifier, dataset) -> float:
    """Fraction of rows whose argmax prediction equals the label."""
    x, y = dataset.x, dataset.y
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs, _ = classify(clf, x)
    return float(np.mean(np.argmax(probs, axis=1) == y))


def pretrain_teacher(train, epochs: int = 200, hidden: Sequence[int] = (16, 16), lr: float = 0.01,
                     optimizer: str = "adam", batch_size: int | None = None, seed: int = 0,
                     test=None) -> Classifier:
    """Fit a classifier by minimizing mean cross-entropy on ``train``.

    Full-batch by default; with ``batch_size`` the rows are reshuffled each
    epoch from the seeded stream. Final train/test accuracies are stored in
    ``clf.meta``.
    """
    n_classes = train.n_classes
    if len(np.unique(train.y)) < 2:
        raise ValueError("pretraining needs a dataset with at least 2 distinct classes")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    rng = np.random.default_rng([seed, 101])
    clf = init_classifier([train.dim, *hidden, n_classes], rng)
    opt = make_optimizer(optimizer, lr)
    n = len(train.y)
    bs = n if batch_size is None else min(int(batch_size), n)
    for _ in range(epochs):
        order = np.arange(n) if bs == n else rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            g = Graph()
            params = clf.param_nodes(g)
            probs, _ = clf.build(g, g.input(train.x[idx]), params)
            loss = g.mean(-g.log(g.pick(probs, train.y[idx]), floor=1e-12))
            grads = g.backward(loss, wrt=params)
            clf.set_params(opt.step(clf.params, [grads[p] for p in params]))
    clf.meta = {"seed": int(seed), "epochs": int(epochs), "lr": lr, "optimizer": optimizer,
                "train_acc": evaluate(clf, train)}
    if test is not None:
        clf.meta["test_acc"] = evaluate(clf, test)
    return clf


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def to_checkpoint(model: Classifier | Generator, extra: dict | None = None) -> dict:
    kind = "classifier" if isinstance(model, Classifier) else "generator"
    nonlin = [model.hidden_activation] * (len(model.layers) - 1)
    nonlin.append("softmax" if kind == "classifier" else "tanh")
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "layer_widths": list(model.widths),
        "nonlinearities": nonlin,
        "parameters": [{"shape": list(p.shape), "values": p.ravel().tolist()} for p in model.params],
        "provenance": model.meta,
    }
    if extra:
        doc.update(extra)
    return doc


def from_checkpoint(doc: dict) -> Classifier | Generator:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}")
    widths = _check_widths(doc["layer_widths"])
    arrays = [np.array(p["values"], dtype=np.float64).reshape(p["shape"]) for p in doc["parameters"]]
    layers = list(zip(arrays[0::2], arrays[1::2]))
    hidden = doc["nonlinearities"][0] if len(doc["nonlinearities"]) > 1 else "relu"
    cls = {"classifier": Classifier, "generator": Generator}[doc["kind"]]
    model = cls(widths, [(np.zeros((a, b)), np.zeros(b)) for a, b in zip(widths[:-1], widths[1:])],
                hidden, dict(doc.get("provenance", {})))
    model.set_params([a for layer in layers for a in layer])
    return model


def save_checkpoint(model: Classifier | Generator, path: str | Path, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(to_checkpoint(model, extra), indent=1) + "\n")


def load_checkpoint(path: str | Path) -> Classifier | Generator:
    return from_checkpoint(json.loads(Path(path).read_text()))
