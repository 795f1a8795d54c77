"""Deterministic toy datasets, CSV ingestion and stratified splitting.

Features are always min-max scaled into ``[-1, 1]`` so that the generator's
tanh output range covers the data range exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mechanisms import standard_normal

FORMAT_VERSION = 1


@dataclass
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int
    scaling: dict = field(default_factory=dict)
    label_names: list | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.intp)
        if self.x.ndim != 2:
            raise ValueError(f"features must be a 2-D array, got shape {self.x.shape}")
        if self.y.shape != (self.x.shape[0],):
            raise ValueError(f"{self.x.shape[0]} rows but {self.y.shape} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if np.any(np.abs(self.x) > 1.0):
            raise ValueError("features must lie in [-1, 1]")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.x[idx], self.y[idx], self.n_classes, dict(self.scaling), self.label_names)


def minmax_scale(x: np.ndarray) -> tuple[np.ndarray, dict]:
    """Map each column affinely onto [-1, 1]; constant columns map to 0."""
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    scaled = np.where(hi > lo, 2.0 * (x - lo) / span - 1.0, 0.0)
    return np.clip(scaled, -1.0, 1.0), {"min": lo.tolist(), "max": hi.tolist()}


def apply_scaling(x: np.ndarray, scaling: dict) -> np.ndarray:
    lo = np.asarray(scaling["min"], dtype=np.float64)
    hi = np.asarray(scaling["max"], dtype=np.float64)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.clip(np.where(hi > lo, 2.0 * (x - lo) / span - 1.0, 0.0), -1.0, 1.0)


def _place_centers(n: int, dim: int, spread: float, box: float, rng: np.random.Generator,
                   attempts: int = 10_000) -> np.ndarray:
    # volume bound: n disjoint balls of radius spread/2 must fit in the box grown by spread/2
    ball = math.pi ** (dim / 2) / math.gamma(dim / 2 + 1) * (spread / 2) ** dim
    room = (2 * box + spread) ** dim
    if n * ball > room:
        raise ValueError(f"cannot place {n} centers {spread} apart in [-{box}, {box}]^{dim}: "
                         f"needs box >= {((n * ball) ** (1 / dim) - spread) / 2:.4g}")
    centers: list[np.ndarray] = []
    for _ in range(attempts):
        cand = rng.uniform(-box, box, size=dim)
        if all(np.linalg.norm(cand - c) >= spread for c in centers):
            centers.append(cand)
            if len(centers) == n:
                return np.array(centers)
    raise ValueError(f"failed to place {n} centers {spread} apart after {attempts} draws; enlarge the box")


def make_blobs(n_classes: int, dim: int, per_class: int, spread: float = 4.0, noise_std: float = 1.0,
               seed: int = 0, box: float | None = None) -> LabeledDataset:
    """Gaussian clouds around centers that are pairwise at least ``spread`` apart.

    Centers are drawn uniformly from ``[-box, box]^dim`` (default
    ``box = spread * n_classes / 2``) by rejection.
    """
    if n_classes < 2 or dim < 1 or per_class < 1:
        raise ValueError("make_blobs needs n_classes >= 2, dim >= 1 and per_class >= 1")
    if spread <= 0 or noise_std < 0:
        raise ValueError("spread must be > 0 and noise_std >= 0")
    rng = np.random.default_rng([seed, 0])
    box = spread * n_classes / 2 if box is None else box
    centers = _place_centers(n_classes, dim, spread, box, rng)
    y = np.repeat(np.arange(n_classes), per_class)
    x = centers[y] + noise_std * standard_normal(rng, (len(y), dim))
    scaled, scaling = minmax_scale(x)
    scaling["centers"] = apply_scaling(centers, scaling).tolist()
    return LabeledDataset(scaled, y, n_classes, scaling)


def make_moons(n: int, noise_std: float = 0.1, seed: int = 0) -> LabeledDataset:
    """Two interleaved half circles, ``n`` points each."""
    if n < 1 or noise_std < 0:
        raise ValueError("make_moons needs n >= 1 and noise_std >= 0")
    rng = np.random.default_rng([seed, 1])
    t = np.linspace(0.0, np.pi, n)
    upper = np.column_stack([np.cos(t), np.sin(t)])
    lower = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    x = np.vstack([upper, lower]) + noise_std * standard_normal(rng, (2 * n, 2))
    y = np.repeat([0, 1], n)
    scaled, scaling = minmax_scale(x)
    return LabeledDataset(scaled, y, 2, scaling)


def _parse_number(cell: str, row: int, col: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise ValueError(f"row {row}, column {col!r}: non-numeric cell {cell!r}") from None
    if not math.isfinite(value):
        raise ValueError(f"row {row}, column {col!r}: non-finite value {cell!r}")
    return value


def load_csv(path: str | Path, label_column: str = "label", normalize: bool = True,
             scaling: dict | None = None) -> LabeledDataset:
    """Read a headed numeric CSV.

    Labels are mapped to dense indices in sorted order (numerically when all
    labels parse as numbers); the mapping is kept in ``label_names``. With
    ``normalize`` the columns are min-max scaled, or scaled by a frozen
    ``scaling`` when one is given. ``normalize=False`` reads features verbatim
    and only checks they already lie in ``[-1, 1]``.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if label_column not in header:
            raise ValueError(f"{path}: unknown label column {label_column!r}; columns are {header}")
        li = header.index(label_column)
        features, raw_labels = [], []
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: row {rownum} has {len(row)} cells, header has {len(header)}")
            raw_labels.append(row[li].strip())
            features.append([_parse_number(c.strip(), rownum, header[j]) for j, c in enumerate(row) if j != li])
    if not features:
        raise ValueError(f"{path}: no data rows")
    x = np.array(features, dtype=np.float64)
    try:
        keys = sorted(set(raw_labels), key=float)
    except ValueError:
        keys = sorted(set(raw_labels))
    index = {k: i for i, k in enumerate(keys)}
    y = np.array([index[v] for v in raw_labels])
    n_classes = max(len(keys), 2)
    if not normalize:
        if np.any(np.abs(x) > 1.0):
            raise ValueError(f"{path}: features outside [-1, 1] while normalize=False")
        return LabeledDataset(x, y, n_classes, {}, keys)
    if scaling is not None:
        return LabeledDataset(apply_scaling(x, scaling), y, n_classes, dict(scaling), keys)
    scaled, sc = minmax_scale(x)
    return LabeledDataset(scaled, y, n_classes, sc, keys)


def save_csv(dataset: LabeledDataset, path: str | Path, label_column: str = "label") -> None:
    """Write features (as stored) and labels; ``repr`` floats round-trip bitwise."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(dataset.dim)] + [label_column])
        names = dataset.label_names
        for row, label in zip(dataset.x, dataset.y):
            w.writerow([repr(float(v)) for v in row] + [names[label] if names else int(label)])


def split(dataset: LabeledDataset, test_fraction: float = 0.3, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified, disjoint train/test split."""
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng([seed, 2])
    train_idx, test_idx = [], []
    for cls in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.y == cls)
        if len(idx) == 0:
            continue
        if len(idx) < 2:
            raise ValueError(f"class {cls} has a single row; cannot stratify")
        idx = rng.permutation(idx)
        n_test = min(max(int(round(test_fraction * len(idx))), 1), len(idx) - 1)
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx))
    return dataset.subset(train), dataset.subset(test)


def to_json(dataset: LabeledDataset) -> dict:
    return {"format_version": FORMAT_VERSION, "n_classes": dataset.n_classes,
            "x": dataset.x.tolist(), "y": dataset.y.tolist(),
            "scaling": dataset.scaling, "label_names": dataset.label_names}


def from_json(doc: dict) -> LabeledDataset:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format_version {doc.get('format_version')!r}")
    x = np.array(doc["x"], dtype=np.float64).reshape(len(doc["y"]), -1)
    return LabeledDataset(x, np.array(doc["y"]), doc["n_classes"], doc.get("scaling", {}), doc.get("label_names"))


def save_dataset(dataset: LabeledDataset, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_json(dataset)) + "\n")


def load_dataset(path: str | Path) -> LabeledDataset:
    return from_json(json.loads(Path(path).read_text()))
