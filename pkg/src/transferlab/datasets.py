"""Synthetic source/target dataset pairs with a controllable relatedness dial.

A dataset is generated by drawing class prototypes in a latent space,
adding gaussian noise, and pushing the latent points through a fixed stack
of random nonlinear mixing layers (scaled orthonormal map + tanh per
layer). The mixing stack is the "world": a target generated with the
source's mixing (theta = 1) lives in the same world and only changes the
classes, while an independently drawn mixing (theta = 0) is a different
world entirely. Intermediate theta interpolates the mixing layers
spherically.

Prototypes occupy only the first half of the latent coordinates; the
second half carries class-independent nuisance noise at NUISANCE_RATIO
times the class-coordinate noise. The mixing entangles both, so raw input
distances are dominated by nuisance. That makes the world behave like
natural data: a classifier trained from scratch on a small dataset must
spend its sample budget learning to discard nuisance directions, whereas a
network pre-trained on any dataset from the same world already has, and
its lower layers transfer. A network pre-trained under a different mixing
removes the wrong directions and transfers poorly.

CSV format for one split: header ``label,f0,...,f{d-1}``, one row per
sample, features printed with 17 significant digits so values round-trip
exactly. A dataset is stored as ``<stem>.train.csv`` / ``<stem>.val.csv`` /
``<stem>.test.csv``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, LabelError, ShapeError
from .nn import Batch


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for one synthetic dataset."""

    n_classes: int
    latent_dim: int
    input_dim: int
    samples_per_class: int
    noise_sigma: float
    mixing_depth: int = 2

    def __post_init__(self):
        for name in ("n_classes", "latent_dim", "input_dim", "samples_per_class", "mixing_depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.input_dim < self.latent_dim:
            raise ConfigError(
                f"input_dim {self.input_dim} must be >= latent_dim {self.latent_dim}"
            )
        if not (math.isfinite(self.noise_sigma) and self.noise_sigma > 0):
            raise ConfigError(f"noise_sigma must be > 0, got {self.noise_sigma}")

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "latent_dim": self.latent_dim,
            "input_dim": self.input_dim,
            "samples_per_class": self.samples_per_class,
            "noise_sigma": self.noise_sigma,
            "mixing_depth": self.mixing_depth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(
            n_classes=int(d["n_classes"]),
            latent_dim=int(d["latent_dim"]),
            input_dim=int(d["input_dim"]),
            samples_per_class=int(d["samples_per_class"]),
            noise_sigma=float(d["noise_sigma"]),
            mixing_depth=int(d.get("mixing_depth", 2)),
        )


@dataclass
class Mixing:
    """Fixed nonlinear map from latent space to input space.

    layers[0] lifts latent_dim -> input_dim; any further layers are
    input_dim -> input_dim. Each layer applies tanh after the matrix.
    """

    layers: tuple[np.ndarray, ...]

    @property
    def latent_dim(self) -> int:
        return self.layers[0].shape[0]

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape[1]

    def apply(self, latent: np.ndarray) -> np.ndarray:
        h = np.asarray(latent, dtype=np.float64)
        for m in self.layers:
            h = np.tanh(h @ m)
        return h

    @classmethod
    def draw(cls, latent_dim: int, input_dim: int, depth: int, rng: np.random.Generator):
        layers = [_semi_orthogonal(latent_dim, input_dim, rng)]
        for _ in range(depth - 1):
            layers.append(_semi_orthogonal(input_dim, input_dim, rng))
        return cls(layers=tuple(layers))


def _semi_orthogonal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    # orthonormal rows: preserves norms from the row space into the column space
    q, _ = np.linalg.qr(rng.normal(size=(cols, rows)))
    return np.ascontiguousarray(q[:, :rows].T)


def _slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    cos = float(np.sum(a * b)) / (na * nb)
    omega = math.acos(max(-1.0, min(1.0, cos)))
    if omega < 1e-9:
        return (1.0 - t) * a + t * b
    return (math.sin((1.0 - t) * omega) * a + math.sin(t * omega) * b) / math.sin(omega)


def _interpolate_mixing(independent: Mixing, source: Mixing, theta: float) -> Mixing:
    if theta == 1.0:
        return source
    if theta == 0.0:
        return independent
    layers = tuple(
        _slerp(ind, src, theta) for ind, src in zip(independent.layers, source.layers)
    )
    return Mixing(layers=layers)


@dataclass
class LabeledDataset:
    """Disjoint train/val/test splits drawn from the same class set."""

    name: str
    train: Batch
    test: Batch
    val: Batch | None = None
    provenance: SyntheticSpec | str | None = None

    def __post_init__(self):
        classes = set(np.unique(self.train.labels))
        for split_name, split in (("test", self.test), ("val", self.val)):
            if split is None:
                continue
            if set(np.unique(split.labels)) != classes:
                raise LabelError(
                    f"{split_name} split class set differs from train split"
                )

    @property
    def n_classes(self) -> int:
        return int(self.train.labels.max()) + 1


def split_per_class(samples: Batch, train_n: int, val_n: int,
                    name: str = "dataset",
                    provenance: SyntheticSpec | str | None = None) -> LabeledDataset:
    """Per class, in the order given: first ``train_n`` samples to train, next
    ``val_n`` to val, the remainder to test.

    Deliberately order-sensitive; shuffle beforehand if the input order is
    meaningful. Every class must have more than ``train_n + val_n`` samples.
    """
    if train_n < 1:
        raise ConfigError(f"train_n must be >= 1, got {train_n}")
    if val_n < 0:
        raise ConfigError(f"val_n must be >= 0, got {val_n}")
    labels = samples.labels
    n_classes = int(labels.max()) + 1
    present = set(np.unique(labels))
    missing = sorted(set(range(n_classes)) - present)
    if missing:
        raise LabelError(f"labels are not dense: missing classes {missing}")
    train_idx, val_idx, test_idx = [], [], []
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size <= train_n + val_n:
            raise LabelError(
                f"class {c} has {idx.size} samples, needs more than "
                f"train_n + val_n = {train_n + val_n}"
            )
        train_idx.extend(idx[:train_n])
        val_idx.extend(idx[train_n:train_n + val_n])
        test_idx.extend(idx[train_n + val_n:])

    def take(ix):
        ix = np.asarray(ix, dtype=np.int64)
        return Batch(samples.inputs[ix], labels[ix])

    return LabeledDataset(
        name=name,
        train=take(train_idx),
        val=take(val_idx) if val_n > 0 else None,
        test=take(test_idx),
        provenance=provenance,
    )


def _default_split(spec: SyntheticSpec) -> tuple[int, int]:
    spc = spec.samples_per_class
    if spc < 2:
        raise ConfigError(f"samples_per_class must be >= 2 to split, got {spc}")
    train_n = min(max(1, round(0.6 * spc)), spc - 1)
    val_n = max(0, min(round(0.2 * spc), spc - train_n - 1))
    return train_n, val_n


def _draw_samples(spec: SyntheticSpec, mixing: Mixing, protos: np.ndarray,
                  rng: np.random.Generator) -> Batch:
    noise = rng.normal(size=(spec.n_classes, spec.samples_per_class, spec.latent_dim))
    latent = protos[:, None, :] + spec.noise_sigma * noise
    inputs = mixing.apply(latent.reshape(-1, spec.latent_dim))
    labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    return Batch(inputs, labels)


def gen_source(spec: SyntheticSpec, seed: int) -> tuple[LabeledDataset, Mixing]:
    """Source dataset plus its mixing stack, which targets interpolate against."""
    rng = np.random.default_rng(seed)
    mixing = Mixing.draw(spec.latent_dim, spec.input_dim, spec.mixing_depth, rng)
    protos = rng.normal(size=(spec.n_classes, spec.latent_dim))
    samples = _draw_samples(spec, mixing, protos, rng)
    train_n, val_n = _default_split(spec)
    dataset = split_per_class(
        samples, train_n, val_n,
        name=f"source-c{spec.n_classes}-seed{seed}", provenance=spec,
    )
    return dataset, mixing


def gen_target(spec: SyntheticSpec, source_mixing: Mixing, theta: float,
               seed: int) -> LabeledDataset:
    """Target dataset whose input-generating function sits ``theta`` of the
    way from an independent random mixing (0) to the source's own (1).

    New class prototypes are always drawn; only the mixing interpolates, so
    for a fixed seed the latent class structure is identical across theta.
    """
    if not (math.isfinite(theta) and 0.0 <= theta <= 1.0):
        raise ConfigError(f"theta must lie in [0, 1], got {theta}")
    if (spec.latent_dim, spec.input_dim) != (source_mixing.latent_dim, source_mixing.input_dim):
        raise ShapeError(
            f"target spec dims ({spec.latent_dim}, {spec.input_dim}) do not match "
            f"source mixing ({source_mixing.latent_dim}, {source_mixing.input_dim})"
        )
    if len(source_mixing.layers) != spec.mixing_depth:
        raise ShapeError(
            f"target mixing_depth {spec.mixing_depth} != source depth {len(source_mixing.layers)}"
        )
    rng = np.random.default_rng(seed)
    # drawn unconditionally so prototypes/noise are identical across theta
    independent = Mixing.draw(spec.latent_dim, spec.input_dim, spec.mixing_depth, rng)
    protos = rng.normal(size=(spec.n_classes, spec.latent_dim))
    mixing = _interpolate_mixing(independent, source_mixing, theta)
    samples = _draw_samples(spec, mixing, protos, rng)
    train_n, val_n = _default_split(spec)
    return split_per_class(
        samples, train_n, val_n,
        name=f"target-theta{theta:g}-seed{seed}", provenance=spec,
    )


# ---------------------------------------------------------------------------
# CSV persistence

def save_split_csv(path, batch: Batch) -> None:
    d = batch.inputs.shape[1]
    header = "label," + ",".join(f"f{i}" for i in range(d))
    lines = [header]
    for row, label in zip(batch.inputs, batch.labels):
        lines.append(str(int(label)) + "," + ",".join(format(v, ".17g") for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_split_csv(path) -> Batch:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError("empty file", line=1)
    header = lines[0].split(",")
    if header[0] != "label" or any(
        h != f"f{i}" for i, h in enumerate(header[1:])
    ) or len(header) < 2:
        raise FormatError(f"bad header {lines[0]!r}, expected 'label,f0,...'", line=1)
    d = len(header) - 1
    labels = []
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != d + 1:
            raise FormatError(f"row has {len(cells)} cells, expected {d + 1}", line=lineno)
        try:
            label = int(cells[0])
            row = [float(c) for c in cells[1:]]
        except ValueError as exc:
            raise FormatError(f"non-numeric cell: {exc}", line=lineno) from exc
        if label < 0:
            raise FormatError(f"negative label {label}", line=lineno)
        labels.append(label)
        rows.append(row)
    if not rows:
        raise FormatError("no data rows", line=1)
    labels = np.asarray(labels, dtype=np.int64)
    present = set(np.unique(labels))
    missing = sorted(set(range(int(labels.max()) + 1)) - present)
    if missing:
        raise FormatError(f"labels are not dense: missing classes {missing}")
    return Batch(np.asarray(rows, dtype=np.float64), labels)


def _split_paths(stem) -> dict[str, str]:
    stem = str(stem)
    if stem.endswith(".csv"):
        stem = stem[:-4]
    return {part: f"{stem}.{part}.csv" for part in ("train", "val", "test")}


def save_csv(stem, dataset: LabeledDataset) -> list[str]:
    """Write ``<stem>.train.csv`` / ``.val.csv`` / ``.test.csv``; returns the paths."""
    paths = _split_paths(stem)
    written = []
    for part in ("train", "val", "test"):
        batch = getattr(dataset, part)
        if batch is None:
            continue
        save_split_csv(paths[part], batch)
        written.append(paths[part])
    return written


def load_csv(stem) -> LabeledDataset:
    """Inverse of save_csv; the val split is optional on disk."""
    paths = _split_paths(stem)
    for part in ("train", "test"):
        if not os.path.exists(paths[part]):
            raise FormatError(f"missing dataset file {paths[part]}")
    val = load_split_csv(paths["val"]) if os.path.exists(paths["val"]) else None
    stem_str = str(stem)
    name = os.path.basename(stem_str[:-4] if stem_str.endswith(".csv") else stem_str)
    return LabeledDataset(
        name=name,
        train=load_split_csv(paths["train"]),
        val=val,
        test=load_split_csv(paths["test"]),
        provenance=str(stem),
    )
