"""Dataset-suitability measures for a pre-trained feature space.

Three measures, per source/target pair:

* class-normalized Fisher score  Tr{(S_w + eps I)^-1 S_B} / N_c  of the
  target's fixed features (higher = classes better separated);
* domain similarity  exp(-gamma * EMD)  between the class-centroid
  distributions of source and target fixed features, with the earth mover
  distance solved exactly as a transportation LP;
* transfer gap: from-scratch top-1 minus fixed-feature top-1, in
  percentage points. Negative means the pre-trained features already beat
  training from scratch.

Covariance convention: both scatter matrices use 1/n normalization and
classes are weighted by sample count in S_B.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.spatial.distance import cdist

from .errors import ConditioningError, LabelError, ShapeError
from .nn import Batch, NetworkSpec, ParamSet, as_tensor2d, forward

DEFAULT_GAMMA = 0.01


@dataclass
class FeatureMatrix:
    """Feature rows with dense integer class labels; every class non-empty."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.features = as_tensor2d(self.features, "features")
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ShapeError(
                f"labels shape {self.labels.shape} does not match "
                f"{self.features.shape[0]} feature rows"
            )
        if self.n_classes < 1:
            raise LabelError(f"n_classes must be >= 1, got {self.n_classes}")
        counts = np.bincount(self.labels, minlength=self.n_classes)
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise LabelError(
                f"labels must lie in [0, {self.n_classes}), got "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            raise LabelError(f"classes {empty.tolist()} have no samples")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def scatter_matrices(fm: FeatureMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Pooled within-class and between-class covariance, both 1/n normalized."""
    x = fm.features
    n, d = x.shape
    global_mean = x.mean(axis=0)
    s_w = np.zeros((d, d))
    s_b = np.zeros((d, d))
    for c in range(fm.n_classes):
        xc = x[fm.labels == c]
        mc = xc.mean(axis=0)
        centered = xc - mc
        s_w += centered.T @ centered
        dm = mc - global_mean
        s_b += xc.shape[0] * np.outer(dm, dm)
    return s_w / n, s_b / n


def fisher_score(fm: FeatureMatrix, eps: float | None = None) -> float:
    """Class-normalized Fisher score of the feature space.

    ``eps`` ridges the within-class scatter; None picks
    1e-6 * trace(S_w) / d, and 0 demands a well-conditioned S_w.
    """
    s_w, s_b = scatter_matrices(fm)
    d = s_w.shape[0]
    if eps is None:
        eps = 1e-6 * float(np.trace(s_w)) / d
    elif eps < 0 or not math.isfinite(eps):
        raise ValueError(f"eps must be finite and >= 0, got {eps}")
    a = s_w + eps * np.eye(d)
    eigs = np.linalg.eigvalsh(a)
    smallest = float(eigs[0])
    largest = float(np.abs(eigs).max())
    if smallest <= largest * 1e-12 or smallest <= 0.0:
        raise ConditioningError(
            "within-class scatter is singular after ridging", smallest
        )
    return float(np.trace(np.linalg.solve(a, s_b))) / fm.n_classes


def class_centroids(fm: FeatureMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Per-class mean feature rows and their sample-fraction weights."""
    centroids = np.empty((fm.n_classes, fm.dim))
    counts = np.empty(fm.n_classes)
    for c in range(fm.n_classes):
        mask = fm.labels == c
        counts[c] = mask.sum()
        centroids[c] = fm.features[mask].mean(axis=0)
    return centroids, counts / fm.n


def _atom_key(weights: np.ndarray, points: np.ndarray):
    return (points.shape[0], points.tobytes(), weights.tobytes())


def emd(
    weights_a, points_a, weights_b, points_b
) -> float:
    """Exact earth mover distance between two weighted point sets.

    Ground cost is Euclidean distance; weights are normalized to unit mass
    per side. Solved to optimality as a transportation LP, so metric axioms
    hold to solver precision. Argument order never matters: the two sides
    are put in a canonical order before solving, making the result exactly
    symmetric.
    """
    wa = np.ascontiguousarray(weights_a, dtype=np.float64)
    wb = np.ascontiguousarray(weights_b, dtype=np.float64)
    pa = as_tensor2d(points_a, "points_a")
    pb = as_tensor2d(points_b, "points_b")
    for name, w, p in (("a", wa, pa), ("b", wb, pb)):
        if w.ndim != 1 or w.shape[0] != p.shape[0]:
            raise ShapeError(f"side {name}: {w.shape[0] if w.ndim == 1 else '?'} weights "
                             f"for {p.shape[0]} points")
        if not np.all(np.isfinite(w)):
            raise ValueError(f"side {name}: weights contain non-finite values")
        if w.min() < 0:
            raise ValueError(f"side {name}: negative weight {w.min()}")
        if w.sum() <= 0:
            raise ValueError(f"side {name}: weights sum to {w.sum()}, need > 0")
    if pa.shape[1] != pb.shape[1]:
        raise ShapeError(f"point dimensions differ: {pa.shape[1]} vs {pb.shape[1]}")
    wa = wa / wa.sum()
    wb = wb / wb.sum()
    if _atom_key(wb, pb) < _atom_key(wa, pa):
        wa, pa, wb, pb = wb, pb, wa, pa

    m, n = wa.shape[0], wb.shape[0]
    cost = cdist(pa, pb)
    # transportation LP on x >= 0 (m*n flattened): all row sums fixed, all but
    # the last column sum fixed (the dropped constraint is implied by mass
    # conservation and keeps the equality system full-rank)
    n_eq = m + n - 1
    a_eq = np.zeros((n_eq, m * n))
    b_eq = np.zeros(n_eq)
    for i in range(m):
        a_eq[i, i * n:(i + 1) * n] = 1.0
        b_eq[i] = wa[i]
    for j in range(n - 1):
        a_eq[m + j, j::n] = 1.0
        b_eq[m + j] = wb[j]
    res = linprog(cost.reshape(-1), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transportation LP failed: {res.message}")
    return max(0.0, float(res.fun))


def domain_similarity(
    source_fm: FeatureMatrix, target_fm: FeatureMatrix, gamma: float = DEFAULT_GAMMA
) -> float:
    """exp(-gamma * EMD) between the two sides' class-centroid distributions."""
    if source_fm.dim != target_fm.dim:
        raise ShapeError(
            f"feature dimensions differ: source {source_fm.dim}, target {target_fm.dim}"
        )
    if gamma < 0 or not math.isfinite(gamma):
        raise ValueError(f"gamma must be finite and >= 0, got {gamma}")
    sc, sw = class_centroids(source_fm)
    tc, tw = class_centroids(target_fm)
    return math.exp(-gamma * emd(sw, sc, tw, tc))


def transfer_gap(scratch_acc: float, fixed_acc: float) -> float:
    """From-scratch top-1 minus fixed-feature top-1, percentage points."""
    for name, v in (("scratch_acc", scratch_acc), ("fixed_acc", fixed_acc)):
        if not (math.isfinite(v) and 0.0 <= v <= 100.0):
            raise ValueError(f"{name} must lie in [0, 100], got {v}")
    return scratch_acc - fixed_acc


def extract_features(
    spec: NetworkSpec, params: ParamSet, batch: Batch, block_index: int | None = None
) -> FeatureMatrix:
    """Activations after the indexed block, labels carried through.

    Defaults to the penultimate block. The final block's "activations" are
    the raw logits.
    """
    if block_index is None:
        block_index = spec.n_blocks - 2
    if not 0 <= block_index < spec.n_blocks:
        raise ShapeError(
            f"block_index {block_index} out of range [0, {spec.n_blocks})"
        )
    _, cache = forward(spec, params, batch)
    return FeatureMatrix(
        features=cache.post_acts[block_index].copy(),
        labels=batch.labels.copy(),
        n_classes=int(batch.labels.max()) + 1,
    )


@dataclass
class DomainMeasures:
    """The three suitability measures for one source/target pair.

    The transfer gap is the decisive signal; fisher and emd_similarity are
    recorded as advisory context. ``gamma`` pins down how emd_similarity
    was derived from the raw distance.
    """

    gap: float | None = None
    fisher: float | None = None
    emd_similarity: float | None = None
    gamma: float = DEFAULT_GAMMA
    scratch_top1: float | None = None
    fixed_top1: float | None = None

    def __post_init__(self):
        if self.emd_similarity is not None and not 0.0 < self.emd_similarity <= 1.0:
            raise ValueError(
                f"emd_similarity must lie in (0, 1], got {self.emd_similarity}"
            )

    def to_dict(self) -> dict:
        return {
            "gap": self.gap,
            "fisher": self.fisher,
            "emd_similarity": self.emd_similarity,
            "gamma": self.gamma,
            "scratch_top1": self.scratch_top1,
            "fixed_top1": self.fixed_top1,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainMeasures":
        known = {f: d.get(f) for f in cls.__dataclass_fields__ if f in d}
        if known.get("gamma") is None:
            known["gamma"] = DEFAULT_GAMMA
        return cls(**known)


def save_feature_csv(path, fm: FeatureMatrix) -> None:
    from .datasets import save_split_csv

    save_split_csv(path, Batch(fm.features, fm.labels))


def load_feature_csv(path) -> FeatureMatrix:
    from .datasets import load_split_csv

    batch = load_split_csv(path)
    return FeatureMatrix(batch.inputs, batch.labels, int(batch.labels.max()) + 1)
