"""Minimal dense feed-forward classifier with exact reverse-mode gradients.

The network is a stack of "blocks": hidden blocks apply ``x @ W + b``
followed by an elementwise activation, and the final block is linear and
feeds softmax cross-entropy. Blocks are indexed from 0 (nearest the input)
to ``n_blocks - 1`` (the classifier), which is the unit all per-layer
machinery in this package (reinitialization, learning-rate maps,
regularization modes) operates on.

Everything is float64. Given (spec, seed, batch), every output is
bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CacheError, LabelError, ShapeError

ACTIVATIONS = ("relu", "tanh")


def as_tensor2d(x, name: str = "array") -> np.ndarray:
    """Coerce to a C-contiguous 2-D float64 array, rejecting non-finite values."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description: input width, hidden block widths, class count."""

    input_dim: int
    block_dims: tuple[int, ...]
    n_classes: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "block_dims", tuple(int(d) for d in self.block_dims))
        if self.input_dim < 1:
            raise ShapeError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.n_classes < 1:
            raise ShapeError(f"n_classes must be >= 1, got {self.n_classes}")
        if len(self.block_dims) < 1:
            raise ShapeError("need at least one hidden block")
        if any(d < 1 for d in self.block_dims):
            raise ShapeError(f"all block widths must be >= 1, got {self.block_dims}")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def n_blocks(self) -> int:
        return len(self.block_dims) + 1

    def block_shapes(self) -> tuple[tuple[tuple[int, int], tuple[int]], ...]:
        """Per-block ((fan_in, fan_out), (fan_out,)) shapes for weights and bias."""
        fan_in = (self.input_dim, *self.block_dims)
        fan_out = (*self.block_dims, self.n_classes)
        return tuple(((i, o), (o,)) for i, o in zip(fan_in, fan_out))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "block_dims": list(self.block_dims),
            "n_classes": self.n_classes,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            block_dims=tuple(int(v) for v in d["block_dims"]),
            n_classes=int(d["n_classes"]),
            activation=str(d["activation"]),
        )


def with_n_classes(spec: NetworkSpec, n_classes: int) -> NetworkSpec:
    """Same architecture with a different classifier width."""
    return NetworkSpec(spec.input_dim, spec.block_dims, n_classes, spec.activation)


@dataclass
class Block:
    """One dense block: weight matrix (fan_in x fan_out) and bias vector."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = as_tensor2d(self.weights, "weights")
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.bias.ndim != 1:
            raise ShapeError(f"bias must be 1-D, got shape {self.bias.shape}")
        if not np.all(np.isfinite(self.bias)):
            raise ShapeError("bias contains non-finite values")
        if self.bias.shape[0] != self.weights.shape[1]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} != weight fan-out {self.weights.shape[1]}"
            )

    def copy(self) -> "Block":
        return Block(self.weights.copy(), self.bias.copy())


@dataclass
class ParamSet:
    """Ordered per-block parameters; also used for gradients of the same shape."""

    blocks: tuple[Block, ...]

    def __post_init__(self):
        self.blocks = tuple(self.blocks)
        if not self.blocks:
            raise ShapeError("ParamSet needs at least one block")

    def __iter__(self):
        return iter(self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def __getitem__(self, i: int) -> Block:
        return self.blocks[i]

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def copy(self) -> "ParamSet":
        return ParamSet(tuple(b.copy() for b in self.blocks))

    def n_params(self) -> int:
        return sum(b.weights.size + b.bias.size for b in self.blocks)

    def validate_against(self, spec: NetworkSpec) -> None:
        shapes = spec.block_shapes()
        if len(self.blocks) != len(shapes):
            raise ShapeError(
                f"param set has {len(self.blocks)} blocks, spec needs {len(shapes)}"
            )
        for i, (block, (w_shape, b_shape)) in enumerate(zip(self.blocks, shapes)):
            if block.weights.shape != w_shape or block.bias.shape != b_shape:
                raise ShapeError(
                    f"block {i}: weights {block.weights.shape}, bias {block.bias.shape} "
                    f"do not match spec {w_shape}, {b_shape}"
                )


@dataclass
class Batch:
    """Row-per-sample inputs with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = as_tensor2d(self.inputs, "inputs")
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise ShapeError(f"labels must be 1-D, got shape {self.labels.shape}")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"{self.inputs.shape[0]} input rows vs {self.labels.shape[0]} labels"
            )
        if self.inputs.shape[0] < 1:
            raise ShapeError("batch must contain at least one sample")
        if self.labels.size and self.labels.min() < 0:
            raise LabelError(f"negative label {self.labels.min()}")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


@dataclass
class ForwardCache:
    """Activations saved by forward() for the matching backward()."""

    inputs: np.ndarray
    pre_acts: tuple[np.ndarray, ...]
    post_acts: tuple[np.ndarray, ...]
    param_ids: tuple[int, ...]


def init_params(spec: NetworkSpec, seed: int) -> ParamSet:
    """He-normal weights (zero-mean, variance 2/fan_in), zero biases.

    Draws are consumed strictly in block order, so lower blocks receive the
    same values regardless of how later blocks are shaped.
    """
    rng = np.random.default_rng(seed)
    blocks = []
    for (w_shape, b_shape) in spec.block_shapes():
        std = math.sqrt(2.0 / w_shape[0])
        weights = rng.normal(0.0, std, size=w_shape)
        blocks.append(Block(weights, np.zeros(b_shape)))
    return ParamSet(tuple(blocks))


def forward(spec: NetworkSpec, params: ParamSet, batch: Batch) -> tuple[np.ndarray, ForwardCache]:
    """Run the network, returning logits (n x n_classes) and a backward cache."""
    params.validate_against(spec)
    if batch.inputs.shape[1] != spec.input_dim:
        raise ShapeError(
            f"batch width {batch.inputs.shape[1]} != spec input_dim {spec.input_dim}"
        )
    h = batch.inputs
    pre_acts = []
    post_acts = []
    last = spec.n_blocks - 1
    for i, block in enumerate(params):
        z = h @ block.weights + block.bias
        pre_acts.append(z)
        if i == last:
            h = z
        elif spec.activation == "relu":
            h = np.maximum(z, 0.0)
        else:
            h = np.tanh(z)
        post_acts.append(h)
    cache = ForwardCache(
        inputs=batch.inputs,
        pre_acts=tuple(pre_acts),
        post_acts=tuple(post_acts),
        param_ids=_param_ids(params),
    )
    return post_acts[-1], cache


def _param_ids(params: ParamSet) -> tuple[int, ...]:
    return tuple(id(a) for b in params for a in (b.weights, b.bias))


def loss_and_dlogits(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy averaged over the batch, and its logit gradient.

    Each row of the returned gradient sums to zero (softmax minus one-hot,
    divided by the batch size).
    """
    logits = as_tensor2d(logits, "logits")
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    n, n_classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match {n} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(
            f"labels must lie in [0, {n_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = float(-log_probs[np.arange(n), labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def backward(
    spec: NetworkSpec, params: ParamSet, cache: ForwardCache, dlogits: np.ndarray
) -> ParamSet:
    """Reverse-mode gradients of the loss w.r.t. every block's parameters."""
    params.validate_against(spec)
    if cache.param_ids != _param_ids(params):
        raise CacheError("cache does not come from a forward pass over these params")
    dlogits = as_tensor2d(dlogits, "dlogits")
    n = cache.inputs.shape[0]
    if dlogits.shape != (n, spec.n_classes):
        raise ShapeError(
            f"dlogits shape {dlogits.shape} != ({n}, {spec.n_classes})"
        )
    grads: list[Block | None] = [None] * spec.n_blocks
    delta = dlogits
    for i in range(spec.n_blocks - 1, -1, -1):
        block_in = cache.inputs if i == 0 else cache.post_acts[i - 1]
        g_w = block_in.T @ delta
        g_b = delta.sum(axis=0)
        grads[i] = Block(g_w, g_b)
        if i > 0:
            upstream = delta @ params[i].weights.T
            if spec.activation == "relu":
                delta = upstream * (cache.pre_acts[i - 1] > 0.0)
            else:
                post = cache.post_acts[i - 1]
                delta = upstream * (1.0 - post * post)
    return ParamSet(tuple(grads))


def batch_loss(spec: NetworkSpec, params: ParamSet, batch: Batch) -> float:
    """Data loss of the batch under the current parameters."""
    logits, _ = forward(spec, params, batch)
    loss, _ = loss_and_dlogits(logits, batch.labels)
    return loss


@dataclass
class FiniteDiffReport:
    """Per-block agreement between reverse-mode and central-difference gradients."""

    block_errors: tuple[float, ...]
    tol: float

    @property
    def block_passed(self) -> tuple[bool, ...]:
        return tuple(e < self.tol for e in self.block_errors)

    @property
    def all_passed(self) -> bool:
        return all(self.block_passed)


def finite_diff_check(
    spec: NetworkSpec,
    params: ParamSet,
    batch: Batch,
    tol: float = 1e-4,
    step: float = 1e-5,
) -> FiniteDiffReport:
    """Check reverse-mode gradients against central finite differences.

    The per-block error is the max absolute deviation between the two
    gradients, normalized by the larger of the two gradients' max
    magnitudes. Intended for small networks; cost is two forward passes
    per parameter.
    """
    logits, cache = forward(spec, params, batch)
    _, dlogits = loss_and_dlogits(logits, batch.labels)
    analytic = backward(spec, params, cache, dlogits)

    work = params.copy()
    errors = []
    for i in range(spec.n_blocks):
        block_err = 0.0
        scale = 0.0
        for arr, g_arr in (
            (work[i].weights, analytic[i].weights),
            (work[i].bias, analytic[i].bias),
        ):
            flat = arr.reshape(-1)
            g_flat = g_arr.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                up = batch_loss(spec, work, batch)
                flat[j] = orig - step
                down = batch_loss(spec, work, batch)
                flat[j] = orig
                fd = (up - down) / (2.0 * step)
                block_err = max(block_err, abs(fd - g_flat[j]))
                scale = max(scale, abs(fd), abs(g_flat[j]))
        errors.append(block_err / max(scale, 1e-12))
    return FiniteDiffReport(block_errors=tuple(errors), tol=tol)
