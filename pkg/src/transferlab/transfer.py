"""Model surgery and learning-rate cartography.

Checkpoint file layout (all integers little-endian):

    offset 0   magic b"NBTL"
    offset 4   format version, uint32 (currently 1)
    offset 8   header length H, uint32
    offset 12  header, H bytes of canonical JSON (sorted keys):
                 {"meta": {...str->str...},
                  "payload_len": int,
                  "payload_sha256": hex digest,
                  "spec": {...NetworkSpec...}}
    offset 12+H  payload: per block, weights (row-major float64 LE)
                 then bias, in block order

The digest covers the whole payload, so any flipped byte is detected at
load time. Loading never returns a partially-decoded checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, PlanError, VersionError
from .nn import Block, NetworkSpec, ParamSet, init_params, with_n_classes

CHECKPOINT_MAGIC = b"NBTL"
CHECKPOINT_VERSION = 1

_HEADER_FMT = "<4sII"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)


@dataclass
class Checkpoint:
    """A trained model plus free-form provenance tags."""

    spec: NetworkSpec
    params: ParamSet
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.params.validate_against(self.spec)
        for k, v in self.meta.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise FormatError(f"meta entries must be str -> str, got {k!r}: {v!r}")


def _payload_bytes(params: ParamSet) -> bytes:
    chunks = []
    for block in params:
        chunks.append(np.ascontiguousarray(block.weights, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(block.bias, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    payload = _payload_bytes(checkpoint.params)
    header = json.dumps(
        {
            "meta": checkpoint.meta,
            "payload_len": len(payload),
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
            "spec": checkpoint.spec.to_dict(),
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack(_HEADER_FMT, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER_SIZE:
        raise FormatError("truncated checkpoint header", offset=len(data))
    magic, version, header_len = struct.unpack_from(_HEADER_FMT, data)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
    if version != CHECKPOINT_VERSION:
        raise VersionError(
            f"unsupported checkpoint version {version}, supported: {CHECKPOINT_VERSION}",
            offset=4,
        )
    header_end = _HEADER_SIZE + header_len
    if len(data) < header_end:
        raise FormatError("truncated checkpoint: header runs past end of file", offset=len(data))
    try:
        header = json.loads(data[_HEADER_SIZE:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}", offset=_HEADER_SIZE) from exc
    try:
        spec = NetworkSpec.from_dict(header["spec"])
        meta = dict(header["meta"])
        payload_len = int(header["payload_len"])
        payload_sha256 = str(header["payload_sha256"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"header missing or malformed field: {exc}", offset=_HEADER_SIZE) from exc

    payload = data[header_end:]
    if len(payload) != payload_len:
        raise FormatError(
            f"payload length {len(payload)} != declared {payload_len}",
            offset=header_end + min(len(payload), payload_len),
        )
    if hashlib.sha256(payload).hexdigest() != payload_sha256:
        raise FormatError("payload digest mismatch (corrupted checkpoint)", offset=header_end)

    blocks = []
    cursor = 0
    for (w_shape, b_shape) in spec.block_shapes():
        w_count = w_shape[0] * w_shape[1]
        w = np.frombuffer(payload, dtype="<f8", count=w_count, offset=cursor * 8)
        cursor += w_count
        b = np.frombuffer(payload, dtype="<f8", count=b_shape[0], offset=cursor * 8)
        cursor += b_shape[0]
        blocks.append(Block(w.reshape(w_shape).copy(), b.copy()))
    if cursor * 8 != payload_len:
        raise FormatError(
            f"payload holds {payload_len} bytes, spec needs {cursor * 8}",
            offset=header_end,
        )
    return Checkpoint(spec=spec, params=ParamSet(tuple(blocks)), meta=meta)


def reinit_top_layers(
    checkpoint: Checkpoint, k: int, seed: int, n_classes: int | None = None
) -> ParamSet:
    """Replace the top ``k`` blocks with fresh He-normal draws.

    The lowest ``n_blocks - k`` blocks are copied bit-exactly from the
    checkpoint. ``n_classes`` reshapes the classifier for a new target task;
    it defaults to the checkpoint's own class count. ``k`` must be at least
    1: the classifier is always reinitialized, since target class counts
    rarely match the source's.
    """
    n_blocks = checkpoint.spec.n_blocks
    if k < 1:
        raise PlanError("k must be >= 1: the final classification block is always reinitialized")
    if k > n_blocks:
        raise PlanError(f"k={k} exceeds the {n_blocks} available blocks")
    target = (
        checkpoint.spec
        if n_classes is None or n_classes == checkpoint.spec.n_classes
        else with_n_classes(checkpoint.spec, n_classes)
    )
    fresh = init_params(target, seed)
    keep = n_blocks - k
    blocks = tuple(checkpoint.params[i].copy() for i in range(keep)) + tuple(
        fresh[i] for i in range(keep, n_blocks)
    )
    return ParamSet(blocks)


@dataclass(frozen=True)
class FineTunePlan:
    """One non-binary fine-tuning configuration.

    reinit_count      how many top blocks are freshly initialized (>= 1)
    high_lr           learning rate for upper / reinitialized blocks
    low_lr            learning rate for the lowest ``low_layer_count`` blocks
                      (0 freezes them)
    low_layer_count   how many lower blocks run at low_lr
    fc_lr             optional override for the final classification block
    l2sp_layer_count  how many lower blocks are anchored to their pre-trained
                      values (plain decay elsewhere)
    alpha, beta       anchored / plain decay strengths
    """

    reinit_count: int = 1
    high_lr: float = 0.01
    low_lr: float = 0.0
    low_layer_count: int = 0
    fc_lr: float | None = None
    l2sp_layer_count: int = 0
    alpha: float = 0.0
    beta: float = 0.0

    def to_dict(self) -> dict:
        return {
            "reinit_count": self.reinit_count,
            "high_lr": self.high_lr,
            "low_lr": self.low_lr,
            "low_layer_count": self.low_layer_count,
            "fc_lr": self.fc_lr,
            "l2sp_layer_count": self.l2sp_layer_count,
            "alpha": self.alpha,
            "beta": self.beta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FineTunePlan":
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise PlanError(f"unknown plan fields: {sorted(unknown)}")
        plan = cls(**known)
        return cls(
            reinit_count=int(plan.reinit_count),
            high_lr=float(plan.high_lr),
            low_lr=float(plan.low_lr),
            low_layer_count=int(plan.low_layer_count),
            fc_lr=None if plan.fc_lr is None else float(plan.fc_lr),
            l2sp_layer_count=int(plan.l2sp_layer_count),
            alpha=float(plan.alpha),
            beta=float(plan.beta),
        )


def validate_plan(plan: FineTunePlan, n_blocks: int) -> list[str]:
    """All invariant violations, with the offending fields named. Never raises."""
    v = []
    if plan.reinit_count < 1:
        v.append(f"reinit_count={plan.reinit_count} must be >= 1 (classifier is always reinitialized)")
    if plan.reinit_count > n_blocks:
        v.append(f"reinit_count={plan.reinit_count} exceeds n_blocks={n_blocks}")
    transferred = n_blocks - plan.reinit_count
    if plan.low_layer_count < 0:
        v.append(f"low_layer_count={plan.low_layer_count} must be >= 0")
    elif plan.reinit_count <= n_blocks and plan.low_layer_count > transferred:
        v.append(
            f"low_layer_count={plan.low_layer_count} overlaps the reinitialized region: "
            f"at most n_blocks-reinit_count={transferred} blocks may use low_lr"
        )
    if plan.l2sp_layer_count < 0:
        v.append(f"l2sp_layer_count={plan.l2sp_layer_count} must be >= 0")
    elif plan.reinit_count <= n_blocks and plan.l2sp_layer_count > transferred:
        v.append(
            f"l2sp_layer_count={plan.l2sp_layer_count} exceeds n_blocks-reinit_count="
            f"{transferred}: anchors exist only for transferred blocks"
        )
    if not (math.isfinite(plan.high_lr) and plan.high_lr > 0):
        v.append(f"high_lr={plan.high_lr} must be finite and > 0")
    if not (math.isfinite(plan.low_lr) and plan.low_lr >= 0):
        v.append(f"low_lr={plan.low_lr} must be finite and >= 0")
    if plan.fc_lr is not None and not (math.isfinite(plan.fc_lr) and plan.fc_lr > 0):
        v.append(f"fc_lr={plan.fc_lr} must be finite and > 0 when set")
    if not (math.isfinite(plan.alpha) and plan.alpha >= 0):
        v.append(f"alpha={plan.alpha} must be finite and >= 0")
    if not (math.isfinite(plan.beta) and plan.beta >= 0):
        v.append(f"beta={plan.beta} must be finite and >= 0")
    return v


def build_lr_map(plan: FineTunePlan, n_blocks: int) -> tuple[float, ...]:
    """Per-block learning rates: low_lr on the bottom, high_lr above,
    optional fc_lr override for the classifier. low_lr=0 freezes blocks."""
    violations = validate_plan(plan, n_blocks)
    if violations:
        raise PlanError("; ".join(violations))
    rates = [plan.high_lr] * n_blocks
    for i in range(plan.low_layer_count):
        rates[i] = plan.low_lr
    if plan.fc_lr is not None:
        rates[-1] = plan.fc_lr
    return tuple(rates)
