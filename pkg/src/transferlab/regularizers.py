"""Per-block weight-decay penalties mixing anchored and plain decay.

A block is either decayed toward a stored anchor (its pre-trained values),
decayed toward zero, or left unpenalized. Anchored blocks must form a
contiguous prefix of the block list: the lower, more general layers are the
ones worth pulling back to their starting point, while upper layers are
free to specialize.

Penalty: alpha/2 * sum over anchored blocks of ||w - w0||^2
       + beta/2  * sum over plain blocks of ||w||^2

Biases participate with their block's mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import PlanError, ShapeError
from .nn import Block, ParamSet


class RegMode(Enum):
    ANCHORED_SP = "anchored_sp"
    PLAIN_L2 = "plain_l2"
    NONE = "none"


@dataclass
class RegPlan:
    """Per-block regularization modes plus the two strength knobs."""

    modes: tuple[RegMode, ...]
    alpha: float
    beta: float
    anchors: ParamSet | None = None

    def __post_init__(self):
        self.modes = tuple(self.modes)
        for name, value in (("alpha", self.alpha), ("beta", self.beta)):
            if not math.isfinite(value) or value < 0.0:
                raise PlanError(f"{name} must be finite and >= 0, got {value}")
        anchored = [i for i, m in enumerate(self.modes) if m is RegMode.ANCHORED_SP]
        if anchored != list(range(len(anchored))):
            raise PlanError(
                f"anchored blocks must form a contiguous prefix, got indices {anchored}"
            )
        if anchored and self.anchors is None:
            raise PlanError("anchored blocks require anchors")
        if not anchored:
            self.anchors = None

    @property
    def n_anchored(self) -> int:
        return sum(1 for m in self.modes if m is RegMode.ANCHORED_SP)


def make_reg_plan(
    n_blocks: int,
    l2sp_count: int,
    alpha: float,
    beta: float,
    anchors: ParamSet | None = None,
) -> RegPlan:
    """Anchored decay on the lowest ``l2sp_count`` blocks, plain decay above."""
    if not 0 <= l2sp_count <= n_blocks:
        raise PlanError(f"l2sp_count must lie in [0, {n_blocks}], got {l2sp_count}")
    if l2sp_count > 0 and anchors is None:
        raise PlanError(f"l2sp_count={l2sp_count} requires anchors")
    modes = tuple(
        RegMode.ANCHORED_SP if i < l2sp_count else RegMode.PLAIN_L2
        for i in range(n_blocks)
    )
    return RegPlan(modes=modes, alpha=alpha, beta=beta, anchors=anchors)


def _check_shapes(params: ParamSet, plan: RegPlan) -> None:
    if len(plan.modes) != params.n_blocks:
        raise ShapeError(
            f"plan covers {len(plan.modes)} blocks, params have {params.n_blocks}"
        )
    for i in range(plan.n_anchored):
        anchor = plan.anchors[i]
        block = params[i]
        if (
            anchor.weights.shape != block.weights.shape
            or anchor.bias.shape != block.bias.shape
        ):
            raise ShapeError(
                f"anchor for block {i} has shape {anchor.weights.shape}, "
                f"params have {block.weights.shape}"
            )


def reg_penalty(params: ParamSet, plan: RegPlan) -> float:
    """Total penalty; zero exactly when anchored blocks sit at their anchors
    and plain blocks are all zero."""
    _check_shapes(params, plan)
    total = 0.0
    for i, mode in enumerate(plan.modes):
        block = params[i]
        if mode is RegMode.ANCHORED_SP:
            anchor = plan.anchors[i]
            dw = block.weights - anchor.weights
            db = block.bias - anchor.bias
            total += 0.5 * plan.alpha * (float(np.sum(dw * dw)) + float(np.sum(db * db)))
        elif mode is RegMode.PLAIN_L2:
            total += 0.5 * plan.beta * (
                float(np.sum(block.weights * block.weights))
                + float(np.sum(block.bias * block.bias))
            )
    return total


def reg_grad(params: ParamSet, plan: RegPlan) -> ParamSet:
    """Analytic gradient of reg_penalty: alpha*(w - w0), beta*w, or zero per block."""
    _check_shapes(params, plan)
    grads = []
    for i, mode in enumerate(plan.modes):
        block = params[i]
        if mode is RegMode.ANCHORED_SP:
            anchor = plan.anchors[i]
            grads.append(
                Block(
                    plan.alpha * (block.weights - anchor.weights),
                    plan.alpha * (block.bias - anchor.bias),
                )
            )
        elif mode is RegMode.PLAIN_L2:
            grads.append(Block(plan.beta * block.weights, plan.beta * block.bias))
        else:
            grads.append(Block(np.zeros_like(block.weights), np.zeros_like(block.bias)))
    return ParamSet(tuple(grads))
