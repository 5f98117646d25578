"""Map suitability measures to a transfer regime and a pruned plan grid.

The decisive signal is the transfer gap (from-scratch minus fixed-feature
top-1). Negative gap means the pre-trained features already beat training
from scratch, so the weights are worth anchoring to; non-negative means
they fit poorly and the model should adapt freely. Fisher score and EMD
similarity are recorded in the rationale but never branch the decision:
the gap is the reliable predictor, the Fisher score is tentative, and EMD
similarity has shown no predictive value for hyperparameter choice.

Each regime prunes the plan grid differently:

  Anchored: learning rates from the lower half of the grid, 2-3 blocks
            reinitialized, uniform rate everywhere, most transferred
            blocks anchored to their pre-trained values.
  Adapted:  learning rates from the upper half, only the classifier
            reinitialized, lower blocks at a reduced rate, plain decay
            only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

from .errors import ConfigError
from .metrics import DomainMeasures
from .transfer import FineTunePlan, validate_plan

GAP_THRESHOLD = 0.0


class Regime(Enum):
    ANCHORED = "anchored"
    ADAPTED = "adapted"


def classify_regime(measures: DomainMeasures) -> Regime:
    """Pure step function of the gap: negative -> Anchored, else Adapted."""
    if measures.gap is None:
        raise ConfigError("measures are missing the transfer gap; it is the decisive signal")
    return Regime.ANCHORED if measures.gap < GAP_THRESHOLD else Regime.ADAPTED


def _check_grid(name: str, grid) -> tuple[float, ...]:
    values = tuple(float(v) for v in grid)
    if not values:
        raise ConfigError(f"{name} must not be empty")
    if list(values) != sorted(values):
        raise ConfigError(f"{name} must be sorted ascending, got {values}")
    return values


def _low_lr_for(high_lr: float, lr_grid: tuple[float, ...]) -> float:
    below = [v for v in lr_grid if v < high_lr]
    return below[-1] if below else 0.4 * high_lr


def propose_plans(
    regime: Regime,
    n_blocks: int,
    lr_grid,
    alpha_grid,
    beta_grid,
) -> list[FineTunePlan]:
    """Pruned plan candidates for one regime, deterministically ordered."""
    lr_grid = _check_grid("lr_grid", lr_grid)
    alpha_grid = _check_grid("alpha_grid", alpha_grid)
    beta_grid = _check_grid("beta_grid", beta_grid)
    if n_blocks < 2:
        raise ConfigError(f"n_blocks must be >= 2, got {n_blocks}")

    half = len(lr_grid) // 2
    lower_half = lr_grid[: half + len(lr_grid) % 2]
    upper_half = lr_grid[half:]

    plans = []
    if regime is Regime.ANCHORED:
        for k in (2, 3):
            transferred = n_blocks - k
            if transferred < 1:
                continue
            counts = sorted({transferred, (2 * transferred) // 3} - {0})
            for lr in lower_half:
                for count in counts:
                    for alpha in alpha_grid:
                        for beta in beta_grid:
                            plans.append(
                                FineTunePlan(
                                    reinit_count=k,
                                    high_lr=lr,
                                    l2sp_layer_count=count,
                                    alpha=alpha,
                                    beta=beta,
                                )
                            )
    else:
        low_counts = sorted({n_blocks // 2, (2 * n_blocks) // 3} - {0})
        for lr in upper_half:
            for count in low_counts:
                for beta in beta_grid:
                    plans.append(
                        FineTunePlan(
                            reinit_count=1,
                            high_lr=lr,
                            low_lr=_low_lr_for(lr, lr_grid),
                            low_layer_count=count,
                            beta=beta,
                        )
                    )

    plans = [p for p in plans if not validate_plan(p, n_blocks)]
    if not plans:
        raise ConfigError(
            f"no valid plans for regime {regime.value} with n_blocks={n_blocks}"
        )
    plans.sort(
        key=lambda p: (
            p.reinit_count,
            p.high_lr,
            p.l2sp_layer_count,
            p.low_layer_count,
            p.alpha,
            p.beta,
        )
    )
    return plans


@dataclass
class Recommendation:
    """Regime call plus the measures it was based on and the pruned grid."""

    regime: Regime
    rationale: dict
    plans: list[FineTunePlan]

    def to_dict(self) -> dict:
        return {
            "regime": self.regime.value,
            "rationale": self.rationale,
            "plans": [p.to_dict() for p in self.plans],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def recommend(
    measures: DomainMeasures,
    n_blocks: int,
    lr_grid,
    alpha_grid,
    beta_grid,
) -> Recommendation:
    regime = classify_regime(measures)
    rationale = {
        "gap": measures.gap,
        "gap_threshold": GAP_THRESHOLD,
        "rule": "gap < threshold -> anchored, else adapted",
        "advisory_fisher": measures.fisher,
        "advisory_emd_similarity": measures.emd_similarity,
    }
    plans = propose_plans(regime, n_blocks, lr_grid, alpha_grid, beta_grid)
    return Recommendation(regime=regime, rationale=rationale, plans=plans)
