"""Training configuration and the AdamW update."""

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .autograd import Parameter


class TrainConfig(BaseModel):
    """Optimiser and objective settings. Defaults follow the AdamW recipe used for full-size backbones."""

    model_config = ConfigDict(extra='forbid')

    learning_rate: float = Field(1e-4, gt=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(1e-4, ge=0)
    lambda_tail: float = Field(1e-2, ge=0, description='weight of the tail singular-value penalty')
    lambda_inv: float = Field(0.1, ge=0, description='weight of the invariance term inside the joint loss')
    lambda_causal: float = Field(0.0, ge=0, description='weight of the joint causal loss in the objective')
    # Multiplier on the learning rate of prompt tokens; 0.1 gives the reduced-rate variant
    prompt_lr_scale: float = Field(1.0, gt=0)
    seed: int = 0
    epochs: int = Field(10, ge=0)
    batch_size: int = Field(32, ge=1)
    num_probes: int = Field(4, ge=1)
    probe_eps: float = Field(1e-4, gt=0)


@dataclass
class AdamWState:
    """First and second moment estimates keyed by parameter id."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Sequence[Parameter],
    grads: Mapping[str, np.ndarray],
    config: TrainConfig,
    step_index: int,
    state: AdamWState | None = None,
    lr_scales: Mapping[str, float] | None = None,
) -> AdamWState:
    """
    Apply one AdamW update in place, visiting parameters in ascending id order.

    Weight decay is decoupled from the moment estimates; both moments are bias-corrected by
    `step_index` (1-based). Returns the updated moment state.
    """
    if step_index < 1:
        raise ValueError('step_index starts at 1')
    state = state or AdamWState()
    lr_scales = lr_scales or {}
    c1 = 1.0 - config.beta1**step_index
    c2 = 1.0 - config.beta2**step_index
    for p in sorted(params, key=lambda q: q.id):
        if not p.trainable:
            continue
        g = grads.get(p.id)
        if g is None:
            g = np.zeros_like(p.value)
        lr = config.learning_rate * lr_scales.get(p.id, 1.0)
        m = state.m.get(p.id, np.zeros_like(p.value))
        v = state.v.get(p.id, np.zeros_like(p.value))
        m = config.beta1 * m + (1.0 - config.beta1) * g
        v = config.beta2 * v + (1.0 - config.beta2) * g * g
        state.m[p.id], state.v[p.id] = m, v
        value = p.value * (1.0 - lr * config.weight_decay)
        p.value = value - lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return state
