"""
Dual-branch adapter and the composed Cauvis layer.

The causal branch is a two-layer sigmoid MLP over the cross-attended prompt activations; its output in
(0, 1) gates the attention update. The auxiliary branch squeezes features through a D -> D/16 -> D
bottleneck, squashes them and keeps only the high spatial frequencies of every channel. A learnable
ratio s(alpha) fuses the frozen features with the prompted ones:

    x_next = x + s(alpha) * ((x + y * dx + aux(x)) - x)

With zero prompts and a zero up-projection both added terms are exactly zero, so the layer starts as
the identity whatever alpha is.

`AdapterConfig` also carries the ablation switches: the Fourier branch may use an all-pass mask or skip
the transform, cross-attention may be replaced by adding prompts to tokens, the dual-branch adapter may
be dropped so the raw update is fused, and stacked layers may share one prompt bank.
"""

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import numerics
from .autograd import Parameter, Tape, Var, sigmoid
from .cap import CapOutput, ProjectionWeights, PromptBank, record_cap, record_prompt_add
from .errors import ShapeError
from .numerics import FrequencyMask
from .types import AuxFilter, AuxOrder, Mode, PromptInit, Readout


class AdapterConfig(BaseModel):
    """Shape and behaviour of the Cauvis layers."""

    model_config = ConfigDict(extra='forbid')

    embed_dim: int = Field(32, ge=1)
    # Prompt count; 'seq' uses one prompt per token
    prompt_len: int | Literal['seq'] = 100
    rank_k: int | None = Field(None, ge=0, description='causal rank; None picks the 90% energy rank')
    cutoff: float = Field(0.25, ge=0, le=1)
    h: int = Field(16, ge=1)
    w: int = Field(16, ge=1)
    fusion_init: float = 0.0
    mode: Mode = Mode.FULL
    prompt_init: PromptInit = PromptInit.ZEROS
    aux_order: AuxOrder = AuxOrder.REPLACE
    num_layers: int = Field(1, ge=1, le=2)
    patch: int = Field(3, ge=1)
    readout: Readout = Readout.CAUSAL

    # Ablation switches
    aux_filter: AuxFilter = AuxFilter.HIGHPASS
    cross_attention: bool = True
    dual_branch: bool = True
    shared_prompts: bool = False

    @model_validator(mode='after')
    def _check_prompt_len(self):
        if isinstance(self.prompt_len, int) and self.prompt_len < 1:
            raise ValueError('prompt_len must be >= 1')
        if self.patch % 2 == 0:
            raise ValueError('patch must be odd')
        return self

    @property
    def n_tokens(self) -> int:
        return self.h * self.w

    @property
    def prompt_tokens(self) -> int:
        return self.n_tokens if self.prompt_len == 'seq' else self.prompt_len

    @property
    def bottleneck(self) -> int:
        return bottleneck_width(self.embed_dim)


def bottleneck_width(channels: int) -> int:
    return max(1, math.ceil(channels / 16))


@dataclass
class CausalBranchParams:
    """Two-layer MLP d -> d -> d with sigmoid activations."""

    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    def __post_init__(self):
        d = self.w1.shape[0]
        if self.w1.shape != (d, d) or self.w2.shape != (d, d) or self.b1.shape != (1, d) or self.b2.shape != (1, d):
            raise ShapeError('causal branch weights must be d x d with 1 x d biases')

    @classmethod
    def create(cls, d: int, rng: np.random.Generator | None = None, prefix: str = '') -> 'CausalBranchParams':
        """Zero weights when `rng` is None, otherwise small Gaussian weights."""

        def draw(name, shape):
            value = np.zeros(shape) if rng is None else rng.normal(0.0, 1.0 / math.sqrt(d), size=shape)
            return Parameter(f'{prefix}{name}', value)

        return cls(
            draw('causal_w1', (d, d)), draw('causal_b1', (1, d)), draw('causal_w2', (d, d)), draw('causal_b2', (1, d))
        )

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class AuxBranchParams:
    """Bottleneck projections and the high-pass mask of the Fourier branch."""

    w_down: Parameter
    w_up: Parameter
    mask: FrequencyMask

    def __post_init__(self):
        channels, r = self.w_down.shape
        if r != bottleneck_width(channels) or self.w_up.shape != (r, channels):
            raise ShapeError(f'bottleneck must be {channels}x{bottleneck_width(channels)} and back')

    @classmethod
    def create(
        cls, channels: int, mask: FrequencyMask, rng: np.random.Generator, prefix: str = ''
    ) -> 'AuxBranchParams':
        """Gaussian down-projection and zero up-projection, so the branch starts silent but trainable."""
        r = bottleneck_width(channels)
        w_down = Parameter(f'{prefix}aux_w_down', rng.normal(0.0, 1.0 / math.sqrt(channels), size=(channels, r)))
        return cls(w_down, Parameter(f'{prefix}aux_w_up', np.zeros((r, channels))), mask)

    def parameters(self) -> list[Parameter]:
        return [self.w_down, self.w_up]


@dataclass
class FusionState:
    """Unconstrained fusion logit; the applied ratio is logistic(alpha)."""

    alpha: Parameter

    @classmethod
    def create(cls, init: float = 0.0, prefix: str = '') -> 'FusionState':
        return cls(Parameter(f'{prefix}fusion_alpha', np.array([[init]])))

    @property
    def ratio(self) -> float:
        return float(sigmoid(self.alpha.value)[0, 0])


def record_causal_branch(tape: Tape, p_tilde: Var, params: CausalBranchParams) -> Var:
    hidden = tape.sigmoid(tape.add_row(p_tilde @ tape.param(params.w1), tape.param(params.b1)))
    return tape.sigmoid(tape.add_row(hidden @ tape.param(params.w2), tape.param(params.b2)))


def record_aux_branch(
    tape: Tape,
    x: Var,
    params: AuxBranchParams,
    h: int,
    w: int,
    order: AuxOrder,
    aux_filter: AuxFilter = AuxFilter.HIGHPASS,
) -> Var:
    """
    Bottleneck, sigmoid and per-channel spectral filter over the h x w grid of each stacked sample.

    Without the high-pass the squashed values are centred on 0.5, so a zero up-projection still gives
    exact zeros. `AuxFilter.NONE` skips the transform and returns the centred bottleneck directly.
    """
    if x.shape[0] % (h * w):
        raise ShapeError(f'{x.shape[0]} tokens do not fill {h}x{w} grids')
    squeezed = tape.sigmoid(x @ tape.param(params.w_down) @ tape.param(params.w_up))
    if aux_filter != AuxFilter.HIGHPASS:
        squeezed = squeezed - tape.const(np.full(squeezed.shape, 0.5))
    if order == AuxOrder.RESIDUAL:
        squeezed = x + squeezed
    if aux_filter == AuxFilter.NONE:
        return squeezed
    return tape.spectral_filter(squeezed, params.mask, h, w)


def record_fuse(tape: Tape, base: Var, prompt_feat: Var, fusion: FusionState) -> Var:
    return base + tape.scale_by(prompt_feat - base, tape.sigmoid(tape.param(fusion.alpha)))


def causal_branch(p_tilde, params: CausalBranchParams) -> np.ndarray:
    """y = sigmoid(MLP(p_tilde)), every entry in (0, 1)."""
    p_tilde = numerics.as_matrix(p_tilde, 'p_tilde')
    if p_tilde.shape[1] != params.w1.shape[0]:
        raise ShapeError(f'activations {p_tilde.shape} do not fit a {params.w1.shape[0]}-wide branch')
    tape = Tape()
    return record_causal_branch(tape, tape.const(p_tilde), params).value


def aux_branch(
    x,
    params: AuxBranchParams,
    h: int,
    w: int,
    order: AuxOrder = AuxOrder.REPLACE,
    aux_filter: AuxFilter = AuxFilter.HIGHPASS,
) -> np.ndarray:
    """Fourier branch on one sample of n = h*w tokens."""
    x = numerics.as_matrix(x, 'x')
    if x.shape[0] != h * w:
        raise ShapeError(f'{x.shape[0]} tokens do not form a {h}x{w} grid')
    if x.shape[1] != params.w_down.shape[0]:
        raise ShapeError(f'{x.shape[1]} channels do not fit a {params.w_down.shape[0]}-channel bottleneck')
    tape = Tape()
    return record_aux_branch(tape, tape.const(x), params, h, w, order, aux_filter).value


def fuse(base, prompt_feat, fusion: FusionState) -> np.ndarray:
    """(1 - s) * base + s * prompt_feat with s = logistic(alpha), evaluated as base + s * (prompt_feat - base)."""
    base, prompt_feat = numerics.as_matrix(base, 'base'), numerics.as_matrix(prompt_feat, 'prompt_feat')
    if base.shape != prompt_feat.shape:
        raise ShapeError(f'cannot fuse {base.shape} with {prompt_feat.shape}')
    tape = Tape()
    return record_fuse(tape, tape.const(base), tape.const(prompt_feat), fusion).value


@dataclass
class LayerOutput:
    x_next: Var
    cap: CapOutput


@dataclass
class CauvisLayer:
    """
    Parameters of one Cauvis layer plus the configuration that wires them.

    Ablated parts are None: `proj` without cross-attention, `causal` and `aux` without the dual-branch
    adapter.
    """

    prompts: PromptBank
    proj: ProjectionWeights | None
    causal: CausalBranchParams | None
    aux: AuxBranchParams | None
    fusion: FusionState
    config: AdapterConfig

    @classmethod
    def create(
        cls, config: AdapterConfig, rng: np.random.Generator, index: int = 0, prompts: PromptBank | None = None
    ) -> 'CauvisLayer':
        """
        Documented initialisation: zero (or random) prompts, zero causal MLP, silent Fourier branch.

        A `prompts` bank passed in is shared as is and nothing is drawn for it.
        """
        prefix = f'layer{index}.'
        d = config.embed_dim
        if prompts is None:
            prompts = PromptBank.create(config.prompt_tokens, d, config.prompt_init, rng, prefix)
        proj = ProjectionWeights.create(d, rng, prefix) if config.cross_attention else None
        causal, aux = None, None
        if config.dual_branch:
            if config.aux_filter == AuxFilter.HIGHPASS:
                mask = numerics.make_highpass(config.h, config.w, config.cutoff)
            else:
                mask = numerics.all_pass(config.h, config.w)
            causal = CausalBranchParams.create(d, None, prefix)
            aux = AuxBranchParams.create(d, mask, rng, prefix)
        return cls(prompts, proj, causal, aux, FusionState.create(config.fusion_init, prefix), config)

    def parameters(self) -> list[Parameter]:
        params = [self.prompts.tokens]
        for part in (self.proj, self.causal, self.aux):
            if part is not None:
                params.extend(part.parameters())
        return [*params, self.fusion.alpha]

    def record(self, tape: Tape, x: Var, groups: int, lambda_tail: float) -> LayerOutput:
        """Record the layer on `groups` samples stacked along the rows of `x`."""
        cfg = self.config
        if cfg.cross_attention:
            cap = record_cap(tape, x, self.prompts, self.proj, [cfg.rank_k], cfg.mode, groups, lambda_tail)
        else:
            cap = record_prompt_add(tape, x, self.prompts, groups)
        if not cfg.dual_branch:
            return LayerOutput(record_fuse(tape, x, x + cap.delta, self.fusion), cap)
        gate = record_causal_branch(tape, cap.delta, self.causal)
        aux = record_aux_branch(tape, x, self.aux, cfg.h, cfg.w, cfg.aux_order, cfg.aux_filter)
        prompt_feat = x + gate * cap.delta + aux
        return LayerOutput(record_fuse(tape, x, prompt_feat, self.fusion), cap)


def cauvis_layer_forward(x, layer: CauvisLayer) -> np.ndarray:
    """Apply one Cauvis layer to a single sample of n = h*w tokens."""
    x = numerics.as_matrix(x, 'x')
    cfg = layer.config
    if x.shape != (cfg.n_tokens, cfg.embed_dim):
        raise ShapeError(f'expected {cfg.n_tokens}x{cfg.embed_dim} tokens, got {x.shape}')
    tape = Tape()
    return layer.record(tape, tape.const(x), groups=1, lambda_tail=0.0).x_next.value
