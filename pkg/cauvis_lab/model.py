"""
Desk-scale classifier: frozen patch embedding, zero or more Cauvis layers and a linear head.

Every pixel of an h x w image becomes one token built from its circularly padded patch x patch
neighbourhood and embedded by a frozen linear map. A batch of B images is stacked as (B*n) x d rows.
A Cauvis model classifies its causal features, the high-pass part of the last-layer tokens, unless the
config asks for the full readout; the baseline always reads the raw embedded tokens.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics
from .adapter import AdapterConfig, CauvisLayer
from .autograd import Parameter, Tape, Var
from .cap import CapOutput, PromptBank, tail_energy_ratio
from .causal import record_causal_loss
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ShapeError
from .numerics import FrequencyMask
from .optim import TrainConfig
from .seeding import INIT, make_rng
from .types import ModelKind, Readout

N_CLASSES = 2


def patch_tokens(pixels: np.ndarray, patch: int) -> np.ndarray:
    """(B, h, w) images to (B*h*w, patch^2) neighbourhood rows with circular padding."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 3:
        raise ShapeError(f'pixels must be (B, h, w), got shape {pixels.shape}')
    r = patch // 2
    offsets = [(di, dj) for di in range(-r, r + 1) for dj in range(-r, r + 1)]
    cols = [np.roll(pixels, (-di, -dj), axis=(1, 2)) for di, dj in offsets]
    return np.stack(cols, axis=-1).reshape(-1, patch * patch)


@dataclass
class ForwardTrace:
    x0: Var
    x_last: Var
    logits: Var
    caps: list[CapOutput]


@dataclass
class CauvisClassifier:
    kind: ModelKind
    config: AdapterConfig
    embedding: Parameter
    layers: list[CauvisLayer]
    head_w: Parameter
    head_b: Parameter

    @classmethod
    def create(cls, kind: ModelKind, config: AdapterConfig, seed: int) -> 'CauvisClassifier':
        """
        Initialise a model from `seed`.

        The baseline shares the embedding draw with a Cauvis model of the same seed. The head starts at
        zero so an untrained model predicts a single class. With `shared_prompts` every layer attends to
        one bank drawn from its own stream.
        """
        kind = ModelKind(kind)
        rng = make_rng(seed, INIT)
        p2, d = config.patch**2, config.embed_dim
        embedding = Parameter('embedding', rng.normal(0.0, 1.0 / math.sqrt(p2), size=(p2, d)), trainable=False)
        layers = []
        if kind == ModelKind.CAUVIS:
            shared = None
            if config.shared_prompts:
                shared = PromptBank.create(config.prompt_tokens, d, config.prompt_init, make_rng(seed, INIT, 0))
            layers = [
                CauvisLayer.create(config, make_rng(seed, INIT, i + 1), i, shared) for i in range(config.num_layers)
            ]
        head_w = Parameter('head_w', np.zeros((config.n_tokens * d, N_CLASSES)))
        head_b = Parameter('head_b', np.zeros((1, N_CLASSES)))
        return cls(kind, config, embedding, layers, head_w, head_b)

    def parameters(self) -> list[Parameter]:
        """Every parameter once, sorted by id; a shared prompt bank appears a single time."""
        params = {p.id: p for p in (self.embedding, self.head_w, self.head_b)}
        for layer in self.layers:
            params.update((p.id, p) for p in layer.parameters())
        return [params[k] for k in sorted(params)]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def lr_scales(self, train_cfg: TrainConfig) -> dict[str, float]:
        return {bank.tokens.id: train_cfg.prompt_lr_scale for bank in self.prompt_banks()}

    def prompt_banks(self) -> list[PromptBank]:
        banks: list[PromptBank] = []
        for layer in self.layers:
            if all(layer.prompts is not b for b in banks):
                banks.append(layer.prompts)
        return banks

    @property
    def highpass(self) -> FrequencyMask:
        return numerics.make_highpass(self.config.h, self.config.w, self.config.cutoff)

    @property
    def causal_readout(self) -> bool:
        return bool(self.layers) and self.config.readout == Readout.CAUSAL

    def _check_pixels(self, pixels) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = pixels[None]
        if pixels.ndim != 3 or pixels.shape[1:] != (self.config.h, self.config.w):
            raise ShapeError(f'expected (B, {self.config.h}, {self.config.w}) pixels, got {pixels.shape}')
        return pixels

    def embed(self, pixels) -> np.ndarray:
        pixels = self._check_pixels(pixels)
        return patch_tokens(pixels, self.config.patch) @ self.embedding.value

    def record(self, tape: Tape, pixels, lambda_tail: float = 0.0) -> ForwardTrace:
        pixels = self._check_pixels(pixels)
        batch = pixels.shape[0]
        x0 = tape.const(patch_tokens(pixels, self.config.patch)) @ tape.param(self.embedding)
        x, caps = x0, []
        for layer in self.layers:
            out = layer.record(tape, x, batch, lambda_tail)
            x = out.x_next
            caps.append(out.cap)
        read = x
        if self.causal_readout:
            read = tape.spectral_filter(x, self.highpass, self.config.h, self.config.w)
        flat = tape.reshape(read, batch, self.config.n_tokens * self.config.embed_dim)
        logits = tape.add_row(flat @ tape.param(self.head_w), tape.param(self.head_b))
        return ForwardTrace(x0, x, logits, caps)

    def objective(self, tape: Tape, pixels, labels, train_cfg: TrainConfig) -> Var:
        """Cross-entropy plus the tail penalty of every layer plus the weighted joint causal loss."""
        trace = self.record(tape, pixels, train_cfg.lambda_tail)
        loss = tape.cross_entropy(trace.logits, labels)
        for cap in trace.caps:
            loss = loss + cap.penalty
        if self.layers and train_cfg.lambda_causal > 0:
            causal = record_causal_loss(
                tape,
                trace.x_last,
                trace.x0,
                self.highpass,
                self.config.h,
                self.config.w,
                groups=len(labels),
                lambda_inv=train_cfg.lambda_inv,
            )
            loss = loss + tape.scale(causal, train_cfg.lambda_causal)
        return loss

    def logits(self, pixels) -> np.ndarray:
        return self.record(Tape(), pixels).logits.value

    def predict(self, pixels) -> np.ndarray:
        return np.argmax(self.logits(pixels), axis=1)

    def features(self, pixels) -> np.ndarray:
        """Last-layer token features, (B*n) x d."""
        return self.record(Tape(), pixels).x_last.value

    def spectra(self, pixels) -> list[np.ndarray]:
        """
        Per-layer singular values of the attention scores, averaged over the images in `pixels`.

        Layers that add prompts without cross-attention have no scores and are left out.
        """
        trace = self.record(Tape(), pixels)
        return [np.mean([s for _, s, _ in cap.spectra], axis=0) for cap in trace.caps if cap.spectra]

    def tail_energy(self, pixels) -> float:
        """Mean tail-energy ratio over layers and images; 0 when there are no attention scores."""
        trace = self.record(Tape(), pixels)
        ratios = [tail_energy_ratio(s, k) for cap in trace.caps for (_, s, _), k in zip(cap.spectra, cap.ranks)]
        return float(np.mean(ratios)) if ratios else 0.0

    def prompt_matrix(self) -> np.ndarray:
        """All distinct prompt banks stacked vertically; empty for the baseline."""
        banks = self.prompt_banks()
        if not banks:
            return np.zeros((0, self.config.embed_dim))
        return np.vstack([bank.tokens.value for bank in banks])

    def causal_feature_fn(self, pixels) -> Callable[[np.ndarray], np.ndarray]:
        """f(P) = high-pass of the last-layer features with the stacked prompts replaced by P."""
        pixels = self._check_pixels(pixels)
        mask, h, w = self.highpass, self.config.h, self.config.w
        banks = self.prompt_banks()

        def f(prompts: np.ndarray) -> np.ndarray:
            saved = [bank.tokens.value for bank in banks]
            try:
                offset = 0
                for bank in banks:
                    bank.tokens.value = np.asarray(prompts[offset : offset + bank.t], dtype=np.float64)
                    offset += bank.t
                return numerics.filter_grid(self.features(pixels), mask, h, w)
            finally:
                for bank, value in zip(banks, saved):
                    bank.tokens.value = value

        return f

    def checkpoint_config(self) -> dict:
        return {'kind': self.kind.value, 'adapter': self.config.model_dump(mode='json')}

    def save(self, out_dir: Path | str, step: int, extra: dict | None = None) -> Path:
        return save_checkpoint(out_dir, self.parameters(), {**self.checkpoint_config(), **(extra or {})}, step)

    @classmethod
    def load(cls, ckpt_dir: Path | str) -> 'CauvisClassifier':
        manifest, params = load_checkpoint(ckpt_dir)
        try:
            kind = ModelKind(manifest.config['kind'])
            config = AdapterConfig.model_validate(manifest.config['adapter'])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f'checkpoint {ckpt_dir} has no usable model config: {exc}') from exc
        model = cls.create(kind, config, seed=0)
        for p in model.parameters():
            if p.id not in params:
                raise ConfigError(f'checkpoint {ckpt_dir} is missing parameter {p.id}')
            if params[p.id].shape != p.shape:
                raise ShapeError(f'{p.id}: checkpoint holds {params[p.id].shape}, model expects {p.shape}')
            p.value = params[p.id].value
        return model
