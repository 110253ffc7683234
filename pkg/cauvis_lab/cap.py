"""
Cross-attention prompts.

Image tokens X (n x d) query a bank of t learnable prompt tokens P. The pre-softmax score matrix
A = X W_q (P W_k)^T / sqrt(d) is split by its SVD into a causal part A_c (top-k singular triplets) and
a residual A_perp. The tail singular values are penalised so training, not a hard cutoff, decides the
effective rank.
"""

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from . import numerics
from .autograd import Parameter, Tape, Var
from .errors import ConfigError, NumericError, ShapeError
from .types import Mode, PromptInit

ENERGY_TARGET = 0.9


@dataclass
class PromptBank:
    """Learnable prompt tokens P (t x d)."""

    tokens: Parameter

    def __post_init__(self):
        if self.t < 1 or self.d < 1:
            raise ConfigError(f'prompt bank needs t, d >= 1, got {self.tokens.shape}')

    @property
    def t(self) -> int:
        return self.tokens.shape[0]

    @property
    def d(self) -> int:
        return self.tokens.shape[1]

    @classmethod
    def create(
        cls, t: int, d: int, init: PromptInit = PromptInit.ZEROS, rng: np.random.Generator = None, prefix: str = ''
    ) -> 'PromptBank':
        if t < 1 or d < 1:
            raise ConfigError(f'prompt bank needs t, d >= 1, got t={t}, d={d}')
        if init == PromptInit.ZEROS:
            value = np.zeros((t, d))
        else:
            value = rng.normal(0.0, 1.0 / math.sqrt(d), size=(t, d))
        return cls(Parameter(f'{prefix}prompts', value))


@dataclass
class ProjectionWeights:
    """Square query/key/value projections."""

    w_q: Parameter
    w_k: Parameter
    w_v: Parameter

    def __post_init__(self):
        shapes = {self.w_q.shape, self.w_k.shape, self.w_v.shape}
        if len(shapes) != 1 or self.w_q.shape[0] != self.w_q.shape[1]:
            raise ShapeError(f'projections must be equal square matrices, got {sorted(shapes)}')

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def create(cls, d: int, rng: np.random.Generator, prefix: str = '') -> 'ProjectionWeights':
        def draw(name):
            return Parameter(f'{prefix}{name}', rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)))

        return cls(draw('w_q'), draw('w_k'), draw('w_v'))

    @classmethod
    def identity(cls, d: int, prefix: str = '') -> 'ProjectionWeights':
        return cls(*(Parameter(f'{prefix}{n}', np.eye(d)) for n in ('w_q', 'w_k', 'w_v')))

    def parameters(self) -> list[Parameter]:
        return [self.w_q, self.w_k, self.w_v]


@dataclass(frozen=True)
class SpectralDecomposition:
    """Thin SVD a = u diag(sigma) vt with a causal rank k."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray
    k: int

    def __post_init__(self):
        if not 0 <= self.k <= len(self.sigma):
            raise ConfigError(f'rank k={self.k} outside [0, {len(self.sigma)}]')

    @property
    def rank_max(self) -> int:
        return len(self.sigma)

    @property
    def sigma_c(self) -> np.ndarray:
        return self.sigma[: self.k]

    @property
    def sigma_perp(self) -> np.ndarray:
        return self.sigma[self.k :]

    @property
    def a_c(self) -> np.ndarray:
        k = self.k
        return (self.u[:, :k] * self.sigma[:k]) @ self.vt[:k, :]

    @property
    def a_perp(self) -> np.ndarray:
        k = self.k
        return (self.u[:, k:] * self.sigma[k:]) @ self.vt[k:, :]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


def default_rank(sigma: np.ndarray, energy: float = ENERGY_TARGET) -> int:
    """Smallest k whose top-k singular values hold `energy` of the squared spectrum (full length if empty)."""
    sq = np.asarray(sigma, dtype=np.float64) ** 2
    total = sq.sum()
    if total == 0:
        return len(sq)
    return int(np.searchsorted(np.cumsum(sq) / total, energy - 1e-12) + 1)


def tail_energy_ratio(sigma: np.ndarray, k: int) -> float:
    """Share of squared spectrum beyond rank k; 0 for an all-zero spectrum."""
    sq = np.asarray(sigma, dtype=np.float64) ** 2
    total = sq.sum()
    return float(sq[k:].sum() / total) if total > 0 else 0.0


def _values(x) -> np.ndarray:
    return x.value if isinstance(x, Parameter) else numerics.as_matrix(x)


def project_qkv(x, p: PromptBank, w: ProjectionWeights) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """q = x w_q, k = P w_k, v = P w_v."""
    x = _values(x)
    if x.shape[1] != w.d or p.d != w.d:
        raise ShapeError(f'features {x.shape}, prompts {p.tokens.shape} and projections {w.d}x{w.d} disagree')
    tokens = p.tokens.value
    return x @ w.w_q.value, tokens @ w.w_k.value, tokens @ w.w_v.value


def attention_scores(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Pre-softmax scores q k^T / sqrt(d)."""
    q, k = numerics.as_matrix(q, 'q'), numerics.as_matrix(k, 'k')
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f'query width {q.shape[1]} != key width {k.shape[1]}')
    return q @ k.T / math.sqrt(q.shape[1])


def spectral_split(a: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, SpectralDecomposition]:
    """Split `a` into its top-k part and the residual, returning both with the decomposition."""
    a = numerics.as_matrix(a, 'attention')
    if not 0 <= k <= min(a.shape):
        raise ConfigError(f'rank k={k} outside [0, {min(a.shape)}]')
    u, sigma, vt = numerics.svd(a, full_matrices=False)
    dec = SpectralDecomposition(u, sigma, vt, k)
    return dec.a_c, dec.a_perp, dec


def tail_penalty(dec: SpectralDecomposition, lambda_tail: float) -> float:
    """L1 penalty on the singular values beyond rank k."""
    return float(lambda_tail * dec.sigma_perp.sum())


def causal_update(dec: SpectralDecomposition, v_basis_check: bool = False) -> np.ndarray:
    """
    The attention update once the tail has vanished: U_c Sigma_c, i.e. sum of sigma_i u_i for i <= k.

    With `v_basis_check`, also verify A_c V_c = U_c Sigma_c against the stored right singular vectors.
    """
    k = dec.k
    update = dec.u[:, :k] * dec.sigma[:k]
    if v_basis_check:
        err = np.max(np.abs(dec.a_c @ dec.vt[:k, :].T - update), initial=0.0)
        if err > 1e-8 * max(1.0, float(np.linalg.norm(dec.sigma))):
            raise NumericError(f'A_c V_c differs from U_c Sigma_c by {err:.3e}')
    return update


def resolve_rank(sigma: np.ndarray, rank_k: int | None) -> int:
    if rank_k is None:
        return default_rank(sigma)
    return min(rank_k, len(sigma))


def cap_forward(
    x, p: PromptBank, w: ProjectionWeights, k: int | None, mode: Mode = Mode.FULL, lambda_tail: float = 1.0
) -> tuple[np.ndarray, SpectralDecomposition, float]:
    """
    Cross-attention update of one sample.

    Returns delta_x (n x d), the decomposition of the pre-softmax scores and the tail penalty. In
    filtered mode the softmax is taken over A_c instead of A.
    """
    x = _values(x)
    if x.shape[0] == 0:
        raise ConfigError('attention needs at least one query token')
    if k is not None and not 0 <= k <= min(x.shape[0], p.t):
        raise ConfigError(f'rank k={k} outside [0, {min(x.shape[0], p.t)}]')
    tape = Tape()
    out = record_cap(tape, tape.const(x), p, w, [k] if k is not None else None, mode, groups=1, lambda_tail=lambda_tail)
    u, s, vt = out.spectra[0]
    dec = SpectralDecomposition(u, s, vt, out.ranks[0])
    return out.delta.value, dec, out.penalty.item()


@dataclass
class CapOutput:
    delta: Var
    scores: Var | None
    penalty: Var
    ranks: list[int]
    spectra: list[tuple[np.ndarray, np.ndarray, np.ndarray]]


def record_cap(
    tape: Tape,
    x: Var,
    p: PromptBank,
    w: ProjectionWeights,
    ranks: Sequence[int | None] | None,
    mode: Mode,
    groups: int,
    lambda_tail: float,
) -> CapOutput:
    """
    Record the cross-attention update for `groups` samples stacked along the rows of `x`.

    The rank of each sample's score block comes from `ranks` (None entries fall back to the 90% energy
    rule) and only scopes the penalty in full mode; filtered mode truncates the scores as well.
    """
    if x.shape[1] != w.d or p.d != w.d:
        raise ShapeError(f'features {x.shape}, prompts {p.tokens.shape} and projections {w.d}x{w.d} disagree')
    if groups < 1 or x.shape[0] % groups:
        raise ShapeError(f'{x.shape[0]} token rows cannot be split into {groups} samples')
    tokens = tape.param(p.tokens)
    q = x @ tape.param(w.w_q)
    keys = tokens @ tape.param(w.w_k)
    values = tokens @ tape.param(w.w_v)
    scores = tape.scale(q @ keys.T, 1.0 / math.sqrt(w.d))

    blocks = scores.value.reshape(groups, -1, p.t)
    spectra_u, spectra_s, spectra_vt = numerics.svd(blocks, full_matrices=False)
    spectra = [(spectra_u[b], spectra_s[b], spectra_vt[b]) for b in range(groups)]
    ranks = list(ranks) if ranks is not None else [None] * groups
    if len(ranks) == 1 and groups > 1:
        ranks = ranks * groups
    ks = [resolve_rank(spectra_s[b], ranks[b]) for b in range(groups)]
    penalty = tape.tail_penalty(scores, ks, lambda_tail)

    attended = scores
    if mode == Mode.FILTERED and any(k < len(spectra_s[b]) for b, k in enumerate(ks)):
        attended = tape.truncate_rank(scores, ks)
    delta = tape.row_softmax(attended) @ values
    return CapOutput(delta, scores, penalty, ks, spectra)


def record_prompt_add(tape: Tape, x: Var, p: PromptBank, groups: int) -> CapOutput:
    """
    Element-wise addition in place of cross-attention: token i of every sample receives prompt i mod t.

    There is no score matrix, so the output carries no spectra and a zero tail penalty.
    """
    if x.shape[1] != p.d:
        raise ShapeError(f'features {x.shape} and prompts {p.tokens.shape} disagree')
    if groups < 1 or x.shape[0] % groups:
        raise ShapeError(f'{x.shape[0]} token rows cannot be split into {groups} samples')
    n = x.shape[0] // groups
    select = np.zeros((x.shape[0], p.t))
    select[np.arange(x.shape[0]), np.arange(x.shape[0]) % n % p.t] = 1.0
    delta = tape.const(select) @ tape.param(p.tokens)
    return CapOutput(delta, None, tape.const([[0.0]]), [], [])


def spectrum_frame(spectra: Sequence[np.ndarray], step: int) -> pd.DataFrame:
    """
    Tabulate one spectrum per layer as (layer, step, index, sigma, cumulative_energy_ratio).

    An all-zero spectrum reports a cumulative ratio of 1.0 throughout.
    """
    rows = []
    for layer, sigma in enumerate(spectra):
        cumulative = np.cumsum(np.asarray(sigma, dtype=np.float64) ** 2)
        total = cumulative[-1] if len(cumulative) else 0.0
        cumulative = cumulative / total if total > 0 else np.ones_like(cumulative)
        for i, (s, c) in enumerate(zip(sigma, cumulative)):
            rows.append(
                {'layer': layer, 'step': step, 'index': i, 'sigma': float(s), 'cumulative_energy_ratio': float(c)}
            )
    return pd.DataFrame(rows, columns=['layer', 'step', 'index', 'sigma', 'cumulative_energy_ratio'])
