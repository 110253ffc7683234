"""
Causal oracles for discrete confounded models and the frequency-split causal objective.

A `DiscreteSCM` describes x -> y with a confounder z: P(z), P(y | x, z) and, optionally, the confounded
P(z | x) that generates observational data. `backdoor_adjust` enumerates P(y | do(x)) = sum_z P(y|x,z) P(z)
and `attention_backdoor_equiv` shows that attention with weights P(z_j) over values P(y | x, z_j)
computes the same distribution.
"""

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import numerics
from .autograd import Tape, Var
from .cap import spectral_split
from .errors import ConfigError, NumericError, ShapeError, UnknownStateError
from .numerics import FrequencyMask
from .types import logger

PROB_TOL = 1e-12
NORM_EPS = 1e-12


def _check_distribution(p: Sequence[float], what: str):
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f'{what} must be a non-empty vector')
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ValueError(f'{what} has negative or non-finite entries')
    if abs(arr.sum() - 1.0) > PROB_TOL:
        raise ValueError(f'{what} sums to {arr.sum()!r}, not 1')


def _parse_key(key: str, parts: int) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in key.split(','))
    except ValueError:
        raise ValueError(f'bad table key {key!r}') from None
    if len(values) != parts or any(v < 0 for v in values):
        raise ValueError(f'bad table key {key!r}')
    return values


class DiscreteSCM(BaseModel):
    """
    Discrete confounded model in its file form.

    `table` maps "x,z" to P(y | x, z); `z_given_x` maps "x" to P(z | x) and defaults to P(z) for every x,
    i.e. no confounding of the observational distribution.
    """

    model_config = ConfigDict(extra='forbid')

    z_probs: list[float] = Field(min_length=1)
    table: dict[str, list[float]]
    z_given_x: dict[str, list[float]] | None = None

    @field_validator('z_probs')
    @classmethod
    def _check_z_probs(cls, v):
        _check_distribution(v, 'z_probs')
        return v

    @model_validator(mode='after')
    def _check_tables(self):
        keys = [_parse_key(k, 2) for k in self.table]
        if not keys:
            raise ValueError('table is empty')
        n_x = max(x for x, _ in keys) + 1
        expected = {(x, z) for x in range(n_x) for z in range(len(self.z_probs))}
        if set(keys) != expected:
            raise ValueError(f'table must cover every (x, z) with x < {n_x} and z < {len(self.z_probs)}')
        widths = {len(v) for v in self.table.values()}
        if len(widths) != 1:
            raise ValueError('every P(y|x,z) row must have the same number of labels')
        for k, row in self.table.items():
            _check_distribution(row, f'P(y|{k})')
        if self.z_given_x is not None:
            if {_parse_key(k, 1)[0] for k in self.z_given_x} != set(range(n_x)):
                raise ValueError(f'z_given_x must cover x < {n_x}')
            for k, row in self.z_given_x.items():
                if len(row) != len(self.z_probs):
                    raise ValueError(f'P(z|{k}) has {len(row)} states, expected {len(self.z_probs)}')
                _check_distribution(row, f'P(z|{k})')
        return self

    @property
    def n_x(self) -> int:
        return len(self.table) // len(self.z_probs)

    @property
    def z_states(self) -> int:
        return len(self.z_probs)

    @property
    def n_y(self) -> int:
        return len(next(iter(self.table.values())))

    @cached_property
    def p_z(self) -> np.ndarray:
        return np.asarray(self.z_probs, dtype=np.float64)

    @cached_property
    def p_y_given_xz(self) -> np.ndarray:
        """Array of shape (n_x, n_z, n_y)."""
        out = np.empty((self.n_x, self.z_states, self.n_y))
        for k, row in self.table.items():
            x, z = _parse_key(k, 2)
            out[x, z] = row
        return out

    @cached_property
    def p_z_given_x(self) -> np.ndarray:
        """Array of shape (n_x, n_z)."""
        if self.z_given_x is None:
            return np.tile(self.p_z, (self.n_x, 1))
        out = np.empty((self.n_x, self.z_states))
        for k, row in self.z_given_x.items():
            out[int(k)] = row
        return out

    @classmethod
    def from_arrays(cls, p_z, p_y_given_xz, p_z_given_x=None) -> 'DiscreteSCM':
        p_y_given_xz = np.asarray(p_y_given_xz, dtype=np.float64)
        n_x, n_z = p_y_given_xz.shape[:2]
        table = {f'{x},{z}': p_y_given_xz[x, z].tolist() for x in range(n_x) for z in range(n_z)}
        zx = None
        if p_z_given_x is not None:
            zx = {str(x): list(map(float, row)) for x, row in enumerate(np.asarray(p_z_given_x))}
        return cls(z_probs=list(map(float, p_z)), table=table, z_given_x=zx)


def _x_index(scm: DiscreteSCM, x_index) -> int:
    if isinstance(x_index, bool) or not isinstance(x_index, (int, np.integer)) or not 0 <= x_index < scm.n_x:
        raise UnknownStateError(f'x index {x_index!r} is not one of 0..{scm.n_x - 1}')
    return int(x_index)


def backdoor_adjust(scm: DiscreteSCM, x_index: int) -> np.ndarray:
    """P(y | do(x)) = sum_z P(y | x, z) P(z), by enumeration."""
    x = _x_index(scm, x_index)
    return scm.p_z @ scm.p_y_given_xz[x]


def observational(scm: DiscreteSCM, x_index: int) -> np.ndarray:
    """P(y | x) = sum_z P(y | x, z) P(z | x): what a model fitted on confounded data estimates."""
    x = _x_index(scm, x_index)
    return scm.p_z_given_x[x] @ scm.p_y_given_xz[x]


def simulate_interventional(scm: DiscreteSCM, x_index: int, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Monte-Carlo estimate of P(y | do(x)): draw z from P(z), set x, draw y from P(y | x, z)."""
    x = _x_index(scm, x_index)
    if n_draws < 1:
        raise ConfigError('n_draws must be >= 1')
    z_counts = rng.multinomial(n_draws, scm.p_z)
    y_counts = np.zeros(scm.n_y, dtype=np.int64)
    for z, count in enumerate(z_counts):
        if count:
            y_counts += rng.multinomial(count, scm.p_y_given_xz[x, z])
    return y_counts / n_draws


def ideal_identity_check(p_z, f_values, u, sigma) -> float:
    """
    max |E_{z~P(z)}[f(X, z)] - sum_i u_i sigma_i|.

    `f_values` holds f(X, z_j) in row j; `u` holds the constructed directions u_i in row i with scales
    `sigma`.
    """
    p_z = np.asarray(p_z, dtype=np.float64)
    f_values = numerics.as_matrix(f_values, 'f_values')
    u = numerics.as_matrix(u, 'u')
    sigma = np.asarray(sigma, dtype=np.float64)
    if f_values.shape[0] != p_z.shape[0]:
        raise ShapeError(f'{f_values.shape[0]} feature rows for {p_z.shape[0]} confounder states')
    if u.shape[0] != sigma.shape[0] or u.shape[1] != f_values.shape[1]:
        raise ShapeError(f'directions {u.shape} do not match scales {sigma.shape} and features {f_values.shape}')
    expected = p_z @ f_values
    constructed = sigma @ u
    return float(np.max(np.abs(expected - constructed)))


def scm_identity_check(scm: DiscreteSCM, x_index: int) -> float:
    """Identity check under the isomorphic construction f(X, z_i) = u_i = P(y | x, z_i), sigma_i = P(z_i)."""
    x = _x_index(scm, x_index)
    f_values = scm.p_y_given_xz[x]
    return ideal_identity_check(scm.p_z, f_values, f_values, scm.p_z)


def attention_weights(scm: DiscreteSCM, conditional: bool = False) -> np.ndarray:
    """A[i, j] = P(z_j) (marginal form) or P(z_j | x_i) (conditional form); one query per x."""
    return scm.p_z_given_x.copy() if conditional else np.tile(scm.p_z, (scm.n_x, 1))


def attention_backdoor_equiv(scm: DiscreteSCM, conditional: bool = False, filtered: bool = False) -> float:
    """
    Max |Delta X_i - P(y | do(x_i))| over x and y, where Delta X_i = sum_j A_ij V_j and V_j = P(y | x_i, z_j).

    With `filtered` the attention map is first reduced to its top singular triplet, which loses nothing
    in the marginal form because every row equals P(z).
    """
    a = attention_weights(scm, conditional)
    if filtered:
        a, _, _ = spectral_split(a, 1)
    worst = 0.0
    for x in range(scm.n_x):
        delta = a[x] @ scm.p_y_given_xz[x]
        worst = max(worst, float(np.max(np.abs(delta - backdoor_adjust(scm, x)))))
    return worst


def is_valid_distribution(p: np.ndarray) -> bool:
    return bool(np.all(p >= 0) and abs(p.sum() - 1.0) <= PROB_TOL)


def random_scm(
    rng: np.random.Generator,
    n_x: int | None = None,
    n_z: int | None = None,
    n_y: int | None = None,
    max_states: int = 5,
) -> DiscreteSCM:
    """Draw a random confounded model; unspecified sizes are uniform on 1..max_states."""

    def size(v):
        return int(v) if v is not None else int(rng.integers(1, max_states + 1))

    def simplex(*shape):
        d = rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])
        return d / d.sum(axis=-1, keepdims=True)

    n_x, n_z, n_y = size(n_x), size(n_z), size(n_y)
    return DiscreteSCM.from_arrays(simplex(n_z), simplex(n_x, n_z, n_y), simplex(n_x, n_z))


class OracleCase(BaseModel):
    model_config = ConfigDict(extra='forbid')

    index: int
    n_x: int
    n_z: int
    n_y: int
    max_abs_diff: float
    filtered_diff: float
    conditional_diff: float
    identity_error: float
    confounding_gap: float
    valid: bool


class OracleReport(BaseModel):
    """Back-door equivalence results; only the marginal form is held to the tolerance."""

    model_config = ConfigDict(extra='forbid')

    tolerance: float
    max_abs_diff: float
    cases: list[OracleCase]
    passed: bool


def oracle_report(scms: Sequence[DiscreteSCM], tolerance: float = PROB_TOL) -> OracleReport:
    cases = []
    for i, scm in enumerate(scms):
        adjusted = [backdoor_adjust(scm, x) for x in range(scm.n_x)]
        cases.append(
            OracleCase(
                index=i,
                n_x=scm.n_x,
                n_z=scm.z_states,
                n_y=scm.n_y,
                max_abs_diff=attention_backdoor_equiv(scm),
                filtered_diff=attention_backdoor_equiv(scm, filtered=True),
                conditional_diff=attention_backdoor_equiv(scm, conditional=True),
                identity_error=max(scm_identity_check(scm, x) for x in range(scm.n_x)),
                confounding_gap=max(float(np.max(np.abs(observational(scm, x) - adjusted[x]))) for x in range(scm.n_x)),
                valid=all(is_valid_distribution(p) for p in adjusted),
            )
        )
    worst = max((c.max_abs_diff for c in cases), default=0.0)
    passed = all(c.valid and max(c.max_abs_diff, c.filtered_diff, c.identity_error) <= tolerance for c in cases)
    logger.info('oracle: %d cases, max diff %.3e, passed=%s', len(cases), worst, passed)
    return OracleReport(tolerance=tolerance, max_abs_diff=worst, cases=cases, passed=passed)


@dataclass(frozen=True)
class CausalFilter:
    """High-pass gate H_causal; its complement extracts the spurious (low-frequency) part."""

    h_causal: FrequencyMask

    @classmethod
    def create(cls, h: int, w: int, cutoff: float) -> 'CausalFilter':
        return cls(numerics.make_highpass(h, w, cutoff))

    @property
    def spurious(self) -> FrequencyMask:
        return self.h_causal.complement()


def _filter(x, mask: FrequencyMask) -> np.ndarray:
    x = numerics.as_matrix(x, 'x')
    if x.shape != mask.shape:
        raise ShapeError(f'input {x.shape} does not match filter {mask.shape}')
    return numerics.idft2(numerics.apply_mask(numerics.dft2(x), mask))


def causal_filter_apply(x, f: CausalFilter) -> np.ndarray:
    """f_C(x): inverse transform of the high-pass gated spectrum of an h x w grid."""
    return _filter(x, f.h_causal)


def spurious_filter_apply(x, f: CausalFilter) -> np.ndarray:
    """f_S(x): the low-pass complement of `causal_filter_apply`."""
    return _filter(x, f.spurious)


def invariance_check(
    f: Callable[[np.ndarray], np.ndarray], prompts, num_probes: int, eps: float, rng: np.random.Generator
) -> float:
    """
    Mean norm of the directional derivative of `f` along `num_probes` random unit directions in prompt
    space, by central differences with step `eps`.
    """
    if eps <= 0:
        raise ConfigError('eps must be positive')
    if num_probes < 1:
        raise ConfigError('num_probes must be >= 1')
    prompts = np.asarray(prompts, dtype=np.float64)
    if prompts.size == 0:
        return 0.0
    norms = []
    for _ in range(num_probes):
        direction = rng.standard_normal(prompts.shape)
        direction /= np.linalg.norm(direction)
        up, down = np.asarray(f(prompts + eps * direction)), np.asarray(f(prompts - eps * direction))
        if not (np.all(np.isfinite(up)) and np.all(np.isfinite(down))):
            raise NumericError('non-finite evaluation during invariance probe')
        norms.append(np.linalg.norm((up - down) / (2 * eps)))
    return float(np.mean(norms))


def record_joint_loss(
    tape: Tape, f_s: Var, f_c_shifted: Var, f_c_clean: Var, lambda_inv: float, groups: int = 1
) -> Var:
    """
    Batch mean of ||f_S||_1 + lambda_inv * ||f_C(x+delta) - f_C(x)||_2 over `groups` stacked samples.

    The L2 norm is sqrt(|v|^2 + eps) - sqrt(eps): finite gradient at 0 and exactly 0 when v is.
    """
    if groups < 1 or f_s.shape[0] % groups:
        raise ShapeError(f'{f_s.shape[0]} rows cannot be split into {groups} samples')
    diff = f_c_shifted - f_c_clean
    per_sample = tape.reshape(diff, groups, diff.value.size // groups)
    l2 = tape.sum(tape.row_norms(per_sample, NORM_EPS)) + tape.const([[-groups * math.sqrt(NORM_EPS)]])
    total = tape.abs_sum(f_s) + tape.scale(l2, lambda_inv)
    return tape.scale(total, 1.0 / groups)


def causal_loss(f_s_out, f_c_shifted, f_c_clean, lambda_inv: float, groups: int = 1) -> float:
    f_s_out = numerics.as_matrix(f_s_out, 'f_s_out')
    f_c_shifted = numerics.as_matrix(f_c_shifted, 'f_c_shifted')
    f_c_clean = numerics.as_matrix(f_c_clean, 'f_c_clean')
    if not f_s_out.shape == f_c_shifted.shape == f_c_clean.shape:
        raise ShapeError(f'loss inputs differ in shape: {f_s_out.shape}, {f_c_shifted.shape}, {f_c_clean.shape}')
    tape = Tape()
    return record_joint_loss(
        tape, tape.const(f_s_out), tape.const(f_c_shifted), tape.const(f_c_clean), lambda_inv, groups
    ).item()


def record_causal_loss(
    tape: Tape, x_shifted: Var, x_clean: Var, highpass: FrequencyMask, h: int, w: int, groups: int, lambda_inv: float
) -> Var:
    """
    Joint loss on token features. f_C is the high-pass part of the features; f_S is the low-pass part of the
    shift x_shifted - x_clean, so a layer stack that leaves its input alone scores exactly zero.
    """
    f_s = tape.spectral_filter(x_shifted - x_clean, highpass.complement(), h, w)
    f_c_shifted = tape.spectral_filter(x_shifted, highpass, h, w)
    f_c_clean = tape.spectral_filter(x_clean, highpass, h, w)
    return record_joint_loss(tape, f_s, f_c_shifted, f_c_clean, lambda_inv, groups)
