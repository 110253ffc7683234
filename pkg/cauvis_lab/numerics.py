"""
Dense fp64 linear algebra and Fourier kernels.

Matrices are plain 2-D float64 numpy arrays and spectra are complex128 arrays. Every function is pure
and returns a new array.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .settings import settings
from .types import logger

IMAG_TOL = 1e-9


def as_matrix(a, name: str = 'matrix') -> np.ndarray:
    """Coerce `a` to a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f'{name} must be 2-D, got shape {m.shape}')
    if not np.all(np.isfinite(m)):
        raise NumericError(f'{name} has non-finite entries')
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Dense product of two fp64 matrices.

    Args:
        a: m x k matrix
        b: k x n matrix

    Returns:
        The m x n product.

    Raises:
        ShapeError: if either operand is not 2-D or the inner dimensions differ
        NumericError: if either operand has non-finite entries
    """
    a, b = as_matrix(a, 'a'), as_matrix(b, 'b')
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f'cannot multiply {a.shape} by {b.shape}')
    return a @ b


def row_softmax(s: np.ndarray) -> np.ndarray:
    """Softmax over each row, shifted by the row max so large scores never overflow."""
    s = np.asarray(s, dtype=np.float64)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def svd(a: np.ndarray, full_matrices: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Singular value decomposition `a = u @ diag(sigma) @ vt`.

    Accepts a single matrix or a stack (..., m, n). Singular values come back descending and
    nonnegative; trailing values of rank-deficient input may be exactly zero.

    Raises:
        NumericError: if LAPACK fails to converge. numpy does not report how many sweeps ran, so the
            error's `iterations` is always None.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2:
        raise ShapeError(f'svd needs at least 2 dimensions, got shape {a.shape}')
    if not np.all(np.isfinite(a)):
        raise NumericError('svd input has non-finite entries')
    try:
        return np.linalg.svd(a, full_matrices=full_matrices)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f'svd did not converge: {exc}', iterations=None) from exc


def dft_matrix(n: int) -> np.ndarray:
    """The n x n forward DFT matrix, phases reduced modulo n before exponentiation."""
    idx = np.arange(n)
    phase = np.outer(idx, idx) % n
    return np.exp(-2j * np.pi * phase / n)


def naive_dft2(x: np.ndarray) -> np.ndarray:
    """2-D DFT as two DFT-matrix products, O(n^2) per axis."""
    x = np.asarray(x)
    rows, cols = x.shape[-2:]
    return dft_matrix(rows) @ x @ dft_matrix(cols)


def naive_idft2(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.complex128)
    rows, cols = X.shape[-2:]
    return np.conj(dft_matrix(rows)) @ X @ np.conj(dft_matrix(cols)) / (rows * cols)


def _real_part(z: np.ndarray, what: str) -> np.ndarray:
    scale = max(1.0, float(np.max(np.abs(z.real), initial=0.0)))
    residue = float(np.max(np.abs(z.imag), initial=0.0))
    if residue > IMAG_TOL * scale:
        raise NumericError(f'{what} is not real: imaginary residue {residue:.3e}')
    if residue:
        logger.debug('discarding imaginary residue %.3e from %s', residue, what)
    return np.ascontiguousarray(z.real)


def dft2(x: np.ndarray) -> np.ndarray:
    """Forward 2-D DFT of a real matrix."""
    x = as_matrix(x, 'x')
    if settings.use_fft:
        return np.fft.fft2(x)
    return naive_dft2(x)


def idft2(X: np.ndarray, real: bool = True) -> np.ndarray:
    """
    Inverse 2-D DFT.

    With `real=True` the result must be real up to `IMAG_TOL` (Hermitian-symmetric spectrum), otherwise a
    `NumericError` is raised; the residue is discarded.
    """
    X = np.asarray(X, dtype=np.complex128)
    if X.ndim != 2:
        raise ShapeError(f'spectrum must be 2-D, got shape {X.shape}')
    z = np.fft.ifft2(X) if settings.use_fft else naive_idft2(X)
    return _real_part(z, 'inverse transform') if real else z


def radial_frequency(rows: int, cols: int) -> np.ndarray:
    """
    Normalised radial frequency of every DFT index.

    f_r = sqrt((min(i, rows-i)/rows)^2 + (min(j, cols-j)/cols)^2) / sqrt(0.5), so the Nyquist corner of an
    even-sized grid sits at exactly 1.
    """
    i = np.arange(rows)
    j = np.arange(cols)
    fi = np.minimum(i, rows - i) / rows
    fj = np.minimum(j, cols - j) / cols
    return np.sqrt(fi[:, None] ** 2 + fj[None, :] ** 2) / np.sqrt(0.5)


@dataclass(frozen=True)
class FrequencyMask:
    """A real gate in [0, 1] over DFT indices, symmetric under index negation."""

    values: np.ndarray
    cutoff: float

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def complement(self) -> 'FrequencyMask':
        return FrequencyMask(1.0 - self.values, self.cutoff)

    def is_symmetric(self) -> bool:
        neg = self.values[(-np.arange(self.rows)) % self.rows][:, (-np.arange(self.cols)) % self.cols]
        return bool(np.array_equal(neg, self.values))


def _check_grid(rows: int, cols: int, cutoff: float):
    if rows < 1 or cols < 1:
        raise ConfigError(f'mask grid must be at least 1x1, got {rows}x{cols}')
    if not 0.0 <= cutoff <= 1.0:
        raise ConfigError(f'cutoff must lie in [0, 1], got {cutoff}')


def make_highpass(rows: int, cols: int, cutoff: float) -> FrequencyMask:
    """Zero every index whose radial frequency is below `cutoff`, pass the rest."""
    _check_grid(rows, cols, cutoff)
    values = (radial_frequency(rows, cols) >= cutoff).astype(np.float64)
    return FrequencyMask(values, float(cutoff))


def make_lowpass(rows: int, cols: int, cutoff: float) -> FrequencyMask:
    """The complement of `make_highpass`."""
    return make_highpass(rows, cols, cutoff).complement()


def all_pass(rows: int, cols: int) -> FrequencyMask:
    return make_highpass(rows, cols, 0.0)


def apply_mask(X: np.ndarray, m: FrequencyMask) -> np.ndarray:
    """
    Gate a spectrum entry by entry.

    Args:
        X: spectrum with the same shape as the mask
        m: the frequency gate

    Returns:
        The complex product X * m.values.

    Raises:
        ShapeError: if the shapes differ
    """
    X = np.asarray(X, dtype=np.complex128)
    if X.shape != m.shape:
        raise ShapeError(f'spectrum {X.shape} does not match mask {m.shape}')
    return X * m.values


def filter_grid(x: np.ndarray, mask: FrequencyMask, h: int, w: int) -> np.ndarray:
    """
    Filter stacked token features channel by channel over an h x w grid.

    `x` has shape (B*h*w, C): B samples whose h*w tokens are laid out row-major. Each channel of each
    sample is transformed, gated by `mask` and transformed back. The output is real.

    When the mask blocks DC every channel is centred first. This changes nothing mathematically, but a
    constant channel then comes back as exact zeros on any grid size.
    """
    x = np.asarray(x, dtype=np.float64)
    if mask.shape != (h, w):
        raise ShapeError(f'mask {mask.shape} does not match grid {h}x{w}')
    if x.ndim != 2 or x.shape[0] % (h * w):
        raise ShapeError(f'{x.shape[0]} rows is not a multiple of the {h}x{w} grid')
    n_channels = x.shape[1]
    grid = x.reshape(-1, h, w, n_channels)
    if mask.values[0, 0] == 0:
        grid = grid - grid.mean(axis=(1, 2), keepdims=True)
    gate = mask.values[None, :, :, None]
    if settings.use_fft:
        z = np.fft.ifft2(np.fft.fft2(grid, axes=(1, 2)) * gate, axes=(1, 2))
    else:
        fr, fc = dft_matrix(h), dft_matrix(w)
        spec = np.einsum('ia,bajc,jk->bikc', fr, grid, fc)
        z = np.einsum('ia,bajc,jk->bikc', np.conj(fr), spec * gate, np.conj(fc)) / (h * w)
    return _real_part(z, 'filtered grid').reshape(x.shape)
