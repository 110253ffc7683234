"""Tests for the linear algebra and Fourier kernels."""

import numpy as np
import pytest

from cauvis_lab import numerics
from cauvis_lab.errors import ConfigError, NumericError, ShapeError


class TestAsMatrix:
    """Tests for as_matrix."""

    def test_rejects_vectors(self):
        """1-D input is a shape error."""
        with pytest.raises(ShapeError):
            numerics.as_matrix(np.ones(3))

    def test_rejects_nan(self):
        """Non-finite entries are a numeric error."""
        with pytest.raises(NumericError):
            numerics.as_matrix([[1.0, np.nan]])

    def test_casts_to_float64(self):
        """Integer input comes back as float64."""
        assert numerics.as_matrix([[1, 2]]).dtype == np.float64


class TestMatmulSoftmax:
    """Tests for matmul and row_softmax."""

    def test_matmul_matches_triple_loop(self, rng):
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        expected = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                for k in range(5):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(numerics.matmul(a, b), expected, atol=1e-12)

    def test_matmul_shape_mismatch(self):
        """Inner dimensions must agree."""
        with pytest.raises(ShapeError):
            numerics.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_softmax_rows_sum_to_one(self, rng):
        """Every row is a distribution."""
        s = numerics.row_softmax(rng.normal(size=(5, 7)) * 10)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(s > 0)

    def test_softmax_large_scores(self):
        """Scores around 1e3 do not overflow."""
        s = numerics.row_softmax(np.array([[1000.0, 1000.0, 0.0]]))
        np.testing.assert_allclose(s, [[0.5, 0.5, 0.0]], atol=1e-12)

    def test_softmax_direct_formula(self):
        """[[1, 2, 3]] matches exp(s) / sum(exp(s)) evaluated directly."""
        e = np.exp([1.0, 2.0, 3.0])
        np.testing.assert_allclose(numerics.row_softmax(np.array([[1.0, 2.0, 3.0]])), [e / e.sum()], rtol=1e-14)

    def test_softmax_uniform_on_constant_rows(self):
        """Equal scores give equal weights."""
        np.testing.assert_allclose(numerics.row_softmax(np.zeros((2, 4))), 0.25)


class TestSvd:
    """Tests for svd."""

    def test_random_contract(self, rng):
        """Reconstruction and orthogonality hold on 1,000 random matrices up to 32x32."""
        for _ in range(1000):
            m, n = rng.integers(1, 33, size=2)
            a = rng.normal(size=(m, n))
            u, s, vt = numerics.svd(a, full_matrices=False)
            assert np.linalg.norm(a - (u * s) @ vt) <= 1e-8 * max(np.linalg.norm(a), 1.0)
            k = len(s)
            assert np.max(np.abs(u.T @ u - np.eye(k))) <= 1e-8
            assert np.max(np.abs(vt @ vt.T - np.eye(k))) <= 1e-8
            assert np.all(np.diff(s) <= 1e-12) and np.all(s >= 0)

    def test_rank_deficient(self):
        """A rank-1 matrix has one nonzero singular value."""
        a = np.outer([1.0, 2.0, 3.0], [1.0, -1.0])
        _, s, _ = numerics.svd(a)
        assert s[0] == pytest.approx(np.sqrt(14) * np.sqrt(2))
        assert s[1] <= 1e-12

    def test_zero_matrix(self):
        """All singular values of 0 are 0."""
        _, s, _ = numerics.svd(np.zeros((3, 4)))
        assert np.all(s == 0)

    def test_stacked(self, rng):
        """A stack is decomposed block by block."""
        a = rng.normal(size=(3, 5, 4))
        u, s, vt = numerics.svd(a, full_matrices=False)
        np.testing.assert_allclose(np.einsum('bik,bk,bkj->bij', u, s, vt), a, atol=1e-12)

    @pytest.mark.parametrize('shape', [(6, 4), (4, 6), (5, 5)])
    def test_squares_are_gram_eigenvalues(self, rng, shape):
        """sigma^2 equals the eigenvalues of a^T a, padded with zeros for wide input."""
        a = rng.normal(size=shape)
        _, s, _ = numerics.svd(a, full_matrices=False)
        eig = np.sort(np.linalg.eigvalsh(a.T @ a))[::-1][: len(s)]
        np.testing.assert_allclose(s**2, eig, atol=1e-9)

    def test_non_finite(self):
        """NaN input is a numeric error."""
        with pytest.raises(NumericError):
            numerics.svd(np.array([[np.inf, 0.0], [0.0, 1.0]]))

    def test_no_convergence(self, monkeypatch):
        """A LAPACK failure becomes a numeric error without an iteration count."""

        def fail(*args, **kwargs):
            raise np.linalg.LinAlgError('SVD did not converge')

        monkeypatch.setattr(numerics.np.linalg, 'svd', fail)
        with pytest.raises(NumericError, match='did not converge') as info:
            numerics.svd(np.eye(3))
        assert info.value.iterations is None


class TestDft:
    """Tests for dft2 and idft2 against the naive double-sum oracle."""

    @staticmethod
    def double_sum(x):
        rows, cols = x.shape
        out = np.zeros((rows, cols), dtype=np.complex128)
        for u in range(rows):
            for v in range(cols):
                for i in range(rows):
                    for j in range(cols):
                        out[u, v] += x[i, j] * np.exp(-2j * np.pi * (u * i / rows + v * j / cols))
        return out

    def test_matches_double_sum(self, rng):
        """Small grids agree with the literal definition."""
        for shape in [(1, 1), (2, 3), (4, 4), (5, 3)]:
            x = rng.normal(size=shape)
            np.testing.assert_allclose(numerics.dft2(x), self.double_sum(x), atol=1e-9)
            np.testing.assert_allclose(numerics.naive_dft2(x), self.double_sum(x), atol=1e-9)

    @pytest.mark.parametrize('n', [1, 2, 7, 16])
    def test_dft_matrix_orthogonal(self, n):
        f = numerics.dft_matrix(n)
        np.testing.assert_allclose(f @ np.conj(f).T, n * np.eye(n), atol=1e-9)

    @pytest.mark.parametrize('shape', [(1, 1), (3, 5), (8, 8), (16, 16), (31, 17), (64, 64)])
    def test_round_trip_and_parseval(self, rng, shape):
        """idft2(dft2(x)) = x and energy is preserved up to the 1/(h*w) factor."""
        x = rng.normal(size=shape)
        spectrum = numerics.dft2(x)
        np.testing.assert_allclose(numerics.idft2(spectrum), x, atol=1e-9)
        energy = np.sum(x**2)
        assert abs(np.sum(np.abs(spectrum) ** 2) / x.size - energy) <= 1e-9 * energy

    def test_backends_agree(self, rng, monkeypatch):
        """The DFT-matrix path matches the FFT path."""
        x = rng.normal(size=(12, 10))
        fast = numerics.dft2(x)
        monkeypatch.setattr(numerics.settings, 'fft_backend', 'matrix')
        np.testing.assert_allclose(numerics.dft2(x), fast, atol=1e-9)
        np.testing.assert_allclose(numerics.idft2(fast), x, atol=1e-9)

    def test_constant_grid(self):
        """A constant grid has energy only at DC."""
        spectrum = numerics.dft2(np.full((4, 6), 2.0))
        assert spectrum[0, 0] == pytest.approx(48.0)
        assert np.max(np.abs(spectrum.ravel()[1:])) <= 1e-12

    def test_non_hermitian_spectrum(self):
        """A spectrum whose inverse is complex is rejected in real mode."""
        spectrum = np.zeros((4, 4), dtype=np.complex128)
        spectrum[0, 1] = 1.0
        with pytest.raises(NumericError):
            numerics.idft2(spectrum)
        assert np.iscomplexobj(numerics.idft2(spectrum, real=False))

    def test_idft_needs_2d(self):
        """3-D spectra are a shape error."""
        with pytest.raises(ShapeError):
            numerics.idft2(np.zeros((2, 2, 2)))


class TestMasks:
    """Tests for radial_frequency and the frequency masks."""

    def test_radial_frequency_corners(self):
        """DC sits at 0 and the Nyquist corner of an even grid at 1."""
        f = numerics.radial_frequency(8, 8)
        assert f[0, 0] == 0.0
        assert f[4, 4] == pytest.approx(1.0)
        assert f[4, 0] == pytest.approx(np.sqrt(0.5))

    def test_highpass_removes_dc(self):
        """Any positive cutoff zeroes DC."""
        m = numerics.make_highpass(8, 8, 0.25)
        assert m.values[0, 0] == 0.0
        assert m.values[4, 4] == 1.0
        assert m.is_symmetric()

    def test_highpass_by_enumeration(self):
        """8x8 at cutoff 0.25 keeps exactly the indices whose folded radius reaches the cutoff."""
        m = numerics.make_highpass(8, 8, 0.25)
        for i in range(8):
            for j in range(8):
                fi, fj = min(i, 8 - i) / 8, min(j, 8 - j) / 8
                passes = np.sqrt(fi**2 + fj**2) / np.sqrt(0.5) >= 0.25
                assert m.values[i, j] == float(passes), (i, j)
        assert int(m.values.sum()) == 64 - 5

    def test_unit_cutoff(self):
        """Cutoff 1 keeps only the Nyquist corner of an even grid and nothing of an odd one."""
        even = numerics.make_highpass(8, 8, 1.0).values
        assert even[4, 4] == 1.0 and even.sum() == 1.0
        assert numerics.make_highpass(7, 7, 1.0).values.sum() == 0.0

    def test_zero_cutoff_passes_everything(self):
        """Cutoff 0 is the all-pass mask."""
        assert np.all(numerics.make_highpass(5, 7, 0.0).values == 1.0)
        assert np.all(numerics.all_pass(3, 3).values == 1.0)

    def test_lowpass_is_complement(self):
        """Low-pass and high-pass masks sum to one."""
        hp = numerics.make_highpass(6, 6, 0.4)
        lp = numerics.make_lowpass(6, 6, 0.4)
        np.testing.assert_array_equal(hp.values + lp.values, 1.0)
        assert lp.cutoff == hp.cutoff == 0.4

    @pytest.mark.parametrize('rows,cols,cutoff', [(4, 4, -0.1), (4, 4, 1.5), (0, 4, 0.2)])
    def test_invalid(self, rows, cols, cutoff):
        """Cutoffs outside [0, 1] and empty grids are config errors."""
        with pytest.raises(ConfigError):
            numerics.make_highpass(rows, cols, cutoff)

    def test_apply_mask_shape(self):
        """The spectrum must match the mask."""
        with pytest.raises(ShapeError):
            numerics.apply_mask(np.zeros((4, 4)), numerics.all_pass(4, 5))

    def test_highpass_kills_constant(self):
        """Filtering a constant grid with a positive cutoff gives zero."""
        m = numerics.make_highpass(8, 8, 0.1)
        out = numerics.idft2(numerics.apply_mask(numerics.dft2(np.full((8, 8), 3.0)), m))
        assert np.max(np.abs(out)) <= 1e-12


class TestFilterGrid:
    """Tests for filter_grid over stacked token rows."""

    def test_matches_per_channel_oracle(self, rng):
        """Each channel of each sample is filtered independently."""
        h, w, c, b = 4, 6, 3, 2
        x = rng.normal(size=(b * h * w, c))
        mask = numerics.make_highpass(h, w, 0.3)
        out = numerics.filter_grid(x, mask, h, w)
        grid = x.reshape(b, h, w, c)
        for s in range(b):
            for ch in range(c):
                expected = numerics.naive_idft2(numerics.naive_dft2(grid[s, :, :, ch]) * mask.values).real
                np.testing.assert_allclose(out.reshape(b, h, w, c)[s, :, :, ch], expected, atol=1e-9)

    def test_matrix_backend(self, rng, matrix_backend):
        """The DFT-matrix path gives the same result."""
        x = rng.normal(size=(32, 2))
        mask = numerics.make_highpass(4, 4, 0.25)
        out = numerics.filter_grid(x, mask, 4, 4).reshape(2, 4, 4, 2)
        grid = x.reshape(2, 4, 4, 2)
        for s in range(2):
            for ch in range(2):
                expected = numerics.naive_idft2(numerics.naive_dft2(grid[s, :, :, ch]) * mask.values).real
                np.testing.assert_allclose(out[s, :, :, ch], expected, atol=1e-9)

    def test_all_pass_identity(self, rng):
        """The all-pass mask returns the input."""
        x = rng.normal(size=(16, 5))
        np.testing.assert_allclose(numerics.filter_grid(x, numerics.all_pass(4, 4), 4, 4), x, atol=1e-12)

    def test_constant_channels_vanish(self):
        """A high-pass filter zeroes constant channels exactly."""
        x = np.tile([0.5, -2.0], (64, 1))
        assert np.all(numerics.filter_grid(x, numerics.make_highpass(8, 8, 0.25), 8, 8) == 0.0)

    @pytest.mark.parametrize('grid', [(5, 7), (3, 3), (9, 11)])
    def test_constant_channels_vanish_on_odd_grids(self, grid, rng):
        """Centring makes constant channels exactly zero where the FFT leaves round-off."""
        h, w = grid
        x = np.tile(rng.normal(size=(1, 3)), (2 * h * w, 1))
        assert np.all(numerics.filter_grid(x, numerics.make_highpass(h, w, 0.25), h, w) == 0.0)

    def test_centring_keeps_values(self, rng):
        """With DC blocked, centring first changes nothing beyond round-off."""
        x = rng.normal(size=(35, 4)) + 3.0
        mask = numerics.make_highpass(5, 7, 0.3)
        grid = x.reshape(5, 7, 4)
        for ch in range(4):
            expected = numerics.naive_idft2(numerics.naive_dft2(grid[:, :, ch]) * mask.values).real
            np.testing.assert_allclose(numerics.filter_grid(x, mask, 5, 7)[:, ch], expected.ravel(), atol=1e-9)

    def test_shape_errors(self):
        """Row count must be a multiple of the grid and the mask must match it."""
        with pytest.raises(ShapeError):
            numerics.filter_grid(np.zeros((15, 2)), numerics.all_pass(4, 4), 4, 4)
        with pytest.raises(ShapeError):
            numerics.filter_grid(np.zeros((16, 2)), numerics.all_pass(2, 8), 4, 4)
