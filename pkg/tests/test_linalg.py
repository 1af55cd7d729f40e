"""Windowed covariance, Jacobi eigensolver, and projection."""

import numpy as np
import pytest

from actspec.errors import ContractError
from actspec.linalg import (
    Window,
    project_columns,
    sym_eig,
    window_covariance,
    window_spectrum,
)
from actspec.rng import make_rng, normal


def random_symmetric(m, seed):
    g = normal(make_rng(seed), (m, m))
    return (g + g.T) / 2.0


class TestWindow:
    def test_too_small_rejected(self):
        with pytest.raises(ContractError):
            Window(np.ones((1, 5)))
        with pytest.raises(ContractError):
            Window(np.ones((5, 1)))

    def test_non_finite_rejected(self):
        bad = np.ones((3, 3))
        bad[1, 1] = np.nan
        with pytest.raises(ContractError):
            Window(bad)

    def test_aspect(self):
        assert Window(np.ones((10, 40))).aspect == 4.0


class TestWindowCovariance:
    def test_identity_rows(self):
        cov = window_covariance(Window(np.eye(2)))
        assert cov.form == "covariance"
        assert np.allclose(cov.values, np.diag([0.5, 0.5]))

    def test_rank_one_duplicate_rows(self):
        window = Window(np.array([[1.0, 1.0], [1.0, 1.0]]))
        spectrum = window_spectrum(window)
        assert spectrum.eigenvalues == pytest.approx([2.0, 0.0], abs=1e-12)

    def test_gram_auto_selected_when_wide(self):
        window = Window(normal(make_rng(0), (10, 40)))
        cov = window_covariance(window)
        assert cov.form == "gram"
        assert cov.values.shape == (10, 10)

    def test_gram_and_covariance_spectra_agree(self):
        window = Window(normal(make_rng(1), (10, 40)))
        gram = sym_eig(window_covariance(window, form="gram").values).eigenvalues
        full = sym_eig(window_covariance(window, form="covariance").values).eigenvalues
        assert np.max(np.abs(gram - full[:10])) <= 1e-9
        assert np.max(np.abs(full[10:])) <= 1e-9

    @pytest.mark.parametrize("seed", range(50))
    def test_gram_covariance_property_sweep(self, seed):
        rng = make_rng(seed)
        n = int(rng.integers(5, 15))
        d = int(rng.integers(n + 1, 40))
        window = Window(normal(rng, (n, d)))
        gram = sym_eig(window_covariance(window, form="gram").values).eigenvalues
        full = sym_eig(window_covariance(window, form="covariance").values).eigenvalues
        assert np.max(np.abs(gram - full[:n])) <= 1e-9

    def test_centering_flag(self):
        data = normal(make_rng(2), (20, 5)) + 3.0
        centered = window_covariance(Window(data), centered=True).values
        manual = data - data.mean(axis=0)
        assert np.allclose(centered, manual.T @ manual / 20.0)


class TestSymEig:
    def test_diagonal_exact(self):
        spectrum = sym_eig(np.diag([3.0, 1.0, 2.0]))
        assert np.array_equal(spectrum.eigenvalues, [3.0, 2.0, 1.0])

    def test_two_by_two_analytic(self):
        spectrum = sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
        assert spectrum.eigenvalues == pytest.approx([3.0, 1.0], abs=1e-12)
        s = 1.0 / np.sqrt(2.0)
        assert spectrum.eigenvectors[:, 0] == pytest.approx([s, s], abs=1e-12)
        assert spectrum.eigenvectors[:, 1] == pytest.approx([s, -s], abs=1e-12)

    def test_reconstruction_20x20(self):
        a = random_symmetric(20, seed=3)
        spectrum = sym_eig(a)
        v, lam = spectrum.eigenvectors, spectrum.eigenvalues
        assert np.max(np.abs(a - (v * lam) @ v.T)) <= 1e-8

    @pytest.mark.parametrize("m", [2, 5, 16, 64, 128])
    def test_reconstruction_and_orthonormality(self, m):
        a = random_symmetric(m, seed=m)
        spectrum = sym_eig(a)
        v, lam = spectrum.eigenvectors, spectrum.eigenvalues
        assert np.max(np.abs(a - (v * lam) @ v.T)) <= 1e-8
        assert np.max(np.abs(v.T @ v - np.eye(m))) <= 1e-8

    def test_trace_preserved(self):
        a = random_symmetric(30, seed=5)
        spectrum = sym_eig(a, need_vectors=False)
        assert spectrum.eigenvalues.sum() == pytest.approx(
            np.trace(a), rel=1e-8, abs=1e-10
        )

    def test_shift_property(self):
        a = random_symmetric(12, seed=6)
        base = sym_eig(a, need_vectors=False).eigenvalues
        shifted = sym_eig(a + 0.7 * np.eye(12), need_vectors=False).eigenvalues
        assert shifted == pytest.approx(base + 0.7, abs=1e-9)

    def test_sign_convention(self):
        a = random_symmetric(9, seed=7)
        v = sym_eig(a).eigenvectors
        for j in range(9):
            lead = np.argmax(np.abs(v[:, j]))
            assert v[lead, j] > 0.0

    def test_deterministic(self):
        a = random_symmetric(25, seed=8)
        s1 = sym_eig(a)
        s2 = sym_eig(a)
        assert np.array_equal(s1.eigenvalues, s2.eigenvalues)
        assert np.array_equal(s1.eigenvectors, s2.eigenvectors)

    def test_non_symmetric_rejected(self):
        with pytest.raises(ContractError):
            sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_agrees_with_lapack(self):
        a = random_symmetric(40, seed=9)
        ours = sym_eig(a, need_vectors=False).eigenvalues
        ref = np.sort(np.linalg.eigvalsh(a))[::-1]
        assert np.max(np.abs(ours - ref)) <= 1e-9


class TestWindowSpectrum:
    def test_zero_padding_keeps_dim_entries(self):
        window = Window(normal(make_rng(10), (10, 40)))
        spectrum = window_spectrum(window)
        assert spectrum.eigenvalues.shape == (40,)
        assert np.all(spectrum.eigenvalues[10:] == 0.0)
        assert spectrum.aspect == 4.0

    def test_negative_clamp(self):
        window = Window(np.array([[1.0, 1.0], [1.0, 1.0]]))
        spectrum = window_spectrum(window)
        assert np.all(spectrum.eigenvalues >= 0.0)

    def test_vectors_live_in_activation_space(self):
        window = Window(normal(make_rng(11), (10, 40)))
        spectrum = window_spectrum(window, need_vectors=True)
        assert spectrum.eigenvectors.shape == (40, 40)


class TestProjectColumns:
    def test_identity_selection(self):
        mat = normal(make_rng(12), (6, 5))
        basis = np.eye(5)[:, :3]
        assert np.array_equal(project_columns(mat, basis), mat[:, :3])

    def test_full_basis_isometry(self):
        mat = normal(make_rng(13), (7, 6))
        q, _ = np.linalg.qr(normal(make_rng(14), (6, 6)))
        out = project_columns(mat, q)
        assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(mat), rel=1e-9)

    def test_rank_k_roundtrip(self):
        rng = make_rng(15)
        left = normal(rng, (30, 4))
        right = normal(rng, (4, 12))
        mat = left @ right  # exactly rank 4
        spectrum = sym_eig(mat.T @ mat)
        basis = spectrum.eigenvectors[:, :4]
        lifted = project_columns(mat, basis) @ basis.T
        assert np.max(np.abs(lifted - mat)) <= 1e-8

    def test_projection_idempotent_on_column_space(self):
        rng = make_rng(16)
        q, _ = np.linalg.qr(normal(rng, (10, 3)))
        mat = normal(rng, (20, 3)) @ q.T  # rows in span(q)
        once = project_columns(mat, q) @ q.T
        twice = project_columns(once, q) @ q.T
        assert np.max(np.abs(once - twice)) <= 1e-12
        assert np.max(np.abs(once - mat)) <= 1e-10

    def test_non_orthonormal_rejected(self):
        with pytest.raises(ContractError):
            project_columns(np.ones((4, 3)), np.ones((3, 2)))
