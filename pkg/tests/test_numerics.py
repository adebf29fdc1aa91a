import numpy as np
import pytest

from echotrack.errors import ContractViolationError, DimensionError, SingularMatrixError
from echotrack.numerics import RngStream, hermitian_eig, least_squares, rng_draw_gaussian


class TestHermitianEig:
    def test_identity(self):
        vals, vecs = hermitian_eig(np.eye(4))
        assert np.allclose(vals, np.ones(4))
        assert np.allclose(vecs.conj().T @ vecs, np.eye(4))

    def test_diagonal_sorted_descending(self):
        vals, vecs = hermitian_eig(np.diag([3.0, 1.0, 2.0]))
        assert np.allclose(vals, [3.0, 2.0, 1.0])
        # eigenvectors are the permuted standard basis
        assert np.allclose(np.abs(vecs), np.eye(3)[:, [0, 2, 1]])

    def test_reconstruction_oracle(self):
        s = RngStream(11, "eig")
        m = s.cnormal(64).reshape(8, 8)
        h = m + m.conj().T
        vals, vecs = hermitian_eig(h)
        recon = vecs @ np.diag(vals) @ vecs.conj().T
        assert np.linalg.norm(recon - h) <= 1e-8 * np.linalg.norm(h)
        assert np.all(np.diff(vals) <= 0)

    def test_non_square_rejected(self):
        with pytest.raises(DimensionError):
            hermitian_eig(np.zeros((3, 4)))

    def test_non_hermitian_rejected(self):
        m = np.array([[1.0, 2.0], [0.5, 1.0]])
        with pytest.raises(ContractViolationError):
            hermitian_eig(m)


class TestLeastSquares:
    def test_identity(self):
        b = np.array([1.0 + 2j, -3.0, 0.5j])
        assert np.allclose(least_squares(np.eye(3), b), b)

    def test_consistent_overdetermined_exact(self):
        s = RngStream(5, "ls")
        a = s.cnormal(12).reshape(6, 2)
        x_true = np.array([1.0 - 1j, 2.0])
        x = least_squares(a, a @ x_true)
        assert np.allclose(x, x_true, atol=1e-10)

    def test_normal_equations_oracle(self):
        s = RngStream(7, "ls2")
        a = s.cnormal(64).reshape(16, 4)
        b = s.cnormal(16)
        x = least_squares(a, b)
        lhs = a.conj().T @ a @ x
        rhs = a.conj().T @ b
        assert np.linalg.norm(lhs - rhs) <= 1e-7 * np.linalg.norm(rhs)
        # residual orthogonal to the column space
        assert np.linalg.norm(a.conj().T @ (a @ x - b)) < 1e-8 * np.linalg.norm(b)

    def test_rank_deficient_raises_with_rank(self):
        a = np.ones((5, 3))
        with pytest.raises(SingularMatrixError) as err:
            least_squares(a, np.ones(5))
        assert err.value.effective_rank == 1

    def test_wide_matrix_rejected(self):
        with pytest.raises(DimensionError):
            least_squares(np.ones((2, 4)), np.ones(2))


class TestRngStream:
    def test_determinism(self):
        a = RngStream(42, "noise").normal(100)
        b = RngStream(42, "noise").normal(100)
        assert np.array_equal(a, b)

    def test_law_of_large_numbers(self):
        draws = rng_draw_gaussian(RngStream(3, "lln"), 10**6)
        assert abs(draws.mean()) < 0.005
        assert abs(draws.var() - 1.0) < 0.01

    def test_label_independence(self):
        a = RngStream(42, "alpha").normal(10**5)
        b = RngStream(42, "beta").normal(10**5)
        corr = np.corrcoef(a, b)[0, 1]
        assert abs(corr) < 0.01

    def test_substream_and_clone(self):
        root = RngStream(1, "root")
        sub = root.substream("k0")
        assert sub.label == "root/k0"
        assert np.array_equal(sub.normal(5), RngStream(1, "root/k0").normal(5))
        twin = root.clone()
        assert np.array_equal(root.normal(8), twin.normal(8))

    def test_state_roundtrip(self):
        s = RngStream(9, "state")
        s.normal(17)
        saved = s.get_state()
        ref = s.normal(10)
        s.set_state(saved)
        assert np.array_equal(s.normal(10), ref)

    def test_cnormal_variance(self):
        z = RngStream(4, "cn").cnormal(10**5, var=2.0)
        assert abs(np.mean(np.abs(z) ** 2) - 2.0) < 0.05
