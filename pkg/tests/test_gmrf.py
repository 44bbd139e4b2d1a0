import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from diseasemap.gmrf import (
    StructureConsistencyError,
    StructureMatrix,
    constraint_set,
    iid_structure,
    interaction_structure,
    numerical_rank,
    rw2_structure,
    sample_intrinsic,
)
from diseasemap.graph import icar_structure

from .conftest import path_graph

KINDS = ["I", "II", "III", "IV"]


class TestRW2:
    def test_small_matrix(self):
        D = np.array([[1, -2, 1, 0], [0, 1, -2, 1]], float)
        np.testing.assert_array_equal(rw2_structure(4).dense(), D.T @ D)

    @pytest.mark.parametrize("T", [3, 4, 10, 27])
    def test_annihilates_linear(self, T, rng):
        R = rw2_structure(T).matrix
        a, b = rng.normal(size=2)
        t = np.arange(1, T + 1, dtype=float)
        np.testing.assert_allclose(R @ (a + b * t), 0, atol=1e-10 * (abs(a) + abs(b) * T))

    def test_rank_182(self):
        S = rw2_structure(182)
        eig = np.linalg.eigvalsh(S.dense())
        assert numerical_rank(eig) == 180
        assert S.rank == 180

    @pytest.mark.parametrize("T", [0, 1, 2])
    def test_too_short(self, T):
        with pytest.raises(ValueError):
            rw2_structure(T)

    def test_conditional_mean_is_standard_form(self):
        # interior full conditional: 6 g_t = 4(g_{t-1} + g_{t+1}) - (g_{t-2} + g_{t+2})
        R = rw2_structure(9).dense()
        row = R[4]
        np.testing.assert_array_equal(row[2:7], [1, -4, 6, -4, 1])


class TestIID:
    @pytest.mark.parametrize("m", [1, 5, 42])
    def test_identity(self, m):
        S = iid_structure(m)
        np.testing.assert_array_equal(S.dense(), np.eye(m))
        assert S.rank == m and S.null_basis.shape == (m, 0)

    def test_invalid(self):
        with pytest.raises(ValueError):
            iid_structure(0)


class TestInteraction:
    def test_type_I_equals_iid(self):
        S = interaction_structure("I", icar_structure(path_graph(3)), rw2_structure(4))
        assert (S.matrix != iid_structure(12).matrix).nnz == 0
        assert S.rank == 12

    def test_type_IV_path3_rw4(self):
        S = interaction_structure("IV", icar_structure(path_graph(3)), rw2_structure(4))
        assert S.dim == 12 and S.rank == 4 and S.rank_deficiency == 8
        eig = np.linalg.eigvalsh(S.dense())
        assert numerical_rank(eig) == 4
        assert constraint_set(S).k == 8

    def test_type_III_nullity(self):
        S = interaction_structure("III", icar_structure(path_graph(3)), rw2_structure(4))
        assert S.rank_deficiency == 4
        np.testing.assert_allclose(S.dense() @ S.null_basis, 0, atol=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="kind"):
            interaction_structure("V", icar_structure(path_graph(3)), rw2_structure(4))

    @pytest.mark.parametrize("kind", KINDS)
    def test_time_fastest_layout(self, kind):
        Rs, Rt = icar_structure(path_graph(3)), rw2_structure(4)
        S = interaction_structure(kind, Rs, Rt)
        left = Rs.dense() if kind in ("III", "IV") else np.eye(3)
        right = Rt.dense() if kind in ("II", "IV") else np.eye(4)
        X = np.arange(12.0).reshape(3, 4) ** 1.5
        # row-major flattening puts region i, time t at i*T + t
        np.testing.assert_allclose(S.matrix @ X.ravel(), (left @ X @ right.T).ravel(), atol=1e-12)

    @pytest.mark.parametrize("kind", KINDS)
    @pytest.mark.parametrize("n", [3, 4, 5])
    @pytest.mark.parametrize("T", [3, 4, 5])
    def test_kronecker_suite(self, kind, n, T, rng):
        Rs, Rt = icar_structure(path_graph(n)), rw2_structure(T)
        S = interaction_structure(kind, Rs, Rt)
        A = Rs.dense() if kind in ("III", "IV") else np.eye(n)
        B = Rt.dense() if kind in ("II", "IV") else np.eye(T)
        brute = np.kron(A, B)
        assert np.max(np.abs(S.dense() - brute)) <= 1e-8 * np.abs(brute).max()
        rank = np.linalg.matrix_rank(A, tol=1e-8 * np.abs(A).max()) * np.linalg.matrix_rank(B, tol=1e-8 * np.abs(B).max())
        assert S.rank_deficiency == n * T - rank
        X = rng.normal(size=(T, n))
        # column-major vec identity (A kron B) vec(X) = vec(B X A')
        np.testing.assert_allclose(brute @ X.ravel(order="F"), (B @ X @ A.T).ravel(order="F"), atol=1e-10)


class TestConstraints:
    def test_icar_connected_sum_to_zero(self):
        C = constraint_set(icar_structure(path_graph(5)))
        assert C.k == 1
        np.testing.assert_allclose(np.abs(C.A[0]), 1 / np.sqrt(5))

    def test_rw2_two_constraints(self):
        C = constraint_set(rw2_structure(4))
        assert C.k == 2
        t = np.arange(4.0)
        span = np.column_stack([np.ones(4), t])
        # rows of A span {1, t}
        coef, *_ = np.linalg.lstsq(span, C.A.T, rcond=None)
        np.testing.assert_allclose(span @ coef, C.A.T, atol=1e-12)

    def test_project(self, rng):
        S = interaction_structure("IV", icar_structure(path_graph(4)), rw2_structure(5))
        C = constraint_set(S)
        x = C.project(rng.normal(size=S.dim))
        assert C.violation(x) < 1e-12

    def test_independent_rows(self):
        S = interaction_structure("II", icar_structure(path_graph(4)), rw2_structure(5))
        A = constraint_set(S).A
        assert np.linalg.matrix_rank(A) == A.shape[0] == S.rank_deficiency


class TestStructureValidation:
    def test_wrong_declared_rank(self):
        with pytest.raises(StructureConsistencyError):
            StructureMatrix(sp.csr_matrix(np.array([[1.0, -1], [-1, 1]])), 0, np.zeros((2, 0)))

    def test_asymmetric(self):
        with pytest.raises(StructureConsistencyError, match="symmetric"):
            StructureMatrix(sp.csr_matrix(np.array([[1.0, 2], [0, 1]])), 0, np.zeros((2, 0)))

    def test_bad_null_basis(self):
        M = sp.csr_matrix(np.array([[1.0, -1], [-1, 1]]))
        with pytest.raises(StructureConsistencyError, match="annihilated"):
            StructureMatrix(M, 1, np.array([[1.0], [0.0]]))

    def test_indefinite(self):
        with pytest.raises(StructureConsistencyError, match="semidefinite"):
            StructureMatrix(sp.csr_matrix(np.diag([1.0, -1.0])), 0, np.zeros((2, 0)))

    def test_matrix_market_export(self, tmp_path):
        S = rw2_structure(6)
        S.to_matrix_market(tmp_path / "rw2.mtx")
        back = scipy.io.mmread(str(tmp_path / "rw2.mtx"))
        np.testing.assert_array_equal(back.toarray(), S.dense())

    @settings(max_examples=25, deadline=None)
    @given(st.integers(3, 6), st.integers(3, 6), st.sampled_from(KINDS))
    def test_every_product_is_consistent(self, n, T, kind):
        S = interaction_structure(kind, icar_structure(path_graph(n)), rw2_structure(T))
        R = S.dense()
        assert np.max(np.abs(R - R.T)) == 0
        assert np.linalg.eigvalsh(R).min() >= -1e-10 * max(S.norm, 1)
        if S.rank_deficiency:
            assert np.max(np.abs(R @ S.null_basis)) <= 1e-8 * max(S.norm, 1)


class TestSampling:
    def test_draws_satisfy_constraints(self, rng):
        S = rw2_structure(8)
        x = sample_intrinsic(S, 4.0, rng, size=50)
        assert np.max(np.abs(x @ S.null_basis)) < 1e-10

    def test_quadratic_form_expectation(self, rng):
        # x'Rx * tau ~ chi2(rank)
        S = icar_structure(path_graph(6))
        x = sample_intrinsic(S, 2.0, rng, size=4000)
        q = 2.0 * np.einsum("ij,jk,ik->i", x, S.dense(), x)
        assert abs(q.mean() - S.rank) < 0.2
