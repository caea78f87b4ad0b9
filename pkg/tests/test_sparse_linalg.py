import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp

from redhes import sparse_linalg as sl
from redhes.reduction import newton_solve


def random_sparse(n, density, seed):
    """Diagonally weighted random sparse matrix, nonsingular in practice."""
    rng = np.random.default_rng(seed)
    a = sp.random(n, n, density=density, random_state=rng, format="csc")
    a = a + sp.diags(rng.uniform(0.5, 2.0, n) * rng.choice([-1, 1], n))
    return sl.as_csc(a)


def greedy_oracle(pattern):
    """Plain-Python greedy coloring in natural column order."""
    csc = sl.as_csc(pattern)
    csr = csc.tocsr()
    color = [-1] * csc.shape[1]
    for j in range(csc.shape[1]):
        rows = csc.indices[csc.indptr[j]:csc.indptr[j + 1]]
        taken = {color[k] for i in rows for k in csr.indices[csr.indptr[i]:csr.indptr[i + 1]]
                 if color[k] >= 0}
        c = 0
        while c in taken:
            c += 1
        color[j] = c
    return np.array(color)


class TestFactorize:
    def test_identity(self):
        f = sl.lu_factorize(sp.identity(5, format="csc"))
        np.testing.assert_array_equal(f.L().toarray(), np.eye(5))
        np.testing.assert_array_equal(f.U().toarray(), np.eye(5))
        np.testing.assert_array_equal(np.sort(f.q), np.arange(5))
        b = np.arange(5.0)
        np.testing.assert_array_equal(sl.solve(f, b), b)

    def test_permutation(self):
        f = sl.lu_factorize(sp.csc_matrix([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_allclose(sl.solve(f, np.array([1.0, 2.0])), [2.0, 1.0])

    def test_diagonal(self):
        d = np.array([2.0, -4.0, 0.5, 8.0])
        f = sl.lu_factorize(sp.diags(d, format="csc"))
        b = np.array([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_allclose(sl.solve(f, b), b / d, rtol=1e-15)
        np.testing.assert_allclose(sl.solve_transpose(f, b), b / d, rtol=1e-15)

    def test_factor_identity(self):
        a = random_sparse(15, 0.2, 1)
        f = sl.lu_factorize(a)
        P = np.zeros((15, 15))
        P[np.arange(15), f.prow] = 1.0
        lhs = P @ a.toarray()[:, f.q]
        np.testing.assert_allclose(f.L().toarray() @ f.U().toarray(), lhs, atol=1e-13)

    @pytest.mark.parametrize("seed", range(8))
    def test_dense_inverse_oracle(self, seed):
        n = 5 + 2 * seed
        a = random_sparse(n, 0.3, seed)
        f = sl.lu_factorize(a)
        inv = np.linalg.inv(a.toarray())
        np.testing.assert_allclose(sl.batch_solve(f, np.eye(n)), inv, atol=1e-12)
        np.testing.assert_allclose(sl.batch_solve_transpose(f, np.eye(n)), inv.T, atol=1e-12)

    def test_singular(self):
        a = sp.csc_matrix(np.array([[1.0, 2.0], [2.0, 4.0]]))
        with pytest.raises(sl.SingularMatrixError):
            sl.lu_factorize(a)

    def test_structurally_singular(self):
        a = sp.csc_matrix(np.array([[1.0, 0.0], [1.0, 0.0]]))
        with pytest.raises(sl.SingularMatrixError):
            sl.lu_factorize(a)

    def test_not_square(self):
        with pytest.raises(ValueError):
            sl.lu_factorize(sp.random(3, 4, density=0.5, format="csc"))


class TestRefactorize:
    def test_identical_values(self):
        a = random_sparse(20, 0.2, 3)
        f = sl.lu_factorize(a)
        g = sl.lu_refactorize(f, a)
        b = np.random.default_rng(0).standard_normal(20)
        np.testing.assert_allclose(sl.solve(g, b), sl.solve(f, b), rtol=1e-15, atol=1e-15)
        assert g.refactorizations == 1

    def test_scaled_matrix(self):
        a = random_sparse(20, 0.2, 4)
        f = sl.lu_factorize(a)
        g = sl.lu_refactorize(f, 2 * a)
        b = np.random.default_rng(1).standard_normal(20)
        np.testing.assert_allclose(sl.solve(g, b), 0.5 * sl.solve(f, b), rtol=1e-14)

    def test_pattern_mismatch(self):
        a = random_sparse(10, 0.2, 5)
        f = sl.lu_factorize(a)
        b = a.tolil()
        b[0, 9] = b[0, 9] + 3.0 if b[0, 9] == 0 else 0.0
        b = sl.as_csc(b)
        b.eliminate_zeros()
        with pytest.raises(sl.PatternMismatchError):
            sl.lu_refactorize(f, b)

    def test_degraded_pivot_falls_back(self):
        a = sp.csc_matrix(np.array([[4.0, 1.0], [1.0, 3.0]]))
        f = sl.lu_factorize(a)
        # the stored pivot order is useless for this matrix
        swapped = sp.csc_matrix(np.array([[1e-14, 1.0], [1.0, 3.0]]))
        g = sl.lu_refactorize(f, swapped)
        b = np.array([1.0, 2.0])
        np.testing.assert_allclose(swapped @ sl.solve(g, b), b, atol=1e-14)

    def test_newton_sequence(self, problem118):
        """Refactorized solves stay accurate along a Newton path."""
        p = problem118.initial_parameters()
        x = problem118.initial_state()
        rng = np.random.default_rng(2)
        f = None
        for _ in range(5):
            jx, _ = problem118.jacobians(x, p)
            f = sl.lu_factorize(jx) if f is None else sl.lu_refactorize(f, jx)
            b = rng.standard_normal(len(x))
            r = jx @ sl.solve(f, b) - b
            assert np.abs(r).max() <= 1e-9 * np.abs(b).max()
            x = x - sl.solve(f, problem118.residual(x, p))


class TestSolve:
    def test_transpose_consistency(self):
        rng = np.random.default_rng(4)
        for seed in range(5):
            a = random_sparse(18, 0.25, 10 + seed)
            f = sl.lu_factorize(a)
            u, b = rng.standard_normal(18), rng.standard_normal(18)
            lhs = u @ sl.solve(f, b)
            rhs = sl.solve_transpose(f, u) @ b
            assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1.0)

    def test_batch_matches_single_bitwise(self):
        a = random_sparse(25, 0.2, 6)
        f = sl.lu_factorize(a)
        B = np.random.default_rng(5).standard_normal((25, 9))
        for threads in (1, 3, 8):
            X = sl.batch_solve(f, B, threads=threads)
            XT = sl.batch_solve_transpose(f, B, threads=threads)
            for j in range(9):
                np.testing.assert_array_equal(X[:, j], sl.solve(f, B[:, j]))
                np.testing.assert_array_equal(XT[:, j], sl.solve_transpose(f, B[:, j]))

    def test_jacobian_residuals(self, problem118):
        proj = newton_solve(problem118, problem118.initial_parameters())
        a = proj.jac_x
        B = np.random.default_rng(8).standard_normal((a.shape[0], 64))
        for X, M in ((sl.batch_solve(proj.factors, B, threads=4), a),
                     (sl.batch_solve_transpose(proj.factors, B, threads=4), a.T)):
            r = np.abs(M @ X - B).max(axis=0) / np.abs(B).max(axis=0)
            assert r.max() <= 1e-10

    def test_refinement_flag(self):
        a = random_sparse(12, 0.3, 9)
        f = sl.lu_factorize(a, refine_steps=2)
        b = np.ones(12)
        np.testing.assert_allclose(a @ sl.solve(f, b), b, atol=1e-13)

    def test_dimension_mismatch(self):
        f = sl.lu_factorize(sp.identity(3, format="csc"))
        with pytest.raises(ValueError):
            sl.solve(f, np.ones(4))
        with pytest.raises(ValueError):
            sl.batch_solve(f, np.ones((4, 2)))
        with pytest.raises(ValueError):
            sl.solve_transpose(f, np.ones((3, 1)))


class TestProducts:
    def test_identity(self):
        v = np.arange(4.0)
        np.testing.assert_array_equal(sl.spmv(sp.identity(4, format="csc"), v), v)

    def test_random_vs_dense(self):
        rng = np.random.default_rng(11)
        a = sp.random(5, 3, density=0.6, random_state=rng, format="csc")
        v, w = rng.standard_normal(3), rng.standard_normal(5)
        V, W = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
        d = a.toarray()
        np.testing.assert_allclose(sl.spmv(a, v), d @ v, rtol=1e-15, atol=1e-15)
        np.testing.assert_allclose(sl.spmv_transpose(a, w), d.T @ w, rtol=1e-15, atol=1e-15)
        np.testing.assert_allclose(sl.spmm(a, V), d @ V, rtol=1e-15, atol=1e-15)
        np.testing.assert_allclose(sl.spmm_transpose(a, W), d.T @ W, rtol=1e-15, atol=1e-15)

    def test_zero_matrix(self):
        z = sp.csc_matrix((3, 2))
        np.testing.assert_array_equal(sl.spmv(z, np.ones(2)), np.zeros(3))

    def test_dimension_mismatch(self):
        a = sp.identity(3, format="csc")
        for fn, arg in ((sl.spmv, np.ones(2)), (sl.spmv_transpose, np.ones(4)),
                        (sl.spmm, np.ones((2, 2))), (sl.spmm_transpose, np.ones(3))):
            with pytest.raises(ValueError):
                fn(a, arg)

    def test_matrix_market_export(self, tmp_path):
        a = random_sparse(6, 0.3, 12)
        path = tmp_path / "a.mtx"
        sl.export_matrix_market(path, a)
        np.testing.assert_array_equal(scipy.io.mmread(str(path)).toarray(), a.toarray())


class TestColoring:
    @staticmethod
    def conflicts(pattern, coloring):
        csr = sl.as_csc(pattern).tocsr()
        bad = 0
        for i in range(csr.shape[0]):
            c = coloring.color_of_column[csr.indices[csr.indptr[i]:csr.indptr[i + 1]]]
            bad += len(c) - len(set(c.tolist()))
        return bad

    def test_diagonal(self):
        c = sl.color_columns(sp.identity(7, format="csc"))
        assert c.num_colors == 1

    def test_dense_column(self):
        a = sp.lil_matrix((6, 6))
        a.setdiag(1.0)
        a[:, 2] = 1.0
        c = sl.color_columns(a)
        max_row_degree = np.diff(sl.as_csc(a).tocsr().indptr).max()
        assert c.num_colors >= max_row_degree
        others = np.delete(c.color_of_column, 2)
        assert c.color_of_column[2] not in others

    def test_tridiagonal(self):
        a = sp.diags([1.0, 2.0, 3.0], [-1, 0, 1], shape=(5, 5), format="csc")
        c = sl.color_columns(a)
        assert c.num_colors == 3
        assert a.nnz == 13
        compressed = a.toarray() @ c.seed_matrix()
        np.testing.assert_array_equal(c.decompress(compressed).toarray(), a.toarray())

    def test_pattern_drift(self):
        a = sp.diags([1.0, 1.0], [0, 1], shape=(4, 4), format="csc")
        c = sl.color_columns(a)
        full = np.ones((4, 4)) @ c.seed_matrix()
        with pytest.raises(sl.PatternDriftError):
            c.decompress(full)

    @pytest.mark.parametrize("name", ["case9", "case118", "case300", "case1354pegase"])
    def test_power_flow_patterns(self, name):
        from redhes.grid import load_case
        from redhes.powerflow import layout
        px, pp = layout(load_case(name)).patterns()
        for pat in (px, pp):
            c = sl.color_columns(pat)
            assert self.conflicts(pat, c) == 0
            oracle = greedy_oracle(pat)
            assert c.num_colors == oracle.max() + 1
            np.testing.assert_array_equal(c.color_of_column, oracle)

    def test_random_patterns(self):
        for seed in range(10):
            a = sp.random(30, 25, density=0.1, random_state=seed, format="csc")
            c = sl.color_columns(a)
            assert self.conflicts(a, c) == 0
            np.testing.assert_array_equal(c.color_of_column, greedy_oracle(a))
            d = a.toarray()
            np.testing.assert_array_equal(c.decompress(d @ c.seed_matrix()).toarray(), d)


class TestOrdering:
    def test_is_permutation(self):
        a = random_sparse(40, 0.05, 13)
        q = sl.minimum_degree_order(a)
        np.testing.assert_array_equal(np.sort(q), np.arange(40))

    def test_reduces_fill_on_arrow(self):
        n = 30
        a = sp.lil_matrix((n, n))
        a.setdiag(4.0)
        a[0, :] = 1.0
        a[:, 0] = 1.0
        a[0, 0] = float(n)
        a = sl.as_csc(a)
        f = sl.lu_factorize(a)
        # eliminating the hub first would fill the whole matrix
        assert f.nnz <= 4 * n
