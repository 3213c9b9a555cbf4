import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fmeclf.basis import (
    MAX_CONDITION,
    cross_gram,
    default_eval_points,
    derivative_operator,
    difference_block,
    eval_basis,
    fd_weights,
    make_basis,
    project_curve,
    project_curves,
    projection_matrix,
    reconstruct,
)
from fmeclf.exceptions import ConfigurationError, DomainError, OperatorError, RankError


def test_knot_vector_layout():
    b = make_basis(4, 10, (0.0, 2.0))
    assert b.knots.size == 14
    assert np.all(b.knots[:4] == 0.0) and np.all(b.knots[-4:] == 2.0)
    assert np.all(np.diff(b.knots) >= 0)


def test_indicator_basis():
    b = make_basis(1, 4)
    np.testing.assert_array_equal(eval_basis(b, 0.1), [1, 0, 0, 0])


def test_clamped_ends():
    b = make_basis(4, 10)
    np.testing.assert_allclose(eval_basis(b, 0.0), np.eye(10)[0], atol=1e-15)
    np.testing.assert_allclose(eval_basis(b, 1.0), np.eye(10)[-1], atol=1e-15)


def test_hat_functions_by_hand():
    # order 2, dim 3 on [0, 1]: knots 0,0,0.5,1,1; at t=0.25 the first two hats are 1-2t and 2t
    b = make_basis(2, 3)
    np.testing.assert_allclose(eval_basis(b, 0.25), [0.5, 0.5, 0.0], atol=1e-15)


def test_local_support():
    b = make_basis(4, 12)
    t = np.random.default_rng(1).uniform(0, 1, 200)
    assert np.all(np.count_nonzero(b(t), axis=1) <= 4)


@settings(max_examples=25, deadline=None)
@given(
    order=st.integers(1, 5),
    extra=st.integers(0, 10),
    lo=st.floats(-5, 5),
    width=st.floats(0.1, 10),
)
def test_partition_of_unity(order, extra, lo, width):
    b = make_basis(order, order + extra, (lo, lo + width))
    t = np.random.default_rng(0).uniform(lo, lo + width, 1000)
    V = b(t)
    assert np.all(V >= 0)
    assert np.max(np.abs(V.sum(axis=1) - 1)) < 1e-12


def test_bad_configuration():
    with pytest.raises(ConfigurationError):
        make_basis(4, 3)
    with pytest.raises(ConfigurationError):
        make_basis(4, 8, (1.0, 1.0))


def test_domain_error():
    b = make_basis(4, 8)
    with pytest.raises(DomainError):
        eval_basis(b, 1.5)


def test_project_constant():
    b = make_basis(4, 10)
    grid = np.linspace(0, 1, 50)
    np.testing.assert_allclose(project_curve(b, grid, np.ones(50)).coeffs, np.ones(10), atol=1e-12)


def test_project_in_span_round_trip():
    b = make_basis(4, 12)
    grid = np.linspace(0, 1, 80)
    c = np.random.default_rng(2).normal(size=12)
    res = project_curve(b, grid, reconstruct(b, c, grid))
    np.testing.assert_allclose(res.coeffs, c, atol=1e-10)
    assert res.residual_rms < 1e-10
    fine = np.linspace(0, 1, 333)
    np.testing.assert_allclose(reconstruct(b, res.coeffs, fine), reconstruct(b, c, fine), atol=1e-10)


def test_project_noisy_sine_residual():
    rng = np.random.default_rng(3)
    b = make_basis(4, 20)
    grid = np.linspace(0, 1, 256)
    sd = 0.3
    y = np.sin(2 * np.pi * grid) + sd * rng.normal(size=256)
    assert project_curve(b, grid, y).residual_rms < 2 * sd


def test_projection_errors():
    b = make_basis(4, 10)
    with pytest.raises(RankError):
        projection_matrix(b, np.linspace(0, 1, 5))
    # ten samples crowded in one knot span cannot pin down ten coefficients
    with pytest.raises(RankError):
        projection_matrix(b, np.linspace(0.0, 0.05, 10))


def test_project_curves_batch_matches_single():
    b = make_basis(4, 8)
    grid = np.linspace(0, 1, 40)
    Y = np.random.default_rng(4).normal(size=(3, 40))
    batch = project_curves(b, grid, Y)
    for y, row in zip(Y, batch):
        np.testing.assert_allclose(project_curve(b, grid, y).coeffs, row, atol=1e-12)


def test_reconstruct_basics():
    b = make_basis(4, 9)
    grid = np.linspace(0, 1, 17)
    np.testing.assert_array_equal(reconstruct(b, np.zeros(9), grid), np.zeros(17))
    np.testing.assert_allclose(reconstruct(b, np.eye(9)[3], grid), b(grid)[:, 3])
    with pytest.raises(ValueError):
        reconstruct(b, np.zeros(8), grid)


def test_gram_indicator_diagonal():
    b = make_basis(1, 4)
    np.testing.assert_allclose(cross_gram(b, b).matrix, 0.25 * np.eye(4), atol=1e-15)


def test_gram_symmetric_psd():
    b = make_basis(4, 15)
    G = cross_gram(b, b).matrix
    np.testing.assert_array_equal(G, G.T)
    assert np.linalg.eigvalsh(G).min() > -1e-14


def _simpson(t):
    w = np.full(t.size, 2.0)
    w[1::2] = 4.0
    w[0] = w[-1] = 1.0
    return w * (t[1] - t[0]) / 3


def test_gram_row_sums_match_integrals():
    a, b = make_basis(4, 15), make_basis(3, 11)
    G = cross_gram(a, b).matrix
    t = np.linspace(0, 1, 20001)
    np.testing.assert_allclose(G.sum(axis=1), _simpson(t) @ a(t), atol=1e-10)


def test_gram_against_composite_simpson():
    # every knot of both bases is a Simpson node, so the error is O(h^4) per piece
    a, b = make_basis(4, 7), make_basis(2, 5)
    t = np.linspace(0, 1, 20001)
    ref = (a(t) * _simpson(t)[:, None]).T @ b(t)
    np.testing.assert_allclose(cross_gram(a, b).matrix, ref, atol=1e-10)


def test_gram_domain_mismatch():
    with pytest.raises(ConfigurationError):
        cross_gram(make_basis(4, 8), make_basis(4, 8, (0.0, 2.0)))


def test_fd_weights_classic_stencils():
    np.testing.assert_allclose(fd_weights([-1, 0, 1], 1), [-0.5, 0, 0.5], atol=1e-14)
    np.testing.assert_allclose(fd_weights([-1, 0, 1], 2), [1, -2, 1], atol=1e-13)
    np.testing.assert_allclose(fd_weights([0, 1, 2], 2), [1, -2, 1], atol=1e-13)


def test_d1_zero_is_evaluation():
    b = make_basis(4, 15)
    op = derivative_operator(b)
    np.testing.assert_array_equal(op.block_d1, b(op.eval_points))
    np.testing.assert_allclose(op.block_d1 @ np.ones(15), np.ones(15), atol=1e-14)


def test_operator_shapes_and_chain():
    b = make_basis(4, 15)
    op = derivative_operator(b, 0, 2)
    assert op.stacked.shape == (30, 15)
    assert np.isfinite(op.condition_number) and op.condition_number < MAX_CONDITION
    np.testing.assert_allclose(op.chain @ op.block_d1, op.block_d2, atol=1e-10)
    zeta = np.random.default_rng(5).normal(size=(20, 15))
    np.testing.assert_allclose(zeta @ op.block_d2.T, (zeta @ op.block_d1.T) @ op.chain.T, atol=1e-10)
    np.testing.assert_allclose(op.block_d1_inverse @ op.block_d1, np.eye(15), atol=1e-10)


def test_eval_points_interior():
    b = make_basis(4, 10, (2.0, 4.0))
    e = default_eval_points(b)
    assert e.size == 10 and e[0] > 2.0 and e[-1] < 4.0
    np.testing.assert_allclose(np.diff(e), 0.2)


def test_first_difference_of_identity():
    # f(t) = t has Greville abscissae as coefficients; its first difference is 1
    b = make_basis(4, 12)
    A1 = difference_block(b, 1)
    np.testing.assert_allclose(A1 @ b.greville(), np.ones(12), atol=1e-10)


def test_derivative_order_convergence():
    # f(t) = t^3 (in span for cubic splines): f'' = 6t. Error shrinks with h.
    errs = []
    for dim in (10, 20, 40):
        b = make_basis(4, dim)
        fine = np.linspace(0, 1, 400)
        c = project_curve(b, fine, fine**3).coeffs
        e = default_eval_points(b)
        errs.append(np.max(np.abs(difference_block(b, 2, e) @ c - 6 * e)))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates >= 0.9)


def test_d1_one_is_singular_for_clamped_basis():
    b = make_basis(4, 15)
    with pytest.raises(OperatorError, match="condition number"):
        derivative_operator(b, 1, 2)


def test_invalid_orders():
    b = make_basis(4, 15)
    with pytest.raises(OperatorError):
        derivative_operator(b, 2, 1)
    with pytest.raises(OperatorError):
        derivative_operator(b, 0, 4)
