"""Tests for the clamped B-spline basis and its analytic derivatives."""
import numpy as np
import pytest

from splineop.basis import (BasisSpec, eval_all, eval_derivative, make_knots,
                            rescale)
from splineop.errors import DomainError, InvalidOrderError, InvalidSpecError

FD_STEP = 1e-6


def central_diff(kv, x, p):
    """Finite-difference oracle for the p-th basis derivative."""
    if p == 1:
        return (eval_all(kv, x + FD_STEP) - eval_all(kv, x - FD_STEP)) / (2 * FD_STEP)
    lower = central_diff(kv, x - FD_STEP, p - 1)
    upper = central_diff(kv, x + FD_STEP, p - 1)
    return (upper - lower) / (2 * FD_STEP)


class TestMakeKnots:
    def test_bernstein_case(self):
        kv = make_knots(3, 2, (0.0, 1.0))
        np.testing.assert_array_equal(kv.knots, [0, 0, 0, 1, 1, 1])

    def test_single_interior_knot(self):
        kv = make_knots(4, 2, (0.0, 1.0))
        np.testing.assert_array_equal(kv.knots, [0, 0, 0, 0.5, 1, 1, 1])

    def test_too_few_control_points(self):
        with pytest.raises(InvalidSpecError):
            make_knots(2, 2)

    def test_empty_domain(self):
        with pytest.raises(InvalidSpecError):
            make_knots(5, 2, (1.0, 1.0))

    def test_clamping_and_spacing(self):
        kv = make_knots(9, 3)
        assert np.all(kv.knots[:4] == 0.0) and np.all(kv.knots[-4:] == 1.0)
        interior = kv.knots[4:-4]
        assert len(interior) == 9 - 3 - 1
        np.testing.assert_allclose(np.diff(kv.knots[3:-3]), kv.span_width)


class TestEvalAll:
    def test_order_zero_is_indicator(self):
        kv = make_knots(5, 0)
        for x in np.linspace(0, 0.999, 40):
            vals = eval_all(kv, x)
            i = min(int(x * 5), 4)
            expected = np.zeros(5)
            expected[i] = 1.0
            np.testing.assert_array_equal(vals, expected)

    def test_bernstein_values(self):
        kv = make_knots(3, 2)
        np.testing.assert_allclose(eval_all(kv, 0.5), [0.25, 0.5, 0.25], atol=1e-15)

    def test_partition_of_unity(self):
        for ell, order in [(3, 2), (8, 3), (12, 4), (20, 3)]:
            kv = make_knots(ell, order)
            for x in np.linspace(0, 1, 1000):
                assert abs(eval_all(kv, x).sum() - 1.0) < 1e-12

    def test_local_support(self):
        rng = np.random.default_rng(3)
        for ell, order in [(8, 2), (12, 3), (15, 4)]:
            kv = make_knots(ell, order)
            for x in rng.uniform(0, 1, 50):
                assert np.count_nonzero(eval_all(kv, x)) <= order + 1

    def test_endpoint_interpolation(self):
        for ell, order in [(3, 2), (9, 3), (11, 4)]:
            kv = make_knots(ell, order)
            left = eval_all(kv, 0.0)
            right = eval_all(kv, 1.0)
            np.testing.assert_allclose(left, np.eye(ell)[0], atol=1e-15)
            np.testing.assert_allclose(right, np.eye(ell)[-1], atol=1e-15)

    def test_values_in_unit_range(self):
        kv = make_knots(10, 3)
        for x in np.linspace(0, 1, 200):
            v = eval_all(kv, x)
            assert np.all(v >= 0) and np.all(v <= 1)

    def test_out_of_domain(self):
        kv = make_knots(5, 2)
        with pytest.raises(DomainError):
            eval_all(kv, 1.2)
        with pytest.raises(DomainError):
            eval_all(kv, -0.01)


class TestEvalDerivative:
    def test_bernstein_first_derivative(self):
        kv = make_knots(3, 2)
        np.testing.assert_allclose(eval_derivative(kv, 1, 0.5), [-1, 0, 1], atol=1e-14)

    def test_bernstein_second_derivative(self):
        kv = make_knots(3, 2)
        np.testing.assert_allclose(eval_derivative(kv, 2, 0.3), [2, -4, 2], atol=1e-13)

    def test_derivative_sums_to_zero(self):
        for ell, order in [(6, 2), (10, 3)]:
            kv = make_knots(ell, order)
            for x in np.linspace(0, 1, 101):
                assert abs(eval_derivative(kv, 1, x).sum()) < 1e-11

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        for order in (2, 3, 4):
            for ell in (order + 1, order + 4, order + 9):
                kv = make_knots(ell, order)
                for p in (1, 2):
                    xs = rng.uniform(0.05, 0.95, 30)
                    # derivatives may jump at knots; keep FD probes off them
                    xs = xs[np.min(np.abs(xs[:, None] - kv.knots[None, :]), axis=1) > 1e-4]
                    for x in xs:
                        exact = eval_derivative(kv, p, x)
                        approx = central_diff(kv, x, p)
                        scale = max(1.0, np.max(np.abs(exact)))
                        assert np.max(np.abs(exact - approx)) / scale < 1e-6

    def test_invalid_order(self):
        kv = make_knots(5, 2)
        with pytest.raises(InvalidOrderError):
            eval_derivative(kv, 3, 0.5)

    def test_out_of_domain(self):
        kv = make_knots(5, 2)
        with pytest.raises(DomainError):
            eval_derivative(kv, 1, -0.5)


class TestRescale:
    def test_endpoint_maps_to_one(self):
        assert rescale(4.0, (-10.0, 4.0)) == (1.0, 1.0 / 14.0)

    def test_lower_endpoint(self):
        u, jac = rescale(-10.0, (-10.0, 4.0))
        assert u == 0.0 and jac == 1.0 / 14.0

    def test_out_of_domain(self):
        with pytest.raises(DomainError):
            rescale(5.0, (-10.0, 4.0))

    def test_chain_rule_against_physical_fd(self):
        # p-th physical derivative = normalized derivative * jac^p
        kv = make_knots(9, 3)
        domain = (-10.0, 4.0)
        coeff = np.random.default_rng(11).normal(size=9)

        def surface(x_phys):
            u, _ = rescale(x_phys, domain)
            return coeff @ eval_all(kv, u)

        h = 1e-5
        for x_phys in (-7.3, -2.0, 1.9):
            u, jac = rescale(x_phys, domain)
            d1 = coeff @ eval_derivative(kv, 1, u) * jac
            d2 = coeff @ eval_derivative(kv, 2, u) * jac**2
            fd1 = (surface(x_phys + h) - surface(x_phys - h)) / (2 * h)
            fd2 = (surface(x_phys + h) - 2 * surface(x_phys) + surface(x_phys - h)) / h**2
            assert abs(d1 - fd1) < 1e-6 * max(1, abs(d1))
            assert abs(d2 - fd2) < 1e-4 * max(1, abs(d2))


class TestBasisSpec:
    def test_shape_and_orders(self):
        spec = BasisSpec.uniform((8, 6), (3, 2), ((-10.0, 4.0), (0.0, 10.0)))
        assert spec.shape == (8, 6)
        assert spec.orders == (3, 2)

    def test_normalize(self):
        spec = BasisSpec.uniform((8, 6), (3, 2), ((-10.0, 4.0), (0.0, 10.0)))
        us, jacs = spec.normalize([-3.0, 5.0])
        np.testing.assert_allclose(us, [0.5, 0.5])
        np.testing.assert_allclose(jacs, [1 / 14, 1 / 10])

    def test_mismatched_domains(self):
        with pytest.raises(InvalidSpecError):
            BasisSpec.uniform((8,), (3,), ((-1.0, -2.0),))
