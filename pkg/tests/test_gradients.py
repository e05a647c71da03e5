import numpy as np
import pytest

from tbnet.gradcheck import numerical_gradient, relative_error

from gradient_cases import BLOCK_SEEDS, all_cases, block_case, kink_crossings, run_case

CASES = all_cases()


@pytest.mark.parametrize("name,fn,inputs", CASES, ids=[c[0] for c in CASES])
def test_finite_difference_agreement(name, fn, inputs):
    for t in inputs:
        assert t.data.size <= 2 * 4 * 8 * 8
    assert run_case(fn, inputs) < 1e-3


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.full(3, 1e-10)) < 1e-3
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


def test_numerical_gradient_of_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    g = numerical_gradient(lambda: float((x ** 2).sum()), x, 1e-3)
    np.testing.assert_allclose(g, 2 * x, rtol=1e-9)


@pytest.mark.parametrize("name", sorted(BLOCK_SEEDS))
def test_block_seeds_avoid_relu_kinks(name):
    fn, inputs = block_case(name, BLOCK_SEEDS[name])
    assert kink_crossings(fn, inputs) == 0
