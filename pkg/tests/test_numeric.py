import numpy as np
import numpy.testing as npt
import pytest

from bmrnn.errors import ShapeMismatchError
from bmrnn.numeric import (
    SeededRng,
    all_finite,
    dsigmoid,
    dtanh,
    elementwise,
    hadamard,
    init_params,
    matvec,
    sigmoid,
    tanh,
)


class TestMatvec:
    def test_identity(self):
        npt.assert_array_equal(matvec(np.eye(3), np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])

    def test_zero_matrix_annihilates(self):
        npt.assert_array_equal(matvec(np.zeros((2, 3)), np.array([1.0, 2.0, 3.0])), [0.0, 0.0])

    def test_hand_computed(self):
        # [[1,2],[3,4]] @ [1,1] = [1+2, 3+4]
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        npt.assert_array_equal(matvec(m, np.array([1.0, 1.0])), [3.0, 7.0])

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError) as exc:
            matvec(np.zeros((2, 3)), np.zeros(4))
        assert "(2, 3)" in str(exc.value) and "(4,)" in str(exc.value)

    def test_distributes_over_addition(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            m = rng.normal(size=(4, 6))
            a, b = rng.normal(size=6), rng.normal(size=6)
            npt.assert_allclose(matvec(m, a + b), matvec(m, a) + matvec(m, b), atol=1e-12)


class TestElementwise:
    def test_sigmoid_at_zero(self):
        npt.assert_array_equal(sigmoid(np.array([0.0])), [0.5])

    def test_tanh_at_zero(self):
        npt.assert_array_equal(tanh(np.array([0.0])), [0.0])

    def test_hadamard_hand_computed(self):
        npt.assert_array_equal(hadamard(np.array([2.0, 3.0]), np.array([4.0, 5.0])), [8.0, 15.0])

    def test_dispatcher_matches_named_functions(self):
        x = np.linspace(-3, 3, 7)
        y = np.linspace(1, 2, 7)
        npt.assert_array_equal(elementwise("sigmoid", x), sigmoid(x))
        npt.assert_array_equal(elementwise("tanh", x), tanh(x))
        npt.assert_array_equal(elementwise("dsigmoid", x), dsigmoid(x))
        npt.assert_array_equal(elementwise("dtanh", x), dtanh(x))
        npt.assert_array_equal(elementwise("add", x, y), x + y)
        npt.assert_array_equal(elementwise("sub", x, y), x - y)
        npt.assert_array_equal(elementwise("hadamard", x, y), x * y)

    def test_derivative_identities(self):
        # dsigmoid and dtanh against central finite differences
        x = np.linspace(-5, 5, 101)
        h = 1e-6
        npt.assert_allclose(dsigmoid(x), (sigmoid(x + h) - sigmoid(x - h)) / (2 * h), atol=1e-9)
        npt.assert_allclose(dtanh(x), (tanh(x + h) - tanh(x - h)) / (2 * h), atol=1e-8)

    def test_ranges_strict(self):
        # float64 tanh saturates to exactly +-1 beyond |x| ~ 19, so the
        # strict-open-interval check uses a non-saturating domain
        x = np.linspace(-30, 30, 1001)
        s = sigmoid(x)
        assert np.all(s > 0) and np.all(s < 1)
        t = tanh(np.linspace(-15, 15, 1001))
        assert np.all(t > -1) and np.all(t < 1)

    def test_sigmoid_extreme_inputs_finite(self):
        s = sigmoid(np.array([-1e4, 1e4]))
        assert all_finite(s)
        npt.assert_allclose(s, [0.0, 1.0], atol=1e-12)

    def test_binary_dim_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            hadamard(np.zeros(2), np.zeros(3))

    def test_unknown_op_rejected(self):
        with pytest.raises(ValueError):
            elementwise("relu", np.zeros(2))

    def test_inputs_not_mutated(self):
        x = np.array([1.0, -2.0, 3.0])
        x0 = x.copy()
        sigmoid(x), tanh(x), dsigmoid(x), dtanh(x), hadamard(x, x)
        m = np.arange(9.0).reshape(3, 3)
        m0 = m.copy()
        matvec(m, x)
        npt.assert_array_equal(x, x0)
        npt.assert_array_equal(m, m0)


class TestInitParams:
    def test_deterministic_per_seed(self):
        a = init_params(2, 2, SeededRng(7))
        b = init_params(2, 2, SeededRng(7))
        npt.assert_array_equal(a, b)

    def test_default_scale_bound(self):
        m = init_params(4, 100, SeededRng(3))
        assert np.all(np.abs(m) <= 0.1)  # 1/sqrt(100)

    def test_mean_for_seed_1(self):
        # empirical value for this exact seed, frozen
        m = init_params(50, 50, SeededRng(1))
        npt.assert_allclose(m.mean(), -0.0009397966486783469, atol=1e-15)
        assert abs(m.mean()) < 0.02

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError):
            init_params(2, 2, SeededRng(0), scale=0.0)

    def test_all_finite(self):
        assert all_finite(init_params(20, 30, SeededRng(11), scale=5.0))


class TestSeededRng:
    def test_identical_streams(self):
        a, b = SeededRng(123), SeededRng(123)
        npt.assert_array_equal(a.normal(shape=100), b.normal(shape=100))
        npt.assert_array_equal(a.integers(0, 1000, 50), b.integers(0, 1000, 50))

    def test_spawn_is_deterministic_and_distinct(self):
        a = SeededRng(9).spawn(4)
        b = SeededRng(9).spawn(4)
        c = SeededRng(9).spawn(5)
        npt.assert_array_equal(a.uniform(0, 1, 10), b.uniform(0, 1, 10))
        assert not np.array_equal(a.uniform(0, 1, 10), c.uniform(0, 1, 10))

    def test_choice_without_replacement(self):
        picks = SeededRng(2).choice_without_replacement(10, 10)
        assert sorted(picks.tolist()) == list(range(10))
