"""
Юнит-тесты базовой численной части
"""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diverse_selftalk.exceptions import (
    DomainError, GradientCheckError, ShapeError, TargetIndexError
)
from diverse_selftalk.numcore import (
    RecurrentCellParams, check_gradients, cosine_similarity, cosine_similarity_grad,
    l2_distance_sq, lstm_backward, lstm_forward, recurrent_step, smooth_l1_penalty,
    softmax_cross_entropy, state_delta, state_delta_grad
)

finite_vectors = st.lists(
    st.floats(min_value=-10, max_value=10, allow_nan=False, allow_infinity=False),
    min_size=3, max_size=3,
)


@pytest.mark.unit
class TestSmoothL1Penalty:
    """Штраф разнообразия f(Δ)"""

    @pytest.mark.parametrize("delta, value, derivative", [
        (0.0, 0.0, 0.0),
        (0.05, 0.00125, 0.05),
        (0.1, 0.005, 0.1),
        (1.0, 0.095, 0.1),
    ])
    def test_reference_values(self, delta, value, derivative):
        got_value, got_derivative = smooth_l1_penalty(delta)
        assert got_value == pytest.approx(value, abs=1e-15)
        assert got_derivative == pytest.approx(derivative, abs=1e-15)

    def test_knee_is_continuous_and_smooth(self):
        left_value, left_derivative = smooth_l1_penalty(0.1 - 1e-13)
        right_value, right_derivative = smooth_l1_penalty(0.1)
        assert abs(left_value - right_value) < 1e-12
        assert abs(left_derivative - right_derivative) < 1e-12

    @pytest.mark.parametrize("delta", [-1e-9, -1.0, float("nan"), float("inf")])
    def test_invalid_delta(self, delta):
        with pytest.raises(DomainError):
            smooth_l1_penalty(delta)

    @given(st.floats(min_value=0, max_value=100), st.floats(min_value=0, max_value=100))
    def test_nonnegative_and_nondecreasing(self, a, b):
        low, high = min(a, b), max(a, b)
        assert smooth_l1_penalty(low)[0] >= 0.0
        assert smooth_l1_penalty(low)[0] <= smooth_l1_penalty(high)[0]

    @pytest.mark.parametrize("delta", [0.05, 0.03, 0.5, 1.0])
    def test_gradient_check(self, delta):
        report = check_gradients(
            lambda p: (smooth_l1_penalty(p[0])[0], np.array([smooth_l1_penalty(p[0])[1]])),
            np.array([delta]),
        )
        assert report.max_relative_error < 1e-6


@pytest.mark.unit
class TestStateDelta:
    """Разность норм соседних состояний"""

    def test_examples(self):
        v = np.array([0.3, -1.2, 2.0])
        assert state_delta(v, v) == 0.0
        assert state_delta([3.0, 4.0], [0.0, 1.0]) == pytest.approx(4.0, abs=1e-15)
        assert state_delta(v, -v) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            state_delta([1.0, 2.0], [1.0, 2.0, 3.0])

    @given(finite_vectors, finite_vectors)
    def test_symmetric(self, a, b):
        assert state_delta(a, b) == state_delta(b, a) >= 0.0

    def test_invariant_under_rotations(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b = rng.normal(size=5), rng.normal(size=5)
            q1, _ = np.linalg.qr(rng.normal(size=(5, 5)))
            q2, _ = np.linalg.qr(rng.normal(size=(5, 5)))
            assert state_delta(q1 @ a, q2 @ b) == pytest.approx(state_delta(a, b), abs=1e-12)

    def test_gradient_check(self):
        rng = np.random.default_rng(1)
        point = np.concatenate([rng.normal(size=4), 2.0 * rng.normal(size=4)])

        def f(p):
            g_prev, g_cur = state_delta_grad(p[:4], p[4:])
            return state_delta(p[:4], p[4:]), np.concatenate([g_prev, g_cur])

        assert check_gradients(f, point).max_relative_error < 1e-6


@pytest.mark.unit
class TestCosineAndDistance:
    """Косинус и квадрат евклидова расстояния"""

    def test_cosine_examples(self):
        assert cosine_similarity([1.0, 0.0], [1.0, 0.0]) == pytest.approx(1.0, abs=1e-15)
        assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
        assert cosine_similarity([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)

    def test_cosine_zero_norm(self):
        with pytest.raises(DomainError):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])

    @given(finite_vectors.filter(lambda v: np.linalg.norm(v) > 1e-3),
           finite_vectors.filter(lambda v: np.linalg.norm(v) > 1e-3),
           st.floats(min_value=0.1, max_value=10), st.floats(min_value=0.1, max_value=10))
    def test_cosine_properties(self, a, b, alpha, beta):
        a, b = np.array(a), np.array(b)
        assert cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-12)
        assert cosine_similarity(a, -a) == pytest.approx(-1.0, abs=1e-12)
        assert cosine_similarity(alpha * a, beta * b) == pytest.approx(cosine_similarity(a, b), abs=1e-12)
        assert -1.0 <= cosine_similarity(a, b) <= 1.0

    def test_cosine_gradient_check(self):
        rng = np.random.default_rng(2)
        point = rng.normal(size=6)

        def f(p):
            ga, gb = cosine_similarity_grad(p[:3], p[3:])
            return cosine_similarity(p[:3], p[3:]), np.concatenate([ga, gb])

        assert check_gradients(f, point).max_relative_error < 1e-6

    def test_distance_examples(self):
        v = [1.5, -2.0]
        assert l2_distance_sq(v, v) == 0.0
        assert l2_distance_sq([0.0, 0.0], [3.0, 4.0]) == 25.0
        with pytest.raises(ShapeError):
            l2_distance_sq([0.0], [0.0, 1.0])

    @given(finite_vectors, finite_vectors)
    def test_distance_symmetric(self, a, b):
        assert l2_distance_sq(a, b) == l2_distance_sq(b, a)


@pytest.mark.unit
class TestRecurrentStep:
    """Шаг LSTM-ячейки"""

    def test_zero_cell(self):
        params = RecurrentCellParams.zeros(3, 4)
        h, c = recurrent_step(params, np.zeros(3), np.zeros(4), np.zeros(4))
        assert np.array_equal(h, np.zeros(4))
        assert np.array_equal(c, np.zeros(4))

    def test_scalar_cell_by_hand(self):
        params = RecurrentCellParams(np.array([[1.0], [2.0], [0.5], [-1.0]]), np.zeros((4, 1)), np.zeros(4))
        h, c = recurrent_step(params, np.array([1.0]), np.array([0.0]), np.array([0.5]))

        def sig(z):
            return 1.0 / (1.0 + math.exp(-z))

        expected_c = sig(2.0) * 0.5 + sig(1.0) * math.tanh(0.5)
        expected_h = sig(-1.0) * math.tanh(expected_c)
        assert c[0] == pytest.approx(expected_c, abs=1e-12)
        assert h[0] == pytest.approx(expected_h, abs=1e-12)

    def test_output_shape_and_bound(self):
        rng = np.random.default_rng(3)
        params = RecurrentCellParams(rng.normal(size=(20, 3)), rng.normal(size=(20, 5)), rng.normal(size=20))
        h, c = recurrent_step(params, rng.normal(size=3), rng.normal(size=5), rng.normal(size=5))
        assert h.shape == (5,) and c.shape == (5,)
        assert np.all(np.isfinite(h)) and np.max(np.abs(h)) < 1.0

    def test_shape_errors(self):
        params = RecurrentCellParams.zeros(3, 4)
        with pytest.raises(ShapeError):
            recurrent_step(params, np.zeros(2), np.zeros(4), np.zeros(4))
        with pytest.raises(ShapeError):
            recurrent_step(params, np.zeros(3), np.zeros(3), np.zeros(4))
        with pytest.raises(ShapeError):
            RecurrentCellParams(np.zeros((8, 3)), np.zeros((8, 3)), np.zeros(8))

    def test_backward_gradient_check(self):
        """Градиенты lstm_backward по весам, входу и состоянию"""
        rng = np.random.default_rng(4)
        d_in, hidden = 3, 2
        sizes = [4 * hidden * d_in, 4 * hidden * hidden, 4 * hidden, d_in, hidden, hidden]
        point = rng.normal(scale=0.7, size=sum(sizes))
        w_h, w_c = rng.normal(size=(1, hidden)), rng.normal(size=(1, hidden))

        def unpack(p):
            parts = np.split(p, np.cumsum(sizes)[:-1])
            params = RecurrentCellParams(parts[0].reshape(4 * hidden, d_in),
                                         parts[1].reshape(4 * hidden, hidden), parts[2])
            return params, parts[3][None, :], parts[4][None, :], parts[5][None, :]

        def f(p):
            params, x, h, c = unpack(p)
            h_next, c_next, cache = lstm_forward(params, x, h, c)
            value = float(np.sum(w_h * h_next) + np.sum(w_c * c_next))
            dx, dh, dc, d_wx, d_wh, d_b = lstm_backward(params, cache, w_h, w_c)
            return value, np.concatenate([d_wx.ravel(), d_wh.ravel(), d_b, dx[0], dh[0], dc[0]])

        assert check_gradients(f, point).max_relative_error < 1e-6


@pytest.mark.unit
class TestSoftmaxCrossEntropy:
    """Кросс-энтропия по логитам"""

    def test_uniform_logits(self):
        loss, _ = softmax_cross_entropy(np.zeros(4), 2)
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_saturated_target(self):
        loss, _ = softmax_cross_entropy(np.array([30.0, 0.0, 0.0]), 0)
        assert 0.0 <= loss < 1e-12

    @given(st.lists(st.floats(min_value=-20, max_value=20), min_size=2, max_size=8), st.data())
    def test_gradient_sums_to_zero(self, logits, data):
        target = data.draw(st.integers(min_value=0, max_value=len(logits) - 1))
        loss, grad = softmax_cross_entropy(np.array(logits), target)
        assert loss >= 0.0
        assert abs(float(np.sum(grad))) < 1e-12

    def test_target_out_of_range(self):
        with pytest.raises(TargetIndexError):
            softmax_cross_entropy(np.zeros(3), 3)
        with pytest.raises(IndexError):
            softmax_cross_entropy(np.zeros(3), -1)

    def test_gradient_check(self):
        logits = np.random.default_rng(5).normal(size=6)
        report = check_gradients(lambda p: softmax_cross_entropy(p, 4), logits)
        assert report.max_relative_error < 1e-6


@pytest.mark.unit
class TestCheckGradients:
    """Проверка градиента конечными разностями"""

    def test_square(self):
        report = check_gradients(lambda p: (float(p[0] ** 2), 2.0 * p), np.array([3.0]), eps=1e-5)
        assert report.max_relative_error < 1e-8
        assert report.probe_count == 1

    def test_detects_wrong_gradient(self):
        report = check_gradients(lambda p: (float(np.sum(p ** 2)), 3.0 * p), np.array([1.0, 2.0]))
        assert report.max_relative_error > 0.1

    def test_probes_subset(self):
        point = np.arange(1.0, 51.0)
        report = check_gradients(lambda p: (float(np.sum(p ** 2)), 2.0 * p), point, probes=10, seed=3)
        assert report.probe_count == 10
        assert 0 <= report.worst_coordinate < 50

    @pytest.mark.parametrize("eps", [1e-8, 1e-2])
    def test_eps_range(self, eps):
        with pytest.raises(DomainError):
            check_gradients(lambda p: (float(p[0]), np.ones(1)), np.array([1.0]), eps=eps)

    def test_non_finite_probe(self):
        def f(p):
            value = float(p[0]) if p[0] <= 1.0 else float("inf")
            return value, np.ones(1)

        with pytest.raises(GradientCheckError):
            check_gradients(f, np.array([1.0]))
