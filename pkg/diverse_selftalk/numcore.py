"""
Базовая численная часть: векторы, LSTM-ячейка, потери, штраф разнообразия
и проверка градиентов конечными разностями.

Все вычисления ведутся в float64. Порядок гейтов ячейки фиксирован:
input, forget, candidate, output.
"""
from typing import Callable, Optional, Tuple

import numpy as np

from .exceptions import DomainError, GradientCheckError, ShapeError, TargetIndexError
from .models import GradCheckReport

Vec = np.ndarray

PENALTY_KNEE = 0.1
GATE_ORDER = ("input", "forget", "candidate", "output")


def as_vec(values, name: str = "vector") -> Vec:
    """Приведение к одномерному вектору float64 с проверкой конечности"""
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise ShapeError(f"{name}: ожидается непустой одномерный вектор, получено {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise DomainError(f"{name}: вектор содержит нечисловые значения")
    return vec


def _same_dim(a: Vec, b: Vec) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"Размерности не совпадают: {a.shape} и {b.shape}")


def smooth_l1_penalty(delta: float) -> Tuple[float, float]:
    """Штраф f(Δ) и его производная; квадратичная ветвь строго при Δ < 0.1"""
    delta = float(delta)
    if not np.isfinite(delta) or delta < 0:
        raise DomainError(f"delta должна быть неотрицательной и конечной, получено {delta}")
    if delta < PENALTY_KNEE:
        return 0.5 * delta * delta, delta
    return PENALTY_KNEE * (delta - 0.5 * PENALTY_KNEE), PENALTY_KNEE


def state_delta(s_prev: Vec, s_cur: Vec) -> float:
    """Δ = |‖s_prev‖ − ‖s_cur‖|"""
    s_prev = as_vec(s_prev, "s_prev")
    s_cur = as_vec(s_cur, "s_cur")
    _same_dim(s_prev, s_cur)
    return abs(float(np.linalg.norm(s_prev)) - float(np.linalg.norm(s_cur)))


def state_delta_grad(s_prev: Vec, s_cur: Vec) -> Tuple[Vec, Vec]:
    """Градиент Δ по обоим состояниям (субградиент 0 при нулевой норме или Δ = 0)"""
    n_prev = float(np.linalg.norm(s_prev))
    n_cur = float(np.linalg.norm(s_cur))
    sign = np.sign(n_prev - n_cur)
    g_prev = sign * s_prev / n_prev if n_prev > 0 else np.zeros_like(s_prev)
    g_cur = -sign * s_cur / n_cur if n_cur > 0 else np.zeros_like(s_cur)
    return g_prev, g_cur


def cosine_similarity(a: Vec, b: Vec) -> float:
    a = as_vec(a, "a")
    b = as_vec(b, "b")
    _same_dim(a, b)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DomainError("Косинус не определен для вектора с нулевой нормой")
    value = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, value))


def cosine_similarity_grad(a: Vec, b: Vec) -> Tuple[Vec, Vec]:
    """Градиент косинуса по a и по b"""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return np.zeros_like(a), np.zeros_like(b)
    cos = float(np.dot(a, b)) / (na * nb)
    ga = b / (na * nb) - cos * a / (na * na)
    gb = a / (na * nb) - cos * b / (nb * nb)
    return ga, gb


def l2_distance_sq(a: Vec, b: Vec) -> float:
    a = as_vec(a, "a")
    b = as_vec(b, "b")
    _same_dim(a, b)
    diff = a - b
    return float(np.dot(diff, diff))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class RecurrentCellParams:
    """Параметры LSTM-ячейки: W_x (4H, D), W_h (4H, H), b (4H)"""

    def __init__(self, input_weights: np.ndarray, recurrent_weights: np.ndarray, biases: np.ndarray):
        self.input_weights = np.asarray(input_weights, dtype=np.float64)
        self.recurrent_weights = np.asarray(recurrent_weights, dtype=np.float64)
        self.biases = np.asarray(biases, dtype=np.float64)

        if self.recurrent_weights.ndim != 2 or self.recurrent_weights.shape[0] != 4 * self.recurrent_weights.shape[1]:
            raise ShapeError(f"recurrent_weights должна иметь форму (4H, H), получено {self.recurrent_weights.shape}")
        hidden = self.recurrent_weights.shape[1]
        if self.input_weights.ndim != 2 or self.input_weights.shape[0] != 4 * hidden:
            raise ShapeError(f"input_weights должна иметь форму (4H, D), получено {self.input_weights.shape}")
        if self.biases.shape != (4 * hidden,):
            raise ShapeError(f"biases должен иметь форму (4H,), получено {self.biases.shape}")

    @property
    def input_dim(self) -> int:
        return self.input_weights.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.recurrent_weights.shape[1]

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "RecurrentCellParams":
        return cls(
            np.zeros((4 * hidden_dim, input_dim)),
            np.zeros((4 * hidden_dim, hidden_dim)),
            np.zeros(4 * hidden_dim),
        )


def lstm_forward(params: RecurrentCellParams, x: np.ndarray, h: np.ndarray, c: np.ndarray):
    """Пакетный шаг ячейки: x (B, D), h и c (B, H). Возвращает h', c' и кэш"""
    hidden = params.hidden_dim
    z = x @ params.input_weights.T + h @ params.recurrent_weights.T + params.biases
    i = sigmoid(z[:, :hidden])
    f = sigmoid(z[:, hidden:2 * hidden])
    g = np.tanh(z[:, 2 * hidden:3 * hidden])
    o = sigmoid(z[:, 3 * hidden:])
    c_next = f * c + i * g
    tanh_c = np.tanh(c_next)
    h_next = o * tanh_c
    return h_next, c_next, (x, h, c, i, f, g, o, tanh_c)


def lstm_backward(params: RecurrentCellParams, cache, dh_next: np.ndarray, dc_next: np.ndarray):
    """Обратный проход шага ячейки.

    Возвращает (dx, dh, dc, dW_x, dW_h, db).
    """
    x, h, c, i, f, g, o, tanh_c = cache
    do = dh_next * tanh_c
    dc_total = dc_next + dh_next * o * (1.0 - tanh_c * tanh_c)
    di = dc_total * g
    df = dc_total * c
    dg = dc_total * i
    dc_prev = dc_total * f

    dz = np.concatenate([
        di * i * (1.0 - i),
        df * f * (1.0 - f),
        dg * (1.0 - g * g),
        do * o * (1.0 - o),
    ], axis=1)

    d_input_weights = dz.T @ x
    d_recurrent_weights = dz.T @ h
    d_biases = dz.sum(axis=0)
    dx = dz @ params.input_weights
    dh_prev = dz @ params.recurrent_weights
    return dx, dh_prev, dc_prev, d_input_weights, d_recurrent_weights, d_biases


def recurrent_step(params: RecurrentCellParams, x: Vec, h: Vec, c: Vec) -> Tuple[Vec, Vec]:
    """Один шаг ячейки для одиночных векторов"""
    x = as_vec(x, "x")
    h = as_vec(h, "h")
    c = as_vec(c, "c")
    if x.shape != (params.input_dim,):
        raise ShapeError(f"x: ожидается размерность {params.input_dim}, получено {x.shape[0]}")
    if h.shape != (params.hidden_dim,) or c.shape != (params.hidden_dim,):
        raise ShapeError(f"h и c: ожидается размерность {params.hidden_dim}")
    h_next, c_next, _ = lstm_forward(params, x[None, :], h[None, :], c[None, :])
    return h_next[0], c_next[0]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Vec, target: int) -> Tuple[float, Vec]:
    """Кросс-энтропия и ее градиент по логитам"""
    logits = as_vec(logits, "logits")
    target = int(target)
    if target < 0 or target >= logits.shape[0]:
        raise TargetIndexError(f"target {target} вне диапазона [0, {logits.shape[0]})")
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[target] -= 1.0
    return max(0.0, -float(logp[target])), grad


def check_gradients(
    f: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    point: Vec,
    eps: float = 1e-5,
    probes: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Сравнение аналитического градиента с центральными разностями.

    f возвращает пару (значение, аналитический градиент). При заданном probes
    проверяется случайное подмножество координат.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise DomainError(f"eps должен лежать в [1e-7, 1e-3], получено {eps}")
    point = np.array(as_vec(point, "point"), dtype=np.float64)

    value, analytic = f(point.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    if not np.isfinite(value) or not np.all(np.isfinite(analytic)):
        raise GradientCheckError("Функция вернула нечисловое значение в исходной точке")
    if analytic.shape != point.shape:
        raise ShapeError(f"Градиент формы {analytic.shape} не совпадает с точкой {point.shape}")

    if probes is None or probes >= point.size:
        coordinates = np.arange(point.size)
    else:
        rng = np.random.default_rng(seed)
        coordinates = np.sort(rng.choice(point.size, size=probes, replace=False))

    worst_error = 0.0
    worst_coordinate = int(coordinates[0])
    for index in coordinates:
        shifted = point.copy()
        shifted[index] = point[index] + eps
        f_plus, _ = f(shifted)
        shifted[index] = point[index] - eps
        f_minus, _ = f(shifted)
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise GradientCheckError(f"Нечисловое значение функции в координате {index}")

        numeric = (f_plus - f_minus) / (2.0 * eps)
        denominator = max(abs(analytic[index]), abs(numeric), 1e-8)
        error = abs(analytic[index] - numeric) / denominator
        if error > worst_error:
            worst_error = error
            worst_coordinate = int(index)

    return GradCheckReport(
        max_relative_error=float(worst_error),
        worst_coordinate=worst_coordinate,
        probe_count=int(len(coordinates)),
    )
