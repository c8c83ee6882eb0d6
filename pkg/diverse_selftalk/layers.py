"""
Слои поверх словаря именованных тензоров: эмбеддинги, линейные проекции,
dropout и многослойный LSTM с маскированием по длинам последовательностей.
"""
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numcore import RecurrentCellParams, lstm_backward, lstm_forward

Tensors = Dict[str, np.ndarray]
LSTMState = Tuple[List[np.ndarray], List[np.ndarray]]


def pad_batch(sequences: Sequence[Sequence[int]], pad_id: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Выравнивание последовательностей в матрицу (T, B) и булеву маску"""
    length = max([len(s) for s in sequences] + [1])
    tokens = np.full((length, len(sequences)), pad_id, dtype=np.int64)
    mask = np.zeros((length, len(sequences)), dtype=bool)
    for b, sequence in enumerate(sequences):
        tokens[:len(sequence), b] = sequence
        mask[:len(sequence), b] = True
    return tokens, mask


def dropout_mask(rng: Optional[np.random.Generator], shape, rate: float) -> Optional[np.ndarray]:
    """Маска inverted dropout; None, если dropout выключен"""
    if rate <= 0.0 or rng is None:
        return None
    keep = rng.random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def apply_mask(x: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    return x if mask is None else x * mask


def linear(tensors: Tensors, name: str, x: np.ndarray) -> np.ndarray:
    return x @ tensors[f"{name}.w"].T + tensors[f"{name}.b"]


def linear_backward(tensors: Tensors, grads: Tensors, name: str, x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    flat_x = x.reshape(-1, x.shape[-1])
    flat_dy = dy.reshape(-1, dy.shape[-1])
    grads[f"{name}.w"] += flat_dy.T @ flat_x
    grads[f"{name}.b"] += flat_dy.sum(axis=0)
    return dy @ tensors[f"{name}.w"]


def embed_backward(grads: Tensors, name: str, tokens: np.ndarray, d_embedded: np.ndarray) -> None:
    np.add.at(grads[name], tokens.reshape(-1), d_embedded.reshape(-1, d_embedded.shape[-1]))


class StackedLSTM:
    """Многослойный LSTM; параметры слоя l хранятся как {name}.{l}.wx / wh / b"""

    def __init__(self, name: str, num_layers: int):
        self.name = name
        self.num_layers = num_layers

    def parameter_shapes(self, input_dim: int, hidden_dim: int) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for layer in range(self.num_layers):
            layer_input = input_dim if layer == 0 else hidden_dim
            shapes[f"{self.name}.{layer}.wx"] = (4 * hidden_dim, layer_input)
            shapes[f"{self.name}.{layer}.wh"] = (4 * hidden_dim, hidden_dim)
            shapes[f"{self.name}.{layer}.b"] = (4 * hidden_dim,)
        return shapes

    def cell(self, tensors: Tensors, layer: int) -> RecurrentCellParams:
        prefix = f"{self.name}.{layer}"
        return RecurrentCellParams(tensors[f"{prefix}.wx"], tensors[f"{prefix}.wh"], tensors[f"{prefix}.b"])

    def hidden_dim(self, tensors: Tensors) -> int:
        return tensors[f"{self.name}.0.wh"].shape[1]

    def zero_state(self, tensors: Tensors, batch: int) -> LSTMState:
        hidden = self.hidden_dim(tensors)
        return (
            [np.zeros((batch, hidden)) for _ in range(self.num_layers)],
            [np.zeros((batch, hidden)) for _ in range(self.num_layers)],
        )

    def step(self, tensors: Tensors, x: np.ndarray, state: LSTMState) -> LSTMState:
        """Шаг без кэша для пошагового декодирования"""
        hs, cs = state
        new_hs, new_cs = [], []
        layer_input = x
        for layer in range(self.num_layers):
            h, c, _ = lstm_forward(self.cell(tensors, layer), layer_input, hs[layer], cs[layer])
            new_hs.append(h)
            new_cs.append(c)
            layer_input = h
        return new_hs, new_cs

    def forward(self, tensors: Tensors, xs: np.ndarray, mask: np.ndarray, state: LSTMState):
        """Прямой проход по (T, B, D); строки с mask=False сохраняют состояние.

        Возвращает выходы верхнего слоя (T, B, H), финальное состояние и кэш.
        """
        cells = [self.cell(tensors, layer) for layer in range(self.num_layers)]
        hs, cs = list(state[0]), list(state[1])
        steps = xs.shape[0]
        tops = np.zeros((steps, xs.shape[1], hs[0].shape[1]))
        caches = []
        for t in range(steps):
            keep = mask[t][:, None]
            layer_input = xs[t]
            step_caches = []
            for layer, cell in enumerate(cells):
                h_new, c_new, cache = lstm_forward(cell, layer_input, hs[layer], cs[layer])
                hs[layer] = np.where(keep, h_new, hs[layer])
                cs[layer] = np.where(keep, c_new, cs[layer])
                step_caches.append(cache)
                layer_input = hs[layer]
            tops[t] = hs[-1]
            caches.append(step_caches)
        return tops, (hs, cs), (cells, caches, mask)

    def backward(self, tensors: Tensors, grads: Tensors, cache, d_tops: np.ndarray,
                 d_final: Optional[LSTMState] = None):
        """Обратный проход; градиенты параметров накапливаются в grads.

        Возвращает градиент по входам (T, B, D) и по начальному состоянию.
        """
        cells, caches, mask = cache
        steps, batch = mask.shape
        hidden = d_tops.shape[2]
        if d_final is None:
            dh = [np.zeros((batch, hidden)) for _ in range(self.num_layers)]
            dc = [np.zeros((batch, hidden)) for _ in range(self.num_layers)]
        else:
            dh = [g.copy() for g in d_final[0]]
            dc = [g.copy() for g in d_final[1]]

        d_xs = None
        for t in reversed(range(steps)):
            keep = mask[t][:, None]
            d_above = d_tops[t]
            for layer in reversed(range(self.num_layers)):
                d_h = dh[layer] + d_above
                d_c = dc[layer]
                dx, dh_prev, dc_prev, d_wx, d_wh, d_b = lstm_backward(
                    cells[layer], caches[t][layer],
                    np.where(keep, d_h, 0.0), np.where(keep, d_c, 0.0)
                )
                prefix = f"{self.name}.{layer}"
                grads[f"{prefix}.wx"] += d_wx
                grads[f"{prefix}.wh"] += d_wh
                grads[f"{prefix}.b"] += d_b
                dh[layer] = dh_prev + np.where(keep, 0.0, d_h)
                dc[layer] = dc_prev + np.where(keep, 0.0, d_c)
                d_above = dx
            if d_xs is None:
                d_xs = np.zeros((steps,) + d_above.shape)
            d_xs[t] = d_above
        return d_xs, (dh, dc)
