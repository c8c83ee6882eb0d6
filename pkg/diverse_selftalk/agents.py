"""
Агенты Q-bot и A-bot: иерархические рекуррентные кодировщики-декодировщики.

Q-bot: факт (подпись или пара вопрос-ответ) кодируется LSTM "fact", затем
LSTM "dialog" обновляет состояние s; вопрос декодируется из s, голова "head"
отображает s в предсказание признаков изображения.

A-bot: вопрос кодируется LSTM "question", на вход которой к каждому слову
присоединяется проекция признаков изображения; история кодируется LSTM
"fact"; LSTM "dialog" получает [вопрос; предыдущий факт] и дает s^A, из
которого декодируется ответ.

Эмбеддинги слов общие для всех кодировщиков агента.
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import PAD, START, STOP, GroundTruthDialog, SyntheticImage, Vocabulary
from .decoding import decode
from .exceptions import ContractError, EncodeError, ShapeError
from .layers import (
    LSTMState, StackedLSTM, Tensors, apply_mask, dropout_mask, embed_backward,
    linear, linear_backward, pad_batch
)
from .models import AgentRole, DecodeConfig, ModelConfig
from .numcore import log_softmax

logger = logging.getLogger(__name__)


class AgentParameters:
    """Именованные тензоры агента и их размерности"""

    def __init__(self, role: AgentRole, tensors: Tensors, vocab_size: int, feature_dim: int,
                 model: ModelConfig):
        self.role = AgentRole(role)
        self.tensors = tensors
        self.vocab_size = vocab_size
        self.feature_dim = feature_dim
        self.model = model

        expected = parameter_shapes(self.role, model, vocab_size, feature_dim)
        if set(expected) != set(tensors):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ShapeError(f"Набор тензоров не совпадает: отсутствуют {missing}, лишние {extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ShapeError(f"Тензор {name}: ожидается форма {shape}, получено {tensors[name].shape}")

    @property
    def names(self) -> List[str]:
        return sorted(self.tensors)

    @property
    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def lstm(self, name: str) -> StackedLSTM:
        return StackedLSTM(name, self.model.num_layers)

    def copy(self) -> "AgentParameters":
        return AgentParameters(
            self.role, {k: v.copy() for k, v in self.tensors.items()},
            self.vocab_size, self.feature_dim, self.model
        )

    def zeros_like(self) -> Tensors:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.tensors[name].ravel() for name in self.names])

    def with_flat(self, vector: np.ndarray) -> "AgentParameters":
        """Новые параметры из плоского вектора (порядок имен как в flatten)"""
        if vector.shape != (self.parameter_count,):
            raise ShapeError(f"Ожидается вектор длины {self.parameter_count}, получено {vector.shape}")
        tensors = {}
        offset = 0
        for name in self.names:
            shape = self.tensors[name].shape
            size = int(np.prod(shape))
            tensors[name] = np.array(vector[offset:offset + size], dtype=np.float64).reshape(shape)
            offset += size
        return AgentParameters(self.role, tensors, self.vocab_size, self.feature_dim, self.model)


def flatten_grads(params: AgentParameters, grads: Tensors) -> np.ndarray:
    return np.concatenate([grads[name].ravel() for name in params.names])


def parameter_shapes(role: AgentRole, model: ModelConfig, vocab_size: int,
                     feature_dim: int) -> Dict[str, Tuple[int, ...]]:
    embed, hidden, layers = model.embed_dim, model.hidden_dim, model.num_layers
    shapes: Dict[str, Tuple[int, ...]] = {"embed": (vocab_size, embed)}
    shapes.update(StackedLSTM("fact", layers).parameter_shapes(embed, hidden))
    shapes.update(StackedLSTM("decoder", layers).parameter_shapes(embed, hidden))
    shapes["out.w"] = (vocab_size, hidden)
    shapes["out.b"] = (vocab_size,)
    if AgentRole(role) == AgentRole.QBOT:
        shapes.update(StackedLSTM("dialog", layers).parameter_shapes(hidden, hidden))
        shapes["head.w"] = (feature_dim, hidden)
        shapes["head.b"] = (feature_dim,)
    else:
        shapes["image.w"] = (embed, feature_dim)
        shapes["image.b"] = (embed,)
        shapes.update(StackedLSTM("question", layers).parameter_shapes(2 * embed, hidden))
        shapes.update(StackedLSTM("dialog", layers).parameter_shapes(2 * hidden, hidden))
    return shapes


def init_agent_params(role: AgentRole, model: ModelConfig, vocab_size: int, feature_dim: int,
                      seed: int) -> AgentParameters:
    """Равномерная инициализация в ±init_scale, смещение гейта забывания 1.0"""
    role = AgentRole(role)
    rng = np.random.default_rng([seed, 0 if role == AgentRole.QBOT else 1])
    tensors: Tensors = {}
    for name, shape in sorted(parameter_shapes(role, model, vocab_size, feature_dim).items()):
        if name.endswith(".b"):
            tensor = np.zeros(shape)
            if name.count(".") == 2:
                hidden = shape[0] // 4
                tensor[hidden:2 * hidden] = 1.0
        else:
            tensor = rng.uniform(-model.init_scale, model.init_scale, size=shape)
        tensors[name] = tensor
    params = AgentParameters(role, tensors, vocab_size, feature_dim, model)
    logger.info(f"Инициализирован {role.value}: {params.parameter_count} параметров")
    return params


def zero_agent_params(role: AgentRole, model: ModelConfig, vocab_size: int,
                      feature_dim: int) -> AgentParameters:
    tensors = {name: np.zeros(shape)
               for name, shape in parameter_shapes(role, model, vocab_size, feature_dim).items()}
    return AgentParameters(role, tensors, vocab_size, feature_dim, model)


def _strip_stop(tokens: Sequence[int]) -> List[int]:
    tokens = list(tokens)
    return tokens[:-1] if tokens and tokens[-1] == STOP else tokens


def _check_tokens(params: AgentParameters, tokens: Sequence[int]) -> List[int]:
    tokens = [int(t) for t in tokens]
    for token in tokens:
        if token < 0 or token >= params.vocab_size or token in (PAD, START):
            raise EncodeError(f"Токен {token} недопустим для словаря размера {params.vocab_size}")
    return tokens


def _check_features(params: AgentParameters, features) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (params.feature_dim,):
        raise ShapeError(f"Признаки изображения: ожидается ({params.feature_dim},), получено {features.shape}")
    return features


class _EncodeCache:
    def __init__(self, tokens, mask, embed_mask, lstm_cache, extra_dim):
        self.tokens = tokens
        self.mask = mask
        self.embed_mask = embed_mask
        self.lstm_cache = lstm_cache
        self.extra_dim = extra_dim


def _encode(params: AgentParameters, lstm: StackedLSTM, token_lists: Sequence[Sequence[int]],
            dropout: float = 0.0, rng: Optional[np.random.Generator] = None,
            extra: Optional[np.ndarray] = None):
    """Кодирование пакета последовательностей; результат - верхний h после последнего токена"""
    tensors = params.tensors
    tokens, mask = pad_batch(token_lists)
    embedded = tensors["embed"][tokens]
    embed_mask = dropout_mask(rng, embedded.shape, dropout)
    xs = apply_mask(embedded, embed_mask)
    extra_dim = 0
    if extra is not None:
        extra_dim = extra.shape[1]
        xs = np.concatenate([xs, np.broadcast_to(extra[None], (xs.shape[0],) + extra.shape)], axis=2)
    _, final, lstm_cache = lstm.forward(tensors, xs, mask, lstm.zero_state(tensors, len(token_lists)))
    return final[0][-1], _EncodeCache(tokens, mask, embed_mask, lstm_cache, extra_dim)


def _encode_backward(params: AgentParameters, grads: Tensors, lstm: StackedLSTM,
                     cache: _EncodeCache, d_encoding: np.ndarray) -> Optional[np.ndarray]:
    steps, batch = cache.mask.shape
    hidden = d_encoding.shape[1]
    zeros = [np.zeros((batch, hidden)) for _ in range(lstm.num_layers)]
    d_final = (zeros[:-1] + [d_encoding], [z.copy() for z in zeros])
    d_xs, _ = lstm.backward(params.tensors, grads, cache.lstm_cache,
                            np.zeros((steps, batch, hidden)), d_final)
    embed_dim = params.model.embed_dim
    embed_backward(grads, "embed", cache.tokens, apply_mask(d_xs[..., :embed_dim], cache.embed_mask))
    if cache.extra_dim:
        return d_xs[..., embed_dim:].sum(axis=0)
    return None


class _DecodeCache:
    def __init__(self, inputs, embed_mask, lstm_cache, output_mask, outputs):
        self.inputs = inputs
        self.embed_mask = embed_mask
        self.lstm_cache = lstm_cache
        self.output_mask = output_mask
        self.outputs = outputs


def _decode_teacher_forced(params: AgentParameters, initial_h: np.ndarray, targets: Sequence[Sequence[int]],
                           dropout: float = 0.0, rng: Optional[np.random.Generator] = None):
    """Логиты декодера (T, B, V) при подаче эталонных префиксов"""
    tensors = params.tensors
    lstm = params.lstm("decoder")
    inputs, mask = pad_batch([[START] + list(t[:-1]) for t in targets])
    embedded = tensors["embed"][inputs]
    embed_mask = dropout_mask(rng, embedded.shape, dropout)
    state = ([initial_h] * lstm.num_layers, [np.zeros_like(initial_h) for _ in range(lstm.num_layers)])
    tops, _, lstm_cache = lstm.forward(tensors, apply_mask(embedded, embed_mask), mask, state)
    output_mask = dropout_mask(rng, tops.shape, dropout)
    outputs = apply_mask(tops, output_mask)
    logits = linear(tensors, "out", outputs)
    return logits, _DecodeCache(inputs, embed_mask, lstm_cache, output_mask, outputs)


def _decode_backward(params: AgentParameters, grads: Tensors, cache: _DecodeCache,
                     d_logits: np.ndarray) -> np.ndarray:
    lstm = params.lstm("decoder")
    d_outputs = linear_backward(params.tensors, grads, "out", cache.outputs, d_logits)
    d_xs, (dh0, _) = lstm.backward(params.tensors, grads, cache.lstm_cache,
                                   apply_mask(d_outputs, cache.output_mask))
    embed_backward(grads, "embed", cache.inputs, apply_mask(d_xs, cache.embed_mask))
    return sum(dh0)


class DecoderContext:
    """Контекст декодера, инициализированного состоянием диалога s"""

    start_token = START
    stop_token = STOP
    banned_tokens = (PAD, START)

    def __init__(self, params: AgentParameters, state_vector: np.ndarray):
        self.params = params
        self.state_vector = np.asarray(state_vector, dtype=np.float64)
        self.vocab_size = params.vocab_size
        self._lstm = params.lstm("decoder")

    def initial_state(self) -> LSTMState:
        h = self.state_vector[None, :]
        return [h] * self._lstm.num_layers, [np.zeros_like(h) for _ in range(self._lstm.num_layers)]

    def advance(self, state: LSTMState, token: int) -> Tuple[np.ndarray, LSTMState]:
        tensors = self.params.tensors
        new_state = self._lstm.step(tensors, tensors["embed"][[token]], state)
        logits = linear(tensors, "out", new_state[0][-1])
        return log_softmax(logits)[0], new_state


class QBotState:
    """Состояние Q-bot: стеки LSTM уровня диалога, s - верхний h"""

    def __init__(self, hs: List[np.ndarray], cs: List[np.ndarray], rounds_observed: int = 0):
        self.hs = hs
        self.cs = cs
        self.rounds_observed = rounds_observed

    @property
    def s(self) -> np.ndarray:
        return self.hs[-1][0].copy()


class ABotState:
    """Состояние A-bot: стеки LSTM диалога, кодировка последнего факта и s^A"""

    def __init__(self, hs: List[np.ndarray], cs: List[np.ndarray], history: np.ndarray,
                 rounds_observed: int = 0):
        self.hs = hs
        self.cs = cs
        self.history = history
        self.rounds_observed = rounds_observed

    @property
    def s(self) -> np.ndarray:
        return self.hs[-1][0].copy()


def qbot_initial_state(params: AgentParameters) -> QBotState:
    hs, cs = params.lstm("dialog").zero_state(params.tensors, 1)
    return QBotState(hs, cs, 0)


def qbot_update_state(state: QBotState, fact: Sequence[int], params: AgentParameters) -> QBotState:
    """Кодирование факта и шаг LSTM диалога; исходное состояние не изменяется"""
    fact = _check_tokens(params, _strip_stop(fact))
    encoding, _ = _encode(params, params.lstm("fact"), [fact])
    hs, cs = params.lstm("dialog").step(params.tensors, encoding, (state.hs, state.cs))
    return QBotState(hs, cs, state.rounds_observed + 1)


def qbot_context(state: QBotState, params: AgentParameters) -> DecoderContext:
    return DecoderContext(params, state.s)


def qbot_ask(state: QBotState, decode_config: DecodeConfig, params: AgentParameters,
             rng: Optional[np.random.Generator] = None) -> Tuple[List[int], List[float]]:
    return decode(qbot_context(state, params), decode_config, rng)


def qbot_guess(state: QBotState, params: AgentParameters) -> np.ndarray:
    return linear(params.tensors, "head", state.s)


def abot_initial_state(params: AgentParameters, image_features, caption: Sequence[int]) -> ABotState:
    _check_features(params, image_features)
    caption = _check_tokens(params, _strip_stop(caption))
    history, _ = _encode(params, params.lstm("fact"), [caption])
    hs, cs = params.lstm("dialog").zero_state(params.tensors, 1)
    return ABotState(hs, cs, history[0], 0)


def abot_listen(state: ABotState, image_features, question: Sequence[int],
                params: AgentParameters) -> ABotState:
    """Шаг LSTM диалога A-bot по вопросу и предыдущему факту"""
    features = _check_features(params, image_features)
    words = _check_tokens(params, _strip_stop(question))
    image = linear(params.tensors, "image", features[None, :])
    question_encoding, _ = _encode(params, params.lstm("question"), [words], extra=image)
    step_input = np.concatenate([question_encoding, state.history[None, :]], axis=1)
    hs, cs = params.lstm("dialog").step(params.tensors, step_input, (state.hs, state.cs))
    return ABotState(hs, cs, state.history, state.rounds_observed)


def abot_record(state: ABotState, question: Sequence[int], answer: Sequence[int],
                params: AgentParameters) -> ABotState:
    """Запоминание пары (вопрос, ответ) как последнего факта"""
    fact = _check_tokens(params, _strip_stop(question) + _strip_stop(answer))
    history, _ = _encode(params, params.lstm("fact"), [fact])
    return ABotState(state.hs, state.cs, history[0], state.rounds_observed + 1)


def abot_context(state: ABotState, params: AgentParameters) -> DecoderContext:
    return DecoderContext(params, state.s)


def abot_answer(state: ABotState, image_features, question: Sequence[int], decode_config: DecodeConfig,
                params: AgentParameters, rng: Optional[np.random.Generator] = None
                ) -> Tuple[List[int], List[float], ABotState]:
    """Ответ на вопрос; возвращает токены, их log-вероятности и обновленное состояние"""
    listened = abot_listen(state, image_features, question, params)
    tokens, log_probs = decode(abot_context(listened, params), decode_config, rng)
    return tokens, log_probs, abot_record(listened, question, tokens, params)


class DialogBatch:
    """Пакет диалогов в идентификаторах токенов; вопросы и ответы оканчиваются STOP"""

    def __init__(self, captions: List[List[int]], questions: List[List[List[int]]],
                 answers: List[List[List[int]]], features: np.ndarray):
        if not captions:
            raise ContractError("Пакет диалогов пуст")
        rounds = {len(q) for q in questions} | {len(a) for a in answers}
        if len(rounds) != 1:
            raise ContractError("Все диалоги пакета должны иметь одинаковое число раундов")
        self.captions = captions
        self.questions = questions
        self.answers = answers
        self.features = np.asarray(features, dtype=np.float64)
        self.rounds = rounds.pop()

    @property
    def size(self) -> int:
        return len(self.captions)

    @classmethod
    def from_dialogs(cls, dialogs: Sequence[GroundTruthDialog], images: Sequence[SyntheticImage],
                     vocab: Vocabulary, rounds: Optional[int] = None) -> "DialogBatch":
        captions, questions, answers = [], [], []
        for dialog in dialogs:
            selected = dialog.rounds if rounds is None else dialog.rounds[:rounds]
            captions.append(vocab.encode(dialog.caption))
            questions.append([vocab.encode_utterance(r.question) for r in selected])
            answers.append([vocab.encode_utterance(r.answer) for r in selected])
        features = np.stack([image.vector for image in images])
        return cls(captions, questions, answers, features)

    def qbot_facts(self) -> List[List[int]]:
        """Факты Q-bot по порядку d*(R+1)+t: подпись, затем пары вопрос-ответ"""
        facts = []
        for d in range(self.size):
            facts.append(_strip_stop(self.captions[d]))
            for t in range(self.rounds):
                facts.append(_strip_stop(self.questions[d][t]) + _strip_stop(self.answers[d][t]))
        return facts

    def abot_history(self) -> List[List[int]]:
        """Предыдущий факт для каждого раунда A-bot по порядку d*R+t"""
        facts = []
        for d in range(self.size):
            facts.append(_strip_stop(self.captions[d]))
            for t in range(self.rounds - 1):
                facts.append(_strip_stop(self.questions[d][t]) + _strip_stop(self.answers[d][t]))
        return facts

    def flat_questions(self) -> List[List[int]]:
        return [q for dialog in self.questions for q in dialog]

    def flat_answers(self) -> List[List[int]]:
        return [a for dialog in self.answers for a in dialog]


class AgentPass:
    """Результат прямого прохода с учителем: логиты, состояния, предсказания и кэши"""

    def __init__(self, logits, targets, target_mask, states, predictions, caches):
        self.logits = logits
        self.targets = targets
        self.target_mask = target_mask
        self.states = states
        self.predictions = predictions
        self.caches = caches


def qbot_forward(params: AgentParameters, batch: DialogBatch, dropout: float = 0.0,
                 rng: Optional[np.random.Generator] = None) -> AgentPass:
    """Q-bot с учителем: состояния s_0..s_R (R+1, D, H), логиты вопросов, ŷ_0..ŷ_R"""
    tensors = params.tensors
    hidden = params.model.hidden_dim
    size, rounds = batch.size, batch.rounds

    encodings, fact_cache = _encode(params, params.lstm("fact"), batch.qbot_facts(), dropout, rng)
    dialog_inputs = encodings.reshape(size, rounds + 1, hidden).transpose(1, 0, 2)
    dialog = params.lstm("dialog")
    states, _, dialog_cache = dialog.forward(
        tensors, dialog_inputs, np.ones((rounds + 1, size), dtype=bool), dialog.zero_state(tensors, size)
    )

    logits = targets = target_mask = decode_cache = None
    if rounds:
        questions = batch.flat_questions()
        initial = states[:rounds].transpose(1, 0, 2).reshape(size * rounds, hidden)
        logits, decode_cache = _decode_teacher_forced(params, initial, questions, dropout, rng)
        targets, target_mask = pad_batch(questions)

    predictions = linear(tensors, "head", states)
    return AgentPass(logits, targets, target_mask, states, predictions,
                     (fact_cache, dialog_cache, decode_cache))


def qbot_backward(params: AgentParameters, forward: AgentPass, d_logits: Optional[np.ndarray],
                  d_states: np.ndarray, d_predictions: np.ndarray) -> Tensors:
    tensors = params.tensors
    grads = params.zeros_like()
    fact_cache, dialog_cache, decode_cache = forward.caches
    rounds_plus, size, hidden = forward.states.shape
    rounds = rounds_plus - 1

    d_states = d_states + linear_backward(tensors, grads, "head", forward.states, d_predictions)
    if rounds and d_logits is not None:
        d_initial = _decode_backward(params, grads, decode_cache, d_logits)
        d_states[:rounds] += d_initial.reshape(size, rounds, hidden).transpose(1, 0, 2)

    d_inputs, _ = params.lstm("dialog").backward(tensors, grads, dialog_cache, d_states)
    d_encodings = d_inputs.transpose(1, 0, 2).reshape(size * rounds_plus, hidden)
    _encode_backward(params, grads, params.lstm("fact"), fact_cache, d_encodings)
    return grads


def abot_forward(params: AgentParameters, batch: DialogBatch, dropout: float = 0.0,
                 rng: Optional[np.random.Generator] = None) -> AgentPass:
    """A-bot с учителем: состояния s^A_1..s^A_R (R, D, H) и логиты ответов"""
    if batch.rounds == 0:
        raise ContractError("Для прохода A-bot нужен хотя бы один раунд")
    tensors = params.tensors
    hidden = params.model.hidden_dim
    size, rounds = batch.size, batch.rounds

    image = linear(tensors, "image", batch.features)
    words = [_strip_stop(q) for q in batch.flat_questions()]
    question_encodings, question_cache = _encode(
        params, params.lstm("question"), words, dropout, rng, extra=np.repeat(image, rounds, axis=0)
    )
    history_encodings, history_cache = _encode(params, params.lstm("fact"), batch.abot_history(), dropout, rng)

    dialog_inputs = np.concatenate([question_encodings, history_encodings], axis=1)
    dialog_inputs = dialog_inputs.reshape(size, rounds, 2 * hidden).transpose(1, 0, 2)
    dialog = params.lstm("dialog")
    states, _, dialog_cache = dialog.forward(
        tensors, dialog_inputs, np.ones((rounds, size), dtype=bool), dialog.zero_state(tensors, size)
    )

    answers = batch.flat_answers()
    initial = states.transpose(1, 0, 2).reshape(size * rounds, hidden)
    logits, decode_cache = _decode_teacher_forced(params, initial, answers, dropout, rng)
    targets, target_mask = pad_batch(answers)
    return AgentPass(logits, targets, target_mask, states, None,
                     (question_cache, history_cache, dialog_cache, decode_cache, batch.features))


def abot_backward(params: AgentParameters, forward: AgentPass, d_logits: np.ndarray,
                  d_states: np.ndarray) -> Tensors:
    tensors = params.tensors
    grads = params.zeros_like()
    question_cache, history_cache, dialog_cache, decode_cache, features = forward.caches
    rounds, size, hidden = forward.states.shape

    d_initial = _decode_backward(params, grads, decode_cache, d_logits)
    d_states = d_states + d_initial.reshape(size, rounds, hidden).transpose(1, 0, 2)

    d_inputs, _ = params.lstm("dialog").backward(tensors, grads, dialog_cache, d_states)
    d_inputs = d_inputs.transpose(1, 0, 2).reshape(size * rounds, 2 * hidden)
    d_image = _encode_backward(params, grads, params.lstm("question"), question_cache, d_inputs[:, :hidden])
    _encode_backward(params, grads, params.lstm("fact"), history_cache, d_inputs[:, hidden:])

    d_image = d_image.reshape(size, rounds, -1).sum(axis=1)
    linear_backward(tensors, grads, "image", features, d_image)
    return grads
