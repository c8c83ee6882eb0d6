"""
Декодирование последовательностей: жадное, сэмплирование и beam search,
а также оценка log-вероятности готовой последовательности.

Модель задается протоколом SequenceModel: начальное состояние и шаг
advance(state, token) -> (log_probs по словарю, новое состояние).
"""
from typing import Any, List, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np

from .exceptions import ContractError, EncodeError
from .models import DecodeConfig, DecodeMode


class SequenceModel(Protocol):
    vocab_size: int
    start_token: int
    stop_token: int
    banned_tokens: Tuple[int, ...]

    def initial_state(self) -> Any:
        ...

    def advance(self, state: Any, token: int) -> Tuple[np.ndarray, Any]:
        ...


class Hypothesis(NamedTuple):
    tokens: Tuple[int, ...]
    score: float
    log_probs: Tuple[float, ...]


def _allowed(model: SequenceModel, position: int, max_len: int) -> np.ndarray:
    """Допустимые токены на позиции; последняя позиция допускает только стоп"""
    allowed = np.ones(model.vocab_size, dtype=bool)
    if position >= max_len - 1:
        allowed[:] = False
        allowed[model.stop_token] = True
        return allowed
    for token in model.banned_tokens:
        allowed[token] = False
    return allowed


def greedy_decode(model: SequenceModel, max_len: int) -> Tuple[List[int], List[float]]:
    state = model.initial_state()
    token = model.start_token
    tokens: List[int] = []
    log_probs: List[float] = []
    for position in range(max_len):
        logp, state = model.advance(state, token)
        masked = np.where(_allowed(model, position, max_len), logp, -np.inf)
        token = int(np.argmax(masked))
        tokens.append(token)
        log_probs.append(float(logp[token]))
        if token == model.stop_token:
            break
    return tokens, log_probs


def sample_decode(model: SequenceModel, max_len: int, temperature: float,
                  rng: np.random.Generator) -> Tuple[List[int], List[float]]:
    """Сэмплирование из допустимых токенов; записываются log-вероятности самой модели"""
    state = model.initial_state()
    token = model.start_token
    tokens: List[int] = []
    log_probs: List[float] = []
    for position in range(max_len):
        logp, state = model.advance(state, token)
        allowed = _allowed(model, position, max_len)
        scaled = np.where(allowed, logp / temperature, -np.inf)
        probs = np.exp(scaled - np.max(scaled))
        probs /= probs.sum()
        token = int(rng.choice(model.vocab_size, p=probs))
        tokens.append(token)
        log_probs.append(float(logp[token]))
        if token == model.stop_token:
            break
    return tokens, log_probs


def _order_key(hypothesis: Hypothesis):
    return (-hypothesis.score, hypothesis.tokens, len(hypothesis.tokens))


def beam_search(model: SequenceModel, beam_size: int, max_len: int) -> List[Hypothesis]:
    """Beam search; результат упорядочен по (score desc, токены asc, длина asc)"""
    if beam_size < 1:
        raise ContractError(f"beam_size должен быть не меньше 1, получено {beam_size}")

    live: List[Tuple[Hypothesis, Any]] = [(Hypothesis((), 0.0, ()), model.initial_state())]
    finished: List[Hypothesis] = []
    ids = np.arange(model.vocab_size)

    for position in range(max_len):
        expansions: List[Tuple[Hypothesis, Any]] = []
        for hypothesis, state in live:
            last = hypothesis.tokens[-1] if hypothesis.tokens else model.start_token
            logp, new_state = model.advance(state, last)
            masked = np.where(_allowed(model, position, max_len), logp, -np.inf)
            best = np.lexsort((ids, -masked))[:beam_size]
            for token in best:
                if not np.isfinite(masked[token]):
                    continue
                lp = float(logp[token])
                expansions.append((
                    Hypothesis(hypothesis.tokens + (int(token),), hypothesis.score + lp,
                               hypothesis.log_probs + (lp,)),
                    new_state,
                ))

        expansions.sort(key=lambda item: _order_key(item[0]))
        live = []
        for hypothesis, state in expansions[:beam_size]:
            if hypothesis.tokens[-1] == model.stop_token:
                finished.append(hypothesis)
            else:
                live.append((hypothesis, state))

        if not live:
            break
        if len(finished) >= beam_size:
            finished.sort(key=_order_key)
            if live[0][0].score < finished[beam_size - 1].score:
                break

    finished.sort(key=_order_key)
    return finished[:beam_size]


def token_log_probs(model: SequenceModel, tokens: Sequence[int]) -> List[float]:
    """log p(token | префикс, контекст) для каждого токена завершенной последовательности"""
    tokens = [int(t) for t in tokens]
    if not tokens or tokens[-1] != model.stop_token or model.stop_token in tokens[:-1]:
        raise ContractError("Последовательность должна заканчиваться единственным стоп-токеном")
    if any(t < 0 or t >= model.vocab_size for t in tokens):
        raise EncodeError("Идентификатор токена вне словаря")

    state = model.initial_state()
    previous = model.start_token
    log_probs = []
    for token in tokens:
        logp, state = model.advance(state, previous)
        log_probs.append(float(logp[token]))
        previous = token
    return log_probs


def score_sequence(model: SequenceModel, tokens: Sequence[int]) -> float:
    """Сумма log p(token | префикс, контекст) по завершенной последовательности"""
    total = 0.0
    for lp in token_log_probs(model, tokens):
        total += lp
    return total


def decode(model: SequenceModel, config: DecodeConfig,
           rng: Optional[np.random.Generator] = None) -> Tuple[List[int], List[float]]:
    """Декодирование в режиме из DecodeConfig"""
    if config.mode == DecodeMode.GREEDY:
        return greedy_decode(model, config.max_len)
    if config.mode == DecodeMode.SAMPLE:
        if rng is None:
            rng = np.random.default_rng(config.seed)
        return sample_decode(model, config.max_len, config.temperature, rng)
    best = beam_search(model, config.beam_size, config.max_len)[0]
    return list(best.tokens), list(best.log_probs)
