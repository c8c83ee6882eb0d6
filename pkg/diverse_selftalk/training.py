"""
Обучение: SL-предобучение (MLE + регрессия + штраф разнообразия),
REINFORCE-дообучение с наградой за приближение к признакам изображения,
учебный план SL→RL, расписание learning rate и оптимизатор Adam.
"""
import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .agents import (
    AgentParameters, DialogBatch, _strip_stop, abot_backward, abot_context, abot_forward,
    abot_initial_state, abot_listen, abot_record, qbot_backward, qbot_context, qbot_forward,
    qbot_guess, qbot_initial_state, qbot_update_state
)
from .config import RunConfig
from .corpus import Corpus, SyntheticImage
from .decoding import decode, token_log_probs
from .exceptions import ContractError, NumericError, ShapeError
from .models import (
    CurriculumState, DecodeConfig, DecodeMode, PenaltyKind, TrainConfig, TrainingCurveRow
)
from .numcore import as_vec, l2_distance_sq, log_softmax

logger = logging.getLogger(__name__)

CheckpointSink = Callable[[str, AgentParameters, AgentParameters], None]


def compute_reward(y_gt, y_prev, y_cur) -> float:
    """r_t = ‖y − ŷ_{t−1}‖² − ‖y − ŷ_t‖²"""
    y_gt, y_prev, y_cur = as_vec(y_gt, "y_gt"), as_vec(y_prev, "y_prev"), as_vec(y_cur, "y_cur")
    if not (y_gt.shape == y_prev.shape == y_cur.shape):
        raise ShapeError(f"Размерности не совпадают: {y_gt.shape}, {y_prev.shape}, {y_cur.shape}")
    return l2_distance_sq(y_gt, y_prev) - l2_distance_sq(y_gt, y_cur)


class RewardTrace(BaseModel):
    """Награды по раундам и предсказания, из которых они получены"""
    rewards: List[float]
    predictions: List[List[float]]
    y_gt: List[float]

    @model_validator(mode='after')
    def telescoping(self):
        if len(self.predictions) != len(self.rewards) + 1:
            raise ValueError('Предсказаний должно быть на одно больше, чем наград')
        first = l2_distance_sq(self.y_gt, self.predictions[0])
        last = l2_distance_sq(self.y_gt, self.predictions[-1])
        total = sum(self.rewards)
        if abs(total - (first - last)) > 1e-9:
            raise ValueError(f'Сумма наград {total} не равна {first - last}')
        return self


class DialogTranscript(BaseModel):
    """Запись эпизода самоигры"""
    image_id: int
    image_features: List[float]
    caption: List[int]
    questions: List[List[int]]
    answers: List[List[int]]
    question_log_probs: List[List[float]]
    answer_log_probs: List[List[float]]
    qbot_states: List[List[float]]
    abot_states: List[List[float]]
    predictions: List[List[float]]
    rewards: List[float]
    decode_mode: DecodeMode
    supervised_rounds: int = Field(default=0, ge=0)

    @property
    def rounds(self) -> int:
        return len(self.questions)


def curriculum_rounds(stage: int) -> int:
    """Число раундов с учителем на стадии: 9, 8, ..., 4, затем снова 9"""
    return CurriculumState.for_stage(stage).supervised_rounds


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ContractError(f"Эпоха должна быть неотрицательной, получено {epoch}")
    return max(config.learning_rate * config.lr_decay ** epoch, config.lr_floor)


class AdamOptimizer:
    """Adam по именованным тензорам агента"""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    @classmethod
    def from_config(cls, config: TrainConfig) -> "AdamOptimizer":
        return cls(config.adam_beta1, config.adam_beta2, config.adam_eps)

    def step(self, params: AgentParameters, grads: Dict[str, np.ndarray], lr: float) -> None:
        """Обновление параметров на месте"""
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name in params.names:
            grad = grads[name]
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(grad)
                self._v[name] = np.zeros_like(grad)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            params.tensors[name] -= lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


class ObjectiveResult(NamedTuple):
    loss: float
    question_ce: float
    answer_ce: float
    regression: float
    penalty_term: float
    mean_state_cosine: float
    qbot_grads: Optional[Dict[str, np.ndarray]]
    abot_grads: Optional[Dict[str, np.ndarray]]


def _weighted_cross_entropy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray,
                            sequence_weights: np.ndarray) -> Tuple[float, np.ndarray]:
    """Сумма CE по токенам с весом последовательности и ее градиент по логитам"""
    token_weights = mask * sequence_weights[None, :]
    logp = log_softmax(logits)
    nll = -np.take_along_axis(logp, targets[..., None], axis=2)[..., 0]
    grad = np.exp(logp)
    np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=2) - 1.0, axis=2)
    return float(np.sum(token_weights * nll)), grad * token_weights[..., None]


def _state_penalty(states: np.ndarray, kind: PenaltyKind) -> Tuple[float, np.ndarray]:
    """Поощряемая величина по парам соседних состояний states[i−1], states[i] и ее градиент.

    smooth_l1: Σ f(Δ); cosine: −Σ cos.
    """
    grad = np.zeros_like(states)
    if states.shape[0] < 2:
        return 0.0, grad
    prev, cur = states[:-1], states[1:]
    n_prev = np.linalg.norm(prev, axis=2)
    n_cur = np.linalg.norm(cur, axis=2)
    safe_prev = np.where(n_prev > 0, n_prev, 1.0)[..., None]
    safe_cur = np.where(n_cur > 0, n_cur, 1.0)[..., None]

    if kind == PenaltyKind.SMOOTH_L1:
        delta = np.abs(n_prev - n_cur)
        quadratic = delta < 0.1
        value = np.where(quadratic, 0.5 * delta * delta, 0.1 * (delta - 0.05))
        slope = np.where(quadratic, delta, 0.1)
        sign = np.sign(n_prev - n_cur)
        grad[:-1] += (slope * sign)[..., None] * prev / safe_prev
        grad[1:] -= (slope * sign)[..., None] * cur / safe_cur
        return float(np.sum(value)), grad

    valid = ((n_prev > 0) & (n_cur > 0))[..., None]
    dot = np.sum(prev * cur, axis=2)[..., None]
    cos = dot / (safe_prev * safe_cur)
    g_prev = cur / (safe_prev * safe_cur) - cos * prev / (safe_prev * safe_prev)
    g_cur = prev / (safe_prev * safe_cur) - cos * cur / (safe_cur * safe_cur)
    grad[:-1] -= np.where(valid, g_prev, 0.0)
    grad[1:] -= np.where(valid, g_cur, 0.0)
    return -float(np.sum(np.where(valid, cos, 0.0))), grad


def _mean_successive_cosine(states: np.ndarray) -> float:
    prev, cur = states[:-1], states[1:]
    norms = np.linalg.norm(prev, axis=2) * np.linalg.norm(cur, axis=2)
    if prev.size == 0:
        return 1.0
    cos = np.where(norms > 0, np.sum(prev * cur, axis=2) / np.where(norms > 0, norms, 1.0), 1.0)
    return float(np.mean(cos))


def dialog_objective(qbot: AgentParameters, abot: AgentParameters, batch: DialogBatch, config: TrainConfig,
                     question_weights: np.ndarray, answer_weights: np.ndarray,
                     regression_weights: np.ndarray, dropout: float = 0.0,
                     rng: Optional[np.random.Generator] = None,
                     compute_gradients: bool = True) -> ObjectiveResult:
    """Общая целевая функция пакета диалогов, усредненная по диалогам.

    loss = Σ w_q·CE(вопросы) + Σ w_a·CE(ответы) + Σ w_r·‖y − ŷ_t‖² − λ·P,
    где P - поощряемая разнесенность состояний s_1..s_R (пары начиная с t=2).
    Веса раундов: 1 для раундов с учителем, r_t для раундов REINFORCE.
    """
    size, rounds = batch.size, batch.rounds
    q_pass = qbot_forward(qbot, batch, dropout, rng)
    a_pass = abot_forward(abot, batch, dropout, rng) if rounds else None

    question_ce = answer_ce = 0.0
    d_q_logits = d_a_logits = None
    if rounds:
        question_ce, d_q_logits = _weighted_cross_entropy(
            q_pass.logits, q_pass.targets, q_pass.target_mask, np.asarray(question_weights).reshape(-1)
        )
        answer_ce, d_a_logits = _weighted_cross_entropy(
            a_pass.logits, a_pass.targets, a_pass.target_mask, np.asarray(answer_weights).reshape(-1)
        )

    weights = np.asarray(regression_weights, dtype=np.float64).T[..., None]
    diff = q_pass.predictions - batch.features[None, :, :]
    regression = float(np.sum(weights * diff * diff))
    d_predictions = 2.0 * weights * diff

    lam = config.penalty_coefficient
    penalty_term = 0.0
    d_q_states = np.zeros_like(q_pass.states)
    d_a_states = np.zeros_like(a_pass.states) if a_pass is not None else None
    if config.penalize_qbot:
        value, grad = _state_penalty(q_pass.states[1:], config.penalty_kind)
        penalty_term += value
        d_q_states[1:] -= lam * grad
    if config.penalize_abot and a_pass is not None:
        value, grad = _state_penalty(a_pass.states, config.penalty_kind)
        penalty_term += value
        d_a_states -= lam * grad

    scale = 1.0 / size
    question_ce *= scale
    answer_ce *= scale
    regression *= scale
    penalty_term *= scale
    loss = question_ce + answer_ce + regression - lam * penalty_term

    qbot_grads = abot_grads = None
    if compute_gradients:
        qbot_grads = qbot_backward(
            qbot, q_pass, None if d_q_logits is None else d_q_logits * scale,
            d_q_states * scale, d_predictions * scale
        )
        if a_pass is not None:
            abot_grads = abot_backward(abot, a_pass, d_a_logits * scale, d_a_states * scale)
        else:
            abot_grads = abot.zeros_like()

    return ObjectiveResult(
        loss=loss, question_ce=question_ce, answer_ce=answer_ce, regression=regression,
        penalty_term=penalty_term, mean_state_cosine=_mean_successive_cosine(q_pass.states),
        qbot_grads=qbot_grads, abot_grads=abot_grads,
    )


def sl_loss(batch: DialogBatch, qbot: AgentParameters, abot: AgentParameters, config: TrainConfig,
            dropout: float = 0.0, rng: Optional[np.random.Generator] = None,
            compute_gradients: bool = True) -> ObjectiveResult:
    """Функция потерь SL на эталонных диалогах с подачей эталонной истории"""
    size, rounds = batch.size, batch.rounds
    return dialog_objective(
        qbot, abot, batch, config,
        question_weights=np.ones((size, rounds)),
        answer_weights=np.ones((size, rounds)),
        regression_weights=np.full((size, rounds + 1), config.regression_weight),
        dropout=dropout, rng=rng, compute_gradients=compute_gradients,
    )


def run_selftalk_episode(qbot: AgentParameters, abot: AgentParameters, image: SyntheticImage,
                         caption: Sequence[int], rounds: int = 10,
                         decode_config: Optional[DecodeConfig] = None,
                         rng: Optional[np.random.Generator] = None,
                         supervised_questions: Sequence[Sequence[int]] = (),
                         supervised_answers: Sequence[Sequence[int]] = ()
                         ) -> Tuple[DialogTranscript, RewardTrace]:
    """Эпизод игры: Q-bot спрашивает, A-bot отвечает, Q-bot угадывает признаки.

    Первые len(supervised_questions) раундов берутся из эталона.
    """
    decode_config = decode_config or DecodeConfig()
    if len(supervised_questions) != len(supervised_answers) or len(supervised_questions) > rounds:
        raise ContractError("Эталонные раунды заданы некорректно")
    if rng is None:
        rng = np.random.default_rng([decode_config.seed, image.id])

    features = image.vector
    caption = list(caption)
    q_state = qbot_update_state(qbot_initial_state(qbot), caption, qbot)
    a_state = abot_initial_state(abot, features, caption)

    questions, answers, q_log_probs, a_log_probs = [], [], [], []
    q_states = [q_state.s]
    a_states = []
    predictions = [qbot_guess(q_state, qbot)]

    for t in range(rounds):
        supervised = t < len(supervised_questions)
        q_context = qbot_context(q_state, qbot)
        if supervised:
            question = list(supervised_questions[t])
            q_lp = token_log_probs(q_context, question)
        else:
            question, q_lp = decode(q_context, decode_config, rng)

        listened = abot_listen(a_state, features, question, abot)
        a_context = abot_context(listened, abot)
        if supervised:
            answer = list(supervised_answers[t])
            a_lp = token_log_probs(a_context, answer)
        else:
            answer, a_lp = decode(a_context, decode_config, rng)
        a_state = abot_record(listened, question, answer, abot)
        q_state = qbot_update_state(q_state, _strip_stop(question) + _strip_stop(answer), qbot)

        questions.append(question)
        answers.append(answer)
        q_log_probs.append(q_lp)
        a_log_probs.append(a_lp)
        q_states.append(q_state.s)
        a_states.append(listened.s)
        predictions.append(qbot_guess(q_state, qbot))

    rewards = [compute_reward(features, predictions[t], predictions[t + 1]) for t in range(rounds)]
    prediction_lists = [p.tolist() for p in predictions]
    transcript = DialogTranscript(
        image_id=image.id,
        image_features=features.tolist(),
        caption=caption,
        questions=questions,
        answers=answers,
        question_log_probs=q_log_probs,
        answer_log_probs=a_log_probs,
        qbot_states=[s.tolist() for s in q_states],
        abot_states=[s.tolist() for s in a_states],
        predictions=prediction_lists,
        rewards=rewards,
        decode_mode=decode_config.mode,
        supervised_rounds=len(supervised_questions),
    )
    trace = RewardTrace(rewards=rewards, predictions=prediction_lists, y_gt=features.tolist())
    return transcript, trace


class ReinforceResult(NamedTuple):
    qbot: AgentParameters
    abot: AgentParameters
    objective: ObjectiveResult


def reinforce_update(transcripts: Union[DialogTranscript, Sequence[DialogTranscript]],
                     qbot: AgentParameters, abot: AgentParameters, lr: float, config: TrainConfig,
                     optimizers: Optional[Tuple["AdamOptimizer", "AdamOptimizer"]] = None,
                     baseline: float = 0.0) -> ReinforceResult:
    """Шаг REINFORCE по пакету эпизодов.

    Раунды с учителем дают обычную CE, остальные - CE с весом (r_t − baseline).
    Исходные параметры не изменяются.
    """
    if isinstance(transcripts, DialogTranscript):
        transcripts = [transcripts]
    transcripts = list(transcripts)
    if not transcripts:
        raise ContractError("Пакет эпизодов пуст")
    for transcript in transcripts:
        sampled = transcript.rounds > transcript.supervised_rounds
        if sampled and transcript.decode_mode != DecodeMode.SAMPLE:
            raise ContractError(
                f"Эпизод {transcript.image_id} декодирован в режиме {transcript.decode_mode.value}; "
                f"для REINFORCE нужны сэмплированные действия"
            )
        if len(transcript.rewards) != transcript.rounds:
            raise ContractError(f"Эпизод {transcript.image_id}: награды заполнены не для всех раундов")

    batch = DialogBatch(
        [t.caption for t in transcripts], [t.questions for t in transcripts],
        [t.answers for t in transcripts], np.array([t.image_features for t in transcripts])
    )
    weights = np.ones((batch.size, batch.rounds))
    for d, transcript in enumerate(transcripts):
        for t in range(transcript.supervised_rounds, transcript.rounds):
            weights[d, t] = transcript.rewards[t] - baseline

    # ŷ_0 и раунды с учителем остаются под SL-регрессией, ŷ_{t+1} раундов REINFORCE - под −r_t
    objective = dialog_objective(
        qbot, abot, batch, config,
        question_weights=weights, answer_weights=weights,
        regression_weights=np.full((batch.size, batch.rounds + 1), config.regression_weight),
        dropout=config.dropout_rl, rng=np.random.default_rng(0) if config.dropout_rl > 0 else None,
    )
    if optimizers is None:
        optimizers = (AdamOptimizer.from_config(config), AdamOptimizer.from_config(config))
    new_qbot, new_abot = qbot.copy(), abot.copy()
    optimizers[0].step(new_qbot, objective.qbot_grads, lr)
    optimizers[1].step(new_abot, objective.abot_grads, lr)
    return ReinforceResult(new_qbot, new_abot, objective)


class TrainingOutcome(NamedTuple):
    qbot: AgentParameters
    abot: AgentParameters
    curves: List[TrainingCurveRow]


def _dump_nonfinite(diagnostics_dir: Optional[Path], phase: str, epoch: int, batch_index: int,
                    batch: DialogBatch, value: float) -> Optional[str]:
    if diagnostics_dir is None:
        return None
    path = Path(diagnostics_dir) / f"nonfinite_{phase}_epoch{epoch:03d}_batch{batch_index:04d}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump({
            "phase": phase, "epoch": epoch, "batch": batch_index, "loss": repr(value),
            "captions": batch.captions, "questions": batch.questions, "answers": batch.answers,
            "features": batch.features.tolist(),
        }, f, sort_keys=True)
    return str(path)


def _check_finite(result: ObjectiveResult, diagnostics_dir, phase, epoch, batch_index, batch) -> None:
    finite = np.isfinite(result.loss)
    for grads in (result.qbot_grads, result.abot_grads):
        if finite and grads is not None:
            finite = all(np.all(np.isfinite(g)) for g in grads.values())
    if not finite:
        path = _dump_nonfinite(diagnostics_dir, phase, epoch, batch_index, batch, result.loss)
        raise NumericError(
            f"Нечисловая функция потерь в фазе {phase}, эпоха {epoch}, пакет {batch_index}", path
        )


def _batches(ids: Sequence[int], batch_size: int) -> List[List[int]]:
    return [list(ids[i:i + batch_size]) for i in range(0, len(ids), batch_size)]


def _corpus_batch(corpus: Corpus, ids: Sequence[int]) -> DialogBatch:
    return DialogBatch.from_dialogs(
        [corpus.dialogs[i] for i in ids], [corpus.images[i] for i in ids], corpus.vocab
    )


def validation_loss(corpus: Corpus, qbot: AgentParameters, abot: AgentParameters,
                    config: TrainConfig, split: str = "val") -> float:
    ids = corpus.splits[split]
    if not ids:
        return float("nan")
    total = 0.0
    for chunk in _batches(ids, config.batch_size):
        result = sl_loss(_corpus_batch(corpus, chunk), qbot, abot, config, compute_gradients=False)
        total += result.loss * len(chunk)
    return total / len(ids)


def pretrain(corpus: Corpus, run_config: RunConfig, qbot: AgentParameters, abot: AgentParameters,
             checkpoint_sink: Optional[CheckpointSink] = None,
             diagnostics_dir: Optional[Path] = None) -> Tuple[TrainingOutcome, AgentParameters, AgentParameters]:
    """SL-фаза. Возвращает итог фазы и лучшие по валидации Q-bot (SL loss) и A-bot (NDCG)"""
    from .evalmetrics import build_retrieval_items, retrieval_eval

    config = run_config.train
    seed = run_config.seed
    qbot, abot = qbot.copy(), abot.copy()
    q_optimizer = AdamOptimizer.from_config(config)
    a_optimizer = AdamOptimizer.from_config(config)
    train_ids = corpus.splits["train"]
    selection_items = []
    if config.selection_items and corpus.splits["val"]:
        selection_items = build_retrieval_items(
            corpus, "val", run_config.eval.candidate_pool_size, seed, limit=config.selection_items
        )

    best_qbot, best_abot = qbot.copy(), abot.copy()
    best_loss, best_ndcg = float("inf"), -1.0
    curves: List[TrainingCurveRow] = []

    for epoch in range(config.sl_epochs):
        lr = lr_at(epoch, config)
        order = np.random.default_rng([seed, 10, epoch]).permutation(train_ids)
        losses, penalties, cosines = [], [], []
        for batch_index, chunk in enumerate(_batches(order, config.batch_size)):
            batch = _corpus_batch(corpus, chunk)
            dropout_rng = np.random.default_rng([seed, 11, epoch, batch_index])
            result = sl_loss(batch, qbot, abot, config, dropout=config.dropout_sl, rng=dropout_rng)
            _check_finite(result, diagnostics_dir, "sl", epoch, batch_index, batch)
            q_optimizer.step(qbot, result.qbot_grads, lr)
            a_optimizer.step(abot, result.abot_grads, lr)
            losses.append(result.loss)
            penalties.append(result.penalty_term)
            cosines.append(result.mean_state_cosine)

        row = TrainingCurveRow(
            phase="sl", stage=0, epoch=epoch, sl_loss=float(np.mean(losses)),
            penalty_term=float(np.mean(penalties)), mean_reward=None,
            mean_state_cosine=float(np.mean(cosines)), lr=lr,
        )
        curves.append(row)

        val_loss = validation_loss(corpus, qbot, abot, config)
        if np.isfinite(val_loss) and val_loss < best_loss:
            best_loss = val_loss
            best_qbot = qbot.copy()
        if selection_items:
            ndcg = retrieval_eval(abot, selection_items, run_config.eval.threads).ndcg
            if ndcg > best_ndcg:
                best_ndcg = ndcg
                best_abot = abot.copy()
        else:
            best_abot = abot.copy()
        logger.info(
            f"SL эпоха {epoch}: loss={row.sl_loss:.4f} penalty={row.penalty_term:.5f} "
            f"cos={row.mean_state_cosine:.4f} lr={lr:.2e} val_loss={val_loss:.4f} "
            f"best_ndcg={best_ndcg:.4f}"
        )

    if config.sl_epochs == 0:
        best_qbot, best_abot = qbot.copy(), abot.copy()
    if checkpoint_sink is not None:
        checkpoint_sink("sl_best", best_qbot, best_abot)
    return TrainingOutcome(qbot, abot, curves), best_qbot, best_abot


def finetune(corpus: Corpus, run_config: RunConfig, qbot: AgentParameters, abot: AgentParameters,
             checkpoint_sink: Optional[CheckpointSink] = None,
             diagnostics_dir: Optional[Path] = None) -> TrainingOutcome:
    """RL-фаза: стадия учебного плана задает число раундов с учителем"""
    from .evalmetrics import parallel_map

    config = run_config.train
    seed = run_config.seed
    rounds = corpus.world.rounds
    vocab = corpus.vocab
    q_optimizer = AdamOptimizer.from_config(config)
    a_optimizer = AdamOptimizer.from_config(config)
    rollout_decode = DecodeConfig(mode=DecodeMode.SAMPLE, max_len=config.rl_max_len, temperature=1.0)
    baseline = 0.0
    curves: List[TrainingCurveRow] = []
    train_ids = corpus.splits["train"]

    for epoch in range(config.rl_epochs):
        stage = epoch // config.epochs_per_stage
        supervised = min(curriculum_rounds(stage), rounds)
        lr = lr_at(epoch, config)
        order = np.random.default_rng([seed, 20, epoch]).permutation(train_ids)
        losses, penalties, rewards, cosines = [], [], [], []

        for batch_index, chunk in enumerate(_batches(order, config.batch_size)):
            def rollout(job, qbot=qbot, abot=abot):
                episode_index, image_id = job
                dialog = corpus.dialogs[image_id]
                transcript, _ = run_selftalk_episode(
                    qbot, abot, corpus.images[image_id], vocab.encode(dialog.caption), rounds,
                    rollout_decode, rng=np.random.default_rng([seed, 21, epoch, episode_index]),
                    supervised_questions=[vocab.encode_utterance(r.question) for r in dialog.rounds[:supervised]],
                    supervised_answers=[vocab.encode_utterance(r.answer) for r in dialog.rounds[:supervised]],
                )
                return transcript

            jobs = [(batch_index * config.batch_size + k, int(i)) for k, i in enumerate(chunk)]
            transcripts = parallel_map(rollout, jobs, run_config.eval.threads)
            update = reinforce_update(
                transcripts, qbot, abot, lr, config, (q_optimizer, a_optimizer),
                baseline if config.reward_baseline else 0.0
            )
            _check_finite(update.objective, diagnostics_dir, "rl", epoch, batch_index,
                          DialogBatch([t.caption for t in transcripts], [t.questions for t in transcripts],
                                      [t.answers for t in transcripts],
                                      np.array([t.image_features for t in transcripts])))
            qbot, abot = update.qbot, update.abot

            episode_rewards = [sum(t.rewards[supervised:]) for t in transcripts]
            round_rewards = [r for t in transcripts for r in t.rewards[supervised:]]
            if round_rewards:
                baseline = config.baseline_momentum * baseline + (1 - config.baseline_momentum) * float(np.mean(round_rewards))
            losses.append(update.objective.loss)
            penalties.append(update.objective.penalty_term)
            rewards.extend(episode_rewards)
            cosines.extend(
                _mean_successive_cosine(np.asarray(t.qbot_states)[:, None, :]) for t in transcripts
            )

        row = TrainingCurveRow(
            phase="rl", stage=stage, epoch=epoch, sl_loss=float(np.mean(losses)),
            penalty_term=float(np.mean(penalties)), mean_reward=float(np.mean(rewards)),
            mean_state_cosine=float(np.mean(cosines)), lr=lr,
        )
        curves.append(row)
        logger.info(
            f"RL стадия {stage} (N={supervised}) эпоха {epoch}: loss={row.sl_loss:.4f} "
            f"reward={row.mean_reward:.4f} penalty={row.penalty_term:.5f} "
            f"cos={row.mean_state_cosine:.4f} lr={lr:.2e}"
        )

        stage_done = (epoch + 1) % config.epochs_per_stage == 0 or epoch + 1 == config.rl_epochs
        if checkpoint_sink is not None and stage_done:
            checkpoint_sink(f"rl_stage{stage:02d}", qbot, abot)

    if checkpoint_sink is not None and config.rl_epochs > 0:
        checkpoint_sink("rl", qbot, abot)
    return TrainingOutcome(qbot, abot, curves)


def train(corpus: Corpus, run_config: RunConfig, qbot: AgentParameters, abot: AgentParameters,
          checkpoint_sink: Optional[CheckpointSink] = None,
          diagnostics_dir: Optional[Path] = None) -> TrainingOutcome:
    """Полный цикл: SL-предобучение, затем RL-дообучение от лучших SL-чекпоинтов"""
    sl_outcome, best_qbot, best_abot = pretrain(corpus, run_config, qbot, abot, checkpoint_sink, diagnostics_dir)
    if run_config.train.rl_epochs == 0:
        return TrainingOutcome(best_qbot, best_abot, sl_outcome.curves)
    rl_outcome = finetune(corpus, run_config, best_qbot, best_abot, checkpoint_sink, diagnostics_dir)
    return TrainingOutcome(rl_outcome.qbot, rl_outcome.abot, sl_outcome.curves + rl_outcome.curves)
