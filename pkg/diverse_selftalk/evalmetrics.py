"""
Метрики оценки: разнообразие и релевантность вопросов, ранжирование ответов
A-bot, диагностика состояний Q-bot и угадывание изображения по пулу.

Все метрики - чистые функции своих входов.
"""
import logging
import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from typing import (
    Callable, Iterable, List, NamedTuple, Optional, Sequence, Tuple, TypeVar, Union
)

import numpy as np

from .agents import (
    AgentParameters, DialogBatch, abot_context, abot_initial_state, abot_listen, abot_record,
    qbot_forward
)
from .corpus import (
    RESERVED_TOKENS, AnswerBank, CandidatePool, Corpus, SyntheticImage, make_candidate_pool
)
from .decoding import score_sequence
from .exceptions import ContractError, DomainError, PoolError
from .models import (
    DiagnosticsReport, DialogDiversity, DiversityReport, MetricsReport, RetrievalReport
)
from .numcore import cosine_similarity, l2_distance_sq, log_softmax

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

TERMINAL_PUNCTUATION = ("?", ".", "!")
EMPTY_QUESTION = "<empty>"


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: Optional[int] = None) -> List[R]:
    """map с сохранением порядка; threads ограничивает число потоков"""
    items = list(items)
    workers = min(threads or os.cpu_count() or 1, len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, items))


def _stderr(values: Sequence[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


# --- разнообразие вопросов ---

def canonical_question(question: Union[str, Sequence[str]]) -> str:
    """Каноническая строка вопроса: нижний регистр, без служебных токенов и финальной пунктуации"""
    tokens = question.split() if isinstance(question, str) else list(question)
    tokens = [t.lower() for t in tokens if t not in RESERVED_TOKENS]
    while tokens and tokens[-1] in TERMINAL_PUNCTUATION:
        tokens.pop()
    return " ".join(tokens) if tokens else EMPTY_QUESTION


def novel_question_count(generated: Iterable[str], train_questions: Iterable[str]) -> int:
    return len(set(generated) - set(train_questions))


def unique_questions(questions: Sequence[str], rounds: Optional[int] = None) -> int:
    if rounds is not None and len(questions) != rounds:
        raise ContractError(f"Ожидалось {rounds} вопросов, получено {len(questions)}")
    if not questions:
        raise DomainError("Диалог без вопросов")
    return len(set(questions))


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(hypothesis: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    """BLEU-4 с обрезанными совпадениями; для n ≥ 2 сглаживание add-1.

    Нулевая униграммная точность дает 0. Штраф за краткость считается по
    ближайшей длине эталона (при равенстве - по более короткой).
    """
    hypothesis = list(hypothesis)
    if not hypothesis:
        raise DomainError("Пустая гипотеза")
    if not references:
        raise DomainError("Нет эталонов")

    log_precision = 0.0
    for n in range(1, 5):
        counts = _ngrams(hypothesis, n)
        max_ref: Counter = Counter()
        for reference in references:
            for gram, count in _ngrams(list(reference), n).items():
                max_ref[gram] = max(max_ref[gram], count)
        matches = sum(min(count, max_ref[gram]) for gram, count in counts.items())
        total = sum(counts.values())
        if n == 1:
            if matches == 0:
                return 0.0
            log_precision += math.log(matches / total)
        else:
            log_precision += math.log((matches + 1) / (total + 1))

    length = len(hypothesis)
    ref_length = min((abs(len(r) - length), len(r)) for r in references)[1]
    brevity = 1.0 if length > ref_length else math.exp(1.0 - ref_length / length)
    return brevity * math.exp(log_precision / 4.0)


def mutual_overlap(questions: Sequence[str]) -> float:
    """Среднее BLEU-4 каждого вопроса против остальных вопросов диалога"""
    if len(questions) < 2:
        raise DomainError("Для взаимного перекрытия нужно хотя бы два вопроса")
    tokens = [q.split() for q in questions]
    scores = [bleu4(tokens[i], tokens[:i] + tokens[i + 1:]) for i in range(len(tokens))]
    return math.fsum(scores) / len(scores)


def _ngram_counts(questions: Sequence[str], n: int) -> Tuple[Counter, int]:
    if n < 1:
        raise DomainError(f"n должно быть положительным, получено {n}")
    counts: Counter = Counter()
    total_tokens = 0
    for question in questions:
        tokens = question.split()
        total_tokens += len(tokens)
        counts.update(_ngrams(tokens, n))
    if total_tokens < n:
        raise DomainError(f"Недостаточно токенов для {n}-грамм")
    return counts, total_tokens


def dist_n(questions: Sequence[str], n: int) -> float:
    """Число различных n-грамм, деленное на общее число токенов"""
    counts, total_tokens = _ngram_counts(questions, n)
    return len(counts) / total_tokens


def ent_n(questions: Sequence[str], n: int) -> float:
    """Энтропия Шеннона (в натах) распределения n-грамм"""
    counts, _ = _ngram_counts(questions, n)
    if not counts:
        return 0.0
    total = sum(counts.values())
    terms = [-(c / total) * math.log(c / total) for _, c in sorted(counts.items())]
    return max(math.fsum(terms), 0.0)


def alt_repeat_rate(dialogs: Sequence[Sequence[str]]) -> float:
    """Доля пар (t, t+2) с одинаковыми вопросами по всем диалогам"""
    matches = pairs = 0
    for questions in dialogs:
        if len(questions) < 3:
            raise DomainError("Для анализа чередующихся повторов нужно хотя бы 3 раунда")
        for t in range(len(questions) - 2):
            pairs += 1
            matches += questions[t] == questions[t + 2]
    if pairs == 0:
        raise DomainError("Нет диалогов для анализа")
    return matches / pairs


def diversity_report(dialogs: Sequence[Sequence[str]], image_ids: Sequence[int],
                     train_questions: Iterable[str], rounds: Optional[int] = None) -> DiversityReport:
    """Сводка разнообразия по каноническим вопросам сгенерированных диалогов"""
    per_dialog = [
        DialogDiversity(
            image_id=image_id,
            unique_questions=unique_questions(questions, rounds),
            mutual_overlap=mutual_overlap(questions),
        )
        for image_id, questions in zip(image_ids, dialogs)
    ]
    unique = [d.unique_questions for d in per_dialog]
    overlap = [d.mutual_overlap for d in per_dialog]
    all_questions = [q for questions in dialogs for q in questions]
    return DiversityReport(
        novel_question_count=novel_question_count(all_questions, train_questions),
        unique_questions_mean=float(np.mean(unique)),
        unique_questions_stderr=_stderr(unique),
        mutual_overlap_mean=math.fsum(overlap) / len(overlap),
        mutual_overlap_stderr=_stderr(overlap),
        ent1=ent_n(all_questions, 1),
        ent2=ent_n(all_questions, 2),
        dist1=dist_n(all_questions, 1),
        dist2=dist_n(all_questions, 2),
        per_dialog=per_dialog,
    )


# --- релевантность ---

def nll_relevance(qbot: AgentParameters, batches: Union[DialogBatch, Iterable[DialogBatch]]) -> float:
    """Средняя NLL на токен эталонных вопросов (со стоп-токеном) при эталонной истории"""
    if isinstance(batches, DialogBatch):
        batches = [batches]
    total = 0.0
    count = 0
    for batch in batches:
        if batch.rounds == 0:
            continue
        forward = qbot_forward(qbot, batch)
        logp = log_softmax(forward.logits)
        picked = np.take_along_axis(logp, forward.targets[..., None], axis=2)[..., 0]
        total -= float(np.sum(picked[forward.target_mask]))
        count += int(forward.target_mask.sum())
    if count == 0:
        raise ContractError("Нет вопросов для оценки NLL")
    return total / count


# --- ранжирование ответов ---

class RetrievalItem(NamedTuple):
    """Контекст раунда и пул ответов-кандидатов (идентификаторы токенов со стопом)"""
    image_id: int
    round_index: int
    features: Tuple[float, ...]
    caption: List[int]
    history: List[Tuple[List[int], List[int]]]
    question: List[int]
    pool: CandidatePool
    candidates: List[List[int]]


def build_retrieval_items(corpus: Corpus, split: str, K: int, seed: int,
                          limit: Optional[int] = None) -> List[RetrievalItem]:
    """Элементы оценки по эталонным раундам разбиения, упорядоченные по (изображение, раунд)"""
    bank = AnswerBank(corpus)
    vocab = corpus.vocab
    items: List[RetrievalItem] = []
    for image_id in sorted(corpus.splits[split]):
        image = corpus.images[image_id]
        dialog = corpus.dialogs[image_id]
        history: List[Tuple[List[int], List[int]]] = []
        for t, round_ in enumerate(dialog.rounds):
            if limit is not None and len(items) >= limit:
                return items
            pool = make_candidate_pool(image, round_.question, corpus, K, seed,
                                       gt_answer=round_.answer, bank=bank)
            question = vocab.encode_utterance(round_.question)
            items.append(RetrievalItem(
                image_id=image_id, round_index=t, features=image.features,
                caption=vocab.encode(dialog.caption), history=list(history), question=question,
                pool=pool, candidates=[vocab.encode_utterance(c) for c in pool.candidates],
            ))
            history.append((question, vocab.encode_utterance(round_.answer)))
    return items


def ranking_order(scores: Sequence[float]) -> List[int]:
    """Индексы по убыванию оценки; при равенстве - по возрастанию индекса"""
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def retrieval_metrics(scores: Sequence[Sequence[float]], pools: Sequence[CandidatePool]) -> RetrievalReport:
    if not pools:
        raise ContractError("Нет элементов для оценки ранжирования")
    ndcgs, ranks = [], []
    for item_scores, pool in zip(scores, pools):
        if 1.0 not in pool.relevance:
            raise ContractError(f"В пуле {pool.context_id} нет кандидата с оценкой 1.0")
        if len(item_scores) != len(pool.relevance):
            raise ContractError(f"Число оценок не совпадает с размером пула {pool.context_id}")
        order = ranking_order(item_scores)
        ranks.append(order.index(pool.gt_index) + 1)

        positives = sum(1 for grade in pool.relevance if grade > 0)
        dcg = sum(pool.relevance[order[i]] / math.log2(i + 2) for i in range(positives))
        ideal = sorted(pool.relevance, reverse=True)
        idcg = sum(ideal[i] / math.log2(i + 2) for i in range(positives))
        ndcgs.append(dcg / idcg)

    count = len(ranks)
    return RetrievalReport(
        ndcg=math.fsum(ndcgs) / count,
        mrr=math.fsum(1.0 / r for r in ranks) / count,
        r_at_1=sum(r <= 1 for r in ranks) / count,
        r_at_5=sum(r <= 5 for r in ranks) / count,
        r_at_10=sum(r <= 10 for r in ranks) / count,
        mean_rank=sum(ranks) / count,
        item_count=count,
    )


def score_candidates(abot: AgentParameters, item: RetrievalItem) -> List[float]:
    """log p(кандидат | изображение, подпись, эталонная история, вопрос) по A-bot"""
    features = np.asarray(item.features)
    state = abot_initial_state(abot, features, item.caption)
    for question, answer in item.history:
        state = abot_record(abot_listen(state, features, question, abot), question, answer, abot)
    context = abot_context(abot_listen(state, features, item.question, abot), abot)
    return [score_sequence(context, candidate) for candidate in item.candidates]


def retrieval_eval(abot: AgentParameters, items: Sequence[RetrievalItem],
                   threads: Optional[int] = None) -> RetrievalReport:
    scores = parallel_map(lambda item: score_candidates(abot, item), items, threads)
    return retrieval_metrics(scores, [item.pool for item in items])


# --- угадывание изображения ---

class ImagePool(NamedTuple):
    image_ids: List[int]
    features: np.ndarray
    true_index: int


def make_image_pool(true_image: SyntheticImage, candidates: Sequence[SyntheticImage],
                    size: int = 16, nearest: int = 5, seed: int = 0) -> ImagePool:
    """Пул: истинное изображение, nearest ближайших соседей и случайные остальные"""
    others = [image for image in candidates if image.id != true_image.id]
    if size < 2 or nearest >= size:
        raise PoolError(f"Некорректный пул изображений: size={size}, nearest={nearest}")
    if len(others) < size - 1:
        raise PoolError(f"Недостаточно изображений для пула размера {size}: {len(others) + 1}")

    target = true_image.vector
    by_distance = sorted(others, key=lambda image: (l2_distance_sq(target, image.vector), image.id))
    chosen = by_distance[:nearest]
    rest = by_distance[nearest:]
    rng = np.random.default_rng([seed, true_image.id])
    picked = rng.choice(len(rest), size=size - 1 - nearest, replace=False)
    chosen += [rest[i] for i in sorted(picked)]

    members = [true_image] + chosen
    order = rng.permutation(size)
    members = [members[i] for i in order]
    return ImagePool(
        image_ids=[image.id for image in members],
        features=np.array([image.vector for image in members]),
        true_index=int(np.flatnonzero(order == 0)[0]),
    )


def percentile_rank(y_hat, pool_features, true_index: int) -> float:
    """(P − rank) / (P − 1), rank 1 - ближайшее к ŷ изображение; равенства по индексу пула"""
    pool_features = np.asarray(pool_features, dtype=np.float64)
    size = pool_features.shape[0]
    if size < 2:
        raise DomainError("Пул должен содержать хотя бы 2 изображения")
    if not 0 <= true_index < size:
        raise ContractError(f"Индекс {true_index} вне пула размера {size}")
    distances = [l2_distance_sq(y_hat, row) for row in pool_features]
    true_distance = distances[true_index]
    rank = 1 + sum(
        1 for i, d in enumerate(distances)
        if d < true_distance or (d == true_distance and i < true_index)
    )
    return (size - rank) / (size - 1)


def _trace_rounds(transcripts) -> int:
    if not transcripts:
        raise ContractError("Нет эпизодов")
    rounds = {t.rounds for t in transcripts}
    if len(rounds) != 1:
        raise ContractError(f"Эпизоды разной длины: {sorted(rounds)}")
    return rounds.pop()


def percentile_rank_curve(transcripts, pools: Sequence[ImagePool]) -> List[float]:
    """Средний перцентиль истинного изображения для раундов 0..T"""
    rounds = _trace_rounds(transcripts)
    if len(pools) != len(transcripts):
        raise ContractError("Число пулов не совпадает с числом эпизодов")
    curve = []
    for t in range(rounds + 1):
        values = [
            percentile_rank(transcript.predictions[t], pool.features, pool.true_index)
            for transcript, pool in zip(transcripts, pools)
        ]
        curve.append(math.fsum(values) / len(values))
    return curve


def _state_cosine(a, b) -> float:
    """cos двух состояний; пара с нулевой нормой считается неизменной (1.0)"""
    if np.linalg.norm(a) == 0.0 or np.linalg.norm(b) == 0.0:
        return 1.0
    return cosine_similarity(a, b)


def state_similarity_curve(transcripts) -> List[float]:
    """Средний cos(s_{t−1}, s_t) состояний Q-bot для раундов 1..T.

    Нулевые состояния вырожденной модели дают 1.0, как в обучении.
    """
    rounds = _trace_rounds(transcripts)
    for transcript in transcripts:
        if len(transcript.qbot_states) != rounds + 1:
            raise ContractError(f"Эпизод {transcript.image_id}: неполная траектория состояний")
    curve = []
    for t in range(1, rounds + 1):
        values = [
            _state_cosine(transcript.qbot_states[t - 1], transcript.qbot_states[t])
            for transcript in transcripts
        ]
        curve.append(math.fsum(values) / len(values))
    return curve


# --- сводный отчет ---

def transcript_questions(transcripts, corpus: Corpus) -> List[List[str]]:
    return [[canonical_question(corpus.vocab.decode(q)) for q in t.questions] for t in transcripts]


def evaluate_selftalk(transcripts, corpus: Corpus, qbot: AgentParameters, abot: AgentParameters,
                      run_config, label: str, config_hash: str, split: str = "test") -> MetricsReport:
    """Сводный отчет по эпизодам самоигры и эталонным данным разбиения"""
    transcripts = list(transcripts)
    rounds = _trace_rounds(transcripts)
    eval_config = run_config.eval
    seed = run_config.seed

    dialogs = transcript_questions(transcripts, corpus)
    train_questions = {canonical_question(q) for q in corpus.train_questions()}
    diversity = diversity_report(dialogs, [t.image_id for t in transcripts], train_questions, rounds)

    split_ids = corpus.splits[split]
    batches = [
        DialogBatch.from_dialogs([corpus.dialogs[i] for i in split_ids[k:k + 64]],
                                 [corpus.images[i] for i in split_ids[k:k + 64]], corpus.vocab)
        for k in range(0, len(split_ids), 64)
    ]
    nll = nll_relevance(qbot, batches)

    items = build_retrieval_items(corpus, split, eval_config.candidate_pool_size, seed,
                                  limit=eval_config.retrieval_items)
    retrieval = retrieval_eval(abot, items, eval_config.threads)

    split_images = corpus.split_images(split)
    pools = [
        make_image_pool(corpus.images[t.image_id], split_images, eval_config.image_pool_size,
                        eval_config.image_pool_nearest, seed)
        for t in transcripts
    ]
    diagnostics = DiagnosticsReport(
        state_cosine_curve=state_similarity_curve(transcripts),
        alternating_repetition_rate=alt_repeat_rate(dialogs) if rounds >= 3 else 0.0,
        percentile_rank_curve=percentile_rank_curve(transcripts, pools),
    )

    report = MetricsReport(
        run_id=run_config.run_id, label=label, seed=seed, config_hash=config_hash,
        episode_count=len(transcripts), nll=nll, diversity=diversity, retrieval=retrieval,
        diagnostics=diagnostics,
    )
    logger.info(
        f"Оценка {label}: unique={diversity.unique_questions_mean:.3f} "
        f"overlap={diversity.mutual_overlap_mean:.3f} nll={nll:.4f} "
        f"mrr={retrieval.mrr:.4f} ndcg={retrieval.ndcg:.4f} "
        f"alt_repeat={diagnostics.alternating_repetition_rate:.3f}"
    )
    return report
