"""
Юнит-тесты метрик оценки
"""
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from diverse_selftalk.agents import zero_agent_params
from diverse_selftalk.config import RunConfig
from diverse_selftalk.corpus import CandidatePool
from diverse_selftalk.evalmetrics import (
    EMPTY_QUESTION, ImagePool, alt_repeat_rate, bleu4, build_retrieval_items, canonical_question,
    dist_n, diversity_report, ent_n, evaluate_selftalk, make_image_pool, mutual_overlap,
    nll_relevance, novel_question_count, parallel_map, percentile_rank, percentile_rank_curve,
    ranking_order, retrieval_eval, retrieval_metrics, score_candidates, state_similarity_curve,
    unique_questions
)
from diverse_selftalk.exceptions import ContractError, DomainError, PoolError
from diverse_selftalk.models import AgentRole, DecodeConfig, DecodeMode
from diverse_selftalk.training import run_selftalk_episode

from tests.factories import make_transcript, tiny_run_dict

LOG2_3 = math.log2(3)

words = st.lists(st.sampled_from(["a", "b", "c", "d"]), min_size=1, max_size=6)
question_sets = st.lists(words.map(" ".join), min_size=2, max_size=6)
dialog_sets = st.lists(st.lists(st.sampled_from(["x", "y", "z"]), min_size=3, max_size=7), min_size=1, max_size=4)


def _reference_grams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def _reference_bleu4(hypothesis, references):
    log_precision = 0.0
    for n in range(1, 5):
        grams = _reference_grams(hypothesis, n)
        matched = 0
        for gram in set(grams):
            clip = max(_reference_grams(reference, n).count(gram) for reference in references)
            matched += min(grams.count(gram), clip)
        if n == 1:
            if matched == 0:
                return 0.0
            log_precision += math.log(matched / len(grams))
        else:
            log_precision += math.log((matched + 1) / (len(grams) + 1))
    closest = sorted(references, key=lambda r: (abs(len(r) - len(hypothesis)), len(r)))[0]
    if len(hypothesis) > len(closest):
        brevity = 1.0
    else:
        brevity = math.exp(1.0 - len(closest) / len(hypothesis))
    return brevity * math.exp(log_precision / 4.0)


def _reference_ngrams(questions, n):
    grams = []
    for question in questions:
        grams.extend(_reference_grams(question.split(), n))
    return grams, sum(len(q.split()) for q in questions)


def _reference_rank(scores, index):
    return 1 + sum(1 for j, s in enumerate(scores) if s > scores[index] or (s == scores[index] and j < index))


def _reference_retrieval(items):
    ndcgs, ranks = [], []
    for scores, pool in items:
        ranks.append(_reference_rank(scores, pool.gt_index))
        positives = len([g for g in pool.relevance if g > 0])
        dcg = 0.0
        for i, grade in enumerate(pool.relevance):
            rank = _reference_rank(scores, i)
            if rank <= positives:
                dcg += grade / math.log2(rank + 1)
        ideal = sorted(pool.relevance, reverse=True)[:positives]
        idcg = sum(grade / math.log2(position + 2) for position, grade in enumerate(ideal))
        ndcgs.append(dcg / idcg)
    return ndcgs, ranks


@st.composite
def scored_pools(draw):
    size = draw(st.integers(min_value=2, max_value=8))
    gt_index = draw(st.integers(min_value=0, max_value=size - 1))
    relevance = [1.0 if i == gt_index else draw(st.sampled_from([0.0, 0.5])) for i in range(size)]
    scores = [float(draw(st.integers(min_value=-3, max_value=3))) for _ in range(size)]
    return scores, _pool(relevance, gt_index)


def _pool(relevance, gt_index=0):
    return CandidatePool(
        context_id="ctx", candidates=[[chr(ord("a") + i)] for i in range(len(relevance))],
        relevance=relevance, gt_index=gt_index,
    )


@pytest.mark.unit
class TestQuestionDiversity:
    """Разнообразие вопросов"""

    @pytest.mark.parametrize("question, expected", [
        ("Is it red ?", "is it red"),
        ("<start> what is it ? ?", "what is it"),
        (["where", "is", "it", "<stop>"], "where is it"),
        ("", EMPTY_QUESTION),
        ("? <stop>", EMPTY_QUESTION),
    ])
    def test_canonical_question(self, question, expected):
        assert canonical_question(question) == expected

    def test_unique_and_novel(self):
        assert unique_questions(["a", "b", "a"]) == 2
        assert unique_questions(["a", "b", "a"], rounds=3) == 2
        with pytest.raises(ContractError):
            unique_questions(["a", "b"], rounds=3)
        with pytest.raises(DomainError):
            unique_questions([])
        assert novel_question_count(["a", "b", "c", "c"], {"a", "z"}) == 2

    def test_bleu_reference_values(self):
        assert bleu4("a b c d".split(), ["a b c d".split()]) == pytest.approx(1.0, abs=1e-12)
        expected = (0.75 * 0.75 * (2 / 3) * 0.5) ** 0.25
        assert bleu4("a b c d".split(), ["a b c e".split()]) == pytest.approx(expected, abs=1e-12)
        assert bleu4("x y".split(), ["a b".split()]) == 0.0

    def test_bleu_brevity(self):
        assert bleu4("a b".split(), ["a b c d".split()]) == pytest.approx(math.exp(-1.0), abs=1e-12)
        assert bleu4("a b c".split(), ["a b".split(), "a b c d".split()]) == pytest.approx(1.0, abs=1e-12)

    def test_bleu_errors(self):
        with pytest.raises(DomainError):
            bleu4([], [["a"]])
        with pytest.raises(DomainError):
            bleu4(["a"], [])

    def test_mutual_overlap(self):
        assert mutual_overlap(["is it red", "is it red"]) == pytest.approx(1.0, abs=1e-12)
        assert mutual_overlap(["what color", "where now", "how big"]) == 0.0
        value = mutual_overlap(["is it red", "is it blue", "what color is it"])
        assert 0.0 < value < 1.0
        with pytest.raises(DomainError):
            mutual_overlap(["alone"])

    def test_dist_and_ent(self):
        questions = ["a b", "a c"]
        assert dist_n(questions, 1) == 0.75
        assert dist_n(questions, 2) == 0.5
        assert ent_n(questions, 1) == pytest.approx(1.5 * math.log(2), abs=1e-12)
        assert ent_n(questions, 2) == pytest.approx(math.log(2), abs=1e-12)

    def test_dist_without_bigrams(self):
        assert dist_n(["a", "b", "a"], 2) == 0.0
        assert ent_n(["a", "b", "a"], 2) == 0.0
        with pytest.raises(DomainError):
            dist_n([""], 1)
        with pytest.raises(DomainError):
            ent_n(["a"], 0)

    def test_alternating_repetition(self):
        assert alt_repeat_rate([["a", "b", "a", "b"]]) == 1.0
        assert alt_repeat_rate([["a", "b", "c"], ["x", "y", "x"]]) == 0.5
        with pytest.raises(DomainError):
            alt_repeat_rate([["a", "b"]])

    def test_diversity_report(self):
        dialogs = [["is it red", "is it red", "what color"], ["where", "how big", "where"]]
        report = diversity_report(dialogs, [3, 4], {"where", "what color"}, rounds=3)
        assert report.unique_questions_mean == 2.0
        assert report.unique_questions_stderr == 0.0
        assert report.novel_question_count == 2
        assert [d.image_id for d in report.per_dialog] == [3, 4]
        assert 0.0 < report.dist1 <= 1.0
        assert 0.0 <= report.mutual_overlap_mean <= 1.0


@pytest.mark.unit
class TestRetrieval:
    """Ранжирование ответов-кандидатов"""

    def test_ranking_order_ties(self):
        assert ranking_order([0.5, 0.9, 0.5, 0.1]) == [1, 0, 2, 3]

    def test_reference_ndcg(self):
        pools = [_pool([1.0, 0.5, 0.0]), _pool([1.0, 0.5, 0.0])]
        report = retrieval_metrics([[0.1, 0.9, 0.5], [0.9, 0.1, 0.5]], pools)
        ndcg_a = 0.5 / (1 + 0.5 / LOG2_3)
        ndcg_b = 1.0 / (1 + 0.5 / LOG2_3)
        assert report.ndcg == pytest.approx((ndcg_a + ndcg_b) / 2, abs=1e-12)
        assert report.mrr == pytest.approx((1 / 3 + 1) / 2, abs=1e-12)
        assert report.r_at_1 == 0.5 and report.r_at_5 == 1.0 and report.r_at_10 == 1.0
        assert report.mean_rank == 2.0 and report.item_count == 2

    def test_ties_rank_by_index(self):
        report = retrieval_metrics([[0.0, 0.0, 0.0]], [_pool([0.0, 1.0, 0.5], gt_index=1)])
        assert report.mean_rank == 2.0
        assert report.ndcg == pytest.approx((1.0 / LOG2_3) / (1.0 + 0.5 / LOG2_3), abs=1e-12)

    def test_contract_errors(self):
        invalid = CandidatePool.model_construct(
            context_id="x", candidates=[["a"], ["b"]], relevance=[0.5, 0.0], gt_index=0
        )
        with pytest.raises(ContractError):
            retrieval_metrics([[0.0, 1.0]], [invalid])
        with pytest.raises(ContractError):
            retrieval_metrics([[0.0]], [_pool([1.0, 0.0])])
        with pytest.raises(ContractError):
            retrieval_metrics([], [])

    def test_items_follow_dialogs(self, tiny_corpus):
        items = build_retrieval_items(tiny_corpus, "val", 6, seed=2, limit=12)
        assert len(items) == 12
        first_image = sorted(tiny_corpus.splits["val"])[0]
        vocab = tiny_corpus.vocab
        dialog = tiny_corpus.dialogs[first_image]
        for t, item in enumerate(items[:10]):
            assert item.image_id == first_image and item.round_index == t
            assert len(item.history) == t
            assert item.question == vocab.encode_utterance(dialog.rounds[t].question)
            assert item.candidates[item.pool.gt_index] == vocab.encode_utterance(dialog.rounds[t].answer)
        assert items[10].round_index == 0 and items[10].history == []

    def test_uniform_abot_scores_by_length(self, tiny_corpus, tiny_model):
        vocab_size = len(tiny_corpus.vocab)
        abot = zero_agent_params(AgentRole.ABOT, tiny_model, vocab_size, tiny_corpus.world.feature_dim)
        item = build_retrieval_items(tiny_corpus, "test", 5, seed=0, limit=1)[0]
        scores = score_candidates(abot, item)
        for candidate, score in zip(item.candidates, scores):
            assert score == pytest.approx(-len(candidate) * math.log(vocab_size), abs=1e-9)

    def test_threads_do_not_change_result(self, tiny_corpus, abot):
        items = build_retrieval_items(tiny_corpus, "val", 6, seed=2, limit=8)
        assert retrieval_eval(abot, items, threads=1) == retrieval_eval(abot, items, threads=3)

    def test_parallel_map_keeps_order(self):
        assert parallel_map(lambda x: x * x, list(range(20)), threads=4) == [x * x for x in range(20)]


@pytest.mark.unit
class TestRelevance:
    """NLL эталонных вопросов"""

    def test_uniform_qbot(self, tiny_corpus, tiny_model, corpus_batch):
        vocab_size = len(tiny_corpus.vocab)
        qbot = zero_agent_params(AgentRole.QBOT, tiny_model, vocab_size, tiny_corpus.world.feature_dim)
        assert nll_relevance(qbot, corpus_batch) == pytest.approx(math.log(vocab_size), abs=1e-12)

    def test_trained_parameters_are_finite(self, qbot, corpus_batch):
        value = nll_relevance(qbot, [corpus_batch, corpus_batch])
        assert value == pytest.approx(nll_relevance(qbot, corpus_batch), abs=1e-12)
        assert value > 0


@pytest.mark.unit
class TestImageGuessing:
    """Угадывание изображения по пулу"""

    def test_percentile_rank(self):
        pool = [[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]]
        assert percentile_rank([0.9, 0.0], pool, 1) == 1.0
        assert percentile_rank([0.9, 0.0], pool, 2) == 0.0
        assert percentile_rank([0.9, 0.0], pool, 0) == 0.5

    def test_percentile_rank_ties(self):
        pool = [[0.0, 0.0], [1.0, 0.0]]
        assert percentile_rank([0.5, 0.0], pool, 0) == 1.0
        assert percentile_rank([0.5, 0.0], pool, 1) == 0.0
        with pytest.raises(DomainError):
            percentile_rank([0.0, 0.0], [[0.0, 0.0]], 0)
        with pytest.raises(ContractError):
            percentile_rank([0.0, 0.0], pool, 2)

    def test_image_pool(self, tiny_corpus):
        test_images = tiny_corpus.split_images("test")
        true_image = test_images[0]
        pool = make_image_pool(true_image, test_images, size=8, nearest=3, seed=5)
        assert len(pool.image_ids) == 8 and len(set(pool.image_ids)) == 8
        assert pool.image_ids[pool.true_index] == true_image.id
        assert np.array_equal(pool.features[pool.true_index], true_image.vector)

        others = sorted((i for i in test_images if i.id != true_image.id),
                        key=lambda i: (np.sum((i.vector - true_image.vector) ** 2), i.id))
        assert {i.id for i in others[:3]} <= set(pool.image_ids)
        again = make_image_pool(true_image, test_images, size=8, nearest=3, seed=5)
        assert again.image_ids == pool.image_ids

    def test_image_pool_errors(self, tiny_corpus):
        test_images = tiny_corpus.split_images("test")
        with pytest.raises(PoolError):
            make_image_pool(test_images[0], test_images, size=13, nearest=2)
        with pytest.raises(PoolError):
            make_image_pool(test_images[0], test_images, size=4, nearest=4)

    def test_curves(self):
        first = make_transcript([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
                                predictions=[[0.0, 0.0], [0.9, 0.0], [3.0, 0.0]], y_gt=[1.0, 0.0])
        second = make_transcript([[1.0, 0.0], [2.0, 0.0], [2.0, 2.0]],
                                 predictions=[[3.0, 0.0], [0.9, 0.0], [0.9, 0.0]], y_gt=[1.0, 0.0])
        similarity = state_similarity_curve([first, second])
        assert similarity == pytest.approx([1.0, (0.0 + 1 / math.sqrt(2)) / 2], abs=1e-12)

        pool = ImagePool([0, 1, 2], np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]]), 1)
        curve = percentile_rank_curve([first, second], [pool, pool])
        assert curve == pytest.approx([0.5, 1.0, 0.75], abs=1e-12)

    def test_incomplete_state_trace(self):
        transcript = make_transcript([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        broken = transcript.model_copy(update={"qbot_states": transcript.qbot_states[:-1]})
        with pytest.raises(ContractError):
            state_similarity_curve([broken])

    def test_zero_states_count_as_unchanged(self):
        frozen = make_transcript([[0.0, 0.0]] * 4)
        assert state_similarity_curve([frozen]) == [1.0, 1.0, 1.0]
        waking = make_transcript([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        assert state_similarity_curve([waking]) == pytest.approx([1.0, 0.0], abs=1e-12)

    def test_frozen_model_curve(self, tiny_corpus, tiny_model):
        vocab_size = len(tiny_corpus.vocab)
        feature_dim = tiny_corpus.world.feature_dim
        qbot = zero_agent_params(AgentRole.QBOT, tiny_model, vocab_size, feature_dim)
        abot = zero_agent_params(AgentRole.ABOT, tiny_model, vocab_size, feature_dim)
        image_id = tiny_corpus.splits["test"][0]
        transcript, _ = run_selftalk_episode(
            qbot, abot, tiny_corpus.images[image_id],
            tiny_corpus.vocab.encode(tiny_corpus.dialogs[image_id].caption), 4,
            DecodeConfig(mode=DecodeMode.GREEDY, max_len=4),
        )
        assert state_similarity_curve([transcript]) == [1.0] * 4


@pytest.mark.unit
class TestEvaluateSelfTalk:
    """Сводный отчет по эпизодам"""

    def test_report(self, tiny_corpus, qbot, abot, temp_dir):
        run_config = RunConfig(**tiny_run_dict(temp_dir))
        decode_config = DecodeConfig(mode=DecodeMode.BEAM, beam_size=2, max_len=8)
        transcripts = []
        for image_id in tiny_corpus.splits["test"][:3]:
            transcript, _ = run_selftalk_episode(
                qbot, abot, tiny_corpus.images[image_id],
                tiny_corpus.vocab.encode(tiny_corpus.dialogs[image_id].caption), 10, decode_config,
            )
            transcripts.append(transcript)

        report = evaluate_selftalk(transcripts, tiny_corpus, qbot, abot, run_config, "beam", "f" * 64)
        assert report.label == "beam" and report.run_id == "tiny" and report.seed == 7
        assert report.episode_count == 3
        assert len(report.diagnostics.state_cosine_curve) == 10
        assert len(report.diagnostics.percentile_rank_curve) == 11
        assert report.retrieval.item_count == 20
        assert 1.0 <= report.diversity.unique_questions_mean <= 10.0
        assert report.nll > 0


@pytest.mark.unit
class TestReferenceImplementations:
    """Метрики против независимых переборных реализаций"""

    @settings(max_examples=100, deadline=None)
    @given(words, st.lists(words, min_size=1, max_size=3))
    def test_bleu4(self, hypothesis, references):
        assert bleu4(hypothesis, references) == pytest.approx(_reference_bleu4(hypothesis, references), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(question_sets)
    def test_mutual_overlap(self, questions):
        tokens = [q.split() for q in questions]
        expected = sum(
            _reference_bleu4(tokens[i], tokens[:i] + tokens[i + 1:]) for i in range(len(tokens))
        ) / len(tokens)
        assert mutual_overlap(questions) == pytest.approx(expected, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(question_sets, st.data())
    def test_mutual_overlap_permutation(self, questions, data):
        permuted = data.draw(st.permutations(questions))
        assert mutual_overlap(permuted) == pytest.approx(mutual_overlap(questions), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(question_sets, st.integers(min_value=1, max_value=3))
    def test_dist_n(self, questions, n):
        grams, total = _reference_ngrams(questions, n)
        assume(total >= n)
        assert dist_n(questions, n) == float(Fraction(len(set(grams)), total))

    @settings(max_examples=100, deadline=None)
    @given(question_sets, st.integers(min_value=1, max_value=3))
    def test_ent_n(self, questions, n):
        grams, total = _reference_ngrams(questions, n)
        assume(total >= n)
        expected = 0.0
        for gram in set(grams):
            p = grams.count(gram) / len(grams)
            expected -= p * math.log(p)
        assert ent_n(questions, n) == pytest.approx(expected, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(dialog_sets)
    def test_alt_repeat_rate(self, dialogs):
        pairs = [(d[t], d[t + 2]) for d in dialogs for t in range(len(d) - 2)]
        expected = Fraction(sum(1 for a, b in pairs if a == b), len(pairs))
        assert alt_repeat_rate(dialogs) == float(expected)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(scored_pools(), min_size=1, max_size=5))
    def test_retrieval_metrics(self, items):
        ndcgs, ranks = _reference_retrieval(items)
        report = retrieval_metrics([scores for scores, _ in items], [pool for _, pool in items])
        count = len(items)
        assert report.ndcg == pytest.approx(sum(ndcgs) / count, abs=1e-12)
        assert report.mrr == pytest.approx(sum(1.0 / r for r in ranks) / count, abs=1e-12)
        assert report.r_at_1 == float(Fraction(sum(r <= 1 for r in ranks), count))
        assert report.r_at_5 == float(Fraction(sum(r <= 5 for r in ranks), count))
        assert report.mean_rank == float(Fraction(sum(ranks), count))

    def test_retrieval_eval_scores_with_abot(self, tiny_corpus, abot):
        items = build_retrieval_items(tiny_corpus, "val", 6, seed=4, limit=6)
        scores = [score_candidates(abot, item) for item in items]
        ndcgs, ranks = _reference_retrieval(list(zip(scores, [item.pool for item in items])))
        report = retrieval_eval(abot, items, threads=1)
        assert report.ndcg == pytest.approx(sum(ndcgs) / len(items), abs=1e-12)
        assert report.mean_rank == float(Fraction(sum(ranks), len(items)))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.lists(st.integers(min_value=-3, max_value=3), min_size=3, max_size=3),
                    min_size=2, max_size=7),
           st.lists(st.integers(min_value=-3, max_value=3), min_size=3, max_size=3), st.data())
    def test_percentile_rank(self, pool, y_hat, data):
        true_index = data.draw(st.integers(min_value=0, max_value=len(pool) - 1))
        distances = [sum((a - b) ** 2 for a, b in zip(y_hat, row)) for row in pool]
        order = sorted(range(len(pool)), key=lambda i: (distances[i], i))
        expected = Fraction(len(pool) - 1 - order.index(true_index), len(pool) - 1)
        value = percentile_rank([float(v) for v in y_hat], [[float(v) for v in row] for row in pool], true_index)
        assert value == float(expected)

    def test_percentile_rank_permutation(self):
        for seed in range(60):
            rng = np.random.default_rng(seed)
            size = int(rng.integers(2, 10))
            pool = rng.normal(size=(size, 3))
            y_hat = rng.normal(size=3)
            true_index = int(rng.integers(size))
            order = rng.permutation(size)
            moved = int(np.flatnonzero(order == true_index)[0])
            assert percentile_rank(y_hat, pool[order], moved) == percentile_rank(y_hat, pool, true_index)
