"""
Синтетический мир с атрибутами: изображения, подписи, диалоги по грамматике,
словарь, пулы ответов-кандидатов и сериализация корпуса.
"""
import json
import logging
import zlib
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, PrivateAttr, model_validator

from .exceptions import (
    ConfigurationError, ContractError, CorpusParseError, DomainError, EncodeError,
    PoolError, SchemaVersionError, StorageError
)
from .models import WorldConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

PAD, START, STOP, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<start>", "<stop>", "<unk>")

CORPUS_FILE = "corpus.jsonl"
VOCAB_FILE = "vocab.json"
SPLITS_FILE = "splits.json"
WORLD_FILE = "world.json"

# Шаблоны грамматики; атрибуты вне таблиц получают общие формы
WH_TEMPLATES: Dict[str, List[str]] = {
    "object": ["what is it", "what kind of object is it", "what shape is the object"],
    "color": ["what color is it", "what color is the object", "which color does it have"],
    "count": ["how many are there", "how many objects are there", "what is the count"],
    "size": ["how big is it", "what size is the object", "what size is it"],
    "material": ["what is it made of", "what material is it", "what is the material"],
    "scene": ["where is it", "what is the place", "where was the photo taken"],
}
YESNO_TEMPLATES: Dict[str, str] = {
    "object": "is it a {v}",
    "color": "is it {v}",
    "count": "are there {v}",
    "size": "is it {v}",
    "material": "is it made of {v}",
    "scene": "is it in the {v}",
}
LONG_ANSWERS: Dict[str, str] = {
    "object": "it is a {v}",
    "color": "it is {v}",
    "count": "there are {v}",
    "size": "it is {v}",
    "material": "it is made of {v}",
    "scene": "in the {v}",
}
CAPTION_PHRASES: Dict[str, str] = {
    "object": "of a {v}",
    "color": "of something {v}",
    "count": "showing {v} things",
    "size": "of a {v} thing",
    "material": "of {v} things",
    "scene": "taken in the {v}",
}
YES, NO = "yes", "no"
YESNO_LONG = {YES: "yes it is", NO: "no it is not"}


def tokenize(text: str) -> List[str]:
    return [token for token in text.lower().split(" ") if token]


def detokenize(tokens: Iterable[str]) -> str:
    return " ".join(tokens)


class AttributeQuery(NamedTuple):
    """Семантика вопроса: атрибут и, для вопроса да/нет, проверяемое значение"""
    attribute: str
    value: Optional[str] = None

    @property
    def is_yesno(self) -> bool:
        return self.value is not None


class Grammar:
    """Грамматика вопросов и ответов для заданного мира"""

    def __init__(self, world: WorldConfig):
        self.world = world
        self._value_owner: Dict[str, str] = {}
        for attribute, values in world.attributes.items():
            for value in values:
                self._value_owner[value] = attribute

        self._questions: Dict[str, AttributeQuery] = {}
        for attribute, values in world.attributes.items():
            for template in self.wh_templates(attribute):
                self._register_question(template + " ?", AttributeQuery(attribute))
            for value in values:
                self._register_question(self.yesno_question(attribute, value), AttributeQuery(attribute, value))

        self._answers: Dict[str, Tuple[Optional[str], str]] = {
            YES: (None, YES), NO: (None, NO),
            YESNO_LONG[YES]: (None, YES), YESNO_LONG[NO]: (None, NO),
        }
        for attribute, values in world.attributes.items():
            for value in values:
                for surface in self.answer_surfaces(attribute, value):
                    self._answers[surface] = (attribute, value)

    def _register_question(self, text: str, query: AttributeQuery) -> None:
        if text in self._questions and self._questions[text] != query:
            raise ConfigurationError(f"Вопрос {text!r} неоднозначен в заданном мире")
        self._questions[text] = query

    @staticmethod
    def wh_templates(attribute: str) -> List[str]:
        return WH_TEMPLATES.get(attribute, [f"what is the {attribute}"])

    @staticmethod
    def yesno_question(attribute: str, value: str) -> str:
        template = YESNO_TEMPLATES.get(attribute, "is the " + attribute + " {v}")
        return template.format(v=value) + " ?"

    @staticmethod
    def answer_surfaces(attribute: Optional[str], semantic: str) -> Tuple[str, str]:
        """Краткая и развернутая формы ответа с одинаковым смыслом"""
        if semantic in (YES, NO):
            return semantic, YESNO_LONG[semantic]
        template = LONG_ANSWERS.get(attribute, "the " + str(attribute) + " is {v}")
        return semantic, template.format(v=semantic)

    @property
    def question_strings(self) -> List[str]:
        return sorted(self._questions)

    def attribute_of(self, value: str) -> Optional[str]:
        return self._value_owner.get(value)

    def parse_question(self, question: Union[str, Sequence[str]]) -> Optional[AttributeQuery]:
        text = question if isinstance(question, str) else detokenize(question)
        return self._questions.get(text)

    def parse_answer(self, answer: Union[str, Sequence[str]]) -> Optional[str]:
        text = answer if isinstance(answer, str) else detokenize(answer)
        parsed = self._answers.get(text)
        return parsed[1] if parsed else None

    @staticmethod
    def answer_value(attributes: Dict[str, str], query: AttributeQuery) -> str:
        """Оракул ответа: значение атрибута либо yes/no"""
        truth = attributes[query.attribute]
        if query.is_yesno:
            return YES if truth == query.value else NO
        return truth

    def caption(self, attributes: Dict[str, str]) -> str:
        phrases = []
        for attribute in self.world.caption_attributes:
            template = CAPTION_PHRASES.get(attribute, "with " + attribute + " {v}")
            phrases.append(template.format(v=attributes[attribute]))
        return "a photo " + " ".join(phrases)


class Vocabulary(BaseModel):
    """Словарь: токены с непрерывными идентификаторами, зарезервированные 0..3"""
    tokens: List[str]
    _index: Dict[str, int] = PrivateAttr(default_factory=dict)

    @model_validator(mode='after')
    def validate_tokens(self):
        if tuple(self.tokens[:len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ValueError('Первые токены словаря должны быть зарезервированными')
        if len(set(self.tokens)) != len(self.tokens) or any(not t for t in self.tokens):
            raise ValueError('Токены словаря должны быть уникальными и непустыми')
        return self

    def model_post_init(self, __context) -> None:
        self._index = {token: i for i, token in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise EncodeError(f"Токен {token!r} отсутствует в словаре")

    def token_of(self, token_id: int) -> str:
        if token_id < 0 or token_id >= len(self.tokens):
            raise EncodeError(f"Идентификатор {token_id} вне словаря")
        return self.tokens[token_id]

    def encode(self, tokens: Sequence[str], allow_unknown: bool = False) -> List[int]:
        if allow_unknown:
            return [self._index.get(token, UNK) for token in tokens]
        return [self.id_of(token) for token in tokens]

    def encode_utterance(self, tokens: Sequence[str], allow_unknown: bool = False) -> List[int]:
        """Кодирование реплики с завершающим стоп-токеном"""
        return self.encode(tokens, allow_unknown) + [STOP]

    def decode(self, ids: Sequence[int]) -> List[str]:
        """Декодирование без служебных токенов"""
        return [self.token_of(i) for i in ids if i not in (PAD, START, STOP)]


def build_vocab(dialogs: Sequence["GroundTruthDialog"]) -> Vocabulary:
    """Словарь по всем токенам подписей, вопросов и ответов"""
    if not dialogs:
        raise ContractError("Нельзя построить словарь по пустому набору диалогов")
    observed = set()
    for dialog in dialogs:
        observed.update(dialog.caption)
        for round_ in dialog.rounds:
            observed.update(round_.question)
            observed.update(round_.answer)
    observed.discard("")
    observed.difference_update(RESERVED_TOKENS)
    return Vocabulary(tokens=list(RESERVED_TOKENS) + sorted(observed))


class SyntheticImage(BaseModel):
    """Изображение синтетического мира: атрибуты и вектор признаков y_gt"""
    id: int = Field(ge=0)
    attributes: Dict[str, str]
    features: Tuple[float, ...]

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.features, dtype=np.float64)


class DialogRound(BaseModel):
    question: List[str]
    answer: List[str]


class GroundTruthDialog(BaseModel):
    """Эталонный диалог к изображению"""
    image_id: int = Field(ge=0)
    caption: List[str]
    rounds: List[DialogRound]


class CandidatePool(BaseModel):
    """Пул ответов-кандидатов с оценками релевантности"""
    context_id: str
    candidates: List[List[str]]
    relevance: List[float]
    gt_index: int = Field(ge=0)

    @model_validator(mode='after')
    def validate_pool(self):
        if len(self.candidates) != len(self.relevance):
            raise ValueError('Число кандидатов и оценок должно совпадать')
        if any(grade not in (0.0, 0.5, 1.0) for grade in self.relevance):
            raise ValueError('Оценки релевантности должны быть из {0, 0.5, 1.0}')
        if self.gt_index >= len(self.candidates) or self.relevance[self.gt_index] != 1.0:
            raise ValueError('gt_index должен указывать на кандидата с оценкой 1.0')
        if self.relevance.count(1.0) != 1:
            raise ValueError('Ровно один кандидат должен иметь оценку 1.0')
        surfaces = [detokenize(c) for c in self.candidates]
        if len(set(surfaces)) != len(surfaces):
            raise ValueError('Кандидаты не должны повторяться')
        return self


class Corpus(BaseModel):
    """Корпус: мир, изображения, диалоги, разбиение и словарь"""
    world: WorldConfig
    seed: int
    images: List[SyntheticImage]
    dialogs: List[GroundTruthDialog]
    splits: Dict[str, List[int]]
    vocab: Vocabulary

    def image(self, image_id: int) -> SyntheticImage:
        return self.images[image_id]

    def dialog(self, image_id: int) -> GroundTruthDialog:
        return self.dialogs[image_id]

    def split_images(self, split: str) -> List[SyntheticImage]:
        if split not in self.splits:
            raise ContractError(f"Неизвестное разбиение: {split}")
        return [self.images[i] for i in self.splits[split]]

    def train_questions(self) -> set:
        return {detokenize(r.question) for i in self.splits["train"] for r in self.dialogs[i].rounds}


class AnswerBank:
    """Индекс различных ответов корпуса для выбора дистракторов"""

    def __init__(self, corpus: Corpus, grammar: Optional[Grammar] = None):
        self.grammar = grammar or Grammar(corpus.world)
        surfaces = {detokenize(r.answer) for d in corpus.dialogs for r in d.rounds}
        self.answers: List[str] = sorted(surfaces)

    def __len__(self) -> int:
        return len(self.answers)


def render_image_features(attributes: Dict[str, str], noise_seed, world: WorldConfig) -> np.ndarray:
    """Признаки изображения: блоки one-hot по атрибутам плюс гауссов шум"""
    if world.alphabet_size > world.feature_dim:
        raise ConfigurationError(
            f"Суммарный алфавит атрибутов {world.alphabet_size} превышает feature_dim {world.feature_dim}"
        )
    features = np.zeros(world.feature_dim, dtype=np.float64)
    offset = 0
    for attribute, values in world.attributes.items():
        if attribute not in attributes:
            raise DomainError(f"Не задан атрибут {attribute}")
        value = attributes[attribute]
        if value not in values:
            raise DomainError(f"Неизвестное значение {value!r} атрибута {attribute}")
        features[offset + values.index(value)] = world.feature_scale
        offset += len(values)

    if world.noise_scale > 0:
        rng = np.random.default_rng(noise_seed)
        features = features + rng.normal(0.0, world.noise_scale, size=world.feature_dim)

    norm = float(np.linalg.norm(features))
    if norm > world.feature_norm_bound:
        features = features * (world.feature_norm_bound / norm)
    return features


def _attribute_combination(world: WorldConfig, code: int) -> Dict[str, str]:
    attributes = {}
    for attribute, values in world.attributes.items():
        code, index = divmod(code, len(values))
        attributes[attribute] = values[index]
    return attributes


def _generate_dialog(image_id: int, attributes: Dict[str, str], grammar: Grammar,
                     world: WorldConfig, seed: int) -> GroundTruthDialog:
    rng = np.random.default_rng([seed, 1, image_id])
    hidden = world.hidden_attributes

    asked: List[str] = []
    wh_order = [hidden[i] for i in rng.permutation(len(hidden))][:world.rounds]
    for attribute in wh_order:
        templates = grammar.wh_templates(attribute)
        asked.append(templates[int(rng.integers(len(templates)))] + " ?")

    attempts = 0
    while len(asked) < world.rounds and attempts < 50 * world.rounds:
        attempts += 1
        attribute = hidden[int(rng.integers(len(hidden)))]
        values = world.attributes[attribute]
        truth = attributes[attribute]
        if rng.random() < 0.5 or len(values) == 1:
            value = truth
        else:
            others = [v for v in values if v != truth]
            value = others[int(rng.integers(len(others)))]
        question = grammar.yesno_question(attribute, value)
        if question not in asked:
            asked.append(question)

    while len(asked) < world.rounds:
        attribute = hidden[int(rng.integers(len(hidden)))]
        templates = grammar.wh_templates(attribute)
        asked.append(templates[int(rng.integers(len(templates)))] + " ?")

    order = rng.permutation(len(asked))
    rounds = []
    for index in order:
        question = asked[index]
        query = grammar.parse_question(question)
        truth = grammar.answer_value(attributes, query)
        short, long = grammar.answer_surfaces(query.attribute, truth)
        answer = short if rng.random() < 0.5 else long
        rounds.append(DialogRound(question=tokenize(question), answer=tokenize(answer)))

    return GroundTruthDialog(
        image_id=image_id,
        caption=tokenize(grammar.caption(attributes)),
        rounds=rounds,
    )


def generate_corpus(world: WorldConfig, seed: int) -> Corpus:
    """Детерминированная генерация корпуса по (world, seed)"""
    if world.alphabet_size > world.feature_dim:
        raise ConfigurationError(
            f"Суммарный алфавит атрибутов {world.alphabet_size} превышает feature_dim {world.feature_dim}"
        )
    if world.combination_count < world.image_count:
        raise ConfigurationError(
            f"Алфавит атрибутов допускает {world.combination_count} изображений, "
            f"запрошено {world.image_count}"
        )

    grammar = Grammar(world)
    codes = np.random.default_rng([seed, 2]).choice(
        world.combination_count, size=world.image_count, replace=False
    )

    images: List[SyntheticImage] = []
    dialogs: List[GroundTruthDialog] = []
    for image_id, code in enumerate(codes):
        attributes = _attribute_combination(world, int(code))
        features = render_image_features(attributes, [seed, 0, image_id], world)
        images.append(SyntheticImage(
            id=image_id, attributes=attributes, features=tuple(float(x) for x in features)
        ))
        dialogs.append(_generate_dialog(image_id, attributes, grammar, world, seed))

    permutation = np.random.default_rng([seed, 3]).permutation(world.image_count)
    n_train = int(round(world.train_fraction * world.image_count))
    n_val = int(round(world.val_fraction * world.image_count))
    splits = {
        "train": sorted(int(i) for i in permutation[:n_train]),
        "val": sorted(int(i) for i in permutation[n_train:n_train + n_val]),
        "test": sorted(int(i) for i in permutation[n_train + n_val:]),
    }

    corpus = Corpus(
        world=world, seed=seed, images=images, dialogs=dialogs,
        splits=splits, vocab=build_vocab(dialogs),
    )
    logger.info(
        f"Сгенерирован корпус: {len(images)} изображений, словарь {len(corpus.vocab)} токенов, "
        f"train/val/test = {len(splits['train'])}/{len(splits['val'])}/{len(splits['test'])}"
    )
    return corpus


def make_candidate_pool(image: SyntheticImage, question: Sequence[str], corpus: Corpus, K: int,
                        seed: int, gt_answer: Optional[Sequence[str]] = None,
                        bank: Optional[AnswerBank] = None) -> CandidatePool:
    """Пул из K ответов: эталон (1.0), перефразировка (0.5) и дистракторы (0).

    Дистракторы сначала берутся из ответов на тот же атрибут, затем из остальных.
    """
    if K < 2:
        raise PoolError(f"Размер пула должен быть не меньше 2, получено {K}")
    bank = bank or AnswerBank(corpus)
    grammar = bank.grammar

    question_text = detokenize(question)
    query = grammar.parse_question(question_text)
    if query is None:
        raise PoolError(f"Вопрос не разбирается грамматикой: {question_text!r}")
    truth = grammar.answer_value(image.attributes, query)
    short, long = grammar.answer_surfaces(query.attribute, truth)

    gt_text = detokenize(gt_answer) if gt_answer is not None else short
    if grammar.parse_answer(gt_text) != truth:
        raise ContractError(f"Эталонный ответ {gt_text!r} не согласован с изображением {image.id}")
    paraphrase = long if gt_text == short else short

    rng = np.random.default_rng([seed, image.id, zlib.crc32(question_text.encode("utf-8"))])
    near: List[str] = []
    far: List[str] = []
    for surface in bank.answers:
        if surface in (gt_text, paraphrase):
            continue
        semantic = grammar.parse_answer(surface)
        if semantic == truth:
            continue
        if query.is_yesno:
            is_near = semantic in (YES, NO)
        else:
            is_near = grammar.attribute_of(semantic) == query.attribute
        (near if is_near else far).append(surface)

    needed = K - 2
    if len(near) + len(far) < needed:
        raise PoolError(
            f"Недостаточно различных ответов для пула размера {K}: доступно {len(near) + len(far) + 2}"
        )
    distractors = [near[i] for i in rng.permutation(len(near))]
    distractors += [far[i] for i in rng.permutation(len(far))]
    distractors = distractors[:needed]

    surfaces = [gt_text, paraphrase] + distractors
    grades = [1.0, 0.5] + [0.0] * len(distractors)
    order = rng.permutation(K)
    return CandidatePool(
        context_id=f"{image.id}:{question_text}",
        candidates=[tokenize(surfaces[i]) for i in order],
        relevance=[grades[i] for i in order],
        gt_index=int(np.flatnonzero(order == 0)[0]),
    )


def _dump_line(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def save_corpus(corpus: Corpus, path: Path) -> List[Path]:
    """Запись корпуса в директорию: corpus.jsonl, vocab.json, splits.json, world.json"""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        written = []

        corpus_path = path / CORPUS_FILE
        with open(corpus_path, "w", encoding="utf-8", newline="\n") as f:
            for image, dialog in zip(corpus.images, corpus.dialogs):
                f.write(_dump_line({
                    "schema_version": SCHEMA_VERSION,
                    "id": image.id,
                    "attributes": image.attributes,
                    "features": list(image.features),
                    "caption": detokenize(dialog.caption),
                    "rounds": [
                        {"q": detokenize(r.question), "a": detokenize(r.answer)} for r in dialog.rounds
                    ],
                }) + "\n")
        written.append(corpus_path)

        documents = {
            VOCAB_FILE: {"schema_version": SCHEMA_VERSION, "tokens": corpus.vocab.tokens},
            SPLITS_FILE: {"schema_version": SCHEMA_VERSION, "seed": corpus.seed, **corpus.splits},
            WORLD_FILE: {"schema_version": SCHEMA_VERSION, "world": corpus.world.model_dump(mode="json")},
        }
        for name, payload in documents.items():
            target = path / name
            with open(target, "w", encoding="utf-8", newline="\n") as f:
                f.write(json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=2) + "\n")
            written.append(target)
    except OSError as e:
        raise StorageError(f"Ошибка записи корпуса в {path}: {e}")

    logger.info(f"Корпус сохранен в {path}")
    return written


def _read_document(path: Path) -> dict:
    if not path.exists():
        raise CorpusParseError(f"файл {path.name} не найден")
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise CorpusParseError(f"{path.name}: {e.msg}", e.lineno)
    if not isinstance(payload, dict):
        raise CorpusParseError(f"{path.name}: ожидается JSON-объект", 1)
    _check_version(payload, None)
    return payload


def _check_version(payload: dict, line_number: Optional[int]) -> None:
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(version, SCHEMA_VERSION, line_number)


def load_corpus(path: Path) -> Corpus:
    """Чтение корпуса; ошибки формата сообщают номер строки"""
    path = Path(path)
    world_doc = _read_document(path / WORLD_FILE)
    vocab_doc = _read_document(path / VOCAB_FILE)
    splits_doc = _read_document(path / SPLITS_FILE)

    try:
        world = WorldConfig(**world_doc["world"])
        vocab = Vocabulary(tokens=vocab_doc["tokens"])
        splits = {name: [int(i) for i in splits_doc[name]] for name in ("train", "val", "test")}
        seed = int(splits_doc["seed"])
    except (KeyError, TypeError, ValueError) as e:
        raise CorpusParseError(f"некорректные метаданные корпуса: {e}")

    corpus_path = path / CORPUS_FILE
    if not corpus_path.exists():
        raise CorpusParseError(f"файл {CORPUS_FILE} не найден")

    images: List[SyntheticImage] = []
    dialogs: List[GroundTruthDialog] = []
    with open(corpus_path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusParseError(f"{CORPUS_FILE}: {e.msg}", line_number)
            if not isinstance(record, dict):
                raise CorpusParseError(f"{CORPUS_FILE}: ожидается JSON-объект", line_number)
            _check_version(record, line_number)
            try:
                image_id = int(record["id"])
                if image_id != len(images):
                    raise ValueError(f"ожидался id {len(images)}, получен {image_id}")
                images.append(SyntheticImage(
                    id=image_id,
                    attributes=record["attributes"],
                    features=tuple(float(x) for x in record["features"]),
                ))
                dialogs.append(GroundTruthDialog(
                    image_id=image_id,
                    caption=tokenize(record["caption"]),
                    rounds=[DialogRound(question=tokenize(r["q"]), answer=tokenize(r["a"]))
                            for r in record["rounds"]],
                ))
            except (KeyError, TypeError, ValueError) as e:
                raise CorpusParseError(f"{CORPUS_FILE}: некорректная запись: {e}", line_number)

    if len(images) != world.image_count:
        raise CorpusParseError(
            f"{CORPUS_FILE}: ожидалось {world.image_count} записей, прочитано {len(images)}"
        )
    split_ids = [i for ids in splits.values() for i in ids]
    if len(set(split_ids)) != len(split_ids) or any(i >= len(images) for i in split_ids):
        raise CorpusParseError("splits.json: разбиения пересекаются или ссылаются на неизвестные id")

    logger.info(f"Корпус загружен из {path}: {len(images)} изображений")
    return Corpus(world=world, seed=seed, images=images, dialogs=dialogs, splits=splits, vocab=vocab)
