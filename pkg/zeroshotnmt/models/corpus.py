"""
Object models for vocabularies, parallel corpora and batches.
"""

import hashlib
from collections import OrderedDict
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np

from zeroshotnmt.models.error import DataError


class Split(Enum):
    """
    Enum representing corpus partitions.
    """

    TRAIN = "train"
    DEV = "dev"
    TEST = "test"


class Direction(Enum):
    """
    Enum representing whether a language pair was paired in training.
    """

    SUPERVISED = "supervised"
    ZERO_SHOT = "zero-shot"


class Vocabulary:
    """
    Token <-> ID maps with reserved IDs: PAD=0, UNK=1, EOS=2, then one
    target-language BOS token per language.
    """

    PAD = '<pad>'
    UNK = '<unk>'
    EOS = '</s>'
    PAD_ID = 0
    UNK_ID = 1
    EOS_ID = 2

    tokens: List[str]
    languages: List[str]

    def __init__(self, tokens: Sequence[str], languages: Sequence[str]) -> None:
        self.tokens = list(tokens)
        self.languages = list(languages)
        self.token_to_id: Dict[str, int] = {}
        for index, token in enumerate(self.tokens):
            if token in self.token_to_id:
                raise DataError(error_dict={'error': 'duplicate_token', 'token': token})
            self.token_to_id[token] = index

        if self.tokens[:3] != [self.PAD, self.UNK, self.EOS]:
            raise DataError(error_dict={'error': 'reserved_ids_missing', 'found': self.tokens[:3]})
        for language in self.languages:
            if self.bos_token(language) not in self.token_to_id:
                raise DataError(error_dict={'error': 'missing_bos', 'language': language})

        self.special_ids: Set[int] = {self.PAD_ID, self.UNK_ID, self.EOS_ID}
        self.special_ids.update(self.bos_id(language) for language in self.languages)

    @staticmethod
    def bos_token(language: str) -> str:
        return f'<bos_{language}>'

    @classmethod
    def is_reserved_form(cls, token: str) -> bool:
        return token in (cls.PAD, cls.UNK, cls.EOS) or (token.startswith('<bos_') and token.endswith('>'))

    @classmethod
    def build(cls, languages: Sequence[str], words: Iterable[str]) -> 'Vocabulary':
        """
        Factory method: reserved tokens, BOS per language, then sorted words.
        """

        words = set(words)
        reserved = [word for word in words if cls.is_reserved_form(word)]
        if reserved:
            raise DataError(error_dict={'error': 'reserved_token_in_text', 'tokens': sorted(reserved)})
        tokens = [cls.PAD, cls.UNK, cls.EOS] + [cls.bos_token(lang) for lang in languages] + sorted(words)
        return cls(tokens, languages)

    @classmethod
    def from_corpus(cls, corpus: 'ParallelCorpus', languages: Optional[Sequence[str]] = None) -> 'Vocabulary':
        """
        Factory method collecting every surface token of a corpus.
        """

        languages = list(languages) if languages is not None else corpus.languages()
        return cls.build(languages, corpus.surface_tokens())

    def extended(self, words: Iterable[str], languages: Sequence[str] = ()) -> 'Vocabulary':
        """
        Prefix-preserving expansion: existing IDs keep their meaning, new
        BOS tokens and words are appended.
        """

        new_languages = [lang for lang in languages if lang not in self.languages]
        appended = [self.bos_token(lang) for lang in new_languages]
        appended += sorted(set(words) - set(self.tokens) - set(appended))
        return Vocabulary(self.tokens + appended, self.languages + new_languages)

    def is_prefix_of(self, other: 'Vocabulary') -> bool:
        return other.tokens[:len(self.tokens)] == self.tokens and \
            other.languages[:len(self.languages)] == self.languages

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, self.UNK_ID)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.id(token) for token in tokens]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> List[str]:
        return [self.tokens[i] for i in ids if not (strip_special and i in self.special_ids)]

    def bos_id(self, language: str) -> int:
        return self.token_to_id[self.bos_token(language)]

    def language_id(self, language: str) -> int:
        try:
            return self.languages.index(language)
        except ValueError as error:
            raise DataError(error_dict={'error': 'unknown_language', 'language': language}) from error

    def content_hash(self) -> str:
        digest = hashlib.sha256('\n'.join(self.tokens).encode('utf-8'))
        return digest.hexdigest()

    def save(self, path) -> None:
        """
        One token per line; the line number is the ID.
        """

        with open(path, 'w', encoding='utf-8') as file:
            for token in self.tokens:
                file.write(token + '\n')

    @classmethod
    def load(cls, path) -> 'Vocabulary':
        """
        Factory method from a vocabulary file; languages come from the BOS tokens in ID order.
        """

        with open(path, 'r', encoding='utf-8') as file:
            tokens = [line.rstrip('\n') for line in file]
        languages = [token[len('<bos_'):-1] for token in tokens
                     if token.startswith('<bos_') and token.endswith('>')]
        return cls(tokens, languages)


class SentencePair:
    """
    One translation example with its language pair and tags.
    """

    source_lang: str
    target_lang: str
    source: List[str]
    target: List[str]
    split: Split
    direction: Direction
    sentence_id: Optional[int]

    def __init__(self, source_lang: str, target_lang: str, source: Sequence[str], target: Sequence[str],
                 split=Split.TRAIN, direction=Direction.SUPERVISED, sentence_id: Optional[int] = None) -> None:
        self.source_lang = source_lang
        self.target_lang = target_lang
        self.source = list(source)
        self.target = list(target)
        self.split = Split(split)
        self.direction = Direction(direction)
        self.sentence_id = sentence_id

    @property
    def key(self) -> Tuple[str, str]:
        return self.source_lang, self.target_lang

    def replace(self, **changes) -> 'SentencePair':
        values = dict(source_lang=self.source_lang, target_lang=self.target_lang, source=self.source,
                      target=self.target, split=self.split, direction=self.direction,
                      sentence_id=self.sentence_id)
        values.update(changes)
        return SentencePair(**values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SentencePair):
            return NotImplemented
        return (self.key, self.source, self.target, self.split, self.direction, self.sentence_id) == \
            (other.key, other.source, other.target, other.split, other.direction, other.sentence_id)

    def __repr__(self) -> str:
        return f"SentencePair({self.source_lang}->{self.target_lang}, {' '.join(self.source)!r})"


class ParallelCorpus:
    """
    Collection of sentence pairs across directions and splits.
    """

    pairs: List[SentencePair]

    def __init__(self, pairs: Iterable[SentencePair] = ()) -> None:
        self.pairs = list(pairs)

    def __iter__(self) -> Iterator[SentencePair]:
        return self.pairs.__iter__()

    def __len__(self) -> int:
        return len(self.pairs)

    def __add__(self, other: 'ParallelCorpus') -> 'ParallelCorpus':
        return ParallelCorpus(self.pairs + other.pairs)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParallelCorpus):
            return NotImplemented
        return self.pairs == other.pairs

    def filter(self, split=None, direction=None, source_lang: Optional[str] = None,
               target_lang: Optional[str] = None) -> 'ParallelCorpus':
        split = Split(split) if split is not None else None
        direction = Direction(direction) if direction is not None else None
        return ParallelCorpus(
            pair for pair in self.pairs
            if (split is None or pair.split is split)
            and (direction is None or pair.direction is direction)
            and (source_lang is None or pair.source_lang == source_lang)
            and (target_lang is None or pair.target_lang == target_lang))

    def by_direction(self) -> 'OrderedDict[Tuple[str, str], ParallelCorpus]':
        groups: 'OrderedDict[Tuple[str, str], List[SentencePair]]' = OrderedDict()
        for pair in self.pairs:
            groups.setdefault(pair.key, []).append(pair)
        return OrderedDict((key, ParallelCorpus(value)) for key, value in sorted(groups.items()))

    def directions(self) -> List[Tuple[str, str]]:
        return sorted({pair.key for pair in self.pairs})

    def languages(self) -> List[str]:
        seen: List[str] = []
        for pair in self.pairs:
            for language in pair.key:
                if language not in seen:
                    seen.append(language)
        return seen

    def surface_tokens(self) -> Set[str]:
        tokens: Set[str] = set()
        for pair in self.pairs:
            tokens.update(pair.source)
            tokens.update(pair.target)
        return tokens

    def lexicons(self) -> Dict[str, Set[str]]:
        """
        Surface tokens observed per language, on either side of a pair.
        """

        lexicons: Dict[str, Set[str]] = {}
        for pair in self.pairs:
            lexicons.setdefault(pair.source_lang, set()).update(pair.source)
            lexicons.setdefault(pair.target_lang, set()).update(pair.target)
        return lexicons


class Batch:
    """
    Right-padded ID matrices for one training or scoring step.

    `target_input` rows are `[BOS_lang, y_1 .. y_T]` and `target_output`
    rows are `[y_1 .. y_T, EOS]`.
    """

    source_ids: np.ndarray
    source_pad_mask: np.ndarray
    target_input: np.ndarray
    target_output: np.ndarray
    target_lang_ids: np.ndarray
    target_lengths: np.ndarray
    pairs: List[SentencePair]

    def __init__(self, source_ids: np.ndarray, source_pad_mask: np.ndarray, target_input: np.ndarray,
                 target_output: np.ndarray, target_lang_ids: np.ndarray, target_lengths: np.ndarray,
                 pairs: Optional[List[SentencePair]] = None) -> None:
        self.source_ids = source_ids
        self.source_pad_mask = source_pad_mask
        self.target_input = target_input
        self.target_output = target_output
        self.target_lang_ids = target_lang_ids
        self.target_lengths = target_lengths
        self.pairs = pairs or []

    @classmethod
    def from_pairs(cls, pairs: Sequence[SentencePair], vocab: Vocabulary,
                   max_positions: Optional[int] = None) -> 'Batch':
        """
        Factory method encoding and padding a group of pairs.
        """

        if not pairs:
            raise DataError(error_dict={'error': 'empty_batch'})
        for pair in pairs:
            if not pair.source:
                raise DataError(error_dict={'error': 'empty_sentence', 'pair': repr(pair)})
            if max_positions is not None:
                if len(pair.source) > max_positions:
                    raise DataError.sentence_too_long(pair.source, len(pair.source), max_positions)
                if len(pair.target) + 1 > max_positions:
                    raise DataError.sentence_too_long(pair.target, len(pair.target) + 1, max_positions)

        rows = len(pairs)
        source_width = max(len(pair.source) for pair in pairs)
        target_width = max(len(pair.target) for pair in pairs) + 1

        source_ids = np.full((rows, source_width), Vocabulary.PAD_ID, dtype=np.int64)
        target_input = np.full((rows, target_width), Vocabulary.PAD_ID, dtype=np.int64)
        target_output = np.full((rows, target_width), Vocabulary.PAD_ID, dtype=np.int64)
        for row, pair in enumerate(pairs):
            source = vocab.encode(pair.source)
            target = vocab.encode(pair.target)
            source_ids[row, :len(source)] = source
            target_input[row, :len(target) + 1] = [vocab.bos_id(pair.target_lang)] + target
            target_output[row, :len(target) + 1] = target + [Vocabulary.EOS_ID]

        return cls(
            source_ids=source_ids,
            source_pad_mask=source_ids == Vocabulary.PAD_ID,
            target_input=target_input,
            target_output=target_output,
            target_lang_ids=np.array([vocab.language_id(p.target_lang) for p in pairs], dtype=np.int64),
            target_lengths=np.array([len(p.target) for p in pairs], dtype=np.int64),
            pairs=list(pairs))

    @property
    def size(self) -> int:
        return self.source_ids.shape[0]

    def target_token_count(self) -> int:
        return int(self.target_lengths.sum())

    def __len__(self) -> int:
        return self.size
