"""
Synthetic multilingual corpora, data-condition constructions, TSV ingestion
and batching.

A synthetic language renders a concept sentence (a sequence of concept ids
in canonical order) by permuting positions with its reordering rule and
mapping every concept through its lexicon. Any two renderings of the same
concept sentence are therefore exact translations of each other.
"""

import json
import logging
import re
import zlib
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from zeroshotnmt.models.config import SyntheticTaskSpec
from zeroshotnmt.models.corpus import Batch, Direction, ParallelCorpus, SentencePair, Split, Vocabulary
from zeroshotnmt.models.error import DataError
from zeroshotnmt.streams import RandomStreams

logger = logging.getLogger(__name__)

CORPUS_META = 'corpus.json'
VOCAB_FILE = 'vocab.txt'

_RULE_PATTERN = re.compile(r'^(identity|reverse|swap_adjacent_pairs|interleave_halves|rotate\((\d+)\))$')
_TSV_PATTERN = re.compile(r'^(?P<src>[^-.]+)-(?P<tgt>[^-.]+)\.(?P<split>train|dev|test)\.tsv$')


# Word order #

class ReorderingRule:
    """
    Deterministic permutation of sentence positions, defined for every length >= 1.

    `permutation(n)[i]` is the canonical position shown at surface position i.
    """

    name: str
    shift: int

    def __init__(self, name: str, shift: int = 0) -> None:
        self.name = name
        self.shift = shift

    @classmethod
    def parse(cls, text: str) -> 'ReorderingRule':
        """
        Factory method from `identity`, `reverse`, `rotate(k)`, `swap_adjacent_pairs`
        or `interleave_halves`.
        """

        match = _RULE_PATTERN.match(text.strip())
        if match is None:
            raise DataError(error_dict={'error': 'unknown_reordering_rule', 'rule': text})
        if match.group(2) is not None:
            return cls('rotate', int(match.group(2)))
        return cls(match.group(1))

    def __str__(self) -> str:
        return f'rotate({self.shift})' if self.name == 'rotate' else self.name

    def __eq__(self, other) -> bool:
        return isinstance(other, ReorderingRule) and str(self) == str(other)

    def permutation(self, length: int) -> np.ndarray:
        if length < 1:
            raise DataError(error_dict={'error': 'rule_undefined_for_length', 'rule': str(self),
                                        'length': length})
        positions = np.arange(length)
        if self.name == 'identity':
            return positions
        if self.name == 'reverse':
            return positions[::-1].copy()
        if self.name == 'rotate':
            return (positions + self.shift) % length
        if self.name == 'swap_adjacent_pairs':
            swapped = positions.copy()
            even = positions[:length - length % 2:2]
            swapped[even], swapped[even + 1] = positions[even + 1], positions[even]
            return swapped
        half = (length + 1) // 2
        return np.where(positions % 2 == 0, positions // 2, half + positions // 2)

    def apply(self, sequence: Sequence) -> list:
        return [sequence[i] for i in self.permutation(len(sequence))]

    def invert(self, sequence: Sequence) -> list:
        restored = [None] * len(sequence)
        for surface, canonical in enumerate(self.permutation(len(sequence))):
            restored[canonical] = sequence[surface]
        return restored


# Lexicons #

class Lexicon:
    """
    Bijection between concept ids and one language's surface tokens.
    """

    language: str
    forms: List[str]

    def __init__(self, language: str, forms: Sequence[str]) -> None:
        self.language = language
        self.forms = list(forms)
        self.concept_of = {form: concept for concept, form in enumerate(self.forms)}
        if len(self.concept_of) != len(self.forms):
            raise DataError(error_dict={'error': 'lexicon_not_bijective', 'language': language})

    def render(self, concepts: Iterable[int]) -> List[str]:
        return [self.forms[concept] for concept in concepts]

    def concepts(self, tokens: Iterable[str]) -> List[int]:
        try:
            return [self.concept_of[token] for token in tokens]
        except KeyError as error:
            raise DataError(error_dict={'error': 'token_not_in_lexicon', 'language': self.language,
                                        'token': error.args[0]}) from error

    def tokens(self) -> Set[str]:
        return set(self.forms)


class SyntheticLanguage:
    """
    Lexicon plus word-order rule of one synthetic language.
    """

    code: str
    lexicon: Lexicon
    rule: ReorderingRule
    family: Optional[str]

    def __init__(self, code: str, lexicon: Lexicon, rule: ReorderingRule, family: Optional[str] = None) -> None:
        self.code = code
        self.lexicon = lexicon
        self.rule = rule
        self.family = family

    def render(self, concepts: Sequence[int]) -> List[str]:
        return self.lexicon.render(self.rule.apply(concepts))

    def read(self, tokens: Sequence[str]) -> List[int]:
        return self.rule.invert(self.lexicon.concepts(tokens))


def build_languages(spec: SyntheticTaskSpec) -> 'Dict[str, SyntheticLanguage]':
    """
    Lexicons and rules for every language of a task.

    Concepts drawn into the global overlap share one surface form across all
    languages; inside a family a further share of concepts uses a family-wide
    form. Each decision depends only on the seed and the concept (and the
    family label), so appending a language leaves the others untouched.
    """

    streams = RandomStreams(spec.seed)
    size = spec.concept_vocab_size
    shared = streams.stream('lexicon/shared').random(size) < spec.lexical_overlap

    languages: 'Dict[str, SyntheticLanguage]' = {}
    for index, code in enumerate(spec.language_codes):
        family = spec.families[index] if spec.families is not None else None
        family_shared = np.zeros(size, dtype=bool)
        if family is not None and spec.families.count(family) > 1:
            family_shared = streams.stream(f'lexicon/family/{family}').random(size) < spec.family_overlap
        forms = []
        for concept in range(size):
            if shared[concept]:
                forms.append(f'x{concept}')
            elif family_shared[concept]:
                forms.append(f'{family}~{concept}')
            else:
                forms.append(f'{code}_{concept}')
        languages[code] = SyntheticLanguage(code, Lexicon(code, forms),
                                            ReorderingRule.parse(spec.reordering_rules[index]), family)
    return languages


class OracleTranslator:
    """
    Exact translator for synthetic languages: read concepts, render in the target.
    """

    def __init__(self, languages: 'Dict[str, SyntheticLanguage]') -> None:
        self.languages = languages

    @classmethod
    def from_spec(cls, spec: SyntheticTaskSpec) -> 'OracleTranslator':
        return cls(build_languages(spec))

    def _language(self, code: str) -> SyntheticLanguage:
        if code not in self.languages:
            raise DataError(error_dict={'error': 'unknown_language', 'language': code})
        return self.languages[code]

    def concepts(self, tokens: Sequence[str], language: str) -> List[int]:
        return self._language(language).read(tokens)

    def translate(self, tokens: Sequence[str], source_lang: str, target_lang: str) -> List[str]:
        return self._language(target_lang).render(self.concepts(tokens, source_lang))


# Generation #

def _zipf_probabilities(size: int, exponent: float) -> np.ndarray:
    weights = np.arange(1, size + 1, dtype=np.float64) ** -exponent
    return weights / weights.sum()


def sample_concept_sentences(spec: SyntheticTaskSpec, count: int) -> List[Tuple[int, ...]]:
    """
    `count` distinct concept sentences; the first k of a longer draw equal a draw of k.
    """

    rng = RandomStreams(spec.seed).stream('concepts')
    probabilities = _zipf_probabilities(spec.concept_vocab_size, spec.zipf_exponent)
    low, high = spec.sentence_length_range
    seen: Set[Tuple[int, ...]] = set()
    sentences: List[Tuple[int, ...]] = []
    attempts = 0
    while len(sentences) < count:
        attempts += 1
        if attempts > 100 * count + 1000:
            raise DataError(error_dict={'error': 'concept_space_exhausted', 'requested': count,
                                        'found': len(sentences)})
        length = int(rng.integers(low, high + 1))
        sentence = tuple(int(c) for c in rng.choice(spec.concept_vocab_size, size=length, p=probabilities))
        if sentence not in seen:
            seen.add(sentence)
            sentences.append(sentence)
    return sentences


def supervised_directions(spec: SyntheticTaskSpec) -> List[Tuple[str, str]]:
    """
    X<->pivot directions, ordered by language so appending a language appends directions.
    """

    pivot = spec.pivot_code
    directions = []
    for code in spec.language_codes:
        if code != pivot:
            directions += [(code, pivot), (pivot, code)]
    return directions


def lexicon_vocabulary(languages: 'Dict[str, SyntheticLanguage]', tagged: bool = False) -> Vocabulary:
    """
    Vocabulary over every lexicon form (tag-prefixed when `tagged`).
    """

    words: Set[str] = set()
    for code, language in languages.items():
        forms = language.lexicon.tokens()
        if tagged:
            forms = {tag_token(code, form) for form in forms}
        words.update(forms)
    return Vocabulary.build(list(languages), words)


def generate_synthetic_corpus(spec: SyntheticTaskSpec) -> Tuple[ParallelCorpus, Vocabulary]:
    """
    Render train, dev and test pairs from Zipf-sampled concept sentences.

    Training data covers the supervised (pivot) directions only: under
    `multiway` every direction renders the same pool of sentences, otherwise
    each direction gets its own disjoint slice. Dev and test are multiway over
    all ordered language pairs.
    """

    languages = build_languages(spec)
    pivot = spec.pivot_code
    directions = supervised_directions(spec)
    per_direction = spec.sentences_per_direction
    pools = 1 if spec.multiway else len(directions)
    sentences = sample_concept_sentences(spec, spec.dev_size + spec.test_size + pools * per_direction)

    def tag(source: str, target: str) -> Direction:
        return Direction.SUPERVISED if pivot in (source, target) else Direction.ZERO_SHOT

    pairs: List[SentencePair] = []
    offset = spec.dev_size + spec.test_size
    for index, (source, target) in enumerate(directions):
        start = offset + (0 if spec.multiway else index * per_direction)
        for sentence_id in range(start, start + per_direction):
            concepts = sentences[sentence_id]
            pairs.append(SentencePair(source, target, languages[source].render(concepts),
                                      languages[target].render(concepts), Split.TRAIN,
                                      Direction.SUPERVISED, sentence_id))

    held_out = [(Split.DEV, range(0, spec.dev_size)),
                (Split.TEST, range(spec.dev_size, spec.dev_size + spec.test_size))]
    for split, ids in held_out:
        for source in spec.language_codes:
            for target in spec.language_codes:
                if source == target:
                    continue
                for sentence_id in ids:
                    concepts = sentences[sentence_id]
                    pairs.append(SentencePair(source, target, languages[source].render(concepts),
                                              languages[target].render(concepts), split,
                                              tag(source, target), sentence_id))

    corpus = ParallelCorpus(pairs)
    vocab = lexicon_vocabulary(languages)
    logger.info("generated %d pairs over %d languages (%s)", len(corpus), spec.num_languages,
                'multiway' if spec.multiway else 'disjoint')
    return corpus, vocab


def generate_new_language_corpus(spec: SyntheticTaskSpec, code: str, rule: str, fraction: float = 0.1,
                                 family: Optional[str] = None, direction_size: Optional[int] = None
                                 ) -> Tuple[SyntheticTaskSpec, ParallelCorpus]:
    """
    Data for adding one language: new<->pivot training pairs cut to `fraction`
    of a direction, plus every dev/test pair that involves the new language.

    `direction_size` is the training size of one existing direction; without it
    the fraction applies to `spec.sentences_per_direction`.
    """

    extended = spec.with_language(code, rule, family)
    corpus, _ = generate_synthetic_corpus(extended)
    involved = ParallelCorpus(pair for pair in corpus if code in pair.key)
    size: Union[float, int] = fraction
    if direction_size is not None:
        if not 0.0 < fraction <= 1.0:
            raise DataError.invalid_value('fraction', fraction, 'fractions must lie in (0, 1]')
        size = max(1, int(round(fraction * min(direction_size, spec.sentences_per_direction))))
    train = subsample_direction(involved.filter(split=Split.TRAIN), size, extended.seed)
    held_out = ParallelCorpus(pair for pair in involved if pair.split is not Split.TRAIN)
    return extended, train + held_out


# Data conditions #

class CorpusSplits:
    """
    English-centred partitions of a corpus.
    """

    pivot: str
    train: ParallelCorpus
    dev: ParallelCorpus
    test: ParallelCorpus

    def __init__(self, pivot: str, train: ParallelCorpus, dev: ParallelCorpus, test: ParallelCorpus) -> None:
        self.pivot = pivot
        self.train = train
        self.dev = dev
        self.test = test

    @property
    def test_supervised(self) -> ParallelCorpus:
        return self.test.filter(direction=Direction.SUPERVISED)

    @property
    def test_zero_shot(self) -> ParallelCorpus:
        return self.test.filter(direction=Direction.ZERO_SHOT)

    def languages(self) -> List[str]:
        return (self.train + self.dev + self.test).languages()


def build_english_centered_splits(corpus: ParallelCorpus, pivot: str,
                                  include_zero_shot_dev: bool = False) -> CorpusSplits:
    """
    Train and dev restricted to pivot directions; test keeps supervised and all
    non-pivot directions. `include_zero_shot_dev` adds the zero-shot dev pairs.
    """

    languages = corpus.languages()
    if pivot not in languages:
        raise DataError(error_dict={'error': 'pivot_absent', 'pivot': pivot, 'languages': languages})

    def retag(pair: SentencePair) -> SentencePair:
        direction = Direction.SUPERVISED if pivot in pair.key else Direction.ZERO_SHOT
        return pair if pair.direction is direction else pair.replace(direction=direction)

    tagged = ParallelCorpus(retag(pair) for pair in corpus)
    missing = [(s, t) for s in languages for t in languages
               if s != t and (s, t) not in set(tagged.filter(split=Split.TEST).directions())]
    if missing:
        raise DataError(error_dict={'error': 'incomplete_test_directions', 'missing': missing})

    train_all = tagged.filter(split=Split.TRAIN)
    train = train_all.filter(direction=Direction.SUPERVISED)
    if len(train) != len(train_all):
        logger.warning("dropped %d non-pivot training pairs", len(train_all) - len(train))

    dev_all = tagged.filter(split=Split.DEV)
    dev = dev_all if include_zero_shot_dev else dev_all.filter(direction=Direction.SUPERVISED)
    return CorpusSplits(pivot, train, dev, tagged.filter(split=Split.TEST))


def tag_token(language: str, token: str) -> str:
    return f'<{language}>{token}'


def apply_no_overlap_tagging(corpus: ParallelCorpus) -> ParallelCorpus:
    """
    Prefix every token with its language tag so no surface form is shared.
    """

    return ParallelCorpus(
        pair.replace(source=[tag_token(pair.source_lang, t) for t in pair.source],
                     target=[tag_token(pair.target_lang, t) for t in pair.target])
        for pair in corpus)


def strip_language_tags(corpus: ParallelCorpus) -> ParallelCorpus:
    def strip(language: str, tokens: Sequence[str]) -> List[str]:
        prefix = f'<{language}>'
        return [t[len(prefix):] if t.startswith(prefix) else t for t in tokens]

    return ParallelCorpus(
        pair.replace(source=strip(pair.source_lang, pair.source), target=strip(pair.target_lang, pair.target))
        for pair in corpus)


def subsample_direction(corpus: ParallelCorpus, size: Union[float, int], seed: int) -> ParallelCorpus:
    """
    Uniform sample without replacement per direction, keeping corpus order.

    A float in (0, 1] is a fraction of each direction; an int is a per-direction count.
    """

    streams = RandomStreams(seed)
    keep: Set[int] = set()
    positions: Dict[Tuple[str, str], List[int]] = {}
    for position, pair in enumerate(corpus):
        positions.setdefault(pair.key, []).append(position)

    for (source, target), indices in sorted(positions.items()):
        available = len(indices)
        if isinstance(size, float):
            if not 0.0 < size <= 1.0:
                raise DataError.invalid_value('size', size, 'fractions must lie in (0, 1]')
            wanted = max(1, int(round(size * available)))
        else:
            wanted = int(size)
        if not 0 < wanted <= available:
            raise DataError(error_dict={'error': 'invalid_sample_size', 'direction': f'{source}-{target}',
                                        'requested': wanted, 'available': available})
        rng = streams.stream('subsample', zlib.crc32(f'{source}-{target}'.encode('utf-8')))
        keep.update(indices[i] for i in rng.choice(available, size=wanted, replace=False))

    return ParallelCorpus(pair for position, pair in enumerate(corpus) if position in keep)


# Batching #

def make_batches(pairs: Iterable[SentencePair], vocab: Vocabulary, batch_size_tokens: int,
                 rng: Optional[np.random.Generator] = None, max_positions: Optional[int] = None) -> List[Batch]:
    """
    Length-bucketed batches whose padded size stays within `batch_size_tokens`
    (a single longer sentence still forms its own batch).

    With an `rng` the bucket contents and the batch order are shuffled;
    without one the order is deterministic by length.
    """

    pairs = list(pairs)
    if max_positions is not None:
        for pair in pairs:
            if len(pair.source) > max_positions:
                raise DataError.sentence_too_long(pair.source, len(pair.source), max_positions)
            if len(pair.target) + 1 > max_positions:
                raise DataError.sentence_too_long(pair.target, len(pair.target) + 1, max_positions)

    order = rng.permutation(len(pairs)) if rng is not None else np.arange(len(pairs))
    widths = np.array([max(len(p.source), len(p.target) + 1) for p in pairs], dtype=np.int64)
    order = order[np.argsort(widths[order], kind='stable')]

    groups: List[List[SentencePair]] = []
    current: List[SentencePair] = []
    current_width = 0
    for index in order:
        width = max(current_width, int(widths[index]))
        if current and width * (len(current) + 1) > batch_size_tokens:
            groups.append(current)
            current, width = [], int(widths[index])
        current.append(pairs[index])
        current_width = width
    if current:
        groups.append(current)

    if rng is not None:
        groups = [groups[i] for i in rng.permutation(len(groups))]
    return [Batch.from_pairs(group, vocab, max_positions) for group in groups]


# Files #

def load_tsv_corpus(path, source_lang: str, target_lang: str, split=Split.TRAIN,
                    direction=Direction.SUPERVISED, aligned: bool = False) -> ParallelCorpus:
    """
    One `source<TAB>target` pair per line, whitespace-tokenised.

    `aligned` numbers pairs by line, for multiway files whose line i is the
    same sentence in every direction.
    """

    pairs = []
    with open(path, 'r', encoding='utf-8') as file:
        for line_number, line in enumerate(file, start=1):
            fields = line.rstrip('\n').rstrip('\r').split('\t')
            if len(fields) != 2 or not fields[0].split() or not fields[1].split():
                raise DataError.malformed_line(path, line_number, len(fields))
            pairs.append(SentencePair(source_lang, target_lang, fields[0].split(), fields[1].split(),
                                      split, direction, line_number - 1 if aligned else None))
    return ParallelCorpus(pairs)


def write_tsv_corpus(corpus: ParallelCorpus, path) -> None:
    with open(path, 'w', encoding='utf-8') as file:
        for pair in corpus:
            file.write(' '.join(pair.source) + '\t' + ' '.join(pair.target) + '\n')


def write_corpus_directory(corpus: ParallelCorpus, vocab: Vocabulary, directory, pivot: str,
                           multiway: bool, extra: Optional[dict] = None) -> List[Path]:
    """
    `{src}-{tgt}.{split}.tsv` per direction and split, `vocab.txt` and `corpus.json`.

    `extra` entries (the data preset, for instance) are merged into `corpus.json`.
    """

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for split in Split:
        for (source, target), part in corpus.filter(split=split).by_direction().items():
            path = directory / f'{source}-{target}.{split.value}.tsv'
            write_tsv_corpus(part, path)
            written.append(path)
    vocab.save(directory / VOCAB_FILE)
    with open(directory / CORPUS_META, 'w', encoding='utf-8') as file:
        meta = {'languages': vocab.languages, 'pivot': pivot, 'multiway': multiway,
                'vocab_hash': vocab.content_hash()}
        meta.update(extra or {})
        json.dump(meta, file, indent=2, sort_keys=True)
    logger.info("wrote %d corpus files to %s", len(written), directory)
    return written


def load_corpus_directory(directory) -> Tuple[ParallelCorpus, Vocabulary, dict]:
    """
    Inverse of `write_corpus_directory`. Dev and test lines are multiway-aligned;
    train lines are aligned only for multiway corpora.
    """

    directory = Path(directory)
    meta_path = directory / CORPUS_META
    if not meta_path.is_file():
        raise DataError(error_dict={'error': 'missing_corpus', 'path': str(directory)})
    with open(meta_path, 'r', encoding='utf-8') as file:
        meta = json.load(file)

    pivot = meta['pivot']
    pairs: List[SentencePair] = []
    for path in sorted(directory.glob('*.tsv')):
        match = _TSV_PATTERN.match(path.name)
        if match is None:
            logger.debug("skipping %s", path.name)
            continue
        source, target, split = match.group('src'), match.group('tgt'), Split(match.group('split'))
        direction = Direction.SUPERVISED if pivot in (source, target) else Direction.ZERO_SHOT
        aligned = split is not Split.TRAIN or meta.get('multiway', False)
        pairs.extend(load_tsv_corpus(path, source, target, split, direction, aligned))
    return ParallelCorpus(pairs), Vocabulary.load(directory / VOCAB_FILE), meta
