"""
Greedy and pivot decoding, corpus BLEU and off-target measurement.
"""

import logging
import math
from collections import Counter
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set

import numpy as np

from zeroshotnmt.model import TransformerModel
from zeroshotnmt.models.config import EvaluationMode
from zeroshotnmt.models.corpus import ParallelCorpus, Vocabulary
from zeroshotnmt.models.error import EvaluationError, UnsupportedError
from zeroshotnmt.models.reports import MetricsReport, MetricsRow, TranslationMode, TranslationResult
from zeroshotnmt.tensor import no_grad

logger = logging.getLogger(__name__)

DECODE_BATCH = 64


# Decoding #

def _pad(sequences: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(s) for s in sequences)
    ids = np.full((len(sequences), width), Vocabulary.PAD_ID, dtype=np.int64)
    for row, sequence in enumerate(sequences):
        ids[row, :len(sequence)] = sequence
    return ids


def default_max_len(model: TransformerModel, source_ids: Sequence[Sequence[int]]) -> int:
    longest = max((len(s) for s in source_ids), default=1)
    return min(model.config.max_positions, 2 * longest + 10)


def greedy_decode(model: TransformerModel, vocab: Vocabulary, source_ids: Sequence[Sequence[int]],
                  target_lang: str, max_len: Optional[int] = None) -> List[List[int]]:
    """
    Argmax decoding of a batch of sources into `target_lang`.

    Returned sequences exclude BOS and EOS. PAD and BOS tokens are never
    chosen and EOS is not allowed at the first step.
    """

    if not source_ids:
        return []
    if any(len(s) == 0 for s in source_ids):
        raise EvaluationError(error_dict={'error': 'empty_source'})
    max_len = max_len or default_max_len(model, source_ids)
    if not 1 <= max_len <= model.config.max_positions:
        raise EvaluationError.invalid_value('max_len', max_len,
                                            f'must lie in [1, {model.config.max_positions}]')

    language_id = vocab.language_id(target_lang)
    banned = [Vocabulary.PAD_ID] + [vocab.bos_id(language) for language in vocab.languages]
    rows = len(source_ids)
    sources = _pad(source_ids)
    pad_mask = sources == Vocabulary.PAD_ID

    outputs: List[List[int]] = [[] for _ in range(rows)]
    finished = np.zeros(rows, dtype=bool)
    prefix = np.full((rows, 1), vocab.bos_id(target_lang), dtype=np.int64)
    with no_grad():
        memory = model.encode(sources, pad_mask).final
        for step in range(max_len):
            logits = model.decode(prefix, memory, language_id, pad_mask).data[:, -1, :]
            scores = logits.astype(np.float64)
            scores[:, banned] = -np.inf
            if step == 0:
                scores[:, Vocabulary.EOS_ID] = -np.inf
            chosen = scores.argmax(axis=-1)
            for row in np.flatnonzero(~finished):
                if chosen[row] == Vocabulary.EOS_ID:
                    finished[row] = True
                else:
                    outputs[row].append(int(chosen[row]))
            if finished.all():
                break
            prefix = np.concatenate([prefix, chosen[:, None]], axis=1)
    return outputs


def translate_sentences(model: TransformerModel, vocab: Vocabulary, sentences: Sequence[Sequence[str]],
                        target_lang: str, max_len: Optional[int] = None) -> List[List[str]]:
    """
    Decode token sentences in length-sorted chunks, returning them in input order.
    """

    order = sorted(range(len(sentences)), key=lambda i: len(sentences[i]))
    decoded: Dict[int, List[str]] = {}
    for start in range(0, len(order), DECODE_BATCH):
        chunk = order[start:start + DECODE_BATCH]
        ids = greedy_decode(model, vocab, [vocab.encode(sentences[i]) for i in chunk], target_lang, max_len)
        for index, output in zip(chunk, ids):
            decoded[index] = vocab.decode(output)
    return [decoded[i] for i in range(len(sentences))]


def pivot_translate(model: TransformerModel, vocab: Vocabulary, sentences: Sequence[Sequence[str]],
                    source_lang: str, pivot_lang: str, target_lang: str,
                    max_len: Optional[int] = None) -> List[List[str]]:
    """
    source -> pivot, then the pivot hypotheses -> target.
    """

    if target_lang == pivot_lang or source_lang == pivot_lang:
        return translate_sentences(model, vocab, sentences, target_lang, max_len)
    intermediate = translate_sentences(model, vocab, sentences, pivot_lang, max_len)
    empty = [index for index, hypothesis in enumerate(intermediate) if not hypothesis]
    if empty:
        raise EvaluationError(error_dict={'error': 'empty_intermediate_hypothesis', 'sentences': empty,
                                          'direction': f'{source_lang}-{pivot_lang}-{target_lang}'})
    return translate_sentences(model, vocab, intermediate, target_lang, max_len)


# Scoring #

def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]], max_n: int = 4,
                smoothing: str = 'exp') -> float:
    """
    Corpus BLEU in [0, 100] from clipped n-gram counts and the brevity penalty.

    `exp` smoothing replaces the k-th order whose precision is zero by 1/2^k;
    `none` returns 0 as soon as one order has no match.
    """

    if not hypotheses:
        raise EvaluationError(error_dict={'error': 'empty_corpus'})
    if len(hypotheses) != len(references):
        raise EvaluationError(error_dict={'error': 'length_mismatch', 'hypotheses': len(hypotheses),
                                          'references': len(references)})
    if any(len(reference) == 0 for reference in references):
        raise EvaluationError(error_dict={'error': 'empty_reference'})
    if smoothing not in ('exp', 'none'):
        raise EvaluationError.invalid_value('smoothing', smoothing, "expected 'exp' or 'none'")

    matches = [0] * max_n
    totals = [0] * max_n
    hypothesis_length = reference_length = 0
    for hypothesis, reference in zip(hypotheses, references):
        hypothesis_length += len(hypothesis)
        reference_length += len(reference)
        for n in range(1, max_n + 1):
            candidate = _ngrams(hypothesis, n)
            matches[n - 1] += sum((candidate & _ngrams(reference, n)).values())
            totals[n - 1] += max(len(hypothesis) - n + 1, 0)

    if hypothesis_length == 0:
        return 0.0

    # orders no hypothesis is long enough for do not enter the mean
    orders = [n for n in range(max_n) if totals[n] > 0]
    log_precision = 0.0
    zero_orders = 0
    for n in orders:
        if matches[n] == 0:
            if smoothing == 'none':
                return 0.0
            zero_orders += 1
            log_precision += math.log(1.0 / 2 ** zero_orders)
        else:
            log_precision += math.log(matches[n] / totals[n])

    brevity = 1.0 if hypothesis_length > reference_length \
        else math.exp(1.0 - reference_length / hypothesis_length)
    return 100.0 * brevity * math.exp(log_precision / len(orders))


def check_lexicons(lexicons: Optional[Mapping[str, Set[str]]]) -> Mapping[str, Set[str]]:
    """
    Off-target detection needs lexicons that identify a language per token.
    """

    if not lexicons:
        raise UnsupportedError(error_dict={'error': 'unsupported', 'reason': 'no_lexicons'})
    languages = sorted(lexicons)
    for i, first in enumerate(languages):
        for second in languages[i + 1:]:
            shared = lexicons[first] & lexicons[second]
            if shared:
                raise UnsupportedError.overlapping_lexicons(first, second, len(shared))
    return lexicons


def lexicons_from_corpus(corpus: ParallelCorpus) -> Dict[str, Set[str]]:
    return dict(check_lexicons(corpus.lexicons()))


def flag_off_target(hypotheses: Iterable[Sequence[str]], target_lang: str,
                    lexicons: Mapping[str, Set[str]]) -> List[bool]:
    """
    A hypothesis is off-target when more than half of its tokens belong to
    a language other than the requested one.
    """

    owner = {token: language for language, tokens in lexicons.items() for token in tokens}
    flags = []
    for hypothesis in hypotheses:
        tokens = [token for token in hypothesis if not Vocabulary.is_reserved_form(token)]
        foreign = sum(1 for token in tokens if owner.get(token, target_lang) != target_lang)
        flags.append(foreign * 2 > len(tokens))
    return flags


def off_target_rate(results, lexicons: Optional[Mapping[str, Set[str]]]) -> float:
    """
    Fraction of off-target sentences over one or several translation results.
    """

    lexicons = check_lexicons(lexicons)
    results = [results] if isinstance(results, TranslationResult) else list(results)
    flags: List[bool] = []
    for result in results:
        flags += flag_off_target(result.hypotheses, result.target_lang, lexicons)
    if not flags:
        raise EvaluationError(error_dict={'error': 'empty_corpus'})
    return sum(flags) / len(flags)


# Reports #

def translate_direction(model: TransformerModel, vocab: Vocabulary, corpus: ParallelCorpus, mode,
                        pivot: str, lexicons: Optional[Mapping[str, Set[str]]] = None,
                        max_len: Optional[int] = None) -> TranslationResult:
    """
    Decode every pair of a single-direction corpus under one protocol.
    """

    mode = TranslationMode(mode)
    directions = corpus.directions()
    if len(directions) != 1:
        raise EvaluationError(error_dict={'error': 'expected_one_direction', 'directions': directions})
    source, target = directions[0]
    sentences = [pair.source for pair in corpus]
    if mode is TranslationMode.PIVOT:
        hypotheses = pivot_translate(model, vocab, sentences, source, pivot, target, max_len)
    else:
        hypotheses = translate_sentences(model, vocab, sentences, target, max_len)
    flags = flag_off_target(hypotheses, target, lexicons) if lexicons else None
    return TranslationResult(source, target, mode, hypotheses, [pair.target for pair in corpus], flags)


def _row(result: TranslationResult) -> MetricsRow:
    rate = sum(result.off_target) / len(result) if result.off_target is not None else None
    return MetricsRow(result.source_lang, result.target_lang, result.mode,
                      corpus_bleu(result.hypotheses, result.references), rate, len(result))


def summarize(rows: Sequence[MetricsRow], families: Optional[Mapping[str, str]] = None,
              new_language: Optional[str] = None) -> MetricsReport:
    """
    Attach averages: per mode, per family relation and around a new language.
    """

    report = MetricsReport(rows)
    for mode in TranslationMode:
        for field, suffix in (('bleu', ''), ('off_target_rate', '/off_target')):
            value = report.average(mode, field)
            if value is not None:
                report.averages[mode.value + suffix] = value

    if families:
        def related(row: MetricsRow) -> bool:
            return families.get(row.source_lang) == families.get(row.target_lang)

        for mode in (TranslationMode.ZERO_SHOT, TranslationMode.PIVOT):
            for label, where in (('related', related), ('unrelated', lambda row: not related(row))):
                value = report.average(mode, 'bleu', where)
                if value is not None:
                    report.averages[f'{mode.value}[{label}]'] = value

    if new_language:
        for mode in (TranslationMode.SUPERVISED, TranslationMode.ZERO_SHOT, TranslationMode.PIVOT):
            for side, where in (('from', lambda row: row.source_lang == new_language),
                                ('to', lambda row: row.target_lang == new_language)):
                for field, suffix in (('bleu', ''), ('off_target_rate', '/off_target')):
                    value = report.average(mode, field, where)
                    if value is not None:
                        report.averages[f'{mode.value}[{side}={new_language}]{suffix}'] = value
    return report


def evaluate_all_directions(model: TransformerModel, vocab: Vocabulary, test: ParallelCorpus, pivot: str,
                            mode=EvaluationMode.ALL, lexicons: Optional[Mapping[str, Set[str]]] = None,
                            max_len: Optional[int] = None, families: Optional[Mapping[str, str]] = None,
                            new_language: Optional[str] = None) -> MetricsReport:
    """
    BLEU and off-target rate for every test direction.

    Supervised directions are always decoded directly. Non-pivot directions
    are decoded zero-shot (`direct`), through the pivot (`pivot`), or both (`all`).
    """

    mode = EvaluationMode(mode)
    rows: List[MetricsRow] = []
    for (source, target), part in test.by_direction().items():
        if pivot in (source, target):
            protocols = [TranslationMode.SUPERVISED]
        elif mode is EvaluationMode.DIRECT:
            protocols = [TranslationMode.ZERO_SHOT]
        elif mode is EvaluationMode.PIVOT:
            protocols = [TranslationMode.PIVOT]
        else:
            protocols = [TranslationMode.ZERO_SHOT, TranslationMode.PIVOT]
        for protocol in protocols:
            row = _row(translate_direction(model, vocab, part, protocol, pivot, lexicons, max_len))
            logger.info("%s %s-%s bleu %.2f", protocol.value, source, target, row.bleu)
            rows.append(row)
    return summarize(rows, families, new_language)
