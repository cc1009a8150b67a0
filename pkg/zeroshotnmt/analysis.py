"""
Representation analysis: SVCCA similarity between languages per encoder
layer, and linear probes recovering token, position and language identity
from hidden states.
"""

import itertools
import json
import logging
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from zeroshotnmt import tensor as T
from zeroshotnmt.model import TransformerModel
from zeroshotnmt.models.corpus import ParallelCorpus, Vocabulary
from zeroshotnmt.models.error import AnalysisError
from zeroshotnmt.models.reports import FeatureMatrix, ProbeEntry, ProbeReport, SimilarityEntry, SimilarityReport
from zeroshotnmt.streams import RandomStreams
from zeroshotnmt.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

LABEL_TYPES = ('token_id', 'position_id', 'language_id')
ENCODE_BATCH = 64

Matrix = Union[FeatureMatrix, np.ndarray]


# Activations #

def collect_activations(model: TransformerModel, vocab: Vocabulary, sentences: Sequence[Sequence[str]],
                        layers: Optional[Sequence[str]] = None) -> 'OrderedDict[str, List[np.ndarray]]':
    """
    Per layer name, one `[length, d_model]` array per sentence (pad rows cut),
    computed without dropout.
    """

    names = None if layers is None else [str(layer) for layer in layers]
    collected: 'OrderedDict[str, List[np.ndarray]]' = OrderedDict()
    with no_grad():
        for start in range(0, len(sentences), ENCODE_BATCH):
            chunk = [vocab.encode(s) for s in sentences[start:start + ENCODE_BATCH]]
            ids = np.full((len(chunk), max(len(s) for s in chunk)), Vocabulary.PAD_ID, dtype=np.int64)
            for row, sentence in enumerate(chunk):
                ids[row, :len(sentence)] = sentence
            activations = model.encode(ids, ids == Vocabulary.PAD_ID)
            for name in names or activations.layer_names():
                values = activations.layer(name).data
                collected.setdefault(name, []).extend(
                    values[row, :len(sentence)].astype(np.float64) for row, sentence in enumerate(chunk))
    return collected


def meanpool_sentences(activations: np.ndarray, pad_mask: np.ndarray) -> FeatureMatrix:
    """
    One row per sentence: the mean over its non-pad timesteps.
    """

    activations = np.asarray(activations.data if isinstance(activations, Tensor) else activations,
                             dtype=np.float64)
    keep = ~np.asarray(pad_mask, dtype=bool)
    counts = keep.sum(axis=1)
    if np.any(counts == 0):
        raise AnalysisError(error_dict={'error': 'all_pad_sentence', 'rows': np.flatnonzero(counts == 0).tolist()})
    pooled = (activations * keep[:, :, None]).sum(axis=1) / counts[:, None]
    return FeatureMatrix(pooled)


def _pool(per_sentence: Sequence[np.ndarray]) -> FeatureMatrix:
    return FeatureMatrix(np.stack([values.mean(axis=0) for values in per_sentence]))


# SVCCA #

def _matrix(value: Matrix) -> np.ndarray:
    return value.features if isinstance(value, FeatureMatrix) else np.asarray(value, dtype=np.float64)


def _reduce(matrix: np.ndarray, variance_threshold: float) -> np.ndarray:
    centred = matrix - matrix.mean(axis=0, keepdims=True)
    left, singular, _ = np.linalg.svd(centred, full_matrices=False)
    if singular.size == 0 or singular[0] <= 1e-12 * max(1.0, float(np.abs(matrix).max())):
        raise AnalysisError(error_dict={'error': 'rank_zero_input', 'shape': list(matrix.shape)})
    explained = np.cumsum(singular ** 2) / np.sum(singular ** 2)
    keep = int(np.searchsorted(explained, variance_threshold - 1e-12) + 1)
    keep = min(keep, int(np.sum(singular > 1e-10 * singular[0])))
    return left[:, :keep] * singular[:keep]


def svcca_score(first: Matrix, second: Matrix, variance_threshold: float = 0.99) -> float:
    """
    Mean canonical correlation between the SVD-truncated, centred representations.

    Rows must be aligned (the same sentences in two languages). Invariant to
    invertible linear maps of either side, hence to rotation and rescaling.
    """

    x, y = _matrix(first), _matrix(second)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise AnalysisError(error_dict={'error': 'row_mismatch', 'shapes': [list(x.shape), list(y.shape)]})
    if x.shape[0] < 2:
        raise AnalysisError(error_dict={'error': 'too_few_rows', 'rows': int(x.shape[0])})
    if not 0.0 < variance_threshold <= 1.0:
        raise AnalysisError.invalid_value('variance_threshold', variance_threshold, 'must lie in (0, 1]')

    basis_x, _ = np.linalg.qr(_reduce(x, variance_threshold))
    basis_y, _ = np.linalg.qr(_reduce(y, variance_threshold))
    correlations = np.linalg.svd(basis_x.T @ basis_y, compute_uv=False)
    return float(np.clip(correlations, 0.0, 1.0).mean())


def random_baseline(rows: int, dim: int, seed: int = 1, variance_threshold: float = 0.99,
                    trials: int = 3) -> float:
    """
    SVCCA between independent Gaussian matrices of the given shape.
    """

    streams = RandomStreams(seed)
    scores = []
    for trial in range(trials):
        rng = streams.stream('svcca-baseline', trial)
        scores.append(svcca_score(rng.standard_normal((rows, dim)), rng.standard_normal((rows, dim)),
                                  variance_threshold))
    return float(np.mean(scores))


def aligned_sentences(corpus: ParallelCorpus, languages: Optional[Sequence[str]] = None,
                      limit: Optional[int] = None) -> Tuple[List[int], Dict[str, List[List[str]]]]:
    """
    Sentence ids present in every language, and each language's rendering of them.
    """

    renderings: Dict[str, Dict[int, List[str]]] = {}
    for pair in corpus:
        if pair.sentence_id is None:
            raise AnalysisError(error_dict={'error': 'not_multiway', 'reason': 'pairs carry no sentence ids'})
        renderings.setdefault(pair.source_lang, {})[pair.sentence_id] = pair.source
        renderings.setdefault(pair.target_lang, {})[pair.sentence_id] = pair.target

    languages = list(languages) if languages is not None else sorted(renderings)
    missing = [language for language in languages if language not in renderings]
    if missing or len(languages) < 2:
        raise AnalysisError(error_dict={'error': 'not_multiway', 'missing_languages': missing})
    common = sorted(set.intersection(*(set(renderings[language]) for language in languages)))
    if limit is not None:
        common = common[:limit]
    if len(common) < 2:
        raise AnalysisError(error_dict={'error': 'not_multiway', 'aligned_sentences': len(common)})
    return common, {language: [renderings[language][i] for i in common] for language in languages}


def per_layer_svcca(model: TransformerModel, vocab: Vocabulary, corpus: ParallelCorpus,
                    languages: Optional[Sequence[str]] = None, max_sentences: int = 200,
                    variance_threshold: float = 0.99, seed: int = 1,
                    language_probe: bool = False, probe_epochs: int = 200,
                    probe_learning_rate: float = 0.1) -> SimilarityReport:
    """
    SVCCA of mean-pooled encoder outputs for every layer 1..L and unordered
    language pair, with a random baseline of the same shape. Optionally a
    token-level language-ID probe per layer.
    """

    ids, renderings = aligned_sentences(corpus, languages, max_sentences)
    layers = [str(layer) for layer in range(1, model.config.num_encoder_layers + 1)]
    activations = {language: collect_activations(model, vocab, sentences, layers)
                   for language, sentences in renderings.items()}

    entries = []
    for layer in layers:
        pooled = {language: _pool(activations[language][layer]) for language in renderings}
        for first, second in itertools.combinations(sorted(renderings), 2):
            entries.append(SimilarityEntry(layer, first, second,
                                           svcca_score(pooled[first], pooled[second], variance_threshold)))
    baseline = random_baseline(len(ids), model.config.d_model, seed, variance_threshold)

    probes: Dict[str, float] = {}
    if language_probe:
        for layer in layers:
            features, labels, groups = [], [], []
            for language in sorted(renderings):
                for index, values in enumerate(activations[language][layer]):
                    features.append(values)
                    labels += [vocab.language_id(language)] * values.shape[0]
                    groups += [ids[index]] * values.shape[0]
            matrix = FeatureMatrix(np.concatenate(features), np.array(labels), np.array(groups))
            probes[layer] = fit_linear_probe(matrix, split_seed=seed, label_type='language_id', layer=layer,
                                             epochs=probe_epochs, learning_rate=probe_learning_rate).accuracy

    report = SimilarityReport(entries, baseline, probes)
    logger.info("svcca per layer: %s (random %.3f)",
                ', '.join(f'{layer}={score:.3f}' for layer, score in report.curve()), baseline)
    return report


# Probes #

def split_rows(features: FeatureMatrix, split_seed: int = 1,
               train_fraction: float = 0.8) -> Tuple[np.ndarray, np.ndarray]:
    """
    Train and held-out row indices; every sentence (group) lands on one side only.
    """

    groups = np.unique(features.groups)
    if groups.size < 2:
        raise AnalysisError(error_dict={'error': 'too_few_groups', 'groups': int(groups.size)})
    shuffled = RandomStreams(split_seed).stream('probe-split').permutation(groups)
    cut = min(max(int(round(train_fraction * groups.size)), 1), groups.size - 1)
    train_groups = np.isin(features.groups, shuffled[:cut])
    return np.flatnonzero(train_groups), np.flatnonzero(~train_groups)


def fit_linear_probe(features: FeatureMatrix, num_classes: Optional[int] = None, split_seed: int = 1,
                     label_type: str = 'label', layer: str = '-', epochs: int = 200,
                     learning_rate: float = 0.1, patience: int = 10) -> ProbeEntry:
    """
    Multinomial logistic regression by full-batch gradient descent.

    Features are standardised with training-split statistics; training stops
    early once the held-out loss has not improved for `patience` epochs and the
    best weights are kept. Returns held-out accuracy.
    """

    classes, labels = np.unique(features.labels, return_inverse=True)
    if classes.size < 2:
        raise AnalysisError(error_dict={'error': 'single_class_labels', 'label_type': label_type})
    num_classes = num_classes or int(classes.max()) + 1

    train_rows, eval_rows = split_rows(features, split_seed)
    mean = features.features[train_rows].mean(axis=0)
    std = features.features[train_rows].std(axis=0) + 1e-6
    standardized = (features.features - mean) / std
    train_x, train_y = Tensor(standardized[train_rows], dtype=np.float64), labels[train_rows]
    eval_x, eval_y = Tensor(standardized[eval_rows], dtype=np.float64), labels[eval_rows]

    weight = Tensor(np.zeros((features.dim, classes.size)), requires_grad=True, dtype=np.float64)
    bias = Tensor(np.zeros(classes.size), requires_grad=True, dtype=np.float64)

    def held_out_loss() -> float:
        with no_grad():
            return T.cross_entropy_label_smoothed(eval_x @ weight + bias, eval_y, 0.0, None).item()

    best = (held_out_loss(), weight.data.copy(), bias.data.copy())
    stale = 0
    for _ in range(epochs):
        weight.grad = bias.grad = None
        T.backward(T.cross_entropy_label_smoothed(train_x @ weight + bias, train_y, 0.0, None))
        weight.data = weight.data - learning_rate * weight.grad
        bias.data = bias.data - learning_rate * bias.grad
        loss = held_out_loss()
        if loss < best[0] - 1e-9:
            best, stale = (loss, weight.data.copy(), bias.data.copy()), 0
        else:
            stale += 1
            if stale >= patience:
                break

    predictions = (eval_x.data @ best[1] + best[2]).argmax(axis=-1)
    accuracy = float(np.mean(predictions == eval_y))
    return ProbeEntry(label_type, layer, accuracy, int(train_rows.size), int(eval_rows.size), num_classes)


def _probe_sentences(corpus: ParallelCorpus, limit: int) -> List[Tuple[str, List[str]]]:
    per_language: 'OrderedDict[str, OrderedDict]' = OrderedDict()
    for pair in corpus:
        for language, tokens in ((pair.source_lang, pair.source), (pair.target_lang, pair.target)):
            per_language.setdefault(language, OrderedDict()).setdefault(tuple(tokens), None)
    share = max(1, limit // max(1, len(per_language)))
    return [(language, list(tokens)) for language, sentences in per_language.items()
            for tokens in list(sentences)[:share]]


def probe_positional_information(model: TransformerModel, vocab: Vocabulary, corpus: ParallelCorpus,
                                 label_type: str = 'position_id',
                                 layers: Optional[Sequence[Union[int, str]]] = None,
                                 max_sentences: int = 200, split_seed: int = 1, epochs: int = 200,
                                 learning_rate: float = 0.1) -> ProbeReport:
    """
    Per-token probes at each requested layer (default: 0..L and `final`).

    Labels are the token id, the position (capped at max_positions) or the
    language of the sentence.
    """

    if label_type not in LABEL_TYPES:
        raise AnalysisError.invalid_value('label_type', label_type, f'expected one of {LABEL_TYPES}')
    sentences = _probe_sentences(corpus, max_sentences)
    if not sentences:
        raise AnalysisError(error_dict={'error': 'empty_corpus'})
    names = [str(layer) for layer in layers] if layers is not None else None
    activations = collect_activations(model, vocab, [tokens for _, tokens in sentences], names)

    labels, groups = [], []
    for index, (language, tokens) in enumerate(sentences):
        if label_type == 'token_id':
            labels += vocab.encode(tokens)
        elif label_type == 'position_id':
            labels += [min(position, model.config.max_positions - 1) for position in range(len(tokens))]
        else:
            labels += [vocab.language_id(language)] * len(tokens)
        groups += [index] * len(tokens)
    labels, groups = np.array(labels), np.array(groups)

    report = ProbeReport()
    for layer, per_sentence in activations.items():
        matrix = FeatureMatrix(np.concatenate(per_sentence), labels, groups)
        entry = fit_linear_probe(matrix, split_seed=split_seed, label_type=label_type, layer=layer,
                                 epochs=epochs, learning_rate=learning_rate)
        logger.info("%s probe at layer %s: %.3f", label_type, layer, entry.accuracy)
        report.add(entry)
    return report


def dump_attention(model: TransformerModel, vocab: Vocabulary, sentences: Sequence[Sequence[str]], path) -> None:
    """
    Raw encoder self-attention weights as JSON: per sentence, per layer, per head.
    """

    records = []
    with no_grad():
        for tokens in sentences:
            activations = model.encode(np.array([vocab.encode(tokens)], dtype=np.int64))
            records.append({
                'tokens': list(tokens),
                'layers': {str(index + 1): np.round(weights[0], 6).tolist()
                           for index, weights in enumerate(activations.attention)},
            })
    with open(path, 'w', encoding='utf-8') as file:
        json.dump({'residual_removal_layer': model.config.residual_removal_layer, 'sentences': records}, file)
