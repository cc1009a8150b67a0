"""
Object models for run artifacts: training history, translation results,
metrics, probe and similarity reports.
"""

import csv
import io
import json
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from zeroshotnmt.models.error import AnalysisError, EvaluationError


def _write_json(path, payload: dict) -> None:
    with open(path, 'w', encoding='utf-8') as file:
        json.dump(payload, file, indent=2, sort_keys=True)
        file.write('\n')


def _read_json(path) -> dict:
    with open(path, 'r', encoding='utf-8') as file:
        return json.load(file)


def _fmt(value: Optional[float]) -> str:
    return 'n/a' if value is None else f'{value:.4f}'


class TranslationMode(Enum):
    """
    Enum representing how a metrics row was produced.
    """

    SUPERVISED = "supervised"
    ZERO_SHOT = "zero-shot"
    PIVOT = "pivot"


# Training #

class EpochRecord:
    """
    One line of the training history.
    """

    epoch: int
    step: int
    train_loss: float
    dev_loss: float
    dev_losses: Dict[str, float]
    lr: float
    checkpoint: Optional[str]

    def __init__(self, epoch: int, step: int, train_loss: float, dev_loss: float,
                 dev_losses: Dict[str, float], lr: float, checkpoint: Optional[str] = None) -> None:
        self.epoch = epoch
        self.step = step
        self.train_loss = train_loss
        self.dev_loss = dev_loss
        self.dev_losses = dict(dev_losses)
        self.lr = lr
        self.checkpoint = checkpoint

    def to_dict(self) -> dict:
        return {
            'epoch': self.epoch,
            'step': self.step,
            'train_loss': self.train_loss,
            'dev_loss': self.dev_loss,
            'dev_losses': dict(sorted(self.dev_losses.items())),
            'lr': self.lr,
            'checkpoint': self.checkpoint,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> 'EpochRecord':
        """
        Factory Method.
        """

        return cls(**payload)


class TrainingHistory:
    """
    Per-epoch records plus the checkpoints that went into the final average.
    """

    records: List[EpochRecord]
    selected: List[str]

    def __init__(self, records: Iterable[EpochRecord] = (), selected: Iterable[str] = ()) -> None:
        self.records = list(records)
        self.selected = list(selected)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    @property
    def last_step(self) -> int:
        return self.records[-1].step if self.records else 0

    def best(self, k: int) -> List[EpochRecord]:
        """
        The k records with the lowest dev loss; earlier epochs win ties.
        """

        ranked = sorted(self.records, key=lambda record: (record.dev_loss, record.epoch))
        return ranked[:k]

    def to_dict(self) -> dict:
        return {'records': [record.to_dict() for record in self.records], 'selected': self.selected}

    @classmethod
    def from_dict(cls, payload: dict) -> 'TrainingHistory':
        """
        Factory Method.
        """

        return cls([EpochRecord.from_dict(record) for record in payload.get('records', [])],
                   payload.get('selected', []))

    def save(self, path) -> None:
        _write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> 'TrainingHistory':
        return cls.from_dict(_read_json(path))


# Evaluation #

class TranslationResult:
    """
    Hypotheses and references for one direction under one protocol.
    """

    source_lang: str
    target_lang: str
    mode: TranslationMode
    hypotheses: List[List[str]]
    references: List[List[str]]
    off_target: Optional[List[bool]]

    def __init__(self, source_lang: str, target_lang: str, mode, hypotheses: Sequence[Sequence[str]],
                 references: Sequence[Sequence[str]], off_target: Optional[Sequence[bool]] = None) -> None:
        if len(hypotheses) != len(references):
            raise EvaluationError(error_dict={
                'error': 'length_mismatch',
                'hypotheses': len(hypotheses),
                'references': len(references),
            })
        self.source_lang = source_lang
        self.target_lang = target_lang
        self.mode = TranslationMode(mode)
        self.hypotheses = [list(h) for h in hypotheses]
        self.references = [list(r) for r in references]
        self.off_target = list(off_target) if off_target is not None else None

    @property
    def direction(self) -> Tuple[str, str]:
        return self.source_lang, self.target_lang

    def __len__(self) -> int:
        return len(self.hypotheses)


class MetricsRow:
    """
    BLEU and off-target rate of one direction.
    """

    source_lang: str
    target_lang: str
    mode: TranslationMode
    bleu: float
    off_target_rate: Optional[float]
    sentences: int

    COLUMNS = ('src', 'tgt', 'mode', 'bleu', 'off_target_rate', 'sentences')

    def __init__(self, source_lang: str, target_lang: str, mode, bleu: float,
                 off_target_rate: Optional[float], sentences: int) -> None:
        self.source_lang = source_lang
        self.target_lang = target_lang
        self.mode = TranslationMode(mode)
        self.bleu = bleu
        self.off_target_rate = off_target_rate
        self.sentences = sentences

    def to_dict(self) -> dict:
        return {
            'src': self.source_lang,
            'tgt': self.target_lang,
            'mode': self.mode.value,
            'bleu': self.bleu,
            'off_target_rate': self.off_target_rate,
            'sentences': self.sentences,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> 'MetricsRow':
        """
        Factory Method.
        """

        return cls(payload['src'], payload['tgt'], payload['mode'], payload['bleu'],
                   payload.get('off_target_rate'), payload.get('sentences', 0))

    def __eq__(self, other) -> bool:
        if not isinstance(other, MetricsRow):
            return NotImplemented
        return self.to_dict() == other.to_dict()


class MetricsReport:
    """
    Per-direction rows and named averages.

    Averages are keyed `supervised`, `zero-shot`, `pivot`, and optionally
    `zero-shot[family=...]`, `pivot[family=...]`, `supervised[from=...]`,
    `zero-shot[to=...]` and so on.
    """

    rows: List[MetricsRow]
    averages: Dict[str, float]

    MODE_ORDER = {TranslationMode.SUPERVISED: 0, TranslationMode.ZERO_SHOT: 1, TranslationMode.PIVOT: 2}

    def __init__(self, rows: Iterable[MetricsRow] = (), averages: Optional[Dict[str, float]] = None) -> None:
        self.rows = sorted(rows, key=lambda row: (self.MODE_ORDER[row.mode], row.source_lang, row.target_lang))
        self.averages = dict(averages or {})

    def rows_for(self, mode) -> List[MetricsRow]:
        mode = TranslationMode(mode)
        return [row for row in self.rows if row.mode is mode]

    def average(self, mode, field: str = 'bleu', where=None) -> Optional[float]:
        """
        Mean of `field` over the rows of one mode, optionally filtered by a
        predicate on the row. None when no row qualifies.
        """

        values = [getattr(row, field) for row in self.rows_for(mode)
                  if (where is None or where(row)) and getattr(row, field) is not None]
        return float(np.mean(values)) if values else None

    def to_dict(self) -> dict:
        return {'rows': [row.to_dict() for row in self.rows],
                'averages': dict(sorted(self.averages.items()))}

    @classmethod
    def from_dict(cls, payload: dict) -> 'MetricsReport':
        """
        Factory Method.
        """

        return cls([MetricsRow.from_dict(row) for row in payload.get('rows', [])], payload.get('averages'))

    def to_tsv(self) -> str:
        """
        Stable tab-separated table: one row per direction, then the averages.
        """

        lines = ['\t'.join(MetricsRow.COLUMNS)]
        for row in self.rows:
            lines.append('\t'.join([row.source_lang, row.target_lang, row.mode.value, _fmt(row.bleu),
                                    _fmt(row.off_target_rate), str(row.sentences)]))
        lines.append('')
        lines.append('average\tbleu')
        for name, value in sorted(self.averages.items()):
            lines.append(f'{name}\t{_fmt(value)}')
        return '\n'.join(lines) + '\n'

    def save(self, path) -> None:
        _write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> 'MetricsReport':
        return cls.from_dict(_read_json(path))

    def __eq__(self, other) -> bool:
        if not isinstance(other, MetricsReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()


# Analysis #

class FeatureMatrix:
    """
    Rows of hidden features with one integer label per row.

    `groups` records the sentence each row came from, so train/held-out
    splits never share a sentence.
    """

    features: np.ndarray
    labels: np.ndarray
    groups: np.ndarray

    def __init__(self, features: np.ndarray, labels: Optional[np.ndarray] = None,
                 groups: Optional[np.ndarray] = None) -> None:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise AnalysisError(error_dict={'error': 'not_a_matrix', 'shape': list(features.shape)})
        rows = features.shape[0]
        labels = np.zeros(rows, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
        groups = np.arange(rows, dtype=np.int64) if groups is None else np.asarray(groups, dtype=np.int64)
        if labels.shape != (rows,) or groups.shape != (rows,):
            raise AnalysisError(error_dict={
                'error': 'row_label_mismatch',
                'rows': rows,
                'labels': int(labels.shape[0]),
                'groups': int(groups.shape[0]),
            })
        if not np.all(np.isfinite(features)):
            raise AnalysisError(error_dict={'error': 'non_finite_features'})
        self.features = features
        self.labels = labels
        self.groups = groups

    @property
    def rows(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def with_labels(self, labels: np.ndarray) -> 'FeatureMatrix':
        return FeatureMatrix(self.features, labels, self.groups)


class ProbeEntry:
    """
    Held-out accuracy of one probe.
    """

    label_type: str
    layer: str
    accuracy: float
    train_size: int
    eval_size: int
    num_classes: int

    def __init__(self, label_type: str, layer: str, accuracy: float, train_size: int, eval_size: int,
                 num_classes: int) -> None:
        if not 0.0 <= accuracy <= 1.0:
            raise AnalysisError.invalid_value('accuracy', accuracy, 'must lie in [0, 1]')
        self.label_type = label_type
        self.layer = str(layer)
        self.accuracy = accuracy
        self.train_size = train_size
        self.eval_size = eval_size
        self.num_classes = num_classes

    def to_dict(self) -> dict:
        return {
            'label_type': self.label_type,
            'layer': self.layer,
            'accuracy': self.accuracy,
            'train_size': self.train_size,
            'eval_size': self.eval_size,
            'num_classes': self.num_classes,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> 'ProbeEntry':
        """
        Factory Method.
        """

        return cls(**payload)


class ProbeReport:
    """
    Per-layer probe accuracies per label type (token_id, position_id, language_id).
    Layer `0` is the embedded input, `1..L` the encoder layer outputs, and
    `final` the normalised encoder output.
    """

    entries: List[ProbeEntry]

    def __init__(self, entries: Iterable[ProbeEntry] = ()) -> None:
        self.entries = list(entries)

    def add(self, entry: ProbeEntry) -> None:
        self.entries.append(entry)

    def curve(self, label_type: str) -> List[Tuple[str, float]]:
        return [(entry.layer, entry.accuracy) for entry in self.entries if entry.label_type == label_type]

    def accuracy(self, label_type: str, layer) -> float:
        for entry in self.entries:
            if entry.label_type == label_type and entry.layer == str(layer):
                return entry.accuracy
        raise AnalysisError(error_dict={'error': 'missing_probe', 'label_type': label_type, 'layer': str(layer)})

    def to_dict(self) -> dict:
        return {'entries': [entry.to_dict() for entry in self.entries]}

    @classmethod
    def from_dict(cls, payload: dict) -> 'ProbeReport':
        """
        Factory Method.
        """

        return cls(ProbeEntry.from_dict(entry) for entry in payload.get('entries', []))

    def to_tsv(self) -> str:
        lines = ['label_type\tlayer\taccuracy\ttrain_size\teval_size\tnum_classes']
        for entry in self.entries:
            lines.append(f'{entry.label_type}\t{entry.layer}\t{_fmt(entry.accuracy)}\t'
                         f'{entry.train_size}\t{entry.eval_size}\t{entry.num_classes}')
        return '\n'.join(lines) + '\n'

    def to_csv(self) -> str:
        """
        Plot data: one (series, layer, value) row per entry.
        """

        return _series_csv((entry.label_type, entry.layer, entry.accuracy) for entry in self.entries)

    def save(self, path) -> None:
        _write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> 'ProbeReport':
        return cls.from_dict(_read_json(path))


class SimilarityEntry:
    """
    SVCCA score of one language pair at one layer.
    """

    layer: str
    first: str
    second: str
    score: float

    def __init__(self, layer: str, first: str, second: str, score: float) -> None:
        if not -1e-9 <= score <= 1.0 + 1e-9:
            raise AnalysisError.invalid_value('score', score, 'must lie in [0, 1]')
        self.layer = str(layer)
        self.first = first
        self.second = second
        self.score = float(min(max(score, 0.0), 1.0))

    def to_dict(self) -> dict:
        return {'layer': self.layer, 'first': self.first, 'second': self.second, 'score': self.score}

    @classmethod
    def from_dict(cls, payload: dict) -> 'SimilarityEntry':
        """
        Factory Method.
        """

        return cls(**payload)


class SimilarityReport:
    """
    Per-layer, per-pair SVCCA scores, the random baseline for the same
    matrix shape, and optionally language-identification probe accuracies.
    """

    entries: List[SimilarityEntry]
    random_baseline: float
    language_probe: Dict[str, float]

    def __init__(self, entries: Iterable[SimilarityEntry] = (), random_baseline: float = 0.0,
                 language_probe: Optional[Dict[str, float]] = None) -> None:
        self.entries = list(entries)
        self.random_baseline = random_baseline
        self.language_probe = dict(language_probe or {})

    def layers(self) -> List[str]:
        seen: List[str] = []
        for entry in self.entries:
            if entry.layer not in seen:
                seen.append(entry.layer)
        return seen

    def aggregate(self, layer) -> float:
        """
        Mean score over the distinct-language pairs at one layer.
        """

        scores = [entry.score for entry in self.entries
                  if entry.layer == str(layer) and entry.first != entry.second]
        if not scores:
            raise AnalysisError(error_dict={'error': 'missing_layer', 'layer': str(layer)})
        return float(np.mean(scores))

    def curve(self) -> List[Tuple[str, float]]:
        return [(layer, self.aggregate(layer)) for layer in self.layers()]

    def to_dict(self) -> dict:
        return {
            'entries': [entry.to_dict() for entry in self.entries],
            'random_baseline': self.random_baseline,
            'language_probe': dict(self.language_probe),
            'aggregate': {layer: score for layer, score in self.curve()},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> 'SimilarityReport':
        """
        Factory Method.
        """

        return cls([SimilarityEntry.from_dict(entry) for entry in payload.get('entries', [])],
                   payload.get('random_baseline', 0.0), payload.get('language_probe'))

    def to_tsv(self) -> str:
        lines = ['layer\tfirst\tsecond\tsvcca']
        for entry in self.entries:
            lines.append(f'{entry.layer}\t{entry.first}\t{entry.second}\t{_fmt(entry.score)}')
        lines.append('')
        lines.append('layer\tmean_svcca\trandom_baseline\tlanguage_probe')
        for layer, score in self.curve():
            lines.append(f'{layer}\t{_fmt(score)}\t{_fmt(self.random_baseline)}\t'
                         f'{_fmt(self.language_probe.get(layer))}')
        return '\n'.join(lines) + '\n'

    def to_csv(self) -> str:
        rows = [('svcca', layer, score) for layer, score in self.curve()]
        rows += [('random_baseline', layer, self.random_baseline) for layer in self.layers()]
        rows += [('language_id', layer, value) for layer, value in self.language_probe.items()]
        return _series_csv(rows)

    def save(self, path) -> None:
        _write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> 'SimilarityReport':
        return cls.from_dict(_read_json(path))


def _series_csv(rows: Iterable[Tuple[str, str, float]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(['series', 'layer', 'value'])
    for series, layer, value in rows:
        writer.writerow([series, layer, f'{value:.6f}'])
    return buffer.getvalue()
