"""
Encapsulating error types.
"""

from typing import Iterable, Sequence


class ZeroShotNMTError(Exception):
    """
    Class ZeroShotNMTError is derived from super class Exception
    and represent the default generic error of the toolkit.
    """

    def __init__(self, error_dict: dict):
        super().__init__(error_dict)
        self.error_dict = error_dict

    def __str__(self):
        return str(self.error_dict)

    @classmethod
    def invalid_value(cls, name: str, value, reason: str) -> 'ZeroShotNMTError':
        """
        Factory Method for an argument or field outside its domain.
        """

        return cls(error_dict={
            'error': 'invalid_value',
            'field': name,
            'value': repr(value),
            'message': reason,
        })


class TensorError(ZeroShotNMTError):
    """
    Tensor arithmetic and differentiation failures.
    """

    @classmethod
    def shape_mismatch(cls, op: str, shape_a: Sequence[int], shape_b: Sequence[int]) -> 'TensorError':
        """
        Factory Method for incompatible operand shapes.
        """

        return cls(error_dict={
            'error': 'dimension_mismatch',
            'op': op,
            'shapes': [list(shape_a), list(shape_b)],
            'message': f"{op}: cannot combine shapes {tuple(shape_a)} and {tuple(shape_b)}",
        })


class ConfigError(ZeroShotNMTError):
    """
    Invalid or inconsistent configuration records.
    """

    @classmethod
    def unknown_keys(cls, section: str, keys: Iterable[str]) -> 'ConfigError':
        """
        Factory Method for config sections carrying unsupported keys.
        """

        return cls(error_dict={
            'error': 'unknown_keys',
            'section': section,
            'keys': sorted(keys),
        })


class DataError(ZeroShotNMTError):
    """
    Corpus generation, ingestion and batching failures.
    """

    @classmethod
    def malformed_line(cls, path: str, line_number: int, fields: int) -> 'DataError':
        """
        Factory Method for a TSV line that is not exactly `source<TAB>target`.
        """

        return cls(error_dict={
            'error': 'malformed_line',
            'path': str(path),
            'line': line_number,
            'fields': fields,
        })

    @classmethod
    def sentence_too_long(cls, sentence: Sequence[str], length: int, max_positions: int) -> 'DataError':
        """
        Factory Method for sentences that do not fit the positional table.
        """

        return cls(error_dict={
            'error': 'sentence_too_long',
            'sentence': ' '.join(sentence),
            'length': length,
            'max_positions': max_positions,
        })


class TrainingError(ZeroShotNMTError):
    """
    Optimization failures.
    """

    @classmethod
    def non_finite(cls, where: str, names: Iterable[str], step: int) -> 'TrainingError':
        """
        Factory Method for NaN gradients or losses, with the offending parameter names.
        """

        return cls(error_dict={
            'error': 'non_finite',
            'where': where,
            'parameters': sorted(names),
            'step': step,
        })


class CheckpointError(ZeroShotNMTError):
    """
    Checkpoint archive failures.
    """

    @classmethod
    def missing(cls, path: str) -> 'CheckpointError':
        """
        Factory Method for absent archives.
        """

        return cls(error_dict={'error': 'missing_checkpoint', 'path': str(path)})

    @classmethod
    def incompatible(cls, path: str, expected: str, found: str) -> 'CheckpointError':
        """
        Factory Method for archives written against another vocabulary.
        """

        return cls(error_dict={
            'error': 'incompatible_checkpoint',
            'path': str(path),
            'expected_vocab_hash': expected,
            'found_vocab_hash': found,
        })


class EvaluationError(ZeroShotNMTError):
    """
    Decoding and scoring failures.
    """


class AnalysisError(ZeroShotNMTError):
    """
    Probe and similarity analysis failures.
    """


class UnsupportedError(ZeroShotNMTError):
    """
    Requests the toolkit cannot answer on the given data (e.g. off-target
    measurement without disjoint lexicons).
    """

    @classmethod
    def overlapping_lexicons(cls, first: str, second: str, shared: int) -> 'UnsupportedError':
        """
        Factory Method for lexicons that do not identify a language uniquely.
        """

        return cls(error_dict={
            'error': 'unsupported',
            'reason': 'overlapping_lexicons',
            'languages': [first, second],
            'shared_tokens': shared,
        })
