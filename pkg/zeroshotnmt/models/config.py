"""
Object models for experiment configuration records.
"""

import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

from zeroshotnmt.models.error import ConfigError

logger = logging.getLogger(__name__)


class DropoutMode(Enum):
    """
    Enum representing how dropout masks are drawn.
    """

    ELEMENTWISE = "elementwise"
    VARIATIONAL = "variational"

    @classmethod
    def _missing_(cls, value):
        if value == "element":
            return cls.ELEMENTWISE
        return None


class DevSelection(Enum):
    """
    Enum representing which dev directions drive checkpoint selection.
    """

    SUPERVISED_ONLY = "supervised-only"
    INCLUDE_ZERO_SHOT = "include-zero-shot"


class EvaluationMode(Enum):
    """
    Enum representing the decoding protocols reported by `evaluate`.
    """

    DIRECT = "direct"
    PIVOT = "pivot"
    ALL = "all"


# `residual_removal_layer` value resolving to `ModelConfig.default_removal_layer`.
MIDDLE_LAYER = 'middle'


def _checked(section: str, allowed: Sequence[str], payload: dict) -> dict:
    unknown = set(payload) - set(allowed)
    if unknown:
        raise ConfigError.unknown_keys(section, unknown)
    return dict(payload)


class ModelConfig:
    """
    Hyperparameters of the encoder-decoder, including the modified encoder layer.
    """

    vocab_size: Optional[int]
    num_languages: Optional[int]
    num_encoder_layers: int
    num_decoder_layers: int
    d_model: int
    num_heads: int
    d_ff: int
    dropout_rate: float
    dropout_mode: DropoutMode
    label_smoothing: float
    residual_removal_layer: Optional[int]
    position_query_enabled: bool
    query_wavelength: float
    input_pe_wavelength: float
    lang_embed_dim: int
    max_positions: int

    FIELDS = ('vocab_size', 'num_languages', 'num_encoder_layers', 'num_decoder_layers', 'd_model',
              'num_heads', 'd_ff', 'dropout_rate', 'dropout_mode', 'label_smoothing',
              'residual_removal_layer', 'position_query_enabled', 'query_wavelength',
              'input_pe_wavelength', 'lang_embed_dim', 'max_positions')

    def __init__(self,
                 vocab_size: Optional[int] = None,
                 num_languages: Optional[int] = None,
                 num_encoder_layers: int = 5,
                 num_decoder_layers: int = 5,
                 d_model: int = 64,
                 num_heads: int = 4,
                 d_ff: int = 128,
                 dropout_rate: float = 0.2,
                 dropout_mode=DropoutMode.ELEMENTWISE,
                 label_smoothing: float = 0.1,
                 residual_removal_layer: Optional[Union[int, str]] = None,
                 position_query_enabled: bool = False,
                 query_wavelength: float = 100.0,
                 input_pe_wavelength: float = 10000.0,
                 lang_embed_dim: Optional[int] = None,
                 max_positions: int = 64) -> None:
        self.vocab_size = vocab_size
        self.num_languages = num_languages
        self.num_encoder_layers = num_encoder_layers
        self.num_decoder_layers = num_decoder_layers
        self.d_model = d_model
        self.num_heads = num_heads
        self.d_ff = d_ff
        self.dropout_rate = dropout_rate
        self.dropout_mode = DropoutMode(dropout_mode)
        self.label_smoothing = label_smoothing
        if residual_removal_layer == MIDDLE_LAYER:
            residual_removal_layer = self.default_removal_layer(num_encoder_layers)
        elif isinstance(residual_removal_layer, str):
            raise ConfigError.invalid_value('residual_removal_layer', residual_removal_layer,
                                            f"expected a layer number or '{MIDDLE_LAYER}'")
        self.residual_removal_layer = residual_removal_layer or None
        self.position_query_enabled = bool(position_query_enabled)
        self.query_wavelength = query_wavelength
        self.input_pe_wavelength = input_pe_wavelength
        self.lang_embed_dim = lang_embed_dim if lang_embed_dim else max(1, d_model // 8)
        self.max_positions = max_positions

        self.validate()

    def validate(self) -> None:
        """
        Enforce the structural invariants of the record.
        """

        if self.d_model <= 0 or self.d_model % 2:
            raise ConfigError.invalid_value('d_model', self.d_model, 'must be a positive even number')
        if self.num_heads <= 0 or self.d_model % self.num_heads:
            raise ConfigError.invalid_value('num_heads', self.num_heads, 'must divide d_model')
        if self.num_encoder_layers < 1 or self.num_decoder_layers < 1:
            raise ConfigError.invalid_value('num_encoder_layers', self.num_encoder_layers,
                                            'encoder and decoder need at least one layer')
        if self.residual_removal_layer is not None and \
                not 1 <= self.residual_removal_layer <= self.num_encoder_layers:
            raise ConfigError.invalid_value('residual_removal_layer', self.residual_removal_layer,
                                            f'must lie in [1, {self.num_encoder_layers}]')
        if self.position_query_enabled and self.residual_removal_layer is None:
            raise ConfigError.invalid_value('position_query_enabled', True,
                                            'the positional query lives in the residual-removal layer')
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError.invalid_value('dropout_rate', self.dropout_rate, 'must satisfy 0 <= rate < 1')
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError.invalid_value('label_smoothing', self.label_smoothing, 'must lie in [0, 1)')
        if self.query_wavelength <= 0 or self.input_pe_wavelength <= 0:
            raise ConfigError.invalid_value('query_wavelength', self.query_wavelength, 'must be positive')
        if self.max_positions < 2:
            raise ConfigError.invalid_value('max_positions', self.max_positions, 'must be at least 2')

    @staticmethod
    def default_removal_layer(num_encoder_layers: int) -> int:
        """
        The middle layer used by default: 5 layers -> 3, 8 layers -> 5.
        """

        return math.ceil((num_encoder_layers + 1) / 2)

    @classmethod
    def full_scale(cls, **overrides) -> 'ModelConfig':
        """
        Full-size hyperparameters (512 model size, 8 heads, 2048 inner size).
        """

        values = dict(d_model=512, num_heads=8, d_ff=2048, max_positions=256)
        values.update(overrides)
        return cls(**values)

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads

    def parameter_count(self) -> int:
        """
        Closed-form number of scalar parameters.
        """

        if self.vocab_size is None or self.num_languages is None:
            raise ConfigError.invalid_value('vocab_size', self.vocab_size,
                                            'vocabulary and languages must be resolved first')
        d, f = self.d_model, self.d_ff
        attention = 4 * (d * d + d)
        feed_forward = d * f + f + f * d + d
        norm = 2 * d
        encoder_layer = attention + feed_forward + 2 * norm
        decoder_layer = 2 * attention + feed_forward + 3 * norm
        embeddings = self.vocab_size * d + self.num_languages * self.lang_embed_dim
        decoder_input = (d + self.lang_embed_dim) * d + d
        return (embeddings + decoder_input
                + self.num_encoder_layers * encoder_layer
                + self.num_decoder_layers * decoder_layer
                + 2 * norm)

    def replace(self, **changes) -> 'ModelConfig':
        values = self.to_dict()
        values.update(changes)
        return ModelConfig.from_dict(values)

    def to_dict(self) -> dict:
        values = {name: getattr(self, name) for name in self.FIELDS}
        values['dropout_mode'] = self.dropout_mode.value
        return values

    @classmethod
    def from_dict(cls, payload: dict) -> 'ModelConfig':
        """
        Factory Method.
        """

        return cls(**_checked('model', cls.FIELDS, payload))


class TrainConfig:
    """
    Optimization settings.
    """

    warmup_steps: int
    max_epochs: int
    max_steps: Optional[int]
    seed: int
    checkpoint_keep_k: int
    adam_beta1: float
    adam_beta2: float
    adam_eps: float
    dev_selection: DevSelection
    batch_size_tokens: int
    grad_clip_norm: float
    lr_scale: float
    noise_scale: float
    reset_optimizer: bool
    adaptation_epochs: int
    log_every: int

    FIELDS = ('warmup_steps', 'max_epochs', 'max_steps', 'seed', 'checkpoint_keep_k', 'adam_beta1',
              'adam_beta2', 'adam_eps', 'dev_selection', 'batch_size_tokens', 'grad_clip_norm',
              'lr_scale', 'noise_scale', 'reset_optimizer', 'adaptation_epochs', 'log_every')

    def __init__(self,
                 warmup_steps: int = 400,
                 max_epochs: int = 30,
                 max_steps: Optional[int] = None,
                 seed: int = 1,
                 checkpoint_keep_k: int = 5,
                 adam_beta1: float = 0.9,
                 adam_beta2: float = 0.98,
                 adam_eps: float = 1e-9,
                 dev_selection=DevSelection.SUPERVISED_ONLY,
                 batch_size_tokens: int = 1024,
                 grad_clip_norm: float = 1.0,
                 lr_scale: float = 1.0,
                 noise_scale: float = 0.01,
                 reset_optimizer: bool = True,
                 adaptation_epochs: int = 8,
                 log_every: int = 50) -> None:
        self.warmup_steps = warmup_steps
        self.max_epochs = max_epochs
        self.max_steps = max_steps
        self.seed = seed
        self.checkpoint_keep_k = checkpoint_keep_k
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.adam_eps = adam_eps
        self.dev_selection = DevSelection(dev_selection)
        self.batch_size_tokens = batch_size_tokens
        self.grad_clip_norm = grad_clip_norm
        self.lr_scale = lr_scale
        self.noise_scale = noise_scale
        self.reset_optimizer = bool(reset_optimizer)
        self.adaptation_epochs = adaptation_epochs
        self.log_every = log_every

        if self.warmup_steps < 1:
            raise ConfigError.invalid_value('warmup_steps', warmup_steps, 'must be at least 1')
        if self.max_epochs < 1:
            raise ConfigError.invalid_value('max_epochs', max_epochs, 'must be at least 1')
        if self.checkpoint_keep_k < 1:
            raise ConfigError.invalid_value('checkpoint_keep_k', checkpoint_keep_k, 'must be at least 1')
        if self.batch_size_tokens < 1:
            raise ConfigError.invalid_value('batch_size_tokens', batch_size_tokens, 'must be positive')

    @classmethod
    def full_scale(cls, **overrides) -> 'TrainConfig':
        """
        Full-size schedule: 8000 warmup steps, 64 epochs.
        """

        values = dict(warmup_steps=8000, max_epochs=64, batch_size_tokens=4096)
        values.update(overrides)
        return cls(**values)

    def replace(self, **changes) -> 'TrainConfig':
        values = self.to_dict()
        values.update(changes)
        return TrainConfig.from_dict(values)

    def to_dict(self) -> dict:
        values = {name: getattr(self, name) for name in self.FIELDS}
        values['dev_selection'] = self.dev_selection.value
        return values

    @classmethod
    def from_dict(cls, payload: dict) -> 'TrainConfig':
        """
        Factory Method.
        """

        return cls(**_checked('training', cls.FIELDS, payload))


class SyntheticTaskSpec:
    """
    Description of a synthetic multilingual corpus.

    Languages are rendered from shared concept sentences through a
    per-language lexicon and a per-language word-order rule.
    """

    num_languages: int
    language_codes: List[str]
    pivot_language_id: int
    concept_vocab_size: int
    sentence_length_range: Tuple[int, int]
    reordering_rules: List[str]
    lexical_overlap: float
    families: Optional[List[str]]
    family_overlap: float
    multiway: bool
    sentences_per_direction: int
    dev_size: int
    test_size: int
    zipf_exponent: float
    seed: int

    DEFAULT_RULES = ('reverse', 'rotate(2)', 'swap_adjacent_pairs', 'interleave_halves', 'rotate(1)')

    FIELDS = ('num_languages', 'language_codes', 'pivot_language_id', 'concept_vocab_size',
              'sentence_length_range', 'reordering_rules', 'lexical_overlap', 'families',
              'family_overlap', 'multiway', 'sentences_per_direction', 'dev_size', 'test_size',
              'zipf_exponent', 'seed')

    def __init__(self,
                 num_languages: int = 4,
                 language_codes: Optional[Sequence[str]] = None,
                 pivot_language_id: int = 0,
                 concept_vocab_size: int = 600,
                 sentence_length_range: Sequence[int] = (4, 12),
                 reordering_rules: Optional[Sequence[str]] = None,
                 lexical_overlap: float = 0.0,
                 families: Optional[Sequence[str]] = None,
                 family_overlap: float = 0.5,
                 multiway: bool = True,
                 sentences_per_direction: int = 5000,
                 dev_size: int = 200,
                 test_size: int = 200,
                 zipf_exponent: float = 1.1,
                 seed: int = 1) -> None:
        if num_languages < 2:
            raise ConfigError.invalid_value('num_languages', num_languages, 'need at least two languages')
        self.num_languages = num_languages
        if language_codes is None:
            language_codes = ['en'] + [f'l{i}' for i in range(1, num_languages)]
            if pivot_language_id != 0:
                language_codes = [f'l{i}' for i in range(num_languages)]
                language_codes[pivot_language_id] = 'en'
        self.language_codes = list(language_codes)
        if len(self.language_codes) != num_languages or len(set(self.language_codes)) != num_languages:
            raise ConfigError.invalid_value('language_codes', language_codes,
                                            'need one distinct code per language')
        if not 0 <= pivot_language_id < num_languages:
            raise ConfigError.invalid_value('pivot_language_id', pivot_language_id, 'out of range')
        self.pivot_language_id = pivot_language_id
        self.concept_vocab_size = concept_vocab_size
        low, high = sentence_length_range
        if not 1 <= low <= high:
            raise ConfigError.invalid_value('sentence_length_range', sentence_length_range,
                                            'need 1 <= low <= high')
        self.sentence_length_range = (int(low), int(high))
        self.families = list(families) if families is not None else None
        if self.families is not None and len(self.families) != num_languages:
            raise ConfigError.invalid_value('families', families, 'need one family label per language')
        self.family_overlap = family_overlap
        self.reordering_rules = list(reordering_rules) if reordering_rules is not None \
            else self._default_rules()
        if len(self.reordering_rules) != num_languages:
            raise ConfigError.invalid_value('reordering_rules', reordering_rules,
                                            'need one rule per language')
        if not 0.0 <= lexical_overlap <= 1.0:
            raise ConfigError.invalid_value('lexical_overlap', lexical_overlap, 'must lie in [0, 1]')
        self.lexical_overlap = lexical_overlap
        self.multiway = bool(multiway)
        self.sentences_per_direction = sentences_per_direction
        self.dev_size = dev_size
        self.test_size = test_size
        self.zipf_exponent = zipf_exponent
        self.seed = seed

    def _default_rules(self) -> List[str]:
        rules = []
        family_rules = {}
        cycle = iter(self.DEFAULT_RULES * self.num_languages)
        for language_id in range(self.num_languages):
            if language_id == self.pivot_language_id:
                rules.append('identity')
                continue
            family = self.families[language_id] if self.families is not None else None
            if family is not None and family in family_rules:
                rules.append(family_rules[family])
                continue
            rule = next(cycle)
            if family is not None:
                family_rules[family] = rule
            rules.append(rule)
        return rules

    @property
    def pivot_code(self) -> str:
        return self.language_codes[self.pivot_language_id]

    def with_language(self, code: str, rule: str, family: Optional[str] = None) -> 'SyntheticTaskSpec':
        """
        Copy of the spec with one extra language appended (new-language adaptation).
        """

        values = self.to_dict()
        values['num_languages'] = self.num_languages + 1
        values['language_codes'] = self.language_codes + [code]
        values['reordering_rules'] = self.reordering_rules + [rule]
        if self.families is not None:
            values['families'] = self.families + [family or code]
        return SyntheticTaskSpec.from_dict(values)

    def replace(self, **changes) -> 'SyntheticTaskSpec':
        values = self.to_dict()
        values.update(changes)
        return SyntheticTaskSpec.from_dict(values)

    def to_dict(self) -> dict:
        values = {name: getattr(self, name) for name in self.FIELDS}
        values['sentence_length_range'] = list(self.sentence_length_range)
        return values

    @classmethod
    def from_dict(cls, payload: dict) -> 'SyntheticTaskSpec':
        """
        Factory Method.
        """

        return cls(**_checked('task', cls.FIELDS, payload))


class EvaluationOptions:
    """
    Decoding and analysis settings.
    """

    mode: EvaluationMode
    max_len: Optional[int]
    probe_epochs: int
    probe_learning_rate: float
    variance_threshold: float
    analysis_sentences: int

    FIELDS = ('mode', 'max_len', 'probe_epochs', 'probe_learning_rate', 'variance_threshold',
              'analysis_sentences')

    def __init__(self,
                 mode=EvaluationMode.ALL,
                 max_len: Optional[int] = None,
                 probe_epochs: int = 200,
                 probe_learning_rate: float = 0.1,
                 variance_threshold: float = 0.99,
                 analysis_sentences: int = 200) -> None:
        self.mode = EvaluationMode(mode)
        self.max_len = max_len
        self.probe_epochs = probe_epochs
        self.probe_learning_rate = probe_learning_rate
        self.variance_threshold = variance_threshold
        self.analysis_sentences = analysis_sentences

    def to_dict(self) -> dict:
        values = {name: getattr(self, name) for name in self.FIELDS}
        values['mode'] = self.mode.value
        return values

    @classmethod
    def from_dict(cls, payload: dict) -> 'EvaluationOptions':
        """
        Factory Method.
        """

        return cls(**_checked('evaluation', cls.FIELDS, payload))


class ExperimentConfig:
    """
    One file that drives a full run: task, model, training, evaluation, output
    directory and the single seed every random stream derives from.
    """

    task: SyntheticTaskSpec
    model: ModelConfig
    training: TrainConfig
    evaluation: EvaluationOptions
    output_dir: str
    seed: int

    FIELDS = ('task', 'model', 'training', 'evaluation', 'output_dir', 'seed')
    RESOLVED_NAME = 'config.resolved.json'

    def __init__(self,
                 task: Optional[dict] = None,
                 model: Optional[dict] = None,
                 training: Optional[dict] = None,
                 evaluation: Optional[dict] = None,
                 output_dir: str = 'runs/default',
                 seed: int = 1) -> None:
        self.seed = int(seed)
        task = dict(task or {})
        training = dict(training or {})
        for section, values in (('task', task), ('training', training)):
            if values.get('seed') is not None and values['seed'] != self.seed:
                logger.warning("%s.seed=%s is replaced by the experiment seed %d", section, values['seed'], self.seed)
            values['seed'] = self.seed
        self.task = SyntheticTaskSpec.from_dict(task)
        self.model = ModelConfig.from_dict(dict(model or {}))
        self.training = TrainConfig.from_dict(training)
        self.evaluation = EvaluationOptions.from_dict(dict(evaluation or {}))
        self.output_dir = output_dir

    def to_dict(self) -> dict:
        return {
            'task': self.task.to_dict(),
            'model': self.model.to_dict(),
            'training': self.training.to_dict(),
            'evaluation': self.evaluation.to_dict(),
            'output_dir': self.output_dir,
            'seed': self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> 'ExperimentConfig':
        """
        Factory Method.
        """

        return cls(**_checked('experiment', cls.FIELDS, payload))

    @classmethod
    def from_file(cls, path) -> 'ExperimentConfig':
        """
        Factory method from a JSON config file.
        """

        path = Path(path)
        if not path.is_file():
            raise ConfigError(error_dict={'error': 'missing_config', 'path': str(path)})
        with open(path, 'r', encoding='utf-8') as file:
            try:
                payload = json.load(file)
            except ValueError as error:
                raise ConfigError(error_dict={'error': 'unreadable_config', 'path': str(path),
                                              'reason': str(error)}) from error
        return cls.from_dict(payload)

    def write_resolved(self, directory) -> Path:
        """
        Write the defaults-applied config next to the run's artifacts.
        """

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / self.RESOLVED_NAME
        with open(path, 'w', encoding='utf-8') as file:
            json.dump(self.to_dict(), file, indent=2, sort_keys=True)
        return path
