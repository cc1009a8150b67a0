import json
from pathlib import Path
from typing import List

from zeroshotnmt.model import TransformerModel
from zeroshotnmt.models.config import ModelConfig, SyntheticTaskSpec
from zeroshotnmt.models.corpus import ParallelCorpus, SentencePair, Split, Vocabulary
from zeroshotnmt.streams import RandomStreams

FIXTURES = Path(__file__).parent


def fixture_path(name: str) -> Path:
    return FIXTURES / name


def _load_json(name: str):
    with open(fixture_path(name), 'r', encoding="utf-8") as file:
        return json.load(file)


def fixture_task_spec(**overrides) -> SyntheticTaskSpec:
    """
    A three-language task small enough to generate in milliseconds.
    """
    payload = _load_json('tiny_task.json')
    payload.update(overrides)
    return SyntheticTaskSpec.from_dict(payload)


def fixture_experiment_payload() -> dict:
    return _load_json('experiment_config.json')


def fixture_experiment_config_path() -> str:
    return str(fixture_path('experiment_config.json'))


def fixture_bleu_cases() -> List[dict]:
    return _load_json('bleu_cases.json')


def fixture_tsv_corpus_path() -> str:
    return str(fixture_path('en-l1.dev.tsv'))


def fixture_malformed_tsv_path() -> str:
    return str(fixture_path('malformed.tsv'))


def fixture_sentence_pairs(split: Split = Split.TRAIN) -> ParallelCorpus:
    return ParallelCorpus(
        SentencePair(item['source_lang'], item['target_lang'], item['source'], item['target'], split,
                     sentence_id=item['sentence_id'])
        for item in _load_json('sentence_pairs.json'))


def fixture_vocabulary() -> Vocabulary:
    return Vocabulary.from_corpus(fixture_sentence_pairs(), ['en', 'l1', 'l2'])


def fixture_model_config(vocab: Vocabulary, **overrides) -> ModelConfig:
    values = dict(vocab_size=len(vocab), num_languages=len(vocab.languages), num_encoder_layers=3,
                  num_decoder_layers=2, d_model=16, num_heads=2, d_ff=32, dropout_rate=0.1,
                  max_positions=16)
    values.update(overrides)
    return ModelConfig(**values)


def fixture_model(vocab: Vocabulary, seed: int = 1, **overrides) -> TransformerModel:
    return TransformerModel.initialize(fixture_model_config(vocab, **overrides), RandomStreams(seed))
