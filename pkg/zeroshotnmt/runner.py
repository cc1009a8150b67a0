"""
Experiment runner: one method per command-line subcommand, all reading and
writing the same self-describing run directory.

    <out>/config.resolved.json
    <out>/data/                 corpus TSVs, vocab.txt, corpus.json
    <out>/ckpt-epochNNN/        per-epoch checkpoints (top k kept)
    <out>/history.json, <out>/model/
    <out>/metrics.json|tsv, probe.json|tsv|csv, svcca.json|tsv|csv, attention.json
    <out>/adapt/                the same layout for a new-language adaptation
"""

import json
import logging
import os
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from rich.console import Console
from rich.table import Table

from zeroshotnmt import analysis, checkpoint, data, evaluation, training
from zeroshotnmt.model import TransformerModel
from zeroshotnmt.models.config import DevSelection, ExperimentConfig, SyntheticTaskSpec
from zeroshotnmt.models.corpus import ParallelCorpus, Split, Vocabulary
from zeroshotnmt.models.error import CheckpointError, ConfigError, DataError, UnsupportedError
from zeroshotnmt.models.reports import MetricsReport, ProbeReport, SimilarityReport, TrainingHistory
from zeroshotnmt.streams import RandomStreams

logger = logging.getLogger(__name__)

DATA_DIR = 'data'
ADAPT_DIR = 'adapt'
METRICS = 'metrics'
PROBE = 'probe'
SVCCA = 'svcca'
ATTENTION = 'attention.json'
SUMMARY = 'summary.json'

PRESETS = ('low_resource', 'no_overlap')
LOW_RESOURCE_PAIRS = 500


def publish(path: Path, write: Callable[[Path], None]) -> Path:
    """
    Write through `<path>.incomplete` and rename, so a crash never leaves a
    half-written artifact under the final name.
    """

    staging = path.with_name(path.name + checkpoint.INCOMPLETE_SUFFIX)
    write(staging)
    os.replace(staging, path)
    return path


def _write_text(text: str) -> Callable[[Path], None]:
    def write(path: Path) -> None:
        with open(path, 'w', encoding='utf-8') as file:
            file.write(text)
    return write


class ExperimentRunner:
    """
    Runs generation, training, evaluation, analysis and adaptation for one
    experiment config.
    """

    config: ExperimentConfig
    output_dir: Path

    def __init__(self, config: ExperimentConfig, output_dir=None) -> None:
        self.config = config
        self.output_dir = Path(output_dir or config.output_dir)

    @property
    def data_dir(self) -> Path:
        return self.output_dir / DATA_DIR

    # Data #

    def gen_data(self, presets: Sequence[str] = (), low_resource_pairs: int = LOW_RESOURCE_PAIRS) -> List[Path]:
        """
        Generate the synthetic corpus and write it under `<out>/data`.

        `low_resource` keeps `low_resource_pairs` training pairs per direction;
        `no_overlap` tags every token with its language.
        """

        unknown = [preset for preset in presets if preset not in PRESETS]
        if unknown:
            raise DataError.invalid_value('preset', unknown, f'expected any of {PRESETS}')

        task = self.config.task
        corpus, vocab = data.generate_synthetic_corpus(task)
        if 'low_resource' in presets:
            train = data.subsample_direction(corpus.filter(split=Split.TRAIN), int(low_resource_pairs), task.seed)
            corpus = train + ParallelCorpus(pair for pair in corpus if pair.split is not Split.TRAIN)
        if 'no_overlap' in presets:
            corpus = data.apply_no_overlap_tagging(corpus)
            vocab = data.lexicon_vocabulary(data.build_languages(task), tagged=True)

        self.config.write_resolved(self.output_dir)
        return data.write_corpus_directory(corpus, vocab, self.data_dir, task.pivot_code, task.multiway,
                                           {'presets': sorted(presets), 'task': task.to_dict()})

    def load_data(self, generate: bool = False):
        """
        `(corpus, vocab, meta)` from `<out>/data`, generating it first when asked and absent.
        When generating is allowed, an existing corpus must match the task settings.
        """

        if generate and not (self.data_dir / data.CORPUS_META).is_file():
            logger.info("no corpus in %s, generating one", self.data_dir)
            self.gen_data()
        corpus, vocab, meta = data.load_corpus_directory(self.data_dir)
        if generate:
            self._check_task(meta)
        return corpus, vocab, meta

    def _check_task(self, meta: dict) -> None:
        """
        A corpus generated under other task settings cannot back this config.
        """

        stored = meta.get('task')
        if stored is None:
            return
        wanted = json.loads(json.dumps(self.config.task.to_dict()))
        differing = sorted(key for key in set(stored) | set(wanted) if stored.get(key) != wanted.get(key))
        if differing:
            raise ConfigError(error_dict={'error': 'stale_corpus', 'path': str(self.data_dir),
                                          'fields': differing})

    def splits(self, corpus: ParallelCorpus, meta: dict) -> data.CorpusSplits:
        include = self.config.training.dev_selection is DevSelection.INCLUDE_ZERO_SHOT
        return data.build_english_centered_splits(corpus, meta['pivot'], include)

    # Training #

    def train(self, resume: bool = False) -> TrainingHistory:
        """
        Train from scratch (or continue the newest checkpoint) and write the averaged model.
        """

        corpus, vocab, meta = self.load_data(generate=True)
        self.config.write_resolved(self.output_dir)
        model_config = self.config.model.replace(vocab_size=len(vocab), num_languages=len(vocab.languages))
        model = TransformerModel.initialize(model_config, RandomStreams(self.config.seed))
        logger.info("training %d parameters (removal layer %s, position query %s, %s dropout)",
                    model.num_parameters(), model_config.residual_removal_layer,
                    model_config.position_query_enabled, model_config.dropout_mode.value)
        _, history = training.train(model, self.splits(corpus, meta), vocab, self.config.training,
                                    self.output_dir, resume)
        return history

    def load_model(self, run_dir: Optional[Path] = None, vocab: Optional[Vocabulary] = None) -> TransformerModel:
        run_dir = run_dir or self.output_dir
        if vocab is None:
            _, vocab, _ = self.load_data()
        path = run_dir / training.FINAL_MODEL
        if not (path / checkpoint.MANIFEST).is_file():
            raise CheckpointError.missing(path)
        model, _ = checkpoint.load_checkpoint(path, vocab.content_hash())
        return model

    # Evaluation #

    def translate(self, sentences: Sequence[Sequence[str]], source_lang: str, target_lang: str,
                  pivot: Optional[str] = None, oracle: bool = False) -> List[List[str]]:
        """
        Decode token sentences directly, through a pivot, or with the
        rule-based oracle of the synthetic task.
        """

        if oracle:
            translator = data.OracleTranslator.from_spec(self.config.task)
            return [translator.translate(tokens, source_lang, target_lang) for tokens in sentences]
        _, vocab, _ = self.load_data()
        model = self.load_model(vocab=vocab)
        max_len = self.config.evaluation.max_len
        if pivot:
            return evaluation.pivot_translate(model, vocab, sentences, source_lang, pivot, target_lang, max_len)
        return evaluation.translate_sentences(model, vocab, sentences, target_lang, max_len)

    def _lexicons(self, corpus: ParallelCorpus) -> Optional[Dict[str, set]]:
        try:
            return evaluation.lexicons_from_corpus(corpus)
        except UnsupportedError as error:
            logger.warning("off-target rates skipped: %s", error)
            return None

    def _families(self, task: SyntheticTaskSpec) -> Optional[Dict[str, str]]:
        return dict(zip(task.language_codes, task.families)) if task.families else None

    def evaluate(self, mode=None) -> MetricsReport:
        """
        BLEU and off-target rates for every test direction; writes `metrics.json` and `metrics.tsv`.
        """

        corpus, vocab, meta = self.load_data()
        model = self.load_model(vocab=vocab)
        test = corpus.filter(split=Split.TEST)
        report = evaluation.evaluate_all_directions(
            model, vocab, test, meta['pivot'], mode or self.config.evaluation.mode, self._lexicons(corpus),
            self.config.evaluation.max_len, self._families(self.config.task))
        self._write_metrics(report, self.output_dir)
        return report

    def _write_metrics(self, report: MetricsReport, directory: Path) -> None:
        publish(directory / f'{METRICS}.json', report.save)
        publish(directory / f'{METRICS}.tsv', _write_text(report.to_tsv()))
        logger.info("wrote metrics for %d directions to %s", len(report.rows), directory)

    # Analysis #

    def probe(self, label_types: Sequence[str] = analysis.LABEL_TYPES, layers: Optional[Sequence[str]] = None,
              dump_attention: bool = False) -> ProbeReport:
        """
        Linear probes on dev-set activations; writes `probe.json|tsv|csv`.
        """

        corpus, vocab, _ = self.load_data()
        model = self.load_model(vocab=vocab)
        dev = corpus.filter(split=Split.DEV)
        options = self.config.evaluation
        report = ProbeReport()
        for label_type in label_types:
            partial = analysis.probe_positional_information(
                model, vocab, dev, label_type, layers, options.analysis_sentences, self.config.seed,
                options.probe_epochs, options.probe_learning_rate)
            for entry in partial.entries:
                report.add(entry)

        publish(self.output_dir / f'{PROBE}.json', report.save)
        publish(self.output_dir / f'{PROBE}.tsv', _write_text(report.to_tsv()))
        publish(self.output_dir / f'{PROBE}.csv', _write_text(report.to_csv()))
        if dump_attention:
            sentences = [pair.source for pair in dev][:options.analysis_sentences]
            publish(self.output_dir / ATTENTION,
                    lambda path: analysis.dump_attention(model, vocab, sentences, path))
        return report

    def svcca(self, language_probe: bool = True) -> SimilarityReport:
        """
        Per-layer cross-language SVCCA on the multiway dev set; writes `svcca.json|tsv|csv`.
        """

        corpus, vocab, _ = self.load_data()
        model = self.load_model(vocab=vocab)
        options = self.config.evaluation
        report = analysis.per_layer_svcca(
            model, vocab, corpus.filter(split=Split.DEV), None, options.analysis_sentences,
            options.variance_threshold, self.config.seed, language_probe, options.probe_epochs,
            options.probe_learning_rate)
        publish(self.output_dir / f'{SVCCA}.json', report.save)
        publish(self.output_dir / f'{SVCCA}.tsv', _write_text(report.to_tsv()))
        publish(self.output_dir / f'{SVCCA}.csv', _write_text(report.to_csv()))
        return report

    # Adaptation #

    def _new_language_rule(self, task: SyntheticTaskSpec) -> str:
        for rule in SyntheticTaskSpec.DEFAULT_RULES + ('rotate(3)',):
            if rule not in task.reordering_rules:
                return rule
        return 'reverse'

    def adapt(self, code: str = 'new', rule: Optional[str] = None, fraction: float = 0.1,
              family: Optional[str] = None) -> MetricsReport:
        """
        Add one language to a trained model: expand the vocabulary, fine-tune on
        the original data plus `fraction` of a direction of new-language data,
        and evaluate every direction with new-language averages.
        """

        corpus, vocab, meta = self.load_data()
        model = self.load_model(vocab=vocab)
        task = self.config.task
        if code in vocab.languages:
            raise DataError.invalid_value('code', code, 'language already in the model')

        direction_size = min(len(part) for part in corpus.filter(split=Split.TRAIN).by_direction().values())
        extended, added = data.generate_new_language_corpus(task, code, rule or self._new_language_rule(task),
                                                            fraction, family, direction_size)
        if 'no_overlap' in meta.get('presets', []):
            added = data.apply_no_overlap_tagging(added)
        new_vocab = vocab.extended(added.surface_tokens(), [code])
        model = training.expand_vocabulary(model, vocab, new_vocab, self.config.training.noise_scale,
                                           self.config.seed)

        adapt_dir = self.output_dir / ADAPT_DIR
        data.write_corpus_directory(corpus + added, new_vocab, adapt_dir / DATA_DIR, meta['pivot'],
                                    meta['multiway'], {'presets': meta.get('presets', []), 'new_language': code})
        model, _ = training.adapt_to_new_language(model, self.splits(corpus, meta), added, new_vocab,
                                                  self.config.training, adapt_dir)

        test = (corpus + added).filter(split=Split.TEST)
        report = evaluation.evaluate_all_directions(
            model, new_vocab, test, meta['pivot'], self.config.evaluation.mode, self._lexicons(corpus + added),
            self.config.evaluation.max_len, self._families(extended), new_language=code)
        self._write_metrics(report, adapt_dir)
        return report

    # Report #

    def report(self, console: Optional[Console] = None) -> dict:
        """
        Collect every artifact of the run directory into `summary.json` and print it as tables.
        """

        summary: dict = {'output_dir': str(self.output_dir)}
        history_path = self.output_dir / training.HISTORY_FILE
        if history_path.is_file():
            history = TrainingHistory.load(history_path)
            summary['training'] = {'epochs': len(history), 'steps': history.last_step,
                                   'selected': history.selected,
                                   'best_dev_loss': min((r.dev_loss for r in history.records), default=None)}
        for name, directory in (('metrics', self.output_dir), ('adaptation', self.output_dir / ADAPT_DIR)):
            path = directory / f'{METRICS}.json'
            if path.is_file():
                summary[name] = MetricsReport.load(path).averages
        if (self.output_dir / f'{PROBE}.json').is_file():
            probes = ProbeReport.load(self.output_dir / f'{PROBE}.json')
            summary['probe'] = {label: dict(probes.curve(label)) for label in analysis.LABEL_TYPES
                                if probes.curve(label)}
        if (self.output_dir / f'{SVCCA}.json').is_file():
            similarity = SimilarityReport.load(self.output_dir / f'{SVCCA}.json')
            summary['svcca'] = {'curve': dict(similarity.curve()), 'random_baseline': similarity.random_baseline,
                                'language_probe': similarity.language_probe}
        if len(summary) == 1:
            raise CheckpointError(error_dict={'error': 'empty_run_directory', 'path': str(self.output_dir)})

        publish(self.output_dir / SUMMARY, lambda path: _dump_json(summary, path))
        render_summary(summary, console or Console())
        return summary


# Helpers #

def _dump_json(payload: dict, path: Path) -> None:
    with open(path, 'w', encoding='utf-8') as file:
        json.dump(payload, file, indent=2, sort_keys=True)


def render_summary(summary: dict, console: Console) -> None:
    """
    One rich table per artifact family.
    """

    if 'training' in summary:
        table = Table(title='Training')
        table.add_column('epochs', justify='right')
        table.add_column('steps', justify='right')
        table.add_column('best dev loss', justify='right')
        table.add_column('averaged checkpoints')
        info = summary['training']
        best = info['best_dev_loss']
        table.add_row(str(info['epochs']), str(info['steps']), 'n/a' if best is None else f'{best:.4f}',
                      ', '.join(info['selected']))
        console.print(table)

    for name in ('metrics', 'adaptation'):
        if name in summary:
            table = Table(title='BLEU' if name == 'metrics' else 'BLEU after adaptation')
            table.add_column('average')
            table.add_column('value', justify='right')
            for key, value in sorted(summary[name].items()):
                table.add_row(key, f'{value:.4f}' if key.endswith('/off_target') else f'{value:.2f}')
            console.print(table)

    if 'probe' in summary:
        table = Table(title='Probe accuracy')
        table.add_column('layer')
        labels = list(summary['probe'])
        for label in labels:
            table.add_column(label, justify='right')
        layers = list(dict.fromkeys(layer for curve in summary['probe'].values() for layer in curve))
        for layer in layers:
            table.add_row(layer, *[_cell(summary['probe'][label].get(layer)) for label in labels])
        console.print(table)

    if 'svcca' in summary:
        info = summary['svcca']
        table = Table(title=f"SVCCA (random baseline {info['random_baseline']:.3f})")
        table.add_column('layer')
        table.add_column('mean svcca', justify='right')
        table.add_column('language probe', justify='right')
        for layer, score in info['curve'].items():
            table.add_row(layer, f'{score:.3f}', _cell(info['language_probe'].get(layer)))
        console.print(table)


def _cell(value: Optional[float]) -> str:
    return 'n/a' if value is None else f'{value:.3f}'
