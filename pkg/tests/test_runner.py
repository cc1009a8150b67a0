"""
End-to-end runs of the experiment runner on the fixture config.
"""

import io
import json
import tempfile
import unittest
from pathlib import Path

from rich.console import Console

from zeroshotnmt import data as data_module
from zeroshotnmt import runner as runner_module
from zeroshotnmt.models.config import ExperimentConfig
from zeroshotnmt.models.error import CheckpointError, ConfigError, DataError
from zeroshotnmt.models.reports import MetricsReport, TranslationMode
from zeroshotnmt.runner import ExperimentRunner
from tests.fixtures.fixtures import fixture_experiment_payload


def _config(directory: str) -> ExperimentConfig:
    payload = fixture_experiment_payload()
    payload['output_dir'] = directory
    # Undertrained models may decode an empty pivot hypothesis.
    payload['evaluation']['mode'] = 'direct'
    return ExperimentConfig.from_dict(payload)


class TestPublish(unittest.TestCase):

    def test_publish_renames_into_place(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / 'out.txt'

            runner_module.publish(path, runner_module._write_text('done\n'))

            self.assertEqual(path.read_text(encoding='utf-8'), 'done\n')
            self.assertEqual([p.name for p in Path(directory).iterdir()], ['out.txt'])

    def test_failed_write_leaves_no_final_file(self):
        def failing(path):
            path.write_text('partial', encoding='utf-8')
            raise DataError(error_dict={'error': 'boom'})

        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / 'out.txt'
            with self.assertRaises(DataError):
                runner_module.publish(path, failing)

            self.assertFalse(path.exists())


class TestExperimentRunner(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.workdir = tempfile.TemporaryDirectory()
        cls.runner = ExperimentRunner(_config(cls.workdir.name))
        cls.history = cls.runner.train()

    @classmethod
    def tearDownClass(cls):
        cls.workdir.cleanup()

    def test_training_artifacts(self):
        output = Path(self.workdir.name)

        self.assertEqual(len(self.history), 2)
        self.assertTrue((output / ExperimentConfig.RESOLVED_NAME).is_file())
        self.assertTrue((output / 'data' / 'corpus.json').is_file())
        self.assertTrue((output / 'model' / 'manifest.json').is_file())
        self.assertTrue((output / 'history.json').is_file())

    def test_evaluate_writes_metrics(self):
        report = self.runner.evaluate()

        directions = {(row.source_lang, row.target_lang) for row in report.rows_for(TranslationMode.ZERO_SHOT)}
        self.assertEqual(directions, {('l1', 'l2'), ('l2', 'l1')})
        self.assertEqual(len(report.rows_for(TranslationMode.SUPERVISED)), 4)
        self.assertIn('zero-shot/off_target', report.averages)
        self.assertEqual(MetricsReport.load(Path(self.workdir.name) / 'metrics.json'), report)

    def test_oracle_translation_needs_no_model(self):
        sentences = [['en_1', 'en_2', 'en_3']]

        self.assertEqual(self.runner.translate(sentences, 'en', 'l1', oracle=True), [['l1_3', 'l1_2', 'l1_1']])

    def test_model_translation(self):
        hypotheses = self.runner.translate([['en_1', 'en_2'], ['en_4']], 'en', 'l1')

        self.assertEqual(len(hypotheses), 2)
        self.assertTrue(all(len(hypothesis) <= 8 for hypothesis in hypotheses))

    def test_probe_and_attention(self):
        report = self.runner.probe(['position_id', 'language_id'], dump_attention=True)

        self.assertEqual([layer for layer, _ in report.curve('position_id')], ['0', '1', '2', 'final'])
        with open(Path(self.workdir.name) / 'attention.json', 'r', encoding='utf-8') as file:
            self.assertEqual(json.load(file)['residual_removal_layer'], 1)
        for suffix in ('json', 'tsv', 'csv'):
            self.assertTrue((Path(self.workdir.name) / f'probe.{suffix}').is_file())

    def test_svcca(self):
        report = self.runner.svcca(language_probe=False)

        self.assertEqual(report.layers(), ['1', '2'])
        self.assertEqual(report.language_probe, {})
        self.assertTrue((Path(self.workdir.name) / 'svcca.tsv').is_file())

    def test_adapt_adds_a_language(self):
        report = self.runner.adapt('new', fraction=0.25)

        supervised = {(row.source_lang, row.target_lang) for row in report.rows_for(TranslationMode.SUPERVISED)}
        self.assertIn('zero-shot[from=new]', report.averages)
        self.assertIn(('new', 'en'), supervised)
        self.assertTrue((Path(self.workdir.name) / 'adapt' / 'metrics.json').is_file())
        with self.assertRaises(DataError):
            self.runner.adapt('l1')

    def test_report_collects_artifacts(self):
        self.runner.evaluate()
        output = io.StringIO()

        summary = self.runner.report(Console(file=output, width=120))

        self.assertEqual(summary['training']['epochs'], 2)
        self.assertEqual(summary['training']['steps'], self.history.last_step)
        self.assertGreater(summary['training']['steps'], 0)
        self.assertIn('supervised', summary['metrics'])
        self.assertTrue((Path(self.workdir.name) / 'summary.json').is_file())
        self.assertIn('Training', output.getvalue())


class TestRunnerEdgeCases(unittest.TestCase):

    def test_evaluate_without_a_model(self):
        with tempfile.TemporaryDirectory() as directory:
            runner = ExperimentRunner(_config(directory))
            runner.gen_data()

            with self.assertRaises(CheckpointError):
                runner.evaluate()

    def test_unknown_preset(self):
        with tempfile.TemporaryDirectory() as directory:
            with self.assertRaises(DataError):
                ExperimentRunner(_config(directory)).gen_data(['huge'])

    def test_presets_shape_the_corpus(self):
        with tempfile.TemporaryDirectory() as directory:
            runner = ExperimentRunner(_config(directory))
            runner.gen_data(['low_resource', 'no_overlap'], low_resource_pairs=5)
            corpus, vocab, meta = runner.load_data()

        train = corpus.filter(split=runner_module.Split.TRAIN)
        self.assertEqual(meta['presets'], ['low_resource', 'no_overlap'])
        self.assertTrue(all(len(part) == 5 for part in train.by_direction().values()))
        self.assertTrue(all(token.startswith(f'<{pair.source_lang}>') for pair in train for token in pair.source))
        self.assertIn(next(iter(train)).source[0], vocab.token_to_id)

    def test_stale_corpus_is_rejected(self):
        with tempfile.TemporaryDirectory() as directory:
            ExperimentRunner(_config(directory)).gen_data()
            payload = _config(directory).to_dict()
            payload['task'].update(num_languages=4, language_codes=None, reordering_rules=None)
            runner = ExperimentRunner(ExperimentConfig.from_dict(payload))

            with self.assertRaises(ConfigError) as context:
                runner.train()
            _, _, meta = runner.load_data()

        self.assertEqual(context.exception.error_dict['error'], 'stale_corpus')
        self.assertIn('num_languages', context.exception.error_dict['fields'])
        self.assertEqual(meta['task']['num_languages'], 3)

    def test_matching_corpus_is_reused(self):
        with tempfile.TemporaryDirectory() as directory:
            runner = ExperimentRunner(_config(directory))
            runner.gen_data()

            corpus, _, _ = ExperimentRunner(_config(directory)).load_data(generate=True)

        self.assertEqual(len(corpus.filter(split=runner_module.Split.TRAIN)), 4 * 24)

    def test_adapt_sizes_the_new_language_from_low_resource_data(self):
        with tempfile.TemporaryDirectory() as directory:
            runner = ExperimentRunner(_config(directory))
            runner.gen_data(['low_resource'], low_resource_pairs=8)
            runner.train()

            runner.adapt('new', fraction=0.25)
            corpus, _, meta = data_module.load_corpus_directory(Path(directory) / 'adapt' / 'data')

        new_train = corpus.filter(split=runner_module.Split.TRAIN)
        sizes = {key: len(part) for key, part in new_train.by_direction().items() if 'new' in key}
        self.assertEqual(meta['new_language'], 'new')
        self.assertEqual(sizes, {('en', 'new'): 2, ('new', 'en'): 2})

    def test_identical_runs_give_identical_metrics(self):
        reports = []
        for _ in range(2):
            with tempfile.TemporaryDirectory() as directory:
                runner = ExperimentRunner(_config(directory))
                runner.train()
                reports.append(runner.evaluate())

        self.assertEqual(reports[0], reports[1])


if __name__ == '__main__':
    unittest.main()
