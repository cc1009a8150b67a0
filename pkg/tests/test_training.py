"""
Optimisation, checkpoint selection and new-language adaptation tests.
"""

import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np

from zeroshotnmt import checkpoint, data, training
from zeroshotnmt.model import TransformerModel
from zeroshotnmt.models.config import ModelConfig, TrainConfig
from zeroshotnmt.models.corpus import ParallelCorpus, SentencePair, Split
from zeroshotnmt.models.error import DataError, TrainingError
from zeroshotnmt.streams import RandomStreams
from zeroshotnmt.tensor import Tensor
from zeroshotnmt.training import CheckpointPool, OptimizerState, Trainer
from tests.fixtures.fixtures import fixture_task_spec


def _tiny_setup(seed: int = 1):
    corpus, vocab = data.generate_synthetic_corpus(fixture_task_spec())
    splits = data.build_english_centered_splits(corpus, 'en')
    config = ModelConfig(vocab_size=len(vocab), num_languages=len(vocab.languages), num_encoder_layers=2,
                         num_decoder_layers=1, d_model=16, num_heads=2, d_ff=32, dropout_rate=0.1,
                         max_positions=16)
    model = TransformerModel.initialize(config, RandomStreams(seed))
    return corpus, vocab, splits, model


def _train_config(**overrides) -> TrainConfig:
    values = dict(max_epochs=3, warmup_steps=10, batch_size_tokens=128, checkpoint_keep_k=2, seed=1)
    values.update(overrides)
    return TrainConfig(**values)


class TestOptimizer(unittest.TestCase):

    def test_noam_schedule_at_warmup(self):
        self.assertAlmostEqual(training.noam_lr(8000, 512, 8000), 512 ** -0.5 * 8000 ** -0.5, delta=1e-9)

    def test_noam_schedule_peaks_at_warmup(self):
        peak = training.noam_lr(100, 64, 100)

        self.assertLess(training.noam_lr(99, 64, 100), peak)
        self.assertLess(training.noam_lr(101, 64, 100), peak)
        self.assertAlmostEqual(training.noam_lr(400, 64, 100), 64 ** -0.5 * 400 ** -0.5)

    def test_noam_schedule_starts_at_one(self):
        with self.assertRaises(TrainingError):
            training.noam_lr(0, 64, 100)

    def test_first_adam_step_moves_by_the_learning_rate(self):
        param = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True, dtype=np.float64)
        state = OptimizerState.fresh({'w': param})

        training.adam_step({'w': param}, {'w': np.array([0.3, -4.0, 2.0])}, state, 0.1)

        np.testing.assert_allclose(param.data, [0.9, -1.9, 0.4], atol=1e-6)
        self.assertEqual(state.step, 1)

    def test_adam_rejects_non_finite_gradients(self):
        param = Tensor(np.zeros(2), requires_grad=True)
        state = OptimizerState.fresh({'w': param})

        with self.assertRaises(TrainingError) as context:
            training.adam_step({'w': param}, {'w': np.array([np.nan, 0.0])}, state, 0.1)

        self.assertEqual(context.exception.error_dict['parameters'], ['w'])
        self.assertEqual(state.step, 0)

    def test_zero_gradients_leave_parameters_unchanged(self):
        values = np.array([[1.0, -2.0], [0.5, 3.0]])
        param = Tensor(values.copy(), requires_grad=True, dtype=np.float64)
        state = OptimizerState.fresh({'w': param})

        training.adam_step({'w': param}, {'w': np.zeros_like(values)}, state, 0.5)

        np.testing.assert_array_equal(param.data, values)
        np.testing.assert_array_equal(state.first['w'], np.zeros_like(values))
        self.assertEqual(state.step, 1)

    def test_clip_grad_norm(self):
        grads = {'a': np.array([3.0]), 'b': np.array([4.0])}

        clipped, norm = training.clip_grad_norm(grads, 1.0)
        untouched, _ = training.clip_grad_norm(grads, 10.0)

        self.assertAlmostEqual(norm, 5.0)
        self.assertAlmostEqual(float(np.sqrt(clipped['a'] ** 2 + clipped['b'] ** 2)), 1.0, places=5)
        np.testing.assert_array_equal(untouched['b'], grads['b'])

    def test_average_of_one_is_an_exact_copy(self):
        state = {'w': np.array([0.1, 0.2], dtype=np.float32)}

        averaged = training.average_parameters([state])

        np.testing.assert_array_equal(averaged['w'], state['w'])
        self.assertIsNot(averaged['w'], state['w'])

    def test_average_of_several(self):
        states = [{'w': np.array([1.0, 2.0])}, {'w': np.array([3.0, 6.0])}]

        np.testing.assert_allclose(training.average_parameters(states)['w'], [2.0, 4.0])
        with self.assertRaises(TrainingError):
            training.average_parameters([])


class TestCheckpointPool(unittest.TestCase):

    def setUp(self):
        _, _, _, self.model = _tiny_setup()
        self.optimizer = OptimizerState.fresh(self.model.params)

    def test_keeps_the_best_epochs_in_memory(self):
        pool = CheckpointPool(2, 'hash')

        for epoch, loss in enumerate([3.0, 1.0, 2.0, 0.5], start=1):
            pool.offer(epoch, loss, self.model, self.optimizer)

        self.assertEqual(pool.best_epochs(), [4, 2])
        self.assertEqual(sorted(pool.states), [2, 4])
        self.assertEqual(len(pool.best_states()), 2)

    def test_ties_go_to_the_earlier_epoch(self):
        pool = CheckpointPool(1, 'hash')

        pool.offer(1, 1.0, self.model, self.optimizer)
        pool.offer(2, 1.0, self.model, self.optimizer)

        self.assertEqual(pool.best_epochs(), [1])

    def test_on_disk_pool_keeps_best_and_newest(self):
        with tempfile.TemporaryDirectory() as directory:
            pool = CheckpointPool(1, 'hash', Path(directory))
            for epoch, loss in enumerate([3.0, 1.0, 2.0], start=1):
                pool.offer(epoch, loss, self.model, self.optimizer)

            kept = [epoch for epoch, _ in checkpoint.list_checkpoints(directory)]

        self.assertEqual(kept, [2, 3])


class TestTrainer(unittest.TestCase):

    def setUp(self):
        self.corpus, self.vocab, self.splits, self.model = _tiny_setup()

    def test_fit_lowers_dev_loss_and_averages_the_best_epochs(self):
        before = training.dev_losses(self.model, self.splits.dev, self.vocab, 128)

        with self.assertLogs('zeroshotnmt.training', level='INFO'):
            model, history = Trainer(self.model, self.vocab, _train_config()).fit(self.splits)

        after = training.dev_losses(model, self.splits.dev, self.vocab, 128)
        self.assertEqual([record.epoch for record in history.records], [1, 2, 3])
        self.assertEqual(len(history.selected), 2)
        self.assertEqual(list(after), ['en-l1', 'en-l2', 'l1-en', 'l2-en'])
        self.assertLess(np.mean(list(after.values())), np.mean(list(before.values())))
        self.assertGreater(history.last_step, 0)

    def test_fit_is_deterministic(self):
        first, _ = Trainer(self.model, self.vocab, _train_config(max_epochs=1)).fit(self.splits)
        _, _, _, again = _tiny_setup()
        second, _ = Trainer(again, self.vocab, _train_config(max_epochs=1)).fit(self.splits)

        for name, value in first.state_dict().items():
            np.testing.assert_array_equal(second.params[name].data, value)

    def test_run_directory_layout(self):
        with tempfile.TemporaryDirectory() as directory:
            Trainer(self.model, self.vocab, _train_config(max_epochs=2), directory).fit(self.splits)

            run_dir = Path(directory)
            self.assertTrue((run_dir / training.HISTORY_FILE).is_file())
            restored, manifest = checkpoint.load_checkpoint(run_dir / training.FINAL_MODEL,
                                                            self.vocab.content_hash())
            self.assertEqual(len(checkpoint.list_checkpoints(run_dir)), 2)

        self.assertEqual(sorted(manifest['metadata']['averaged_epochs']), [1, 2])
        for name, value in self.model.state_dict().items():
            np.testing.assert_array_equal(restored.params[name].data, value)

    def test_resume_matches_an_uninterrupted_run(self):
        straight, straight_history = Trainer(self.model, self.vocab, _train_config()).fit(self.splits)

        with tempfile.TemporaryDirectory() as directory:
            _, _, _, first = _tiny_setup()
            Trainer(first, self.vocab, _train_config(max_epochs=2), directory).fit(self.splits)
            _, _, _, second = _tiny_setup()
            resumed, history = Trainer(second, self.vocab, _train_config(), directory).fit(self.splits,
                                                                                         resume=True)

        self.assertEqual([record.epoch for record in history.records], [1, 2, 3])
        self.assertEqual(history.last_step, straight_history.last_step)
        for name, value in straight.state_dict().items():
            np.testing.assert_allclose(resumed.params[name].data, value, atol=1e-6)

    def test_max_steps_stops_early(self):
        _, history = Trainer(self.model, self.vocab, _train_config(max_steps=3)).fit(self.splits)

        self.assertEqual(len(history), 1)
        self.assertEqual(history.last_step, 3)

    def test_non_finite_training_loss_aborts(self):
        trainer = Trainer(self.model, self.vocab, _train_config())
        batch = data.make_batches(self.splits.train, self.vocab, 128)[0]
        before = self.model.state_dict()

        with mock.patch.object(self.model, 'forward_loss', return_value=Tensor(np.array(np.nan))):
            with self.assertRaises(TrainingError) as context:
                trainer.train_step(batch)

        self.assertEqual(context.exception.error_dict['where'], 'train_loss')
        self.assertEqual(trainer.optimizer.step, 0)
        for name, value in before.items():
            np.testing.assert_array_equal(self.model.params[name].data, value)

    def test_vocabulary_size_mismatch(self):
        with self.assertRaises(TrainingError):
            Trainer(self.model, self.vocab.extended(['extra']), _train_config())

    def test_zero_shot_pairs_never_reach_training(self):
        leaked = data.CorpusSplits('en', self.splits.train + ParallelCorpus(
            [SentencePair('l1', 'l2', ['l1_0'], ['l2_0'], Split.TRAIN)]), self.splits.dev, self.splits.test)

        with self.assertRaises(DataError) as context:
            Trainer(self.model, self.vocab, _train_config()).fit(leaked)

        self.assertEqual(context.exception.error_dict['error'], 'zero_shot_pair_in_training')

    def test_empty_dev_split(self):
        empty = data.CorpusSplits('en', self.splits.train, ParallelCorpus(), self.splits.test)

        with self.assertRaises(DataError):
            Trainer(self.model, self.vocab, _train_config()).fit(empty)


class TestAdaptation(unittest.TestCase):

    def setUp(self):
        self.corpus, self.vocab, self.splits, self.model = _tiny_setup()
        self.spec = fixture_task_spec()
        _, self.new_corpus = data.generate_new_language_corpus(self.spec, 'new', 'reverse', 0.1)
        self.new_vocab = self.vocab.extended(self.new_corpus.surface_tokens(), ['new'])

    def test_expansion_keeps_existing_rows_and_logits(self):
        grown = training.expand_vocabulary(self.model, self.vocab, self.new_vocab, noise_scale=0.0)

        old_rows = len(self.vocab)
        np.testing.assert_array_equal(grown.params['embed.tokens'].data[:old_rows],
                                      self.model.params['embed.tokens'].data)
        np.testing.assert_allclose(grown.params['embed.tokens'].data[old_rows],
                                   self.model.params['embed.tokens'].data.mean(axis=0), atol=1e-6)
        self.assertEqual(grown.config.vocab_size, len(self.new_vocab))
        self.assertEqual(grown.config.num_languages, 4)

        source = np.array([self.vocab.encode(['l1_1', 'l1_2', 'l1_3'])])
        target = np.array([[self.vocab.bos_id('en')] + self.vocab.encode(['en_3', 'en_2'])])
        before = self.model.decode(target, self.model.encode(source).final, 0).data
        after = grown.decode(target, grown.encode(source).final, 0).data
        np.testing.assert_allclose(after[..., :old_rows], before, atol=1e-5)

    def test_expansion_noise_is_seeded(self):
        first = training.expand_vocabulary(self.model, self.vocab, self.new_vocab, seed=2)
        second = training.expand_vocabulary(self.model, self.vocab, self.new_vocab, seed=2)

        np.testing.assert_array_equal(first.params['embed.tokens'].data, second.params['embed.tokens'].data)

    def test_expansion_rejects_remapped_vocabulary(self):
        with self.assertRaises(TrainingError) as context:
            training.expand_vocabulary(self.model, self.new_vocab, self.vocab)

        self.assertEqual(context.exception.error_dict['error'], 'vocabulary_remapped')

    def test_adaptation_trains_on_both_sources(self):
        grown = training.expand_vocabulary(self.model, self.vocab, self.new_vocab)

        adapted, history = training.adapt_to_new_language(grown, self.splits, self.new_corpus, self.new_vocab,
                                                          _train_config(adaptation_epochs=1))

        self.assertEqual(len(history), 1)
        self.assertIn('en-new', history.records[0].dev_losses)
        self.assertIn('l1-en', history.records[0].dev_losses)
        self.assertEqual(adapted.config.vocab_size, len(self.new_vocab))

    def test_adaptation_rejects_non_pivot_pairs(self):
        grown = training.expand_vocabulary(self.model, self.vocab, self.new_vocab)
        bad = self.new_corpus + ParallelCorpus([SentencePair('new', 'l1', ['new_1'], ['l1_1'], Split.TRAIN)])

        with self.assertRaises(DataError) as context:
            training.adapt_to_new_language(grown, self.splits, bad, self.new_vocab, _train_config())

        self.assertEqual(context.exception.error_dict['directions'], [('new', 'l1')])


if __name__ == '__main__':
    unittest.main()
