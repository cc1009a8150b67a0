"""
Synthetic corpus generation, data conditions, batching and file formats.
"""

import json
import tempfile
import unittest
from pathlib import Path

import numpy as np

from zeroshotnmt import data
from zeroshotnmt.data import OracleTranslator, ReorderingRule
from zeroshotnmt.models.corpus import Batch, Direction, ParallelCorpus, SentencePair, Split, Vocabulary
from zeroshotnmt.models.error import DataError
from tests.fixtures.fixtures import fixture_malformed_tsv_path, fixture_sentence_pairs, fixture_task_spec, \
    fixture_tsv_corpus_path, fixture_vocabulary


class TestReorderingRule(unittest.TestCase):

    def test_known_permutations(self):
        sequence = list('abcde')

        self.assertEqual(ReorderingRule.parse('identity').apply(sequence), list('abcde'))
        self.assertEqual(ReorderingRule.parse('reverse').apply(sequence), list('edcba'))
        self.assertEqual(ReorderingRule.parse('rotate(2)').apply(sequence), list('cdeab'))
        self.assertEqual(ReorderingRule.parse('swap_adjacent_pairs').apply(sequence), list('badce'))
        self.assertEqual(ReorderingRule.parse('interleave_halves').apply(sequence), list('adbec'))

    def test_invert_undoes_apply_for_every_length(self):
        for text in ('identity', 'reverse', 'rotate(3)', 'swap_adjacent_pairs', 'interleave_halves'):
            rule = ReorderingRule.parse(text)
            for length in range(1, 10):
                sequence = list(range(length))
                self.assertEqual(rule.invert(rule.apply(sequence)), sequence, f'{text} at {length}')
                self.assertEqual(sorted(rule.permutation(length)), sequence)

    def test_str_round_trips(self):
        self.assertEqual(str(ReorderingRule.parse(' rotate(4) ')), 'rotate(4)')
        self.assertEqual(ReorderingRule.parse('reverse'), ReorderingRule('reverse'))

    def test_unknown_rule(self):
        with self.assertRaises(DataError) as context:
            ReorderingRule.parse('shuffle')

        self.assertEqual(context.exception.error_dict['error'], 'unknown_reordering_rule')

    def test_empty_sequence_rejected(self):
        with self.assertRaises(DataError):
            ReorderingRule.parse('reverse').permutation(0)


class TestLanguages(unittest.TestCase):

    def setUp(self):
        self.spec = fixture_task_spec()

    def test_default_rules_keep_the_pivot_in_canonical_order(self):
        self.assertEqual(self.spec.reordering_rules, ['identity', 'reverse', 'rotate(2)'])

    def test_lexicons_are_disjoint_without_overlap(self):
        languages = data.build_languages(self.spec)

        en, l1, l2 = (languages[code].lexicon.tokens() for code in ('en', 'l1', 'l2'))
        self.assertEqual(len(en), self.spec.concept_vocab_size)
        self.assertFalse(en & l1 or en & l2 or l1 & l2)

    def test_full_overlap_shares_every_form(self):
        languages = data.build_languages(fixture_task_spec(lexical_overlap=1.0))

        self.assertEqual(languages['en'].lexicon.tokens(), languages['l2'].lexicon.tokens())

    def test_family_members_share_forms(self):
        spec = fixture_task_spec(num_languages=4, families=['en', 'rom', 'rom', 'ger'], family_overlap=1.0)
        languages = data.build_languages(spec)

        self.assertEqual(languages['l1'].lexicon.tokens(), languages['l2'].lexicon.tokens())
        self.assertEqual(languages['l1'].rule, languages['l2'].rule)
        self.assertFalse(languages['l1'].lexicon.tokens() & languages['l3'].lexicon.tokens())

    def test_appending_a_language_leaves_the_others_untouched(self):
        before = data.build_languages(self.spec)
        after = data.build_languages(self.spec.with_language('new', 'reverse'))

        for code in ('en', 'l1', 'l2'):
            self.assertEqual(before[code].lexicon.forms, after[code].lexicon.forms)
        self.assertIn('new', after)

    def test_oracle_translations_compose(self):
        oracle = OracleTranslator.from_spec(self.spec)
        sentence = oracle.languages['en'].render([3, 1, 4, 1])

        through_l1 = oracle.translate(oracle.translate(sentence, 'en', 'l1'), 'l1', 'l2')

        self.assertEqual(through_l1, oracle.translate(sentence, 'en', 'l2'))
        self.assertEqual(oracle.translate(oracle.translate(sentence, 'en', 'l2'), 'l2', 'en'), sentence)
        self.assertEqual(oracle.concepts(oracle.translate(sentence, 'en', 'l1'), 'l1'), [3, 1, 4, 1])

    def test_oracle_rejects_foreign_tokens(self):
        oracle = OracleTranslator.from_spec(self.spec)

        with self.assertRaises(DataError):
            oracle.translate(['l1_0'], 'en', 'l2')
        with self.assertRaises(DataError):
            oracle.translate(['en_0'], 'xx', 'l2')


class TestGeneration(unittest.TestCase):

    def setUp(self):
        self.spec = fixture_task_spec()
        self.corpus, self.vocab = data.generate_synthetic_corpus(self.spec)

    def test_training_covers_pivot_directions_only(self):
        train = self.corpus.filter(split=Split.TRAIN)

        self.assertEqual(train.directions(), [('en', 'l1'), ('en', 'l2'), ('l1', 'en'), ('l2', 'en')])
        for part in train.by_direction().values():
            self.assertEqual(len(part), 30)

    def test_four_languages_give_six_training_directions(self):
        corpus, _ = data.generate_synthetic_corpus(fixture_task_spec(num_languages=4))

        self.assertEqual(len(corpus.filter(split=Split.TRAIN).directions()), 6)

    def test_multiway_directions_share_sentences(self):
        ids = {key: [pair.sentence_id for pair in part]
               for key, part in self.corpus.filter(split=Split.TRAIN).by_direction().items()}

        self.assertEqual(len({tuple(value) for value in ids.values()}), 1)

    def test_disjoint_directions_use_separate_sentences(self):
        corpus, _ = data.generate_synthetic_corpus(fixture_task_spec(multiway=False))

        seen = set()
        for part in corpus.filter(split=Split.TRAIN).by_direction().values():
            ids = {pair.sentence_id for pair in part}
            self.assertFalse(seen & ids)
            seen |= ids

    def test_held_out_splits_cover_all_ordered_pairs(self):
        dev, test = self.corpus.filter(split=Split.DEV), self.corpus.filter(split=Split.TEST)

        self.assertEqual(len(dev.directions()), 6)
        self.assertEqual(len(dev), 6 * 8)
        self.assertEqual(len(test), 6 * 6)
        for pair in test:
            expected = Direction.SUPERVISED if 'en' in pair.key else Direction.ZERO_SHOT
            self.assertIs(pair.direction, expected)

    def test_held_out_sentences_never_appear_in_training(self):
        train_ids = {pair.sentence_id for pair in self.corpus.filter(split=Split.TRAIN)}
        held_out_ids = {pair.sentence_id for pair in self.corpus if pair.split is not Split.TRAIN}

        self.assertFalse(train_ids & held_out_ids)

    def test_pairs_are_oracle_translations(self):
        oracle = OracleTranslator.from_spec(self.spec)

        for pair in list(self.corpus)[::7]:
            self.assertEqual(oracle.translate(pair.source, *pair.key), pair.target)
            low, high = self.spec.sentence_length_range
            self.assertTrue(low <= len(pair.source) <= high)

    def test_vocabulary_covers_every_token(self):
        for token in self.corpus.surface_tokens():
            self.assertIn(token, self.vocab)
        self.assertEqual(self.vocab.languages, ['en', 'l1', 'l2'])

    def test_generation_is_seeded(self):
        again, _ = data.generate_synthetic_corpus(fixture_task_spec())
        other, _ = data.generate_synthetic_corpus(fixture_task_spec(seed=4))

        self.assertEqual(self.corpus, again)
        self.assertNotEqual(self.corpus, other)

    def test_longer_draws_extend_shorter_ones(self):
        short = data.sample_concept_sentences(self.spec, 10)
        long = data.sample_concept_sentences(self.spec, 20)

        self.assertEqual(long[:10], short)
        self.assertEqual(len(set(long)), 20)

    def test_exhausted_concept_space(self):
        spec = fixture_task_spec(concept_vocab_size=2, sentence_length_range=[1, 1])

        with self.assertRaises(DataError) as context:
            data.sample_concept_sentences(spec, 5)

        self.assertEqual(context.exception.error_dict['error'], 'concept_space_exhausted')

    def test_new_language_corpus(self):
        extended, corpus = data.generate_new_language_corpus(self.spec, 'new', 'reverse', 0.1)

        train = corpus.filter(split=Split.TRAIN)
        self.assertEqual(extended.language_codes, ['en', 'l1', 'l2', 'new'])
        self.assertEqual(train.directions(), [('en', 'new'), ('new', 'en')])
        self.assertEqual(len(train), 2 * 3)
        self.assertTrue(all('new' in pair.key for pair in corpus))
        self.assertEqual(len(corpus.filter(split=Split.TEST).directions()), 6)

    def test_new_language_follows_the_existing_direction_size(self):
        _, corpus = data.generate_new_language_corpus(self.spec, 'new', 'reverse', 0.25, direction_size=8)
        _, tiny = data.generate_new_language_corpus(self.spec, 'new', 'reverse', 0.01, direction_size=8)

        sizes = [len(part) for part in corpus.filter(split=Split.TRAIN).by_direction().values()]
        tiny_sizes = [len(part) for part in tiny.filter(split=Split.TRAIN).by_direction().values()]
        self.assertEqual(sizes, [2, 2])
        self.assertEqual(tiny_sizes, [1, 1])
        self.assertEqual(len(corpus.filter(split=Split.TEST).directions()), 6)


class TestDataConditions(unittest.TestCase):

    def setUp(self):
        self.corpus, _ = data.generate_synthetic_corpus(fixture_task_spec())

    def test_english_centered_splits(self):
        splits = data.build_english_centered_splits(self.corpus, 'en')

        self.assertTrue(all('en' in pair.key for pair in splits.train))
        self.assertTrue(all('en' in pair.key for pair in splits.dev))
        self.assertEqual(splits.test_zero_shot.directions(), [('l1', 'l2'), ('l2', 'l1')])
        self.assertEqual(len(splits.test_supervised) + len(splits.test_zero_shot), len(splits.test))
        self.assertEqual(splits.languages(), ['l1', 'en', 'l2'])

    def test_zero_shot_dev_on_request(self):
        splits = data.build_english_centered_splits(self.corpus, 'en', include_zero_shot_dev=True)

        self.assertEqual(len(splits.dev.directions()), 6)

    def test_non_pivot_training_pairs_are_dropped(self):
        extra = ParallelCorpus([SentencePair('l1', 'l2', ['l1_0'], ['l2_0'], Split.TRAIN)])

        with self.assertLogs('zeroshotnmt.data', level='WARNING'):
            splits = data.build_english_centered_splits(self.corpus + extra, 'en')

        self.assertNotIn(('l1', 'l2'), splits.train.directions())

    def test_missing_pivot(self):
        with self.assertRaises(DataError) as context:
            data.build_english_centered_splits(self.corpus, 'de')

        self.assertEqual(context.exception.error_dict['error'], 'pivot_absent')

    def test_missing_test_direction(self):
        trimmed = ParallelCorpus(pair for pair in self.corpus
                                 if not (pair.split is Split.TEST and pair.key == ('l1', 'l2')))

        with self.assertRaises(DataError) as context:
            data.build_english_centered_splits(trimmed, 'en')

        self.assertEqual(context.exception.error_dict['missing'], [('l1', 'l2')])

    def test_tagging_removes_all_overlap_and_strips_back(self):
        overlapping, _ = data.generate_synthetic_corpus(fixture_task_spec(lexical_overlap=0.5))

        tagged = data.apply_no_overlap_tagging(overlapping)

        lexicons = tagged.lexicons()
        self.assertFalse(lexicons['en'] & lexicons['l1'])
        self.assertTrue(all(token.startswith('<l1>') for token in lexicons['l1']))
        self.assertEqual(data.strip_language_tags(tagged), overlapping)

    def test_subsample_by_fraction_and_count(self):
        train = self.corpus.filter(split=Split.TRAIN)

        half = data.subsample_direction(train, 0.5, seed=1)
        five = data.subsample_direction(train, 5, seed=1)

        for part in half.by_direction().values():
            self.assertEqual(len(part), 15)
        for part in five.by_direction().values():
            self.assertEqual(len(part), 5)
        positions = [train.pairs.index(pair) for pair in half]
        self.assertEqual(positions, sorted(positions))
        self.assertEqual(half, data.subsample_direction(train, 0.5, seed=1))

    def test_subsample_rejects_impossible_sizes(self):
        train = self.corpus.filter(split=Split.TRAIN)

        with self.assertRaises(DataError):
            data.subsample_direction(train, 31, seed=1)
        with self.assertRaises(DataError):
            data.subsample_direction(train, 1.5, seed=1)

    def test_small_fraction_keeps_one_pair(self):
        train = self.corpus.filter(split=Split.TRAIN)

        sample = data.subsample_direction(train, 0.01, seed=1)

        self.assertEqual(sample.directions(), train.directions())
        self.assertTrue(all(len(part) == 1 for part in sample.by_direction().values()))


class TestBatching(unittest.TestCase):

    def setUp(self):
        self.corpus, self.vocab = data.generate_synthetic_corpus(fixture_task_spec())
        self.train = list(self.corpus.filter(split=Split.TRAIN))

    def test_batch_layout(self):
        pairs = list(fixture_sentence_pairs())
        vocab = fixture_vocabulary()

        batch = Batch.from_pairs(pairs, vocab)

        self.assertEqual(batch.source_ids.shape, (4, 4))
        self.assertEqual(batch.target_input[0, 0], vocab.bos_id('l1'))
        self.assertEqual(list(batch.target_output[1, :3]), vocab.encode(['x4', 'x5']) + [Vocabulary.EOS_ID])
        self.assertTrue(batch.source_pad_mask[3, 1:].all())
        np.testing.assert_array_equal(batch.target_lang_ids, [1, 0, 2, 0])
        np.testing.assert_array_equal(batch.target_input[:, 1:] == 0, batch.target_output[:, 1:] == 0)

    def test_batches_respect_token_budget_and_cover_every_pair(self):
        batches = data.make_batches(self.train, self.vocab, 40)

        seen = []
        for batch in batches:
            width = max(batch.source_ids.shape[1], batch.target_input.shape[1])
            self.assertTrue(batch.size == 1 or batch.size * width <= 40)
            seen += [(pair.key, pair.sentence_id) for pair in batch.pairs]
        self.assertEqual(sorted(seen), sorted((pair.key, pair.sentence_id) for pair in self.train))

    def test_shuffled_batches_are_seeded(self):
        first = data.make_batches(self.train, self.vocab, 40, np.random.default_rng(3))
        second = data.make_batches(self.train, self.vocab, 40, np.random.default_rng(3))

        self.assertEqual([b.pairs for b in first], [b.pairs for b in second])
        self.assertEqual(sum(b.size for b in first), len(self.train))

    def test_sentence_too_long(self):
        with self.assertRaises(DataError) as context:
            data.make_batches(self.train, self.vocab, 40, max_positions=4)

        self.assertEqual(context.exception.error_dict['error'], 'sentence_too_long')

    def test_empty_sentence_rejected(self):
        with self.assertRaises(DataError):
            Batch.from_pairs([SentencePair('en', 'l1', [], ['l1_1'])], fixture_vocabulary())


class TestVocabulary(unittest.TestCase):

    def setUp(self):
        self.vocab = fixture_vocabulary()

    def test_reserved_ids(self):
        self.assertEqual(self.vocab.tokens[:6], ['<pad>', '<unk>', '</s>', '<bos_en>', '<bos_l1>', '<bos_l2>'])
        self.assertEqual(self.vocab.id('never-seen'), Vocabulary.UNK_ID)

    def test_decode_strips_special_tokens(self):
        ids = [self.vocab.bos_id('en')] + self.vocab.encode(['x1', 'x2']) + [Vocabulary.EOS_ID, 0]

        self.assertEqual(self.vocab.decode(ids), ['x1', 'x2'])
        self.assertEqual(len(self.vocab.decode(ids, strip_special=False)), 5)

    def test_extension_preserves_existing_ids(self):
        extended = self.vocab.extended(['new_1', 'x1'], ['new'])

        self.assertTrue(self.vocab.is_prefix_of(extended))
        self.assertEqual(extended.tokens[len(self.vocab):], ['<bos_new>', 'new_1'])
        self.assertEqual(extended.language_id('new'), 3)

    def test_reserved_forms_rejected_in_text(self):
        with self.assertRaises(DataError):
            Vocabulary.build(['en'], ['ok', '<bos_xx>'])

    def test_save_and_load(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / 'vocab.txt'
            self.vocab.save(path)
            loaded = Vocabulary.load(path)

        self.assertEqual(loaded.tokens, self.vocab.tokens)
        self.assertEqual(loaded.languages, self.vocab.languages)
        self.assertEqual(loaded.content_hash(), self.vocab.content_hash())

    def test_unknown_language(self):
        with self.assertRaises(DataError):
            self.vocab.language_id('fr')


class TestFiles(unittest.TestCase):

    def test_load_tsv(self):
        corpus = data.load_tsv_corpus(fixture_tsv_corpus_path(), 'en', 'l1', Split.DEV, aligned=True)

        self.assertEqual(len(corpus), 3)
        self.assertEqual(corpus.pairs[1].source, ['d', 'e'])
        self.assertEqual(corpus.pairs[2].target, ['u', 't', 's', 'r'])
        self.assertEqual([pair.sentence_id for pair in corpus], [0, 1, 2])
        self.assertIs(corpus.pairs[0].split, Split.DEV)

    def test_malformed_tsv(self):
        with self.assertRaises(DataError) as context:
            data.load_tsv_corpus(fixture_malformed_tsv_path(), 'en', 'l1')

        self.assertEqual(context.exception.error_dict['error'], 'malformed_line')
        self.assertEqual(context.exception.error_dict['line'], 2)

    def test_corpus_directory_round_trip(self):
        corpus, vocab = data.generate_synthetic_corpus(fixture_task_spec())

        with tempfile.TemporaryDirectory() as directory:
            written = data.write_corpus_directory(corpus, vocab, directory, 'en', True, {'presets': ['no_overlap']})
            loaded, loaded_vocab, meta = data.load_corpus_directory(directory)
            with open(Path(directory) / data.CORPUS_META, 'r', encoding='utf-8') as file:
                raw_meta = json.load(file)

        self.assertEqual(len(written), 4 + 6 + 6)
        self.assertEqual(meta, raw_meta)
        self.assertEqual(meta['presets'], ['no_overlap'])
        self.assertEqual(meta['vocab_hash'], vocab.content_hash())
        self.assertEqual(loaded_vocab.tokens, vocab.tokens)
        self.assertEqual(len(loaded), len(corpus))
        for split in Split:
            original = corpus.filter(split=split).by_direction()
            restored = loaded.filter(split=split).by_direction()
            self.assertEqual(list(original), list(restored))
            for key in original:
                self.assertEqual([(p.source, p.target, p.direction) for p in original[key]],
                                 [(p.source, p.target, p.direction) for p in restored[key]])

    def test_missing_corpus_directory(self):
        with tempfile.TemporaryDirectory() as directory:
            with self.assertRaises(DataError) as context:
                data.load_corpus_directory(directory)

        self.assertEqual(context.exception.error_dict['error'], 'missing_corpus')


if __name__ == '__main__':
    unittest.main()
