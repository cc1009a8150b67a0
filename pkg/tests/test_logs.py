import io
import logging
import os
import unittest
from unittest import mock

from rich.console import Console
from rich.logging import RichHandler

from zeroshotnmt import logs


class TestLogs(unittest.TestCase):

    def setUp(self):
        self.logger = logging.getLogger('zeroshotnmt')
        self.saved = (list(self.logger.handlers), self.logger.level, self.logger.propagate)

    def tearDown(self):
        handlers, level, propagate = self.saved
        self.logger.handlers = handlers
        self.logger.setLevel(level)
        self.logger.propagate = propagate

    def test_level_resolution(self):
        self.assertEqual(logs.resolve_level('debug'), logging.DEBUG)
        self.assertEqual(logs.resolve_level(logging.WARNING), logging.WARNING)
        with mock.patch.dict(os.environ, {logs.LEVEL_VARIABLE: 'ERROR'}):
            self.assertEqual(logs.resolve_level(), logging.ERROR)
        with mock.patch.dict(os.environ, {}, clear=True):
            self.assertEqual(logs.resolve_level(), logging.INFO)

    def test_unknown_level(self):
        with self.assertRaises(ValueError):
            logs.resolve_level('LOUD')

    def test_single_rich_handler(self):
        output = io.StringIO()
        logs.configure_logging('INFO', Console(file=output, width=200))
        logs.configure_logging('INFO', Console(file=output, width=200))

        logging.getLogger('zeroshotnmt.training').info("epoch %d done", 3)

        handlers = [handler for handler in self.logger.handlers if isinstance(handler, RichHandler)]
        self.assertEqual(len(handlers), 1)
        self.assertFalse(self.logger.propagate)
        self.assertIn('epoch 3 done', output.getvalue())

    def test_level_filters_records(self):
        output = io.StringIO()
        logs.configure_logging('WARNING', Console(file=output, width=200))

        logging.getLogger('zeroshotnmt.data').info("hidden")

        self.assertEqual(output.getvalue(), '')


if __name__ == '__main__':
    unittest.main()
