"""
Command-line entry point: `zeroshotnmt <subcommand> [flags]`.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, TextIO

from dotenv import load_dotenv

from zeroshotnmt import __version__
from zeroshotnmt.analysis import LABEL_TYPES
from zeroshotnmt.logs import configure_logging
from zeroshotnmt.models.config import MIDDLE_LAYER, DropoutMode, EvaluationMode, ExperimentConfig
from zeroshotnmt.models.error import ZeroShotNMTError
from zeroshotnmt.runner import PRESETS, ExperimentRunner

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='zeroshotnmt',
                                     description='Zero-shot multilingual translation experiments.')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='experiment config (JSON); defaults apply when omitted')
    common.add_argument('--out', help='run directory (overrides output_dir)')
    common.add_argument('--seed', type=int, help='single seed for every random stream')
    common.add_argument('--log-level', help='DEBUG, INFO, WARNING... (default: $ZEROSHOTNMT_LOG_LEVEL or INFO)')

    task = argparse.ArgumentParser(add_help=False)
    task.add_argument('--languages', type=int, help='number of synthetic languages, pivot included')
    task.add_argument('--multiway', dest='multiway', action='store_true', default=None,
                      help='one sentence pool shared by all training directions')
    task.add_argument('--disjoint', dest='multiway', action='store_false',
                      help='a separate sentence pool per training direction')

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument('--removal-layer', nargs='?', const=MIDDLE_LAYER, type=_removal_layer,
                       help='encoder layer without the attention residual (0 disables, no value picks the middle)')
    model.add_argument('--position-query', dest='position_query', action='store_true', default=None,
                       help='project attention queries from positional encodings at the removal layer')
    model.add_argument('--dropout-mode', choices=['element', 'variational'])

    commands = parser.add_subparsers(dest='command', metavar='subcommand')
    commands.required = True

    gen = commands.add_parser('gen-data', parents=[common, task], help='write the synthetic corpus')
    gen.add_argument('--preset', action='append', choices=PRESETS, default=[])
    gen.add_argument('--low-resource-pairs', type=int, default=500)

    train = commands.add_parser('train', parents=[common, task, model], help='train and average checkpoints')
    train.add_argument('--resume', action='store_true', help='continue from the newest checkpoint')

    translate = commands.add_parser('translate', parents=[common], help='decode stdin or a file')
    translate.add_argument('--src-lang', required=True)
    translate.add_argument('--tgt-lang', required=True)
    translate.add_argument('--pivot', help='translate through this language')
    translate.add_argument('--oracle', action='store_true', help='use the rule-based reference translator')
    translate.add_argument('--input', help='one whitespace-tokenised sentence per line (default: stdin)')

    evaluate = commands.add_parser('evaluate', parents=[common], help='BLEU and off-target table')
    evaluate.add_argument('--mode', choices=[mode.value for mode in EvaluationMode])

    probe = commands.add_parser('probe', parents=[common], help='linear probes per encoder layer')
    probe.add_argument('--label-type', action='append', choices=LABEL_TYPES)
    probe.add_argument('--layer', action='append', help='0..L or final (default: all)')
    probe.add_argument('--dump-attention', action='store_true', help='also write raw attention weights')

    svcca = commands.add_parser('svcca', parents=[common], help='cross-language SVCCA per encoder layer')
    svcca.add_argument('--no-language-probe', action='store_true')

    adapt = commands.add_parser('adapt', parents=[common], help='add a language to a trained model')
    adapt.add_argument('--new-lang', default='new')
    adapt.add_argument('--rule', help='word-order rule of the new language')
    adapt.add_argument('--fraction', type=float, default=0.1)
    adapt.add_argument('--family')

    commands.add_parser('report', parents=[common], help='summarise a run directory')
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """
    Config file (or defaults) with command-line overrides applied.

    Without `--config`, a run directory's own `config.resolved.json` is used
    when present, so later subcommands see the settings the run was trained with.
    """

    path = args.config
    if path is None and args.out and (Path(args.out) / ExperimentConfig.RESOLVED_NAME).is_file():
        path = Path(args.out) / ExperimentConfig.RESOLVED_NAME
    payload = ExperimentConfig.from_file(path).to_dict() if path else ExperimentConfig().to_dict()
    if args.out:
        payload['output_dir'] = args.out
    if args.seed is not None:
        payload['seed'] = args.seed
        payload['task']['seed'] = payload['training']['seed'] = args.seed

    languages = getattr(args, 'languages', None)
    if languages is not None:
        payload['task'].update(num_languages=languages, language_codes=None, reordering_rules=None, families=None)
    if getattr(args, 'multiway', None) is not None:
        payload['task']['multiway'] = args.multiway

    if getattr(args, 'removal_layer', None) is not None:
        payload['model']['residual_removal_layer'] = args.removal_layer or None
    if getattr(args, 'position_query', None):
        payload['model']['position_query_enabled'] = True
    if getattr(args, 'dropout_mode', None):
        payload['model']['dropout_mode'] = DropoutMode(args.dropout_mode).value
    return ExperimentConfig.from_dict(payload)


def _removal_layer(value: str):
    if value == MIDDLE_LAYER:
        return value
    try:
        return int(value)
    except ValueError as error:
        raise argparse.ArgumentTypeError(f"expected a layer number or '{MIDDLE_LAYER}', got {value!r}") from error


def _read_sentences(path: Optional[str], stdin: TextIO) -> List[List[str]]:
    if path:
        with open(path, 'r', encoding='utf-8') as file:
            lines = file.readlines()
    else:
        lines = stdin.readlines()
    return [line.split() for line in lines if line.strip()]


def dispatch(args: argparse.Namespace, stdin: TextIO, stdout: TextIO) -> None:
    runner = ExperimentRunner(resolve_config(args))
    command = args.command
    if command == 'gen-data':
        written = runner.gen_data(args.preset, args.low_resource_pairs)
        logger.info("wrote %d files under %s", len(written), runner.data_dir)
    elif command == 'train':
        runner.train(resume=args.resume)
    elif command == 'translate':
        sentences = _read_sentences(args.input, stdin)
        for hypothesis in runner.translate(sentences, args.src_lang, args.tgt_lang, args.pivot, args.oracle):
            stdout.write(' '.join(hypothesis) + '\n')
    elif command == 'evaluate':
        stdout.write(runner.evaluate(args.mode).to_tsv())
    elif command == 'probe':
        report = runner.probe(args.label_type or LABEL_TYPES, args.layer, args.dump_attention)
        stdout.write(report.to_tsv())
    elif command == 'svcca':
        stdout.write(runner.svcca(language_probe=not args.no_language_probe).to_tsv())
    elif command == 'adapt':
        stdout.write(runner.adapt(args.new_lang, args.rule, args.fraction, args.family).to_tsv())
    elif command == 'report':
        runner.report()


def run(argv: Optional[Sequence[str]] = None, stdin: TextIO = None, stdout: TextIO = None) -> int:
    """
    Exit code: 0 on success, 1 on a toolkit error, 2 on a usage error.
    """

    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return int(exit_.code or 0)

    try:
        configure_logging(args.log_level)
    except ValueError as error:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f'zeroshotnmt: error: {error}\n')
        return 2

    try:
        dispatch(args, stdin or sys.stdin, stdout or sys.stdout)
    except ZeroShotNMTError as error:
        logger.error("%s failed: %s", args.command, error)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == '__main__':
    main()
