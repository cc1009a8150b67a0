"""
Optimisation: Noam schedule, Adam, epoch loop with dev-loss checkpoint
selection and parameter averaging, vocabulary expansion and new-language
adaptation.
"""

import logging
import math
import shutil
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from zeroshotnmt import checkpoint
from zeroshotnmt.data import CorpusSplits, make_batches
from zeroshotnmt.model import TransformerModel
from zeroshotnmt.models.config import DevSelection, TrainConfig
from zeroshotnmt.models.corpus import Direction, ParallelCorpus, Split, Vocabulary
from zeroshotnmt.models.error import DataError, TrainingError
from zeroshotnmt.models.reports import EpochRecord, TrainingHistory
from zeroshotnmt.streams import RandomStreams
from zeroshotnmt.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

HISTORY_FILE = 'history.json'
FINAL_MODEL = 'model'


def noam_lr(step: int, d_model: int, warmup: int) -> float:
    """
    d_model^-0.5 * min(step^-0.5, step * warmup^-1.5); peaks at step == warmup.
    """

    if step < 1:
        raise TrainingError.invalid_value('step', step, 'the schedule starts at step 1')
    if warmup < 1:
        raise TrainingError.invalid_value('warmup', warmup, 'must be at least 1')
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class OptimizerState:
    """
    Adam moment buffers and step counter.
    """

    step: int
    first: Dict[str, np.ndarray]
    second: Dict[str, np.ndarray]
    beta1: float
    beta2: float
    eps: float

    def __init__(self, first: Dict[str, np.ndarray], second: Dict[str, np.ndarray], step: int = 0,
                 beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9) -> None:
        self.first = first
        self.second = second
        self.step = step
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    @classmethod
    def fresh(cls, params: Mapping[str, Tensor], beta1: float = 0.9, beta2: float = 0.98,
              eps: float = 1e-9) -> 'OptimizerState':
        """
        Factory method with zeroed moments.
        """

        return cls({name: np.zeros_like(p.data) for name, p in params.items()},
                   {name: np.zeros_like(p.data) for name, p in params.items()},
                   0, beta1, beta2, eps)

    @classmethod
    def for_config(cls, params: Mapping[str, Tensor], config: TrainConfig) -> 'OptimizerState':
        return cls.fresh(params, config.adam_beta1, config.adam_beta2, config.adam_eps)

    def as_archive(self) -> Tuple[int, Dict[str, np.ndarray], Dict[str, np.ndarray]]:
        return self.step, self.first, self.second


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState,
              lr: float) -> None:
    """
    One bias-corrected Adam update, in place on the parameters and the state.
    """

    if lr <= 0:
        raise TrainingError.invalid_value('lr', lr, 'must be positive')
    bad = [name for name, grad in grads.items() if not np.all(np.isfinite(grad))]
    if bad:
        raise TrainingError.non_finite('gradient', bad, state.step + 1)

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise TrainingError(error_dict={'error': 'shape_mismatch', 'parameter': name,
                                            'shapes': [list(param.shape), list(grad.shape)]})
        first = state.first[name] = state.beta1 * state.first[name] + (1.0 - state.beta1) * grad
        second = state.second[name] = state.beta2 * state.second[name] + (1.0 - state.beta2) * grad * grad
        update = lr * (first / correction1) / (np.sqrt(second / correction2) + state.eps)
        param.data = (param.data - update).astype(param.dtype, copy=False)


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """
    Rescale all gradients together when their global L2 norm exceeds `max_norm`.
    """

    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / (norm + 1e-6)
    return {name: (g * scale).astype(g.dtype, copy=False) for name, g in grads.items()}, norm


def average_parameters(states: Sequence[Mapping[str, np.ndarray]]) -> 'OrderedDict[str, np.ndarray]':
    """
    Element-wise mean of parameter sets; a single set is returned as an exact copy.
    """

    if not states:
        raise TrainingError(error_dict={'error': 'nothing_to_average'})
    if len(states) == 1:
        return OrderedDict((name, np.array(value, copy=True)) for name, value in states[0].items())
    averaged: 'OrderedDict[str, np.ndarray]' = OrderedDict()
    for name, value in states[0].items():
        total = np.zeros(value.shape, dtype=np.float64)
        for state in states:
            total += state[name]
        averaged[name] = (total / len(states)).astype(value.dtype)
    return averaged


def dev_losses(model: TransformerModel, corpus: ParallelCorpus, vocab: Vocabulary,
               batch_size_tokens: int) -> 'OrderedDict[str, float]':
    """
    Token-weighted mean loss per direction, keyed `src-tgt`, without dropout.
    """

    losses: 'OrderedDict[str, float]' = OrderedDict()
    with no_grad():
        for (source, target), part in corpus.by_direction().items():
            total, tokens = 0.0, 0
            for batch in make_batches(part, vocab, batch_size_tokens, None, model.config.max_positions):
                count = batch.target_token_count() + batch.size
                total += model.forward_loss(batch).item() * count
                tokens += count
            losses[f'{source}-{target}'] = total / tokens
    return losses


class CheckpointPool:
    """
    Keeps the k best epochs by dev loss, on disk under `run_dir` when given,
    otherwise in memory. On disk the newest epoch also survives for resuming.
    """

    def __init__(self, keep_k: int, vocab_hash: str, run_dir: Optional[Path] = None) -> None:
        self.keep_k = keep_k
        self.vocab_hash = vocab_hash
        self.run_dir = run_dir
        self.scores: Dict[int, float] = {}
        self.states: Dict[int, 'OrderedDict[str, np.ndarray]'] = {}

    def best_epochs(self) -> List[int]:
        return sorted(self.scores, key=lambda epoch: (self.scores[epoch], epoch))[:self.keep_k]

    def offer(self, epoch: int, dev_loss: float, model: TransformerModel, optimizer: OptimizerState) -> Optional[str]:
        self.scores[epoch] = dev_loss
        best = set(self.best_epochs())
        if self.run_dir is None:
            if epoch in best:
                self.states[epoch] = model.state_dict()
            self.states = {e: s for e, s in self.states.items() if e in best}
            return None

        name = checkpoint.checkpoint_name(epoch)
        checkpoint.save_checkpoint(self.run_dir / name, model, self.vocab_hash,
                                   {'epoch': epoch, 'dev_loss': dev_loss}, optimizer.as_archive())
        for old_epoch, path in checkpoint.list_checkpoints(self.run_dir):
            if old_epoch not in best and old_epoch != epoch:
                shutil.rmtree(path)
        return name

    def best_states(self) -> List['OrderedDict[str, np.ndarray]']:
        epochs = self.best_epochs()
        if self.run_dir is None:
            return [self.states[epoch] for epoch in epochs]
        return [checkpoint.load_checkpoint(self.run_dir / checkpoint.checkpoint_name(epoch))[0].state_dict()
                for epoch in epochs]


class Trainer:
    """
    Epoch loop for one model. Owns the parameters while running.
    """

    model: TransformerModel
    vocab: Vocabulary
    config: TrainConfig
    run_dir: Optional[Path]

    def __init__(self, model: TransformerModel, vocab: Vocabulary, config: TrainConfig,
                 run_dir=None, optimizer: Optional[OptimizerState] = None) -> None:
        if model.config.vocab_size != len(vocab):
            raise TrainingError(error_dict={'error': 'vocabulary_size_mismatch',
                                            'model': model.config.vocab_size, 'vocabulary': len(vocab)})
        self.model = model
        self.vocab = vocab
        self.config = config
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.streams = RandomStreams(config.seed)
        self.optimizer = optimizer or OptimizerState.for_config(model.params, config)
        self.history = TrainingHistory()

    # Steps #

    def learning_rate(self, step: int) -> float:
        return self.config.lr_scale * noam_lr(step, self.model.config.d_model, self.config.warmup_steps)

    def train_step(self, batch) -> float:
        step = self.optimizer.step + 1
        self.model.zero_grad()
        loss = self.model.forward_loss(batch, self.streams.stream('dropout', step))
        if not math.isfinite(loss.item()):
            raise TrainingError.non_finite('train_loss', [], step)
        backward(loss)
        grads, _ = clip_grad_norm(self.model.gradients(), self.config.grad_clip_norm)
        adam_step(self.model.params, grads, self.optimizer, self.learning_rate(step))
        return loss.item()

    # Loop #

    def _dev_corpus(self, splits: CorpusSplits) -> ParallelCorpus:
        if self.config.dev_selection is DevSelection.INCLUDE_ZERO_SHOT:
            return splits.dev
        return splits.dev.filter(direction=Direction.SUPERVISED)

    def _resume(self, pool: CheckpointPool) -> int:
        latest = checkpoint.latest_checkpoint(self.run_dir)
        if latest is None:
            logger.info("nothing to resume in %s, starting fresh", self.run_dir)
            return 1
        restored, manifest = checkpoint.load_checkpoint(latest, self.vocab.content_hash())
        self.model.load_state(restored.state_dict())
        moments = checkpoint.load_optimizer_moments(latest)
        if moments is not None:
            step, first, second = moments
            self.optimizer = OptimizerState(dict(first), dict(second), step, self.config.adam_beta1,
                                            self.config.adam_beta2, self.config.adam_eps)
        epoch = manifest['metadata']['epoch']
        history_path = self.run_dir / HISTORY_FILE
        if history_path.is_file():
            previous = TrainingHistory.load(history_path)
            self.history = TrainingHistory(r for r in previous.records if r.epoch <= epoch)
        for record in self.history.records:
            pool.scores[record.epoch] = record.dev_loss
        pool.scores = {e: s for e, s in pool.scores.items()
                       if e in {found for found, _ in checkpoint.list_checkpoints(self.run_dir)}}
        logger.info("resuming after epoch %d (step %d)", epoch, self.optimizer.step)
        return epoch + 1

    def fit(self, splits: CorpusSplits, max_epochs: Optional[int] = None,
            resume: bool = False) -> Tuple[TransformerModel, TrainingHistory]:
        """
        Train, select the k best epochs by mean dev loss over directions, and
        load their parameter average into the model.
        """

        max_epochs = max_epochs or self.config.max_epochs
        dev = self._dev_corpus(splits)
        if len(splits.train) == 0 or len(dev) == 0:
            raise DataError(error_dict={'error': 'empty_split', 'train': len(splits.train), 'dev': len(dev)})
        leaked = [pair.key for pair in splits.train if splits.pivot not in pair.key]
        if leaked:
            raise DataError(error_dict={'error': 'zero_shot_pair_in_training', 'directions': sorted(set(leaked))})

        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        pool = CheckpointPool(self.config.checkpoint_keep_k, self.vocab.content_hash(), self.run_dir)
        first_epoch = self._resume(pool) if resume and self.run_dir is not None else 1

        for epoch in range(first_epoch, max_epochs + 1):
            batches = make_batches(splits.train, self.vocab, self.config.batch_size_tokens,
                                   self.streams.stream('batches', epoch), self.model.config.max_positions)
            total, seen = 0.0, 0
            for batch in batches:
                loss = self.train_step(batch)
                total += loss
                seen += 1
                if self.config.log_every and self.optimizer.step % self.config.log_every == 0:
                    logger.debug("step %d loss %.4f lr %.3e", self.optimizer.step, loss,
                                 self.learning_rate(self.optimizer.step))
                if self.config.max_steps is not None and self.optimizer.step >= self.config.max_steps:
                    break

            losses = dev_losses(self.model, dev, self.vocab, self.config.batch_size_tokens)
            broken = [name for name, value in losses.items() if not math.isfinite(value)]
            if broken:
                raise TrainingError.non_finite('dev_loss', broken, self.optimizer.step)
            dev_loss = float(np.mean(list(losses.values())))
            name = pool.offer(epoch, dev_loss, self.model, self.optimizer)
            record = EpochRecord(epoch, self.optimizer.step, total / max(seen, 1), dev_loss, losses,
                                 self.learning_rate(max(self.optimizer.step, 1)), name)
            self.history.append(record)
            logger.info("epoch %d step %d train %.4f dev %.4f lr %.3e", epoch, record.step,
                        record.train_loss, dev_loss, record.lr)
            self._save_history()

            if self.config.max_steps is not None and self.optimizer.step >= self.config.max_steps:
                break

        selected = pool.best_epochs()
        self.model.load_state(average_parameters(pool.best_states()))
        self.history.selected = [checkpoint.checkpoint_name(epoch) for epoch in selected]
        logger.info("averaged %d best epochs: %s", len(selected), ', '.join(map(str, selected)))
        if self.run_dir is not None:
            self._save_history()
            checkpoint.save_checkpoint(self.run_dir / FINAL_MODEL, self.model, self.vocab.content_hash(),
                                       {'averaged_epochs': selected})
        return self.model, self.history

    def _save_history(self) -> None:
        if self.run_dir is not None:
            self.history.save(self.run_dir / HISTORY_FILE)


def train(model: TransformerModel, splits: CorpusSplits, vocab: Vocabulary, config: TrainConfig,
          run_dir=None, resume: bool = False) -> Tuple[TransformerModel, TrainingHistory]:
    return Trainer(model, vocab, config, run_dir).fit(splits, resume=resume)


# Adaptation #

def expand_vocabulary(model: TransformerModel, old_vocab: Vocabulary, new_vocab: Vocabulary,
                      noise_scale: float = 0.01, seed: int = 1) -> TransformerModel:
    """
    Grow the token and language tables. Existing rows are copied; every new
    row is the mean of the existing rows plus Gaussian noise.
    """

    if not old_vocab.is_prefix_of(new_vocab):
        raise TrainingError(error_dict={'error': 'vocabulary_remapped',
                                        'message': 'existing token ids must keep their meaning'})
    if model.config.vocab_size != len(old_vocab):
        raise TrainingError(error_dict={'error': 'vocabulary_size_mismatch',
                                        'model': model.config.vocab_size, 'vocabulary': len(old_vocab)})

    streams = RandomStreams(seed)
    state = model.state_dict()

    def grown(table: np.ndarray, rows: int, stream: str) -> np.ndarray:
        if rows == 0:
            return table
        mean = table.astype(np.float64).mean(axis=0)
        noise = streams.stream(stream).normal(0.0, noise_scale, size=(rows, table.shape[1])) \
            if noise_scale > 0 else np.zeros((rows, table.shape[1]))
        return np.concatenate([table, (mean + noise).astype(table.dtype)], axis=0)

    added_tokens = len(new_vocab) - len(old_vocab)
    added_languages = len(new_vocab.languages) - len(old_vocab.languages)
    state['embed.tokens'] = grown(state['embed.tokens'], added_tokens, 'expand/tokens')
    state['embed.languages'] = grown(state['embed.languages'], added_languages, 'expand/languages')

    config = model.config.replace(vocab_size=len(new_vocab), num_languages=len(new_vocab.languages))
    logger.info("expanded vocabulary by %d tokens and %d languages", added_tokens, added_languages)
    return TransformerModel.from_state(config, state)


def adapt_to_new_language(model: TransformerModel, original: CorpusSplits, new_language: ParallelCorpus,
                          vocab: Vocabulary, config: TrainConfig, run_dir=None,
                          optimizer: Optional[OptimizerState] = None) -> Tuple[TransformerModel, TrainingHistory]:
    """
    Fine-tune on the original supervised data plus the new-language pivot data.

    Batches mix both sources in proportion to their sizes. The optimizer
    starts fresh unless `config.reset_optimizer` is off and a state is given.
    """

    pivot = original.pivot
    new_train = new_language.filter(split=Split.TRAIN)
    offending = sorted({pair.key for pair in new_train if pivot not in pair.key})
    if offending:
        raise DataError(error_dict={'error': 'non_pivot_adaptation_pair', 'pivot': pivot,
                                    'directions': offending})

    new_dev = new_language.filter(split=Split.DEV, direction=Direction.SUPERVISED)
    new_dev = ParallelCorpus(pair for pair in new_dev if pivot in pair.key)
    splits = CorpusSplits(pivot, original.train + new_train, original.dev + new_dev,
                          original.test + new_language.filter(split=Split.TEST))

    carried = None if config.reset_optimizer else optimizer
    if carried is not None:
        for name, param in model.params.items():
            if carried.first[name].shape != param.shape:
                carried.first[name] = _padded(carried.first[name], param.shape)
                carried.second[name] = _padded(carried.second[name], param.shape)
    logger.info("adapting on %d original and %d new-language pairs", len(original.train), len(new_train))
    trainer = Trainer(model, vocab, config, run_dir, carried)
    return trainer.fit(splits, max_epochs=config.adaptation_epochs)


def _padded(buffer: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    grown = np.zeros(shape, dtype=buffer.dtype)
    grown[:buffer.shape[0]] = buffer
    return grown
