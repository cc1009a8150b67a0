"""
Checkpoint archives.

A checkpoint is a directory `ckpt-epochNNN/` holding `manifest.json` (model
config, vocabulary hash, one record per tensor with name, shape, dtype, byte
offset and length) and `weights.bin`, the tensors as one little-endian
float32 blob. Optimizer moments, when saved, go to `optimizer.bin` with their
own records in the same manifest.
"""

import json
import logging
import re
import shutil
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from zeroshotnmt.model import TransformerModel
from zeroshotnmt.models.config import ModelConfig
from zeroshotnmt.models.error import CheckpointError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DTYPE = '<f4'
MANIFEST = 'manifest.json'
WEIGHTS = 'weights.bin'
OPTIMIZER = 'optimizer.bin'
INCOMPLETE_SUFFIX = '.incomplete'

_NAME_PATTERN = re.compile(r'^ckpt-epoch(\d{3,})$')


def checkpoint_name(epoch: int) -> str:
    return f'ckpt-epoch{epoch:03d}'


def _pack(tensors: Mapping[str, np.ndarray], path: Path) -> List[dict]:
    records = []
    offset = 0
    with open(path, 'wb') as file:
        for name, value in tensors.items():
            blob = np.ascontiguousarray(value, dtype=DTYPE).tobytes()
            file.write(blob)
            records.append({'name': name, 'shape': list(np.shape(value)), 'dtype': DTYPE,
                            'offset': offset, 'nbytes': len(blob)})
            offset += len(blob)
    return records


def _unpack(records: List[dict], path: Path) -> 'OrderedDict[str, np.ndarray]':
    blob = path.read_bytes()
    tensors: 'OrderedDict[str, np.ndarray]' = OrderedDict()
    for record in records:
        end = record['offset'] + record['nbytes']
        if end > len(blob) or record['dtype'] != DTYPE:
            raise CheckpointError(error_dict={'error': 'corrupt_checkpoint', 'path': str(path),
                                              'tensor': record['name']})
        count = int(np.prod(record['shape'])) if record['shape'] else 1
        value = np.frombuffer(blob, dtype=DTYPE, count=count, offset=record['offset'])
        tensors[record['name']] = value.reshape(record['shape']).astype(np.float32)
    return tensors


def save_checkpoint(directory, model: TransformerModel, vocab_hash: str, metadata: Optional[dict] = None,
                    optimizer: Optional[Tuple[int, Mapping[str, np.ndarray], Mapping[str, np.ndarray]]] = None) -> Path:
    """
    Write the archive into `<directory>.incomplete` and rename it once complete.

    `optimizer` is `(step, first_moments, second_moments)`.
    """

    directory = Path(directory)
    staging = directory.with_name(directory.name + INCOMPLETE_SUFFIX)
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)

    manifest = {
        'format': FORMAT_VERSION,
        'config': model.config.to_dict(),
        'vocab_hash': vocab_hash,
        'metadata': dict(metadata or {}),
        'tensors': _pack(model.state_dict(), staging / WEIGHTS),
    }
    if optimizer is not None:
        step, first, second = optimizer
        moments: 'OrderedDict[str, np.ndarray]' = OrderedDict()
        for name in model.params:
            moments[f'm/{name}'] = first[name]
            moments[f'v/{name}'] = second[name]
        manifest['optimizer'] = {'step': int(step), 'tensors': _pack(moments, staging / OPTIMIZER)}

    with open(staging / MANIFEST, 'w', encoding='utf-8') as file:
        json.dump(manifest, file, indent=2, sort_keys=True)

    if directory.exists():
        shutil.rmtree(directory)
    staging.rename(directory)
    logger.info("wrote checkpoint %s", directory)
    return directory


def read_manifest(directory) -> dict:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise CheckpointError.missing(directory)
    with open(path, 'r', encoding='utf-8') as file:
        manifest = json.load(file)
    if manifest.get('format') != FORMAT_VERSION:
        raise CheckpointError(error_dict={'error': 'unsupported_format', 'path': str(directory),
                                          'format': manifest.get('format')})
    return manifest


def load_checkpoint(directory, expected_vocab_hash: Optional[str] = None) -> Tuple[TransformerModel, dict]:
    """
    Rebuild the model stored in an archive; reject archives of another vocabulary.
    """

    directory = Path(directory)
    manifest = read_manifest(directory)
    if expected_vocab_hash is not None and manifest['vocab_hash'] != expected_vocab_hash:
        raise CheckpointError.incompatible(directory, expected_vocab_hash, manifest['vocab_hash'])
    config = ModelConfig.from_dict(manifest['config'])
    state = _unpack(manifest['tensors'], directory / WEIGHTS)
    return TransformerModel.from_state(config, state), manifest


def load_optimizer_moments(directory) -> Optional[Tuple[int, Dict[str, np.ndarray], Dict[str, np.ndarray]]]:
    """
    `(step, first_moments, second_moments)` or None when the archive has none.
    """

    directory = Path(directory)
    manifest = read_manifest(directory)
    if 'optimizer' not in manifest:
        return None
    moments = _unpack(manifest['optimizer']['tensors'], directory / OPTIMIZER)
    first = {name[2:]: value for name, value in moments.items() if name.startswith('m/')}
    second = {name[2:]: value for name, value in moments.items() if name.startswith('v/')}
    return manifest['optimizer']['step'], first, second


def list_checkpoints(run_directory) -> List[Tuple[int, Path]]:
    """
    Completed `ckpt-epochNNN` archives under a run directory, by epoch.
    """

    run_directory = Path(run_directory)
    if not run_directory.is_dir():
        return []
    found = []
    for child in run_directory.iterdir():
        match = _NAME_PATTERN.match(child.name)
        if match and (child / MANIFEST).is_file():
            found.append((int(match.group(1)), child))
    return sorted(found)


def latest_checkpoint(run_directory) -> Optional[Path]:
    found = list_checkpoints(run_directory)
    return found[-1][1] if found else None
