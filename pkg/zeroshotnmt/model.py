"""
Pre-norm Transformer encoder-decoder with target-language conditioning.

One encoder layer (`ModelConfig.residual_removal_layer`) may drop the
residual path around its self-attention sublayer and, optionally, take its
attention queries from a fixed sinusoidal basis instead of the layer input.

Activations are batched `[batch, time, d_model]`; the functions also accept
unbatched `[time, d_model]` inputs where that is natural.
"""

import functools
import logging
import math
from collections import OrderedDict
from enum import Enum
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from zeroshotnmt import tensor as T
from zeroshotnmt.models.config import ModelConfig
from zeroshotnmt.models.corpus import Batch, Vocabulary
from zeroshotnmt.models.error import ConfigError, DataError, TensorError
from zeroshotnmt.streams import RandomStreams
from zeroshotnmt.tensor import Tensor

logger = logging.getLogger(__name__)

Params = Mapping[str, Tensor]


class AttentionVariant(Enum):
    """
    Enum representing where attention queries are projected from.
    """

    STANDARD = "standard"
    POSITIONAL_QUERY = "positional_query"


# Positional encodings #

@functools.lru_cache(maxsize=64)
def _sinusoidal_table(num_positions: int, d: int, wavelength: float) -> np.ndarray:
    positions = np.arange(num_positions, dtype=np.float64)[:, None]
    exponents = np.arange(0, d, 2, dtype=np.float64) / d
    angles = positions / np.power(float(wavelength), exponents)[None, :]
    table = np.empty((num_positions, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    table = table.astype(np.float32)
    table.setflags(write=False)
    return table


def sinusoidal_encoding(num_positions: int, d: int, wavelength: float = 10000.0) -> Tensor:
    """
    Position i, dim 2j -> sin(i / wavelength^(2j/d)); dim 2j+1 -> cos(same).
    """

    if d <= 0 or d % 2:
        raise TensorError.invalid_value('d', d, 'sinusoidal encodings need an even, positive width')
    if wavelength <= 0:
        raise TensorError.invalid_value('wavelength', wavelength, 'must be positive')
    if num_positions < 0:
        raise TensorError.invalid_value('num_positions', num_positions, 'must be non-negative')
    return Tensor(_sinusoidal_table(int(num_positions), int(d), float(wavelength)))


# Masks #

def padding_mask(pad_mask: np.ndarray) -> np.ndarray:
    """
    `[batch, keys]` pad flags -> `[batch, 1, 1, keys]` forbidden-key mask.
    """

    return np.asarray(pad_mask, dtype=bool)[:, None, None, :]


def causal_mask(length: int) -> np.ndarray:
    """
    `[1, 1, length, length]`; True above the diagonal (future keys).
    """

    return np.triu(np.ones((length, length), dtype=bool), k=1)[None, None, :, :]


# Layers #

def linear(x: Tensor, params: Params, prefix: str) -> Tensor:
    return T.matmul(x, params[f'{prefix}.weight']) + params[f'{prefix}.bias']


def _drop(x: Tensor, config: ModelConfig, rng: Optional[np.random.Generator]) -> Tensor:
    return T.dropout(x, config.dropout_rate, config.dropout_mode, rng, training=rng is not None)


def _norm(x: Tensor, params: Params, prefix: str) -> Tensor:
    return T.layer_norm(x, params[f'{prefix}.gain'], params[f'{prefix}.bias'])


def feed_forward(x: Tensor, params: Params, prefix: str) -> Tensor:
    return linear(T.relu(linear(x, params, f'{prefix}.in')), params, f'{prefix}.out')


def multi_head_attention(query_source: Tensor,
                         key_value_source: Tensor,
                         mask: Optional[np.ndarray],
                         params: Params,
                         prefix: str,
                         num_heads: int,
                         variant=AttentionVariant.STANDARD,
                         query_wavelength: float = 100.0) -> Tuple[Tensor, np.ndarray]:
    """
    Scaled dot-product attention over `num_heads` heads.

    `mask` is boolean and broadcastable to `[batch, heads, Tq, Tk]`; True marks
    a forbidden key. Under the positional-query variant Q is projected from
    `sinusoidal_encoding(Tq, d, query_wavelength)` and `query_source` only
    contributes its length.

    Returns the output-projected context and the attention weights
    `[batch, heads, Tq, Tk]` (`[heads, Tq, Tk]` for unbatched input).
    """

    variant = AttentionVariant(variant)
    unbatched = query_source.ndim == 2
    if unbatched:
        query_source = T.reshape(query_source, (1,) + query_source.shape)
        key_value_source = T.reshape(key_value_source, (1,) + key_value_source.shape)

    batch, tq, d = query_source.shape
    tk = key_value_source.shape[1]
    if tq == 0 or tk == 0:
        raise TensorError(error_dict={'error': 'empty_sequence', 'op': 'attention',
                                      'query_length': tq, 'key_length': tk})
    if key_value_source.shape[-1] != d:
        raise TensorError.shape_mismatch('attention', query_source.shape, key_value_source.shape)
    d_head = d // num_heads

    if variant is AttentionVariant.POSITIONAL_QUERY:
        basis = sinusoidal_encoding(tq, d, query_wavelength)
        queries = T.reshape(linear(basis, params, f'{prefix}.q'), (1, tq, num_heads, d_head))
    else:
        queries = T.reshape(linear(query_source, params, f'{prefix}.q'), (batch, tq, num_heads, d_head))
    keys = T.reshape(linear(key_value_source, params, f'{prefix}.k'), (batch, tk, num_heads, d_head))
    values = T.reshape(linear(key_value_source, params, f'{prefix}.v'), (batch, tk, num_heads, d_head))

    scores = T.matmul(T.transpose(queries, (0, 2, 1, 3)), T.transpose(keys, (0, 2, 3, 1)))
    scores = scores * (1.0 / math.sqrt(d_head))
    if mask is not None:
        scores = T.masked_fill(scores, mask, -np.inf)
    weights = T.softmax(scores, axis=-1)

    context = T.matmul(weights, T.transpose(values, (0, 2, 1, 3)))
    context = T.reshape(T.transpose(context, (0, 2, 1, 3)), (batch, tq, d))
    output = linear(context, params, f'{prefix}.o')

    if unbatched:
        return T.reshape(output, (tq, d)), weights.data[0]
    return output, weights.data


def encoder_layer_forward(h_prev: Tensor,
                          layer_index: int,
                          config: ModelConfig,
                          params: Params,
                          rng: Optional[np.random.Generator] = None,
                          pad_mask: Optional[np.ndarray] = None) -> Tuple[Tensor, np.ndarray]:
    """
    One pre-norm encoder layer (1-based `layer_index`).

    Standard: a = h + Drop(MHA(LN(h))); out = a + Drop(FF(LN(a))).
    Residual-removal layer: a = Drop(MHA(LN(h))), the FF sublayer keeps its residual.
    `rng=None` means inference (no dropout).
    """

    if not 1 <= layer_index <= config.num_encoder_layers:
        raise TensorError.invalid_value('layer_index', layer_index,
                                        f'must lie in [1, {config.num_encoder_layers}]')
    prefix = f'encoder.{layer_index}'
    modified = layer_index == config.residual_removal_layer
    variant = AttentionVariant.POSITIONAL_QUERY if modified and config.position_query_enabled \
        else AttentionVariant.STANDARD
    mask = padding_mask(pad_mask) if pad_mask is not None else None

    normed = _norm(h_prev, params, f'{prefix}.norm1')
    attended, weights = multi_head_attention(normed, normed, mask, params, f'{prefix}.self_attn',
                                             config.num_heads, variant, config.query_wavelength)
    attended = _drop(attended, config, rng)
    a = attended if modified else h_prev + attended

    transformed = _drop(feed_forward(_norm(a, params, f'{prefix}.norm2'), params, f'{prefix}.ff'), config, rng)
    return a + transformed, weights


class LayerActivations:
    """
    Everything the encoder computed for one batch.

    `embedded` is the scaled embedding plus positional encoding (layer 0),
    `layers[l-1]` the output of encoder layer l, `final` the normalised
    encoder output, `attention[l-1]` the self-attention weights of layer l.
    """

    embedded: Tensor
    layers: List[Tensor]
    final: Tensor
    attention: List[np.ndarray]
    pad_mask: np.ndarray

    def __init__(self, embedded: Tensor, layers: List[Tensor], final: Tensor,
                 attention: List[np.ndarray], pad_mask: np.ndarray) -> None:
        self.embedded = embedded
        self.layers = layers
        self.final = final
        self.attention = attention
        self.pad_mask = pad_mask

    def layer_names(self) -> List[str]:
        return [str(index) for index in range(len(self.layers) + 1)] + ['final']

    def layer(self, name: Union[int, str]) -> Tensor:
        """
        Activation by layer name: 0 (embedded input), 1..L, or 'final'.
        """

        if str(name) == 'final':
            return self.final
        index = int(name)
        if index == 0:
            return self.embedded
        if not 1 <= index <= len(self.layers):
            raise TensorError.invalid_value('layer', name, f'must be 0..{len(self.layers)} or final')
        return self.layers[index - 1]

    @property
    def outputs(self) -> List[Tensor]:
        return self.layers + [self.final]


def _check_ids(token_ids: np.ndarray, config: ModelConfig, side: str) -> np.ndarray:
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if token_ids.ndim == 1:
        token_ids = token_ids[None, :]
    if token_ids.ndim != 2 or token_ids.size == 0:
        raise TensorError(error_dict={'error': 'empty_sequence', 'op': side, 'shape': list(token_ids.shape)})
    if token_ids.shape[1] > config.max_positions:
        raise TensorError(error_dict={'error': 'sequence_too_long', 'op': side,
                                      'length': token_ids.shape[1], 'max_positions': config.max_positions})
    return token_ids


def encode(token_ids: np.ndarray,
           pad_mask: Optional[np.ndarray],
           config: ModelConfig,
           params: Params,
           rng: Optional[np.random.Generator] = None) -> LayerActivations:
    """
    Embed, add input positional encodings, run every encoder layer, normalise.

    No source-language information reaches the encoder.
    """

    token_ids = _check_ids(token_ids, config, 'encode')
    if pad_mask is None:
        pad_mask = token_ids == Vocabulary.PAD_ID
    pad_mask = np.asarray(pad_mask, dtype=bool).reshape(token_ids.shape)
    length = token_ids.shape[1]

    embedded = T.embedding(params['embed.tokens'], token_ids) * math.sqrt(config.d_model)
    embedded = embedded + sinusoidal_encoding(length, config.d_model, config.input_pe_wavelength)
    hidden = _drop(embedded, config, rng)

    layers, attention = [], []
    for layer_index in range(1, config.num_encoder_layers + 1):
        hidden, weights = encoder_layer_forward(hidden, layer_index, config, params, rng, pad_mask)
        layers.append(hidden)
        attention.append(weights)

    final = _norm(hidden, params, 'encoder.final_norm')
    return LayerActivations(embedded, layers, final, attention, pad_mask)


def decoder_layer_forward(h_prev: Tensor,
                          memory: Tensor,
                          layer_index: int,
                          self_mask: np.ndarray,
                          memory_mask: np.ndarray,
                          config: ModelConfig,
                          params: Params,
                          rng: Optional[np.random.Generator] = None) -> Tensor:
    prefix = f'decoder.{layer_index}'
    normed = _norm(h_prev, params, f'{prefix}.norm1')
    attended, _ = multi_head_attention(normed, normed, self_mask, params, f'{prefix}.self_attn',
                                       config.num_heads)
    a = h_prev + _drop(attended, config, rng)

    crossed, _ = multi_head_attention(_norm(a, params, f'{prefix}.norm2'), memory, memory_mask, params,
                                      f'{prefix}.cross_attn', config.num_heads)
    b = a + _drop(crossed, config, rng)

    transformed = feed_forward(_norm(b, params, f'{prefix}.norm3'), params, f'{prefix}.ff')
    return b + _drop(transformed, config, rng)


def decoder_forward(target_ids_shifted: np.ndarray,
                    encoder_output: Tensor,
                    target_lang_id,
                    source_pad_mask: Optional[np.ndarray],
                    config: ModelConfig,
                    params: Params,
                    rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    Logits `[batch, T, vocab_size]` for the shifted target inputs.

    Each input position is `proj(concat(sqrt(d) * E[y], lang[target])) + PE`;
    the output projection is the transposed token embedding table.
    """

    target_ids = _check_ids(target_ids_shifted, config, 'decode')
    batch, length = target_ids.shape
    memory = encoder_output if encoder_output.ndim == 3 else T.reshape(encoder_output, (1,) + encoder_output.shape)
    if memory.shape[0] != batch:
        raise TensorError.shape_mismatch('decode', target_ids.shape, memory.shape)

    lang_ids = np.broadcast_to(np.asarray(target_lang_id, dtype=np.int64), (batch,))
    unknown = lang_ids[(lang_ids < 0) | (lang_ids >= config.num_languages)]
    if unknown.size:
        raise DataError(error_dict={'error': 'unknown_language', 'language_id': int(unknown[0]),
                                    'num_languages': config.num_languages})

    tokens = T.embedding(params['embed.tokens'], target_ids) * math.sqrt(config.d_model)
    languages = T.embedding(params['embed.languages'], lang_ids)
    languages = T.broadcast_to(T.reshape(languages, (batch, 1, config.lang_embed_dim)),
                               (batch, length, config.lang_embed_dim))
    hidden = linear(T.concat([tokens, languages], axis=-1), params, 'decoder.input_proj')
    hidden = hidden + sinusoidal_encoding(length, config.d_model, config.input_pe_wavelength)
    hidden = _drop(hidden, config, rng)

    self_mask = causal_mask(length) | padding_mask(target_ids == Vocabulary.PAD_ID)
    if source_pad_mask is None:
        memory_mask = None
    else:
        memory_mask = padding_mask(np.asarray(source_pad_mask, dtype=bool).reshape(batch, -1))
    for layer_index in range(1, config.num_decoder_layers + 1):
        hidden = decoder_layer_forward(hidden, memory, layer_index, self_mask, memory_mask, config, params, rng)

    hidden = _norm(hidden, params, 'decoder.final_norm')
    return T.matmul(hidden, T.transpose(params['embed.tokens'], (1, 0)))


def forward_loss(batch: Batch,
                 config: ModelConfig,
                 params: Params,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    Mean label-smoothed cross-entropy over the non-pad target positions of a batch.
    """

    if batch.size == 0 or batch.source_ids.shape[1] == 0:
        raise DataError(error_dict={'error': 'empty_batch'})
    activations = encode(batch.source_ids, batch.source_pad_mask, config, params, rng)
    logits = decoder_forward(batch.target_input, activations.final, batch.target_lang_ids,
                             batch.source_pad_mask, config, params, rng)
    rows, length, vocab = logits.shape
    return T.cross_entropy_label_smoothed(T.reshape(logits, (rows * length, vocab)),
                                          batch.target_output.reshape(-1),
                                          epsilon=config.label_smoothing,
                                          pad_id=Vocabulary.PAD_ID)


# Parameters #

def _attention_shapes(prefix: str, d: int) -> List[Tuple[str, Tuple[int, ...]]]:
    shapes = []
    for projection in ('q', 'k', 'v', 'o'):
        shapes.append((f'{prefix}.{projection}.weight', (d, d)))
        shapes.append((f'{prefix}.{projection}.bias', (d,)))
    return shapes


def _norm_shapes(prefix: str, d: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(f'{prefix}.gain', (d,)), (f'{prefix}.bias', (d,))]


def _ff_shapes(prefix: str, d: int, f: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(f'{prefix}.in.weight', (d, f)), (f'{prefix}.in.bias', (f,)),
            (f'{prefix}.out.weight', (f, d)), (f'{prefix}.out.bias', (d,))]


def parameter_shapes(config: ModelConfig) -> 'OrderedDict[str, Tuple[int, ...]]':
    """
    Name -> shape of every parameter, in a fixed order.
    """

    if config.vocab_size is None or config.num_languages is None:
        raise ConfigError.invalid_value('vocab_size', config.vocab_size,
                                        'vocabulary and languages must be resolved first')
    d, f = config.d_model, config.d_ff
    shapes: List[Tuple[str, Tuple[int, ...]]] = [
        ('embed.tokens', (config.vocab_size, d)),
        ('embed.languages', (config.num_languages, config.lang_embed_dim)),
        ('decoder.input_proj.weight', (d + config.lang_embed_dim, d)),
        ('decoder.input_proj.bias', (d,)),
    ]
    for layer in range(1, config.num_encoder_layers + 1):
        prefix = f'encoder.{layer}'
        shapes += _norm_shapes(f'{prefix}.norm1', d) + _attention_shapes(f'{prefix}.self_attn', d)
        shapes += _norm_shapes(f'{prefix}.norm2', d) + _ff_shapes(f'{prefix}.ff', d, f)
    shapes += _norm_shapes('encoder.final_norm', d)
    for layer in range(1, config.num_decoder_layers + 1):
        prefix = f'decoder.{layer}'
        shapes += _norm_shapes(f'{prefix}.norm1', d) + _attention_shapes(f'{prefix}.self_attn', d)
        shapes += _norm_shapes(f'{prefix}.norm2', d) + _attention_shapes(f'{prefix}.cross_attn', d)
        shapes += _norm_shapes(f'{prefix}.norm3', d) + _ff_shapes(f'{prefix}.ff', d, f)
    shapes += _norm_shapes('decoder.final_norm', d)
    return OrderedDict(shapes)


def _initial_value(name: str, shape: Tuple[int, ...], streams: RandomStreams) -> np.ndarray:
    if name.endswith('.gain'):
        return np.ones(shape, dtype=np.float32)
    if len(shape) == 1:
        return np.zeros(shape, dtype=np.float32)
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    value = streams.stream(f'init/{name}').uniform(-limit, limit, size=shape).astype(np.float32)
    if name == 'embed.tokens':
        value[Vocabulary.PAD_ID] = 0.0
    return value


class TransformerModel:
    """
    Parameter store plus the forward functions bound to its config.
    """

    config: ModelConfig
    params: 'OrderedDict[str, Tensor]'

    def __init__(self, config: ModelConfig, params: Mapping[str, Tensor]) -> None:
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(error_dict={'error': 'parameter_names', 'missing': missing, 'unexpected': extra})
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise TensorError.shape_mismatch(f'parameter {name}', shape, params[name].shape)
        self.config = config
        self.params = OrderedDict(params)

    @classmethod
    def initialize(cls, config: ModelConfig, streams: RandomStreams) -> 'TransformerModel':
        """
        Factory method: Xavier-uniform matrices, zero biases, unit gains, zero PAD row.
        """

        params = OrderedDict(
            (name, Tensor(_initial_value(name, shape, streams), requires_grad=True, name=name))
            for name, shape in parameter_shapes(config).items())
        model = cls(config, params)
        logger.debug("initialised model with %d parameters", model.num_parameters())
        return model

    @classmethod
    def from_state(cls, config: ModelConfig, state: Mapping[str, np.ndarray]) -> 'TransformerModel':
        """
        Factory method from plain arrays (checkpoints, averages).
        """

        params = OrderedDict(
            (name, Tensor(np.array(state[name], dtype=np.float32), requires_grad=True, name=name))
            for name in parameter_shapes(config) if name in state)
        return cls(config, params)

    def state_dict(self) -> 'OrderedDict[str, np.ndarray]':
        return OrderedDict((name, tensor.data.copy()) for name, tensor in self.params.items())

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for name, tensor in self.params.items():
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise TensorError.shape_mismatch(f'parameter {name}', tensor.shape, value.shape)
            tensor.data = value.astype(tensor.dtype, copy=True)

    def copy(self) -> 'TransformerModel':
        return TransformerModel.from_state(self.config, self.state_dict())

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(tensor.size for tensor in self.params.values())

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    def gradients(self) -> Dict[str, np.ndarray]:
        return {name: (tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data))
                for name, tensor in self.params.items()}

    def encode(self, token_ids: np.ndarray, pad_mask: Optional[np.ndarray] = None,
               rng: Optional[np.random.Generator] = None) -> LayerActivations:
        return encode(token_ids, pad_mask, self.config, self.params, rng)

    def decode(self, target_ids_shifted: np.ndarray, encoder_output: Tensor, target_lang_id,
               source_pad_mask: Optional[np.ndarray] = None, rng: Optional[np.random.Generator] = None) -> Tensor:
        return decoder_forward(target_ids_shifted, encoder_output, target_lang_id, source_pad_mask,
                               self.config, self.params, rng)

    def forward_loss(self, batch: Batch, rng: Optional[np.random.Generator] = None) -> Tensor:
        return forward_loss(batch, self.config, self.params, rng)
