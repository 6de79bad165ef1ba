import dataclasses
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Batch, Utterance, Vocabulary, encode_batch, encode_tokens
from .layers.graph import (
    Aggregation,
    GraphActivation,
    GraphLayerParams,
    batch_interaction_graph,
    graph_interact,
    sentence_intent_summary,
    vanilla_attention_interact,
)
from .layers.recurrent import LSTMParams, bilstm, stacked_lstm_step, zero_state
from .util import ConfigError, ShapeError, _check_divisible_by_n, _check_even, split_rng

logger = logging.getLogger(__name__)


class InteractionMode(Enum):
    ADAPTIVE_GAT = "adaptive_gat"
    VANILLA_ATTENTION = "vanilla_attention"
    GCN = "gcn"
    SENTENCE_LEVEL = "sentence_level"
    SENTENCE_LEVEL_2LAYER = "sentence_level_2layer"


class ForwardMode(Enum):
    TRAIN = "train"
    EVAL = "eval"


class IntentSource(Enum):
    GOLD = "gold"
    PREDICTED = "predicted"


@dataclass
class ModelConfig:
    embedding_dim: int = 256
    hidden_dim: int = 256  # d: BiLSTM width (two directions of d/2) and attention width
    key_dim: int = 256  # d_k
    graph_dim: int = 64  # d_g: decoder state, intent embeddings, graph nodes
    num_heads: int = 4  # K
    num_layers: int = 2  # L, graph layers
    intent_hidden_dim: int = 256
    decoder_layers: int = 1
    threshold: float = 0.5  # t_u
    leaky_slope: float = 0.01
    dropout: float = 0.4
    interaction_mode: InteractionMode = InteractionMode.ADAPTIVE_GAT
    graph_activation: GraphActivation = GraphActivation.LEAKY_RELU
    # Filled in from the vocabulary.
    vocab_size: int = 0
    num_intents: int = 0
    num_slots: int = 0

    def __post_init__(self):
        self.interaction_mode = InteractionMode(self.interaction_mode)
        self.graph_activation = GraphActivation(self.graph_activation)
        try:
            _check_even(self.hidden_dim)
            _check_divisible_by_n(self.num_heads, self.graph_dim)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        for name in ("embedding_dim", "hidden_dim", "key_dim", "graph_dim", "num_heads", "intent_hidden_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_layers < 0:
            raise ConfigError(f"num_layers must be non-negative, got {self.num_layers}")
        if self.decoder_layers not in (1, 2):
            raise ConfigError(f"decoder_layers must be 1 or 2, got {self.decoder_layers}")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def with_vocab(self, vocab: Vocabulary) -> "ModelConfig":
        return dataclasses.replace(
            self, vocab_size=vocab.num_tokens, num_intents=vocab.num_intents, num_slots=vocab.num_slots
        )

    @property
    def effective_decoder_layers(self) -> int:
        if self.interaction_mode == InteractionMode.SENTENCE_LEVEL_2LAYER:
            return 2
        return self.decoder_layers

    @property
    def uses_graph(self) -> bool:
        return self.interaction_mode in (InteractionMode.ADAPTIVE_GAT, InteractionMode.GCN)

    def to_dict(self) -> Dict:
        out = dataclasses.asdict(self)
        out["interaction_mode"] = self.interaction_mode.value
        out["graph_activation"] = self.graph_activation.value
        return out


@dataclass
class EncoderParams:
    embedding: Tensor  # (V, d_emb)
    forward: LSTMParams
    backward: LSTMParams
    W_q: Tensor  # (d_k, d_emb)
    W_k: Tensor  # (d_k, d_emb)
    W_v: Tensor  # (d, d_emb)

    def named_tensors(self, prefix: str = "encoder") -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}.embedding", self.embedding
        yield from self.forward.named_tensors(f"{prefix}.forward")
        yield from self.backward.named_tensors(f"{prefix}.backward")
        yield f"{prefix}.W_q", self.W_q
        yield f"{prefix}.W_k", self.W_k
        yield f"{prefix}.W_v", self.W_v


@dataclass
class IntentDecoderParams:
    w_e: Tensor  # (1, 2d)
    b: Tensor  # (1,)
    W_c: Tensor  # (h, 2d)
    b_c: Tensor
    W_i: Tensor  # (N_I, h)
    b_i: Tensor

    def named_tensors(self, prefix: str = "intent_decoder") -> Iterator[Tuple[str, Tensor]]:
        for name in ("w_e", "b", "W_c", "b_c", "W_i", "b_i"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class IntentEmbedding:
    table: Tensor  # (N_I, d_g)

    def named_tensors(self, prefix: str = "intent_embedding") -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}.table", self.table


@dataclass
class GraphParams:
    layers: List[GraphLayerParams] = field(default_factory=list)

    def named_tensors(self, prefix: str = "graph") -> Iterator[Tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield from layer.named_tensors(f"{prefix}.{i}")


@dataclass
class SlotDecoderParams:
    layers: List[LSTMParams]  # first layer input 2d + N_S, hidden d_g
    W_s: Tensor  # (N_S, d_g)

    def named_tensors(self, prefix: str = "slot_decoder") -> Iterator[Tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield from layer.named_tensors(f"{prefix}.lstm{i}")
        yield f"{prefix}.W_s", self.W_s


@dataclass
class ModelParams:
    encoder: EncoderParams
    intent_decoder: IntentDecoderParams
    intent_embedding: IntentEmbedding
    graph: GraphParams
    slot_decoder: SlotDecoderParams

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, dtype=None) -> "ModelParams":
        """
        Xavier-uniform weights and embeddings, zero biases.  Every block draws
        from its own stream of the run seed.
        """
        if min(config.vocab_size, config.num_intents, config.num_slots) < 1:
            raise ConfigError("ModelConfig has no vocabulary sizes; call config.with_vocab(vocab) first")
        dtype = dtype or ad.default_dtype()
        d, d_g = config.hidden_dim, config.graph_dim

        def rng(stream: str) -> np.random.Generator:
            return split_rng(seed, stream)

        def xavier(rows: int, cols: int, stream: str) -> Tensor:
            return ad.xavier_init(rows, cols, rng(stream), dtype=dtype)

        def zeros(*shape: int) -> Tensor:
            return ad.zeros(shape, requires_grad=True, dtype=dtype)

        encoder = EncoderParams(
            embedding=xavier(config.vocab_size, config.embedding_dim, "encoder.embedding"),
            forward=LSTMParams.initialize(config.embedding_dim, d // 2, rng("encoder.forward"), dtype=dtype),
            backward=LSTMParams.initialize(config.embedding_dim, d // 2, rng("encoder.backward"), dtype=dtype),
            W_q=xavier(config.key_dim, config.embedding_dim, "encoder.W_q"),
            W_k=xavier(config.key_dim, config.embedding_dim, "encoder.W_k"),
            W_v=xavier(d, config.embedding_dim, "encoder.W_v"),
        )
        intent_decoder = IntentDecoderParams(
            w_e=xavier(1, 2 * d, "intent_decoder.w_e"),
            b=zeros(1),
            W_c=xavier(config.intent_hidden_dim, 2 * d, "intent_decoder.W_c"),
            b_c=zeros(config.intent_hidden_dim),
            W_i=xavier(config.num_intents, config.intent_hidden_dim, "intent_decoder.W_i"),
            b_i=zeros(config.num_intents),
        )
        intent_embedding = IntentEmbedding(xavier(config.num_intents, d_g, "intent_embedding"))

        graph = GraphParams()
        if config.uses_graph:
            attention = config.interaction_mode == InteractionMode.ADAPTIVE_GAT
            for layer in range(config.num_layers):
                final = layer == config.num_layers - 1
                head_dim = d_g if final else d_g // config.num_heads
                graph.layers.append(
                    GraphLayerParams.initialize(
                        d_g, head_dim, config.num_heads, rng(f"graph.{layer}"), attention=attention, dtype=dtype
                    )
                )

        decoder_layers = [
            LSTMParams.initialize(2 * d + config.num_slots, d_g, rng("slot_decoder.lstm0"), dtype=dtype)
        ]
        for layer in range(1, config.effective_decoder_layers):
            decoder_layers.append(LSTMParams.initialize(d_g, d_g, rng(f"slot_decoder.lstm{layer}"), dtype=dtype))
        slot_decoder = SlotDecoderParams(decoder_layers, xavier(config.num_slots, d_g, "slot_decoder.W_s"))

        params = cls(encoder, intent_decoder, intent_embedding, graph, slot_decoder)
        for name, tensor in params.named_parameters().items():
            tensor.name = name
        return params

    def named_parameters(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for block in (self.encoder, self.intent_decoder, self.intent_embedding, self.graph, self.slot_decoder):
            out.update(block.named_tensors())
        return out

    def regularized(self) -> Dict[str, Tensor]:
        """Weight matrices; biases, embedding tables and attention vectors are left out."""
        return {
            name: tensor
            for name, tensor in self.named_parameters().items()
            if name.rsplit(".", 1)[1] in ("W_ih", "W_hh", "W_q", "W_k", "W_v", "w_e", "W_c", "W_i", "W", "W_s")
        }

    def grads(self) -> Dict[str, Optional[np.ndarray]]:
        return {name: tensor.grad for name, tensor in self.named_parameters().items()}

    def zero_grad(self) -> None:
        for tensor in self.named_parameters().values():
            tensor.grad = None

    @property
    def dtype(self) -> np.dtype:
        return self.encoder.embedding.dtype

    def to(self, dtype) -> "ModelParams":
        """
        Modifies the object in-place.
        """
        dt = np.dtype(dtype)
        for tensor in self.named_parameters().values():
            tensor.data = tensor.data.astype(dt)
            tensor.grad = None
        return self


@dataclass
class ForwardTrace:
    encoding: Tensor  # E, (B, T, 2d)
    intent_probs: Tensor  # y^I, (B, N_I)
    predicted_intents: List[List[int]]
    graph_intents: List[List[int]]  # the intent nodes the slot decoder saw
    slot_distributions: List[Tensor]  # T tensors of (B, N_S)
    slot_predictions: List[List[int]]  # per utterance, trimmed to its length
    lengths: np.ndarray
    # Slot node's head-averaged final-layer weights: column 0 is the self
    # weight, column 1 + i the i-th entry of graph_intents.  (B, T, N+1)
    slot_attention: Optional[np.ndarray] = None

    def slot_probs(self) -> np.ndarray:
        return np.stack([d.data for d in self.slot_distributions], axis=1)

    def utterance_attention(self, index: int) -> Optional[np.ndarray]:
        if self.slot_attention is None:
            return None
        n = len(self.graph_intents[index])
        return self.slot_attention[index, : self.lengths[index], : n + 1]


def encode(
    batch: Batch,
    params: ModelParams,
    config: ModelConfig,
    mode: ForwardMode = ForwardMode.EVAL,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """
    E = [H || A]: BiLSTM states and scaled dot-product self-attention over the
    word embeddings, padded keys masked out.  (B, T, 2d)
    """
    training = mode == ForwardMode.TRAIN
    enc = params.encoder
    if batch.token_ids.size and batch.token_ids.max() >= enc.embedding.shape[0]:
        raise ShapeError(f"Token id {batch.token_ids.max()} outside a vocabulary of {enc.embedding.shape[0]}")

    x = ad.dropout(ad.embedding(enc.embedding, batch.token_ids), config.dropout, training, rng)
    hidden = bilstm(x, batch.mask, enc.forward, enc.backward)

    q = ad.linear(x, enc.W_q)
    k = ad.linear(x, enc.W_k)
    v = ad.linear(x, enc.W_v)
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(enc.W_k.shape[0]))
    weights = ad.masked_softmax(scores, batch.mask[:, None, :], axis=-1)
    attended = ad.matmul(weights, v)

    encoding = ad.concat([hidden, attended], axis=-1)
    return ad.dropout(encoding, config.dropout, training, rng)


def length_mask(lengths: Sequence[int], width: Optional[int] = None) -> np.ndarray:
    lengths = np.asarray(lengths)
    width = int(lengths.max()) if width is None else width
    return np.arange(width)[None, :] < lengths[:, None]


def intent_pool(encoding: Tensor, lengths: Sequence[int], params: IntentDecoderParams) -> Tuple[Tensor, Tensor]:
    """
    Self-attentive pooling: p_t = softmax_t(w_e e_t + b), c = sum_t p_t e_t.
    Returns c (B, 2d) and p (B, T).
    """
    batch, steps, width = encoding.shape
    mask = length_mask(lengths, steps)
    scores = ad.reshape(ad.linear(encoding, params.w_e, params.b), (batch, steps))
    weights = ad.masked_softmax(scores, mask, axis=-1)
    context = ad.reshape(ad.matmul(ad.reshape(weights, (batch, 1, steps)), encoding), (batch, width))
    return context, weights


def intent_probabilities(context: Tensor, params: IntentDecoderParams, slope: float = 0.01) -> Tensor:
    hidden = ad.leaky_relu(ad.linear(context, params.W_c, params.b_c), slope)
    return ad.sigmoid(ad.linear(hidden, params.W_i, params.b_i))


def threshold_intents(probs: np.ndarray, threshold: float) -> List[List[int]]:
    """
    Intents with probability above the threshold; the argmax (lowest index
    on ties) when none is.
    """
    probs = np.atleast_2d(probs)
    out = []
    for row in probs:
        chosen = np.flatnonzero(row > threshold).tolist()
        out.append(chosen if chosen else [int(np.argmax(row))])
    return out


def predict_intents(
    context: Tensor, params: IntentDecoderParams, threshold: float, slope: float = 0.01
) -> Tuple[Tensor, List[List[int]]]:
    probs = intent_probabilities(context, params, slope)
    return probs, threshold_intents(probs.data, threshold)


def slot_decoder_step(
    states: Sequence[Tuple[Tensor, Tensor]],
    prev_distribution: Tensor,
    encoding_t: Tensor,
    params: SlotDecoderParams,
    step_mask: Optional[np.ndarray] = None,
    dropout: float = 0.0,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> List[Tuple[Tensor, Tensor]]:
    """
    s_t = LSTM(s_{t-1}, y_{t-1}, e_t).  Returns the new (h, c) of every decoder
    layer; the last layer's h is s_t.
    """
    if step_mask is None:
        step_mask = np.ones(encoding_t.shape[0], dtype=bool)
    x = ad.dropout(ad.concat([encoding_t, prev_distribution], axis=-1), dropout, training, rng)
    return stacked_lstm_step(x, states, params.layers, step_mask)


def predict_slot(hidden: Tensor, W_s: Tensor) -> Tuple[Tensor, np.ndarray]:
    """y_t = softmax(W_s h), o_t = argmax (lowest index on ties)."""
    distribution = ad.softmax(ad.linear(hidden, W_s), axis=-1)
    return distribution, np.argmax(distribution.data, axis=-1)


def _pad_intents(node_ids: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    width = max((len(ids) for ids in node_ids), default=0)
    padded = np.zeros((len(node_ids), width), dtype=np.int64)
    mask = np.zeros((len(node_ids), width), dtype=bool)
    for b, ids in enumerate(node_ids):
        padded[b, : len(ids)] = ids
        mask[b, : len(ids)] = True
    return padded, mask


def forward(
    batch: Batch,
    params: ModelParams,
    config: ModelConfig,
    mode: ForwardMode = ForwardMode.EVAL,
    intent_source: IntentSource = IntentSource.PREDICTED,
    rng: Optional[np.random.Generator] = None,
    teacher_forcing: bool = True,
) -> ForwardTrace:
    """
    Encoder, intent decoder, then token-by-token slot decoding where each
    decoder state interacts with the intent nodes before the slot label is
    predicted.  ``teacher_forcing`` feeds the gold previous slot label in
    training mode.
    """
    training = mode == ForwardMode.TRAIN
    batch_size, steps = batch.token_ids.shape
    dtype = params.dtype

    encoding = encode(batch, params, config, mode, rng)
    context, _ = intent_pool(encoding, batch.lengths, params.intent_decoder)
    intent_probs, predicted = predict_intents(context, params.intent_decoder, config.threshold, config.leaky_slope)

    if intent_source == IntentSource.GOLD:
        node_ids = [gold if gold else pred for gold, pred in zip(batch.intent_ids, predicted)]
    else:
        node_ids = predicted
    padded_ids, intent_mask = _pad_intents(node_ids)
    intent_nodes = ad.embedding(params.intent_embedding.table, padded_ids)
    adjacency, _ = batch_interaction_graph([len(ids) for ids in node_ids])

    interaction = config.interaction_mode
    summary = None
    if interaction in (InteractionMode.SENTENCE_LEVEL, InteractionMode.SENTENCE_LEVEL_2LAYER):
        summary = sentence_intent_summary(intent_nodes, intent_mask)
    aggregation = Aggregation.MEAN if interaction == InteractionMode.GCN else Aggregation.ATTENTION
    record_attention = interaction == InteractionMode.VANILLA_ATTENTION or (
        config.uses_graph and bool(params.graph.layers)
    )

    decoder = params.slot_decoder
    states = [zero_state(batch_size, layer) for layer in decoder.layers]
    prev = Tensor(np.zeros((batch_size, config.num_slots), dtype=dtype))
    one_hot = np.eye(config.num_slots, dtype=dtype)
    distributions: List[Tensor] = []
    labels = np.zeros((batch_size, steps), dtype=np.int64)
    attention = np.zeros((batch_size, steps, adjacency.shape[-1]), dtype=np.float64) if record_attention else None

    for t in range(steps):
        states = slot_decoder_step(
            states,
            prev,
            encoding[:, t, :],
            decoder,
            step_mask=batch.mask[:, t],
            dropout=config.dropout,
            training=training,
            rng=rng,
        )
        state = states[-1][0]
        if config.uses_graph:
            hidden, layer_weights = graph_interact(
                state,
                intent_nodes,
                adjacency,
                params.graph.layers,
                activation=config.graph_activation,
                slope=config.leaky_slope,
                aggregation=aggregation,
            )
            if layer_weights:
                attention[:, t, :] = layer_weights[-1][:, :, 0, :].mean(axis=1)
        elif interaction == InteractionMode.VANILLA_ATTENTION:
            hidden, weights = vanilla_attention_interact(state, intent_nodes, intent_mask)
            attention[:, t, 1:] = weights
        else:
            hidden = state + summary

        distribution, labels[:, t] = predict_slot(hidden, decoder.W_s)
        distributions.append(distribution)
        if training and teacher_forcing:
            prev = Tensor(one_hot[batch.slot_ids[:, t]])
        else:
            prev = distribution

    return ForwardTrace(
        encoding=encoding,
        intent_probs=intent_probs,
        predicted_intents=predicted,
        graph_intents=[list(ids) for ids in node_ids],
        slot_distributions=distributions,
        slot_predictions=[labels[b, : batch.lengths[b]].tolist() for b in range(batch_size)],
        lengths=batch.lengths,
        slot_attention=attention,
    )


class SLUModel:
    """
    Configuration, vocabulary and parameters of one joint model.
    """

    def __init__(self, config: ModelConfig, vocab: Vocabulary, params: ModelParams):
        if (config.vocab_size, config.num_intents, config.num_slots) != (
            vocab.num_tokens,
            vocab.num_intents,
            vocab.num_slots,
        ):
            raise ConfigError("ModelConfig sizes do not match the vocabulary")
        self.config = config
        self.vocab = vocab
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, vocab: Vocabulary, seed: int = 0, dtype=None) -> "SLUModel":
        config = config.with_vocab(vocab)
        return cls(config, vocab, ModelParams.initialize(config, seed=seed, dtype=dtype))

    def to(self, dtype) -> "SLUModel":
        """
        Modifies the object in-place.
        """
        self.params.to(dtype)
        return self

    def forward(
        self,
        batch: Batch,
        mode: ForwardMode = ForwardMode.EVAL,
        intent_source: IntentSource = IntentSource.PREDICTED,
        rng: Optional[np.random.Generator] = None,
        teacher_forcing: bool = True,
    ) -> ForwardTrace:
        return forward(batch, self.params, self.config, mode, intent_source, rng, teacher_forcing)

    def decode(self, trace: ForwardTrace, tokens: Sequence[Sequence[str]]) -> List[Utterance]:
        frames = []
        for b, toks in enumerate(tokens):
            slots = [self.vocab.slot_label(i) for i in trace.slot_predictions[b]]
            intents = [self.vocab.intent_label(i) for i in trace.predicted_intents[b]]
            frames.append(Utterance(list(toks), slots, intents))
        return frames

    def predict_batch(self, batch: Batch) -> Tuple[List[Utterance], ForwardTrace]:
        trace = self.forward(batch, ForwardMode.EVAL, IntentSource.PREDICTED)
        if batch.utterances:
            tokens = [u.tokens for u in batch.utterances]
        else:
            tokens = [[self.vocab.tokens[i] for i in row[:n]] for row, n in zip(batch.token_ids, batch.lengths)]
        return self.decode(trace, tokens), trace

    def predict(self, sentences: Sequence[Union[Utterance, Sequence[str]]]) -> List[Utterance]:
        """Semantic frames for utterances or raw token sequences."""
        if sentences and all(isinstance(s, Utterance) for s in sentences):
            batch = encode_batch(sentences, self.vocab, dtype=self.params.dtype)
            return self.predict_batch(batch)[0]
        token_lists = [list(s.tokens) if isinstance(s, Utterance) else list(s) for s in sentences]
        batch = encode_tokens(token_lists, self.vocab, dtype=self.params.dtype)
        trace = self.forward(batch, ForwardMode.EVAL, IntentSource.PREDICTED)
        return self.decode(trace, token_lists)
