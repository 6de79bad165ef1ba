import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .corpus import Utterance, Vocabulary, build_vocab, iterate_batches
from .metrics import EvalReport, evaluate
from .model import ForwardMode, IntentSource, ModelConfig, ModelParams, SLUModel
from .util import CheckpointError, ConfigError, ShapeError, TrainingDivergedError, split_rng

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
MANIFEST_FILENAME = "manifest.json"
WEIGHTS_FILENAME = "weights.bin"
CHECKPOINT_FORMAT = "agif-checkpoint"
CHECKPOINT_VERSION = 1


class SelectionMetric(Enum):
    OVERALL_ACC = "overall_acc"
    SLOT_F1 = "slot_f1"
    INTENT_F1 = "intent_f1"
    INTENT_ACC = "intent_acc"


@dataclass
class TrainConfig:
    alpha: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 100
    l2: float = 1e-6
    seed: int = 0
    selection_metric: SelectionMetric = SelectionMetric.OVERALL_ACC
    clip_norm: float = 0.0  # global-norm clipping, off when <= 0
    intent_source: IntentSource = IntentSource.GOLD
    teacher_forcing: bool = True
    lowercase: bool = False
    eval_batch_size: int = 64
    workers: int = 1

    def __post_init__(self):
        self.selection_metric = SelectionMetric(self.selection_metric)
        self.intent_source = IntentSource(self.intent_source)
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if self.learning_rate < 0 or self.l2 < 0:
            raise ConfigError("learning_rate and l2 must be non-negative")
        if self.workers < 1:
            raise ConfigError(f"workers must be positive, got {self.workers}")

    def to_dict(self) -> Dict:
        out = dataclasses.asdict(self)
        out["selection_metric"] = self.selection_metric.value
        out["intent_source"] = self.intent_source.value
        return out


def intent_loss(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Binary cross-entropy summed over labels, mean over the batch."""
    if probs.shape != targets.shape:
        raise ShapeError(f"intent_loss: probabilities {probs.shape} vs targets {targets.shape}")
    y = ad.clip(probs, PROB_CLAMP, 1 - PROB_CLAMP)
    t = targets.astype(probs.dtype)
    per_label = t * ad.log(y) + (1 - t) * ad.log(1 - y)
    return ad.sum(per_label) * (-1.0 / probs.shape[0])


def slot_loss(distributions: Union[Sequence[Tensor], Tensor], gold_ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """
    Cross-entropy over the valid tokens, summed per utterance and averaged over
    the batch.  Padded steps contribute exactly zero, gradients included.
    """
    stacked = distributions if isinstance(distributions, Tensor) else ad.stack(list(distributions), axis=1)
    batch, steps, num_slots = stacked.shape
    if gold_ids.shape != (batch, steps) or mask.shape != (batch, steps):
        raise ShapeError(f"slot_loss: distributions {stacked.shape} vs gold {gold_ids.shape} and mask {mask.shape}")
    if gold_ids.size and (gold_ids.min() < 0 or gold_ids.max() >= num_slots):
        raise ShapeError(f"slot_loss: gold slot id outside [0, {num_slots})")
    picked = ad.clip(ad.gather(stacked, gold_ids, axis=-1), PROB_CLAMP, 1.0)
    log_probs = ad.where(mask, ad.log(picked), 0.0)
    return ad.sum(log_probs) * (-1.0 / batch)


def joint_loss(
    intent: Tensor,
    slot: Tensor,
    alpha: float,
    params: Optional[Union[ModelParams, Mapping[str, Tensor]]] = None,
    l2: float = 0.0,
) -> Tensor:
    """alpha * intent + (1 - alpha) * slot + l2 * sum of squared weight matrices."""
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    total = intent * alpha + slot * (1 - alpha)
    if l2 > 0 and params is not None:
        weights = params.regularized() if isinstance(params, ModelParams) else params
        for w in weights.values():
            total = total + ad.sum(w * w) * l2
    return total


@dataclass
class EpochStats:
    epoch: int
    loss: float
    intent_loss: float
    slot_loss: float
    batches: int
    seconds: float


def _clip_gradients(grads: Dict[str, Optional[np.ndarray]], max_norm: float) -> float:
    norm = ad.global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for name, g in grads.items():
            if g is not None:
                grads[name] = g * g.dtype.type(scale)
    return norm


def train_epoch(
    train: Sequence[Utterance],
    model: SLUModel,
    optimizer: AdamState,
    config: TrainConfig,
    rng: np.random.Generator,
    epoch: int = 1,
    disable_progress: bool = True,
) -> EpochStats:
    """
    One pass over the shuffled training set: forward, joint loss, backward and
    an Adam step per batch.
    """
    start = time.perf_counter()
    params = model.params.named_parameters()
    totals = np.zeros(3)
    count = 0
    batches = iterate_batches(train, model.vocab, config.batch_size, rng=rng, dtype=model.params.dtype)
    num_batches = math.ceil(len(train) / config.batch_size)
    for index, batch in enumerate(tqdm(batches, total=num_batches, desc=f"epoch {epoch}", disable=disable_progress)):
        model.params.zero_grad()
        with ad.Tape() as tape:
            trace = model.forward(batch, ForwardMode.TRAIN, config.intent_source, rng, config.teacher_forcing)
            l_intent = intent_loss(trace.intent_probs, batch.intent_targets)
            l_slot = slot_loss(trace.slot_distributions, batch.slot_ids, batch.mask)
            loss = joint_loss(l_intent, l_slot, config.alpha, model.params, config.l2)
        values = (loss.item(), l_intent.item(), l_slot.item())
        if not all(math.isfinite(v) for v in values):
            raise TrainingDivergedError(
                f"Non-finite loss at epoch {epoch}, batch {index}: "
                f"loss={values[0]}, intent_loss={values[1]}, slot_loss={values[2]}"
            )
        tape.backward(loss)
        grads = model.params.grads()
        if config.clip_norm > 0:
            norm = _clip_gradients(grads, config.clip_norm)
            logger.debug("batch %d gradient norm %.4f", index, norm)
        ad.adam_step(params, grads, optimizer)
        totals += values
        count += 1

    means = totals / max(count, 1)
    return EpochStats(epoch, float(means[0]), float(means[1]), float(means[2]), count, time.perf_counter() - start)


@dataclass
class Checkpoint:
    """Serializable snapshot of a model: float32 tensors plus metadata."""

    model_config: ModelConfig
    vocab: Vocabulary
    tensors: Dict[str, np.ndarray]
    train_config: Optional[TrainConfig] = None
    dev_metrics: Dict = field(default_factory=dict)
    epoch: int = 0
    _model: Optional[SLUModel] = field(default=None, init=False, repr=False, compare=False)

    @classmethod
    def from_model(
        cls,
        model: SLUModel,
        train_config: Optional[TrainConfig] = None,
        dev_metrics: Optional[Dict] = None,
        epoch: int = 0,
    ) -> "Checkpoint":
        tensors = {name: t.data.astype("<f4") for name, t in model.params.named_parameters().items()}
        return cls(model.config, model.vocab, tensors, train_config, dict(dev_metrics or {}), epoch)

    @property
    def model(self) -> SLUModel:
        """The checkpoint's weights in a float32 model, built once."""
        if self._model is None:
            self._model = build_model(self.model_config, self.vocab, self.tensors)
        return self._model

    def manifest(self) -> Dict:
        entries = []
        offset = 0
        for name, arr in self.tensors.items():
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size * 4
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "dtype": "float32",
            "byteorder": "little",
            "tensors": entries,
            "total_bytes": offset,
            "vocab": self.vocab.to_dict(),
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict() if self.train_config else None,
            "dev_metrics": self.dev_metrics,
            "epoch": self.epoch,
        }


def build_model(config: ModelConfig, vocab: Vocabulary, tensors: Mapping[str, np.ndarray]) -> SLUModel:
    """Build the parameter structure for ``config`` and fill it from ``tensors``."""
    with ad.precision("float32"):
        model = SLUModel.initialize(config, vocab)
    expected = model.params.named_parameters()
    if list(expected) != list(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"Checkpoint tensors do not match the model: missing {missing}, unexpected {extra}")
    for name, tensor in expected.items():
        arr = tensors[name]
        if tuple(arr.shape) != tensor.shape:
            raise CheckpointError(f"Tensor {name} has shape {tuple(arr.shape)}, model expects {tensor.shape}")
        tensor.data = np.array(arr, dtype=np.float32)
    return model


def save_checkpoint(checkpoint: Union[Checkpoint, SLUModel], directory: str, **meta) -> Checkpoint:
    """
    Write ``manifest.json`` and ``weights.bin`` into ``directory``.  A model is
    snapshotted first; ``meta`` goes to ``Checkpoint.from_model``.
    """
    if isinstance(checkpoint, SLUModel):
        checkpoint = Checkpoint.from_model(checkpoint, **meta)
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, WEIGHTS_FILENAME), "wb") as f:
        for arr in checkpoint.tensors.values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(os.path.join(directory, MANIFEST_FILENAME), "w", encoding="utf-8") as f:
        json.dump(checkpoint.manifest(), f, indent=2, sort_keys=True)
        f.write("\n")
    return checkpoint


def load_checkpoint(directory: str) -> Checkpoint:
    manifest_path = os.path.join(directory, MANIFEST_FILENAME)
    weights_path = os.path.join(directory, WEIGHTS_FILENAME)
    try:
        with open(manifest_path, encoding="utf-8") as f:
            manifest = json.load(f)
        with open(weights_path, "rb") as f:
            blob = f.read()
    except FileNotFoundError as e:
        raise CheckpointError(f"Not a checkpoint directory: {directory}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"Corrupted manifest {manifest_path}") from e

    if not isinstance(manifest, dict):
        raise CheckpointError(f"Corrupted manifest {manifest_path}")
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format in {manifest_path}")
    try:
        total_bytes = int(manifest["total_bytes"])
        entries = [(str(e["name"]), tuple(int(d) for d in e["shape"]), int(e["offset"])) for e in manifest["tensors"]]
    except (TypeError, KeyError, ValueError) as e:
        raise CheckpointError(f"Invalid tensor table in {manifest_path}") from e
    if len(blob) != total_bytes:
        raise CheckpointError(f"{weights_path} holds {len(blob)} bytes, manifest expects {total_bytes}")

    try:
        model_config = ModelConfig(**manifest["model_config"])
        train_config = TrainConfig(**manifest["train_config"]) if manifest.get("train_config") else None
        vocab = Vocabulary.from_dict(manifest["vocab"])
    except (TypeError, KeyError, ValueError) as e:
        raise CheckpointError(f"Invalid metadata in {manifest_path}") from e

    tensors = {}
    expected_offset = 0
    for name, shape, offset in entries:
        count = int(np.prod(shape, dtype=np.int64))
        if min(shape, default=0) < 0 or offset != expected_offset or offset + 4 * count > len(blob):
            raise CheckpointError(f"Tensor {name} lies outside the weight blob")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        expected_offset += 4 * count
    if expected_offset != len(blob):
        raise CheckpointError(f"{weights_path} has {len(blob) - expected_offset} trailing bytes")

    checkpoint = Checkpoint(
        model_config, vocab, tensors, train_config, manifest.get("dev_metrics") or {}, manifest.get("epoch", 0)
    )
    _ = checkpoint.model  # validates the shapes against the configuration
    return checkpoint


@dataclass
class FitResult:
    checkpoint: Checkpoint
    history: List[Dict] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        return self.checkpoint.epoch


def fit(
    train: Sequence[Utterance],
    dev: Sequence[Utterance],
    model_config: ModelConfig,
    train_config: TrainConfig,
    vocab: Optional[Vocabulary] = None,
    on_epoch: Optional[Callable[[Dict], None]] = None,
    disable_progress: bool = True,
) -> FitResult:
    """
    Train for ``train_config.epochs`` epochs and keep the epoch that scores
    best on dev (selection metric, then slot F1, then the earlier epoch).
    ``on_epoch`` receives one log record per epoch.
    """
    if not train or not dev:
        raise ValueError("fit needs non-empty train and dev sets")
    vocab = vocab or build_vocab(train, lowercase=train_config.lowercase)
    with ad.precision("float32"):
        model = SLUModel.initialize(model_config, vocab, seed=train_config.seed)
    logger.info(
        "Training %s model: %d parameters, alpha=%.3f",
        model.config.interaction_mode.value,
        sum(t.size for t in model.params.named_parameters().values()),
        train_config.alpha,
    )
    optimizer = AdamState(lr=train_config.learning_rate)
    rng = split_rng(train_config.seed, "train")

    best: Optional[Checkpoint] = None
    best_key = None
    history = []
    for epoch in range(1, train_config.epochs + 1):
        stats = train_epoch(train, model, optimizer, train_config, rng, epoch, disable_progress)
        report: EvalReport = evaluate(model, dev, train_config.eval_batch_size, train_config.workers)
        summary = report.summary()
        key = (summary[train_config.selection_metric.value], report.slot_f1)
        selected = best_key is None or key > best_key
        if selected:
            best_key = key
            best = Checkpoint.from_model(model, train_config, summary, epoch)
        record = {
            "epoch": epoch,
            "loss": stats.loss,
            "intent_loss": stats.intent_loss,
            "slot_loss": stats.slot_loss,
            "dev": summary,
            "seconds": round(stats.seconds, 3),
            "selected": selected,
        }
        history.append(record)
        logger.info("epoch %d loss %.4f dev overall %.4f", epoch, stats.loss, report.overall_acc)
        if on_epoch is not None:
            on_epoch(record)
    return FitResult(best, history)


def micro_corpus() -> List[Utterance]:
    """Two small multi-intent utterances for gradient checks."""
    return [
        Utterance(
            ["play", "jazz", "and", "check", "the", "weather"],
            ["O", "B-music", "O", "O", "O", "B-kind"],
            ["PlayMusic", "GetWeather"],
        ),
        Utterance(["book", "a", "table"], ["O", "O", "B-object"], ["BookRestaurant"]),
    ]


def gradient_check(
    model_config: ModelConfig,
    train_config: Optional[TrainConfig] = None,
    utterances: Optional[Sequence[Utterance]] = None,
    h: float = 1e-4,
    samples: Optional[int] = 3,
) -> Dict[str, float]:
    """
    Relative error per parameter between backpropagated gradients of the
    joint loss and central differences, at float64 with dropout disabled.
    """
    train_config = train_config or TrainConfig()
    utterances = list(utterances) if utterances is not None else micro_corpus()
    vocab = build_vocab(utterances)
    config = dataclasses.replace(model_config, dropout=0.0)
    with ad.precision("float64"):
        model = SLUModel.initialize(config, vocab, seed=train_config.seed)
        batch = next(iterate_batches(utterances, vocab, len(utterances), dtype=np.float64))

        def objective() -> Tensor:
            trace = model.forward(batch, ForwardMode.TRAIN, train_config.intent_source, None, train_config.teacher_forcing)
            l_intent = intent_loss(trace.intent_probs, batch.intent_targets)
            l_slot = slot_loss(trace.slot_distributions, batch.slot_ids, batch.mask)
            return joint_loss(l_intent, l_slot, train_config.alpha, model.params, train_config.l2)

        return ad.finite_diff_report(
            objective,
            model.params.named_parameters(),
            h=h,
            samples=samples,
            rng=split_rng(train_config.seed, "gradcheck"),
        )
