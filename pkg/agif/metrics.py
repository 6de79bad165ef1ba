"""
SLU evaluation: span-level slot F1, intent macro-F1 and exact-set accuracy,
sentence-level overall accuracy, plus attention export.
"""
import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, Hashable, Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple, Union

import numpy as np
from PIL import Image
from tqdm import tqdm

from .corpus import OUTSIDE, Batch, Utterance, Vocabulary, encode_batch, parse_dataset
from .model import ForwardTrace, SLUModel
from .util import ConfigError, DatasetFormatError, ShapeError

logger = logging.getLogger(__name__)

Labels = Union[Utterance, Sequence[str]]


class Chunk(NamedTuple):
    label: str
    start: int
    end: int  # inclusive


def _split_label(label: str) -> Tuple[str, Optional[str]]:
    if label == OUTSIDE:
        return OUTSIDE, None
    prefix, sep, kind = label.partition("-")
    if not sep or prefix not in ("B", "I") or not kind:
        raise DatasetFormatError(f"Malformed BIO label {label!r}")
    return prefix, kind


def extract_chunks(labels: Sequence[str]) -> Set[Chunk]:
    """
    CoNLL chunking.  B-x always opens a chunk, I-x continues an open x chunk
    and opens a new one otherwise; O or a type change closes.
    """
    chunks = set()
    open_kind: Optional[str] = None
    start = 0
    for i, label in enumerate(labels):
        prefix, kind = _split_label(label)
        if open_kind is not None and (prefix != "I" or kind != open_kind):
            chunks.add(Chunk(open_kind, start, i - 1))
            open_kind = None
        if prefix != OUTSIDE and open_kind is None:
            open_kind, start = kind, i
    if open_kind is not None:
        chunks.add(Chunk(open_kind, start, len(labels) - 1))
    return chunks


def _slots(item: Labels) -> Sequence[str]:
    return item.slots if isinstance(item, Utterance) else item


def _prf(tp: int, fp: int, fn: int) -> Tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def slot_f1(gold: Sequence[Labels], predicted: Sequence[Labels]) -> Tuple[float, float, float]:
    """Micro precision, recall and F1 over exactly matching chunks."""
    if len(gold) != len(predicted):
        raise ShapeError(f"slot_f1: {len(gold)} gold utterances but {len(predicted)} predictions")
    tp = fp = fn = 0
    for g, p in zip(gold, predicted):
        g, p = _slots(g), _slots(p)
        if len(g) != len(p):
            raise ShapeError(f"slot_f1: gold length {len(g)} does not match prediction length {len(p)}")
        gold_chunks, pred_chunks = extract_chunks(g), extract_chunks(p)
        hits = len(gold_chunks & pred_chunks)
        tp += hits
        fp += len(pred_chunks) - hits
        fn += len(gold_chunks) - hits
    return _prf(tp, fp, fn)


@dataclass
class LabelScore:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class IntentScores:
    macro_f1: float
    accuracy: float
    per_label: Dict[str, LabelScore] = field(default_factory=dict)


def intent_metrics(
    gold: Sequence[Iterable[Hashable]],
    predicted: Sequence[Iterable[Hashable]],
    labels: Optional[Sequence[Hashable]] = None,
) -> IntentScores:
    """
    Exact-set accuracy and macro F1.  Each label is scored independently as
    present or absent per utterance.  The average runs over ``labels`` when
    given (labels that never occur score 0) and otherwise over every label
    seen in gold or prediction.
    """
    if len(gold) != len(predicted):
        raise ShapeError(f"intent_metrics: {len(gold)} gold sets but {len(predicted)} predictions")
    gold_sets = [frozenset(g) for g in gold]
    pred_sets = [frozenset(p) for p in predicted]
    if any(not g for g in gold_sets):
        raise ValueError("intent_metrics: every gold intent set must be non-empty")
    if not gold_sets:
        return IntentScores(0.0, 0.0)

    accuracy = sum(g == p for g, p in zip(gold_sets, pred_sets)) / len(gold_sets)
    if labels is None:
        seen = set().union(*gold_sets, *pred_sets)
        labels = sorted(seen, key=str)

    per_label = {}
    for label in labels:
        tp = sum(label in g and label in p for g, p in zip(gold_sets, pred_sets))
        fp = sum(label not in g and label in p for g, p in zip(gold_sets, pred_sets))
        fn = sum(label in g and label not in p for g, p in zip(gold_sets, pred_sets))
        per_label[str(label)] = LabelScore(*_prf(tp, fp, fn), support=tp + fn)
    macro = float(np.mean([s.f1 for s in per_label.values()])) if per_label else 0.0
    return IntentScores(macro, accuracy, per_label)


def overall_acc(gold: Sequence[Utterance], predicted: Sequence[Utterance]) -> float:
    """Fraction of utterances whose intent set and every slot label are right."""
    if len(gold) != len(predicted):
        raise ShapeError(f"overall_acc: {len(gold)} gold utterances but {len(predicted)} predictions")
    if not gold:
        return 0.0
    correct = 0
    for g, p in zip(gold, predicted):
        if len(g.slots) != len(p.slots):
            raise ShapeError(f"overall_acc: gold length {len(g.slots)} does not match prediction length {len(p.slots)}")
        correct += g.intent_set == p.intent_set and tuple(g.slots) == tuple(p.slots)
    return correct / len(gold)


@dataclass
class EvalReport:
    slot_precision: float
    slot_recall: float
    slot_f1: float
    intent_macro_f1: float
    intent_acc: float
    overall_acc: float
    num_utterances: int
    per_intent: Dict[str, LabelScore] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def summary(self) -> Dict[str, float]:
        return {
            "slot_f1": self.slot_f1,
            "intent_f1": self.intent_macro_f1,
            "intent_acc": self.intent_acc,
            "overall_acc": self.overall_acc,
        }


def evaluate_predictions(
    gold: Sequence[Utterance], predicted: Sequence[Utterance], labels: Optional[Sequence[str]] = None
) -> EvalReport:
    """Score predicted frames (e.g. a prediction dump) against gold."""
    if len(gold) != len(predicted):
        raise ShapeError(f"{len(gold)} gold utterances but {len(predicted)} predictions")
    for i, (g, p) in enumerate(zip(gold, predicted)):
        if tuple(g.tokens) != tuple(p.tokens):
            raise ShapeError(f"Utterance {i}: predicted tokens do not match gold tokens")
    precision, recall, f1 = slot_f1(gold, predicted)
    intents = intent_metrics([g.intents for g in gold], [p.intents for p in predicted], labels)
    return EvalReport(
        slot_precision=precision,
        slot_recall=recall,
        slot_f1=f1,
        intent_macro_f1=intents.macro_f1,
        intent_acc=intents.accuracy,
        overall_acc=overall_acc(gold, predicted),
        num_utterances=len(gold),
        per_intent=intents.per_label,
    )


def scored_intent_labels(vocab: Vocabulary, gold: Sequence[Utterance]) -> List[str]:
    """The model's intent labels, then any gold-only labels in sorted order."""
    known = set(vocab.intents)
    extra = sorted({intent for u in gold for intent in u.intents} - known)
    return list(vocab.intents) + extra


@dataclass
class PredictionRun:
    predictions: List[Utterance]
    traces: List[Tuple[Batch, ForwardTrace]]


def predict_dataset(
    model: SLUModel,
    utterances: Sequence[Utterance],
    batch_size: int = 32,
    workers: int = 1,
    disable_progress: bool = True,
) -> PredictionRun:
    """
    Eval-mode predictions in input order.  With ``workers > 1`` batches run on
    a thread pool sharing the read-only parameters.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    batches = [
        encode_batch(utterances[i : i + batch_size], model.vocab, dtype=model.params.dtype)
        for i in range(0, len(utterances), batch_size)
    ]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(model.predict_batch, batches), total=len(batches), disable=disable_progress))
    else:
        results = [model.predict_batch(b) for b in tqdm(batches, disable=disable_progress)]

    predictions: List[Utterance] = []
    traces = []
    for batch, (frames, trace) in zip(batches, results):
        predictions.extend(frames)
        traces.append((batch, trace))
    return PredictionRun(predictions, traces)


def evaluate(
    model,
    dataset: Union[str, Sequence[Utterance]],
    batch_size: int = 32,
    workers: int = 1,
    disable_progress: bool = True,
) -> EvalReport:
    """
    Run the model in eval mode (predicted intents feed the graph) and score it.
    ``model`` is an SLUModel or a loaded checkpoint; ``dataset`` a path or
    utterances.
    """
    model = getattr(model, "model", model)
    if isinstance(dataset, str):
        dataset = parse_dataset(dataset, lowercase=model.vocab.lowercase)
    run = predict_dataset(model, dataset, batch_size, workers, disable_progress)
    return evaluate_predictions(dataset, run.predictions, scored_intent_labels(model.vocab, dataset))


def export_attention(
    trace: ForwardTrace,
    frames: Sequence[Utterance],
    directory: str,
    offset: int = 0,
    heatmaps: bool = False,
) -> List[str]:
    """
    One CSV per utterance: header ``token,self,<intent>...`` then per token the
    slot node's head-averaged final-layer weights toward itself and each intent.
    ``frames`` supplies the tokens and the intent labels of the graph nodes.
    """
    if trace.slot_attention is None:
        raise ConfigError("This interaction mode records no slot-to-intent attention")
    os.makedirs(directory, exist_ok=True)
    paths = []
    for b, frame in enumerate(frames):
        weights = trace.utterance_attention(b)
        if len(frame.intents) + 1 != weights.shape[1]:
            raise ShapeError(f"Utterance {offset + b}: {len(frame.intents)} intent labels for {weights.shape[1] - 1} nodes")
        path = os.path.join(directory, f"{offset + b:05d}.csv")
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["token", "self", *frame.intents])
            for token, row in zip(frame.tokens, weights):
                writer.writerow([token, *(f"{w:.6f}" for w in row)])
        paths.append(path)
        if heatmaps:
            render_attention_heatmap(weights[:, 1:]).save(os.path.splitext(path)[0] + ".png")
    return paths


def read_attention_csv(path: str) -> Tuple[List[str], List[str], np.ndarray]:
    """Returns (intents, tokens, weights) where weights[:, 0] is the self weight."""
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][:2] != ["token", "self"]:
        raise DatasetFormatError("Not an attention export", path=path, line_number=1)
    intents = rows[0][2:]
    tokens = [r[0] for r in rows[1:]]
    weights = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    return intents, tokens, weights.reshape(len(tokens), len(intents) + 1)


def render_attention_heatmap(weights: np.ndarray, cell: int = 24) -> Image.Image:
    """
    Greyscale map of token-to-intent weights (T, n): rows are intents,
    columns tokens, darker means more weight.
    """
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    arr = ((1 - np.clip(weights.T, 0, 1)) * 255).round().astype("uint8")
    img = Image.fromarray(arr)
    return img.resize((arr.shape[1] * cell, arr.shape[0] * cell), Image.Resampling.NEAREST)
