"""
Utterances, the dataset file format, vocabularies, batching and the
multi-intent corpus mixer.

File format (UTF-8): one block per utterance, ``<token> <slot>`` per line,
then a line with the intents joined by ``#``.  Blocks are separated by exactly
one blank line, and every line ends with a newline::

    play O
    jazz B-music
    PlayMusic

    what O
    ...
"""
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .autodiff import default_dtype
from .util import ConfigError, DatasetFormatError, MixError, split_rng

logger = logging.getLogger(__name__)

INTENT_SEPARATOR = "#"
OUTSIDE = "O"
PAD = "<pad>"
UNK = "<unk>"
PAD_ID = 0
UNK_ID = 1
SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class Utterance:
    tokens: Tuple[str, ...]
    slots: Tuple[str, ...]
    intents: Tuple[str, ...]  # first-occurrence order, no duplicates

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "slots", tuple(self.slots))
        object.__setattr__(self, "intents", tuple(self.intents))
        if len(self.tokens) == 0:
            raise DatasetFormatError("An utterance needs at least one token")
        if len(self.tokens) != len(self.slots):
            raise DatasetFormatError(
                f"{len(self.tokens)} tokens but {len(self.slots)} slot labels: {' '.join(self.tokens)}"
            )
        if len(self.intents) == 0:
            raise DatasetFormatError(f"Utterance without intents: {' '.join(self.tokens)}")
        if len(set(self.intents)) != len(self.intents):
            raise DatasetFormatError(f"Duplicate intent labels: {INTENT_SEPARATOR.join(self.intents)}")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def intent_set(self) -> frozenset:
        return frozenset(self.intents)

    def intent_line(self) -> str:
        return INTENT_SEPARATOR.join(self.intents)


def format_utterance(utterance: Utterance) -> str:
    lines = [f"{token} {slot}" for token, slot in zip(utterance.tokens, utterance.slots)]
    lines.append(utterance.intent_line())
    return "\n".join(lines)


def dumps_dataset(utterances: Iterable[Utterance]) -> str:
    blocks = [format_utterance(u) for u in utterances]
    return "\n\n".join(blocks) + "\n" if blocks else ""


def loads_dataset(text: str, path: Optional[str] = None, lowercase: bool = False) -> List[Utterance]:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    utterances: List[Utterance] = []
    block: List[Tuple[int, str]] = []

    def close_block():
        last_number, last_line = block[-1]
        fields = last_line.split()
        if len(fields) != 1:
            raise DatasetFormatError("Missing intent line at the end of the block", path, last_number)
        tokens, slots = [], []
        for number, line in block[:-1]:
            parts = line.split()
            if len(parts) != 2:
                raise DatasetFormatError(f"Expected '<token> <slot>', got {line!r}", path, number)
            tokens.append(parts[0].lower() if lowercase else parts[0])
            slots.append(parts[1])
        if not tokens:
            raise DatasetFormatError("Block has an intent line but no tokens", path, last_number)
        intents = fields[0].split(INTENT_SEPARATOR)
        if any(not intent for intent in intents):
            raise DatasetFormatError(f"Empty intent label in {fields[0]!r}", path, last_number)
        try:
            utterances.append(Utterance(tokens, slots, intents))
        except DatasetFormatError as e:
            raise DatasetFormatError(str(e), path, last_number) from e

    trailing_blank_from: Optional[int] = None
    for number, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r")
        if line.strip():
            if trailing_blank_from is not None:
                raise DatasetFormatError("Empty block", path, trailing_blank_from)
            block.append((number, line))
            continue
        if block:
            close_block()
            block = []
        elif trailing_blank_from is None:
            trailing_blank_from = number
    if block:
        close_block()
    return utterances


def parse_dataset(path: str, lowercase: bool = False) -> List[Utterance]:
    with open(path, "rb") as f:
        data = f.read()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        line_number = data.count(b"\n", 0, e.start) + 1
        raise DatasetFormatError(f"Not valid UTF-8 at byte {e.start}", path, line_number) from e
    utterances = loads_dataset(text, path=path, lowercase=lowercase)
    logger.info("Read %d utterances from %s", len(utterances), path)
    return utterances


def write_dataset(utterances: Iterable[Utterance], path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(dumps_dataset(utterances))


def split_path(directory: str, split: str) -> str:
    return os.path.join(directory, f"{split}.txt")


class Vocabulary:
    """
    Token, slot label and intent label ids.  Tokens reserve PAD=0 and UNK=1;
    slot labels reserve PAD=0; intents have no reserved ids.
    """

    def __init__(self, tokens: Sequence[str], slots: Sequence[str], intents: Sequence[str], lowercase: bool = False):
        self.tokens: List[str] = list(tokens)
        self.slots: List[str] = list(slots)
        self.intents: List[str] = list(intents)
        self.lowercase = lowercase
        if self.tokens[:2] != [PAD, UNK]:
            raise ConfigError("Token vocabulary must start with the PAD and UNK entries")
        if self.slots[:1] != [PAD]:
            raise ConfigError("Slot vocabulary must start with the PAD entry")
        self._token_ids = _index(self.tokens, "token")
        self._slot_ids = _index(self.slots, "slot label")
        self._intent_ids = _index(self.intents, "intent label")

    @property
    def num_tokens(self) -> int:
        return len(self.tokens)

    @property
    def num_slots(self) -> int:
        return len(self.slots)

    @property
    def num_intents(self) -> int:
        return len(self.intents)

    def token_id(self, token: str) -> int:
        if self.lowercase:
            token = token.lower()
        return self._token_ids.get(token, UNK_ID)

    def slot_id(self, slot: str) -> int:
        return self._slot_ids.get(slot, PAD_ID)

    def intent_id(self, intent: str) -> Optional[int]:
        return self._intent_ids.get(intent)

    def slot_label(self, slot_id: int) -> str:
        label = self.slots[slot_id]
        return OUTSIDE if label == PAD else label

    def intent_label(self, intent_id: int) -> str:
        return self.intents[intent_id]

    def to_dict(self) -> Dict:
        return {"tokens": self.tokens, "slots": self.slots, "intents": self.intents, "lowercase": self.lowercase}

    @classmethod
    def from_dict(cls, data: Dict) -> "Vocabulary":
        return cls(data["tokens"], data["slots"], data["intents"], lowercase=data.get("lowercase", False))

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.to_dict() == other.to_dict()


def _index(items: Sequence[str], kind: str) -> Dict[str, int]:
    ids = {item: i for i, item in enumerate(items)}
    if len(ids) != len(items):
        raise ConfigError(f"Duplicate {kind} in vocabulary")
    return ids


def build_vocab(train: Sequence[Utterance], lowercase: bool = False) -> Vocabulary:
    """Vocabulary over the training split, in first-occurrence order."""
    if not train:
        raise ValueError("Cannot build a vocabulary from an empty training set")
    tokens: Dict[str, None] = {PAD: None, UNK: None}
    slots: Dict[str, None] = {PAD: None}
    intents: Dict[str, None] = {}
    for u in train:
        for token in u.tokens:
            tokens.setdefault(token.lower() if lowercase else token, None)
        for slot in u.slots:
            slots.setdefault(slot, None)
        for intent in u.intents:
            intents.setdefault(intent, None)
    return Vocabulary(list(tokens), list(slots), list(intents), lowercase=lowercase)


@dataclass
class Batch:
    token_ids: np.ndarray  # (B, T) int64
    slot_ids: np.ndarray  # (B, T) int64
    intent_targets: np.ndarray  # (B, N_I) multi-hot
    mask: np.ndarray  # (B, T) bool
    lengths: np.ndarray  # (B,) int64
    intent_ids: List[List[int]]  # gold intents per utterance, known labels only
    utterances: List[Utterance] = field(repr=False, default_factory=list)

    @property
    def size(self) -> int:
        return len(self.lengths)

    @property
    def max_length(self) -> int:
        return self.token_ids.shape[1]


def encode_batch(utterances: Sequence[Utterance], vocab: Vocabulary, dtype=None) -> Batch:
    dtype = dtype or default_dtype()
    lengths = np.array([len(u) for u in utterances], dtype=np.int64)
    width = int(lengths.max()) if len(lengths) else 0
    token_ids = np.full((len(utterances), width), PAD_ID, dtype=np.int64)
    slot_ids = np.full((len(utterances), width), PAD_ID, dtype=np.int64)
    targets = np.zeros((len(utterances), vocab.num_intents), dtype=dtype)
    intent_ids: List[List[int]] = []
    for b, u in enumerate(utterances):
        token_ids[b, : len(u)] = [vocab.token_id(t) for t in u.tokens]
        slot_ids[b, : len(u)] = [vocab.slot_id(s) for s in u.slots]
        known = [i for i in (vocab.intent_id(name) for name in u.intents) if i is not None]
        if len(known) < len(u.intents):
            logger.debug("Unknown intent labels in %s", u.intent_line())
        targets[b, known] = 1
        intent_ids.append(known)
    mask = np.arange(width)[None, :] < lengths[:, None]
    return Batch(token_ids, slot_ids, targets, mask, lengths, intent_ids, list(utterances))


def encode_tokens(token_lists: Sequence[Sequence[str]], vocab: Vocabulary, dtype=None) -> Batch:
    """A batch of unlabelled sentences: no gold slots or intents."""
    dtype = dtype or default_dtype()
    if any(len(tokens) == 0 for tokens in token_lists):
        raise DatasetFormatError("Cannot encode an empty sentence")
    lengths = np.array([len(tokens) for tokens in token_lists], dtype=np.int64)
    width = int(lengths.max()) if len(lengths) else 0
    token_ids = np.full((len(token_lists), width), PAD_ID, dtype=np.int64)
    for b, tokens in enumerate(token_lists):
        token_ids[b, : len(tokens)] = [vocab.token_id(t) for t in tokens]
    mask = np.arange(width)[None, :] < lengths[:, None]
    return Batch(
        token_ids,
        np.full_like(token_ids, PAD_ID),
        np.zeros((len(token_lists), vocab.num_intents), dtype=dtype),
        mask,
        lengths,
        [[] for _ in token_lists],
    )


def iterate_batches(
    utterances: Sequence[Utterance],
    vocab: Vocabulary,
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
    dtype=None,
) -> Iterator[Batch]:
    """Batches in corpus order, or shuffled with ``rng``."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    order = np.arange(len(utterances)) if rng is None else rng.permutation(len(utterances))
    for start in range(0, len(order), batch_size):
        yield encode_batch([utterances[i] for i in order[start : start + batch_size]], vocab, dtype=dtype)


class SplitSizes(NamedTuple):
    train: int
    dev: int
    test: int


def split_sizes_reference() -> Dict[str, SplitSizes]:
    """Published split sizes of the multi-intent corpora."""
    return {
        "MixSNIPS": SplitSizes(45000, 2500, 2500),
        "MixATIS": SplitSizes(18000, 1000, 1000),
        "DSTC4": SplitSizes(12759, 4812, 7848),
    }


@dataclass
class MixSpec:
    ratio: Tuple[float, float, float] = (0.3, 0.5, 0.2)  # P(1 intent), P(2), P(3)
    conjunction: str = "and"
    seed: int = 0
    sizes: SplitSizes = SplitSizes(18000, 1000, 1000)
    require_distinct_intents: bool = True

    def __post_init__(self):
        self.ratio = tuple(float(r) for r in self.ratio)
        self.sizes = SplitSizes(*self.sizes)
        if len(self.ratio) != 3:
            raise ConfigError(f"Expected three intent-count probabilities, got {len(self.ratio)}")
        if any(r < 0 for r in self.ratio) or abs(sum(self.ratio) - 1) > 1e-9:
            raise ConfigError(f"Intent-count probabilities must be non-negative and sum to 1, got {self.ratio}")
        if not self.conjunction.split():
            raise ConfigError("The conjunction must contain at least one token")
        if any(n < 0 for n in self.sizes):
            raise ConfigError(f"Split sizes must be non-negative, got {self.sizes}")

    @property
    def max_parts(self) -> int:
        return max(k + 1 for k, r in enumerate(self.ratio) if r > 0)


def join_utterances(parts: Sequence[Utterance], conjunction: str) -> Utterance:
    """Concatenate parts with the conjunction (slot O) between consecutive ones."""
    if len(parts) == 1:
        return parts[0]
    glue = conjunction.split()
    tokens: List[str] = []
    slots: List[str] = []
    intents: Dict[str, None] = {}
    for i, part in enumerate(parts):
        if i > 0:
            tokens.extend(glue)
            slots.extend([OUTSIDE] * len(glue))
        tokens.extend(part.tokens)
        slots.extend(part.slots)
        for intent in part.intents:
            intents.setdefault(intent, None)
    return Utterance(tokens, slots, list(intents))


def mix_datasets(
    source: Sequence[Utterance],
    spec: MixSpec,
    rng: np.random.Generator,
    size: Optional[int] = None,
    disable_progress: bool = True,
) -> List[Utterance]:
    """
    Build ``size`` (default: the train size of ``spec``) multi-intent
    utterances.  Each draws k in {1, 2, 3} with probabilities ``spec.ratio`` and
    joins k source utterances, sampled without replacement within the output
    and with replacement across outputs.
    """
    if not source:
        raise MixError("Cannot mix an empty source corpus")
    size = spec.sizes.train if size is None else size
    labels = sorted({intent for u in source for intent in u.intents})
    label_ids = {label: i for i, label in enumerate(labels)}
    membership = np.zeros((len(source), len(labels)), dtype=bool)
    for row, u in enumerate(source):
        membership[row, [label_ids[i] for i in u.intents]] = True

    k_max = spec.max_parts
    if spec.require_distinct_intents:
        if len(labels) < k_max:
            raise MixError(f"{k_max} distinct intents requested but the source only has {len(labels)}")
    elif len(source) < k_max:
        raise MixError(f"{k_max} parts requested but the source only has {len(source)} utterances")

    counts = rng.choice(3, size=size, p=spec.ratio) + 1
    mixed: List[Utterance] = []
    for k in tqdm(counts, desc="mixing", disable=disable_progress):
        mixed.append(join_utterances(_sample_parts(source, membership, int(k), spec, rng), spec.conjunction))
    return mixed


def _sample_parts(
    source: Sequence[Utterance], membership: np.ndarray, k: int, spec: MixSpec, rng: np.random.Generator
) -> List[Utterance]:
    if not spec.require_distinct_intents:
        return [source[i] for i in rng.choice(len(source), size=k, replace=False)]
    chosen: List[int] = []
    used = np.zeros(membership.shape[1], dtype=bool)
    for _ in range(k):
        candidates = ~(membership[:, used].any(axis=1))
        candidates[chosen] = False
        pool = np.flatnonzero(candidates)
        if len(pool) == 0:
            raise MixError(f"No source utterance has intents disjoint from {sorted(np.flatnonzero(used))}")
        pick = int(pool[rng.integers(len(pool))])
        chosen.append(pick)
        used |= membership[pick]
    return [source[i] for i in chosen]


def mix_corpus(
    sources: Dict[str, Sequence[Utterance]], spec: MixSpec, disable_progress: bool = True
) -> Dict[str, List[Utterance]]:
    """Mix every split from its own source split, each with its own rng stream."""
    out = {}
    for split, size in zip(SPLITS, spec.sizes):
        if split not in sources:
            continue
        rng = split_rng(spec.seed, f"mix.{split}")
        out[split] = mix_datasets(sources[split], spec, rng, size=size, disable_progress=disable_progress)
        logger.info("Mixed %d %s utterances from %d sources", len(out[split]), split, len(sources[split]))
    return out


@dataclass
class DatasetStatistics:
    utterances: int
    tokens: int
    single_intents: List[str]
    intent_combinations: int
    intent_count_histogram: Dict[int, int]
    slot_types: List[str]

    def to_dict(self) -> Dict:
        return {
            "utterances": self.utterances,
            "tokens": self.tokens,
            "single_intents": len(self.single_intents),
            "multi_intent_combinations": self.intent_combinations,
            "intent_count_histogram": {str(k): v for k, v in sorted(self.intent_count_histogram.items())},
            "slot_types": len(self.slot_types),
        }


def dataset_statistics(utterances: Sequence[Utterance]) -> DatasetStatistics:
    singles: Dict[str, None] = {}
    combos = set()
    types: Dict[str, None] = {}
    for u in utterances:
        for intent in u.intents:
            singles.setdefault(intent, None)
        if len(u.intents) > 1:
            combos.add(u.intent_set)
        for slot in u.slots:
            if slot != OUTSIDE and "-" in slot:
                types.setdefault(slot.split("-", 1)[1], None)
    return DatasetStatistics(
        utterances=len(utterances),
        tokens=sum(len(u) for u in utterances),
        single_intents=list(singles),
        intent_combinations=len(combos),
        intent_count_histogram=dict(Counter(len(u.intents) for u in utterances)),
        slot_types=list(types),
    )
