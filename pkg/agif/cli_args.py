import argparse
import enum
from typing import Tuple

from .config import BuiltInConfigName
from .layers.graph import GraphActivation
from .model import InteractionMode, IntentSource
from .training import SelectionMetric


class EnumAction(argparse.Action):
    """
    Argparse action for handling Enums
    """

    def __init__(self, **kwargs):
        enum_type = kwargs.pop("type", None)
        if enum_type is None:
            raise ValueError("type must be assigned an Enum when using EnumAction")
        if not issubclass(enum_type, enum.Enum):
            raise TypeError("type must be an Enum when using EnumAction")

        choices = tuple(e.value for e in enum_type)
        kwargs.setdefault("choices", choices)
        kwargs.setdefault("metavar", f"[{','.join(choices)}]")
        super().__init__(**kwargs)
        self._enum = enum_type

    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, self._enum(values))


class Verb(enum.Enum):
    MIX = "mix"
    TRAIN = "train"
    EVAL = "eval"
    PREDICT = "predict"
    GRADCHECK = "gradcheck"


def ratio_triple(text: str) -> Tuple[float, float, float]:
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from e
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f"expected three probabilities, got {len(values)}")
    if any(v < 0 for v in values) or abs(sum(values) - 1) > 1e-9:
        raise argparse.ArgumentTypeError(f"probabilities must be non-negative and sum to 1: {text!r}")
    return values


def size_triple(text: str) -> Tuple[int, int, int]:
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from e
    if len(values) != 3 or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError(f"expected three non-negative sizes (train,dev,test): {text!r}")
    return values


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--log-level", type=str, default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    p.add_argument("--progress", action="store_true", help="Show progress bars on stderr.")


def _add_seed(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="Random seed.")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--config", type=str, default=None, metavar="PATH", help="YAML or JSON run configuration.")
    g.add_argument("--preset", type=BuiltInConfigName, action=EnumAction, default=None, help="Built-in configuration.")
    g.add_argument("--interaction-mode", type=InteractionMode, action=EnumAction, default=None)
    g.add_argument("--graph-activation", type=GraphActivation, action=EnumAction, default=None)
    g.add_argument("--embedding-dim", type=int, default=None)
    g.add_argument("--hidden-dim", type=int, default=None, help="Encoder width d (even).")
    g.add_argument("--key-dim", type=int, default=None)
    g.add_argument("--graph-dim", type=int, default=None, help="Graph node width d_g (divisible by --heads).")
    g.add_argument("--heads", type=int, default=None)
    g.add_argument("--layers", type=int, default=None, help="Number of graph layers.")
    g.add_argument("--decoder-layers", type=int, default=None)
    g.add_argument("--threshold", type=float, default=None, help="Intent probability threshold.")
    g.add_argument("--dropout", type=float, default=None)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=None)
    g.add_argument("--batch-size", type=int, default=None)
    g.add_argument("--lr", type=float, default=None)
    g.add_argument("--alpha", type=float, default=None, help="Weight of the intent loss.")
    g.add_argument("--l2", type=float, default=None)
    g.add_argument("--clip-norm", type=float, default=None)
    g.add_argument("--selection-metric", type=SelectionMetric, action=EnumAction, default=None)
    g.add_argument("--intent-source", type=IntentSource, action=EnumAction, default=None)
    g.add_argument(
        "--no-teacher-forcing", dest="teacher_forcing", action="store_const", const=False, default=None,
        help="Feed the predicted slot distribution back during training.",
    )
    g.add_argument("--lowercase", action="store_const", const=True, default=None)
    g.add_argument("--workers", type=int, default=None, help="Threads for dev evaluation.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agif", description="Joint multi-intent detection and slot filling.")
    sub = parser.add_subparsers(dest="verb", metavar="VERB", required=True)

    mix = sub.add_parser(Verb.MIX.value, help="Synthesize a multi-intent corpus from single-intent splits.")
    _add_common(mix)
    _add_seed(mix)
    mix.add_argument("--source", required=True, metavar="DIR", help="Directory with train.txt, dev.txt, test.txt.")
    mix.add_argument("--out", required=True, metavar="DIR")
    mix.add_argument("--ratio", type=ratio_triple, default=(0.3, 0.5, 0.2), help="P(1),P(2),P(3) intents.")
    mix.add_argument("--conjunction", type=str, default="and")
    mix.add_argument("--sizes", type=size_triple, default=(18000, 1000, 1000), metavar="TRAIN,DEV,TEST")
    mix.add_argument("--allow-shared-intents", action="store_true", help="Do not require distinct intents per part.")

    train = sub.add_parser(Verb.TRAIN.value, help="Train a model and write the best dev checkpoint.")
    _add_common(train)
    _add_seed(train)
    train.add_argument("--data", required=True, metavar="DIR", help="Directory with train.txt and dev.txt.")
    train.add_argument("--out", default="checkpoint", metavar="DIR")
    _add_model_flags(train)
    _add_train_flags(train)

    ev = sub.add_parser(Verb.EVAL.value, help="Evaluate a checkpoint on a dataset file.")
    _add_common(ev)
    ev.add_argument("--data", required=True, metavar="FILE")
    ev.add_argument("--ckpt", required=True, metavar="DIR")
    ev.add_argument("--batch-size", type=int, default=64)
    ev.add_argument("--workers", type=int, default=1)
    ev.add_argument("--export-attention", default=None, metavar="DIR", help="Write per-utterance attention CSVs.")
    ev.add_argument("--heatmaps", action="store_true", help="Also render PNG heat maps of the attention.")
    ev.add_argument("--dump", default=None, metavar="FILE", help="Write predictions in the dataset format.")

    predict = sub.add_parser(Verb.PREDICT.value, help="Predict frames for whitespace-tokenized text.")
    _add_common(predict)
    predict.add_argument("--ckpt", required=True, metavar="DIR")
    predict.add_argument("--text", default=None, help="One sentence; read lines from stdin otherwise.")

    gradcheck = sub.add_parser(Verb.GRADCHECK.value, help="Check model gradients against finite differences.")
    _add_common(gradcheck)
    _add_seed(gradcheck)
    _add_model_flags(gradcheck)
    gradcheck.add_argument("--tol", type=float, default=1e-3)
    gradcheck.add_argument("--step", type=float, default=1e-4, help="Finite difference step h.")
    gradcheck.add_argument("--samples", type=int, default=3, help="Coordinates checked per parameter.")
    return parser
