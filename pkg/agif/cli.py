import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence

from .cli_args import Verb, build_parser
from .config import BuiltInConfigName, RunConfig, load_run_config
from .corpus import (
    SPLITS,
    MixSpec,
    dataset_statistics,
    dumps_dataset,
    mix_corpus,
    parse_dataset,
    split_path,
    write_dataset,
)
from .metrics import evaluate_predictions, export_attention, predict_dataset, scored_intent_labels
from .training import fit, gradient_check, load_checkpoint, save_checkpoint
from .util import AGIFError, ConfigError

logger = logging.getLogger(__name__)

# flag dest -> config field
MODEL_FLAGS = {
    "interaction_mode": "interaction_mode",
    "graph_activation": "graph_activation",
    "embedding_dim": "embedding_dim",
    "hidden_dim": "hidden_dim",
    "key_dim": "key_dim",
    "graph_dim": "graph_dim",
    "heads": "num_heads",
    "layers": "num_layers",
    "decoder_layers": "decoder_layers",
    "threshold": "threshold",
    "dropout": "dropout",
}
TRAIN_FLAGS = {
    "seed": "seed",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "learning_rate",
    "alpha": "alpha",
    "l2": "l2",
    "clip_norm": "clip_norm",
    "selection_metric": "selection_metric",
    "intent_source": "intent_source",
    "teacher_forcing": "teacher_forcing",
    "lowercase": "lowercase",
    "workers": "workers",
}


@dataclass
class Command:
    verb: Verb
    args: argparse.Namespace
    run_config: Optional[RunConfig] = None
    mix_spec: Optional[MixSpec] = None


def _explicit(args: argparse.Namespace, flags: Dict[str, str]) -> Dict:
    out = {}
    for dest, key in flags.items():
        value = getattr(args, dest, None)
        if value is not None:
            out[key] = value.value if isinstance(value, Enum) else value
    return out


def _run_config(args: argparse.Namespace, default: Optional[BuiltInConfigName] = None) -> RunConfig:
    """Defaults < built-in preset or config file < explicit flags."""
    preset = getattr(args, "preset", None) or (default if args.config is None else None)
    overrides = {"model": _explicit(args, MODEL_FLAGS), "train": _explicit(args, TRAIN_FLAGS)}
    if preset is not None:
        return RunConfig.from_built_in(preset, overrides)
    if args.config is not None:
        return RunConfig.from_file(args.config, overrides)
    return load_run_config(None, overrides)


def parse_args(argv: Optional[Sequence[str]] = None) -> Command:
    """
    Parse and validate a command line.  Usage errors exit with status 2;
    invalid configuration raises ConfigError.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    verb = Verb(args.verb)
    if getattr(args, "preset", None) is not None and args.config is not None:
        parser.error("--preset and --config are mutually exclusive")

    if verb == Verb.MIX:
        spec = MixSpec(
            ratio=args.ratio,
            conjunction=args.conjunction,
            seed=args.seed if args.seed is not None else 0,
            sizes=args.sizes,
            require_distinct_intents=not args.allow_shared_intents,
        )
        return Command(verb, args, mix_spec=spec)
    if verb == Verb.TRAIN:
        return Command(verb, args, run_config=_run_config(args))
    if verb == Verb.GRADCHECK:
        return Command(verb, args, run_config=_run_config(args, default=BuiltInConfigName.MICRO))
    return Command(verb, args)


def _print(line: str) -> None:
    sys.stdout.write(line + "\n")
    sys.stdout.flush()


def _mix(cmd: Command) -> int:
    args = cmd.args
    sources = {}
    for split in SPLITS:
        path = split_path(args.source, split)
        if os.path.exists(path):
            sources[split] = parse_dataset(path)
    if "train" not in sources:
        raise ConfigError(f"{split_path(args.source, 'train')} does not exist")
    mixed = mix_corpus(sources, cmd.mix_spec, disable_progress=not args.progress)
    os.makedirs(args.out, exist_ok=True)
    for split, utterances in mixed.items():
        write_dataset(utterances, split_path(args.out, split))
        _print(json.dumps({"split": split, **dataset_statistics(utterances).to_dict()}, sort_keys=True))
    return 0


def _train(cmd: Command) -> int:
    args = cmd.args
    config = cmd.run_config
    lowercase = config.train.lowercase
    train = parse_dataset(split_path(args.data, "train"), lowercase=lowercase)
    dev = parse_dataset(split_path(args.data, "dev"), lowercase=lowercase)
    result = fit(
        train,
        dev,
        config.model,
        config.train,
        on_epoch=lambda record: _print(json.dumps(record, sort_keys=True)),
        disable_progress=not args.progress,
    )
    save_checkpoint(result.checkpoint, args.out)
    logger.info("Saved epoch %d checkpoint to %s", result.best_epoch, args.out)
    return 0


def _eval(cmd: Command) -> int:
    args = cmd.args
    checkpoint = load_checkpoint(args.ckpt)
    model = checkpoint.model
    gold = parse_dataset(args.data, lowercase=model.vocab.lowercase)
    run = predict_dataset(model, gold, args.batch_size, args.workers, disable_progress=not args.progress)
    report = evaluate_predictions(gold, run.predictions, scored_intent_labels(model.vocab, gold))
    if args.export_attention is not None:
        offset = 0
        for batch, trace in run.traces:
            frames = run.predictions[offset : offset + batch.size]
            export_attention(trace, frames, args.export_attention, offset=offset, heatmaps=args.heatmaps)
            offset += batch.size
    if args.dump is not None:
        write_dataset(run.predictions, args.dump)
    _print(report.to_json())
    return 0


def _read_sentences(text: Optional[str]) -> List[List[str]]:
    lines = [text] if text is not None else sys.stdin.read().splitlines()
    return [line.split() for line in lines if line.strip()]


def _predict(cmd: Command) -> int:
    model = load_checkpoint(cmd.args.ckpt).model
    sentences = _read_sentences(cmd.args.text)
    if not sentences:
        raise ConfigError("No input sentences")
    sys.stdout.write(dumps_dataset(model.predict(sentences)))
    sys.stdout.flush()
    return 0


def _gradcheck(cmd: Command) -> int:
    args = cmd.args
    config = cmd.run_config
    report = gradient_check(config.model, config.train, h=args.step, samples=args.samples)
    worst = max(report.values(), default=0.0)
    _print(json.dumps({"max_rel_err": worst, "tol": args.tol, "per_parameter": report}, sort_keys=True))
    return 0 if worst < args.tol else 1


HANDLERS = {
    Verb.MIX: _mix,
    Verb.TRAIN: _train,
    Verb.EVAL: _eval,
    Verb.PREDICT: _predict,
    Verb.GRADCHECK: _gradcheck,
}


def dispatch(cmd: Command) -> int:
    logger.debug("Running %s", cmd.verb.value)
    return HANDLERS[cmd.verb](cmd)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cmd = parse_args(argv)
        logging.basicConfig(
            level=getattr(logging, cmd.args.log_level),
            stream=sys.stderr,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        return dispatch(cmd)
    except (AGIFError, OSError) as e:
        print(f"agif: error: {e}", file=sys.stderr)
        return 1
