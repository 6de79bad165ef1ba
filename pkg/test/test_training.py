import json
import math
import os
import tempfile
from unittest import TestCase
from unittest.mock import patch

import numpy as np

from agif import autodiff as ad
from agif.autodiff import Tensor
from agif.corpus import MixSpec, Utterance, build_vocab, mix_datasets
from agif.metrics import EvalReport, evaluate
from agif.model import ModelConfig, SLUModel
from agif.training import (
    MANIFEST_FILENAME,
    WEIGHTS_FILENAME,
    Checkpoint,
    TrainConfig,
    fit,
    intent_loss,
    joint_loss,
    load_checkpoint,
    micro_corpus,
    save_checkpoint,
    slot_loss,
    train_epoch,
)
from agif.util import CheckpointError, ConfigError, ShapeError, TrainingDivergedError

MICRO = ModelConfig(
    embedding_dim=8,
    hidden_dim=16,
    key_dim=8,
    graph_dim=8,
    num_heads=2,
    num_layers=2,
    intent_hidden_dim=8,
    dropout=0.0,
)
TOY = ModelConfig(
    embedding_dim=16,
    hidden_dim=32,
    key_dim=16,
    graph_dim=16,
    num_heads=2,
    num_layers=2,
    intent_hidden_dim=16,
    dropout=0.0,
)


def report(overall: float, slot_f1: float = 0.5) -> EvalReport:
    return EvalReport(0.5, 0.5, slot_f1, 0.5, 0.5, overall, 2)


def toy_corpus(size: int = 32) -> list:
    """Two-intent utterances over four intents and four slot types."""
    parts = [
        Utterance(["play", "jazz"], ["O", "B-genre"], ["PlayMusic"]),
        Utterance(["play", "some", "rock"], ["O", "O", "B-genre"], ["PlayMusic"]),
        Utterance(["weather", "in", "paris"], ["O", "O", "B-city"], ["GetWeather"]),
        Utterance(["is", "rome", "sunny"], ["O", "B-city", "O"], ["GetWeather"]),
        Utterance(["reserve", "table", "for", "two"], ["O", "O", "O", "B-count"], ["BookRestaurant"]),
        Utterance(["book", "four", "seats", "in", "lyon"], ["O", "B-count", "O", "O", "B-city"], ["BookRestaurant"]),
        Utterance(["rate", "this", "five", "stars"], ["O", "O", "B-rating", "I-rating"], ["RateBook"]),
        Utterance(["give", "it", "two", "points"], ["O", "O", "B-rating", "I-rating"], ["RateBook"]),
    ]
    spec = MixSpec(ratio=(0.0, 1.0, 0.0), seed=0)
    return mix_datasets(parts, spec, np.random.default_rng(0), size=size)


class TestLosses(TestCase):
    def test_binary_cross_entropy(self):
        loss = intent_loss(Tensor(np.array([[0.5]])), np.array([[1.0]]))
        self.assertAlmostEqual(loss.item(), 0.693147, places=6)

    def test_bce_is_clamped(self):
        loss = intent_loss(Tensor(np.array([[0.0, 1.0]])), np.array([[1.0, 0.0]]))
        self.assertTrue(math.isfinite(loss.item()))
        self.assertAlmostEqual(loss.item(), -2 * math.log(1e-7), places=3)

    def test_batch_mean(self):
        probs = Tensor(np.array([[0.5], [0.5]]))
        self.assertAlmostEqual(intent_loss(probs, np.array([[1.0], [0.0]])).item(), math.log(2), places=6)

    def test_uniform_slot_distribution(self):
        distributions = Tensor(np.full((1, 1, 4), 0.25))
        loss = slot_loss(distributions, np.array([[2]]), np.array([[True]]))
        self.assertAlmostEqual(loss.item(), 1.386294, places=6)

    def test_padded_steps_are_ignored(self):
        distributions = Tensor(np.full((1, 2, 4), 0.25), requires_grad=True)
        with ad.Tape() as tape:
            loss = slot_loss(distributions, np.array([[1, 0]]), np.array([[True, False]]))
        tape.backward(loss)
        self.assertAlmostEqual(loss.item(), math.log(4), places=6)
        np.testing.assert_array_equal(distributions.grad[0, 1], 0.0)

    def test_slot_id_out_of_range(self):
        with self.assertRaises(ShapeError):
            slot_loss(Tensor(np.full((1, 1, 4), 0.25)), np.array([[4]]), np.array([[True]]))

    def test_joint_loss_mixing(self):
        l1, l2 = Tensor(np.array(0.7)), Tensor(np.array(0.2))
        self.assertEqual(joint_loss(l1, l2, 1.0).item(), l1.item())
        self.assertEqual(joint_loss(l1, l2, 0.0).item(), l2.item())
        self.assertAlmostEqual(joint_loss(l1, l2, 0.5).item(), 0.45)

    def test_l2_term(self):
        zero = Tensor(np.array(0.0))
        loss = joint_loss(zero, zero, 0.5, {"W": Tensor(np.ones((2, 2)))}, l2=1e-6)
        self.assertAlmostEqual(loss.item(), 4e-6, places=12)


class TestTrainConfig(TestCase):
    def test_invalid(self):
        with self.assertRaises(ConfigError):
            TrainConfig(alpha=1.5)
        with self.assertRaises(ConfigError):
            TrainConfig(epochs=0)
        with self.assertRaises(ConfigError):
            TrainConfig(workers=0)

    def test_enum_values(self):
        config = TrainConfig(selection_metric="slot_f1", intent_source="predicted")
        self.assertEqual(config.to_dict()["selection_metric"], "slot_f1")
        self.assertEqual(config.to_dict()["intent_source"], "predicted")


class TestFit(TestCase):
    def test_zero_learning_rate_keeps_parameters(self):
        corpus = micro_corpus()
        config = TrainConfig(learning_rate=0.0, batch_size=1, epochs=1, seed=3)
        result = fit(corpus, corpus, MICRO, config)
        initial = SLUModel.initialize(MICRO, build_vocab(corpus), seed=3)
        for name, tensor in initial.params.named_parameters().items():
            np.testing.assert_array_equal(result.checkpoint.tensors[name], tensor.data, err_msg=name)

    def test_same_seed_same_run(self):
        corpus = micro_corpus()
        config = TrainConfig(batch_size=1, epochs=2, seed=5)
        first = fit(corpus, corpus, MICRO, config)
        second = fit(corpus, corpus, MICRO, config)
        self.assertEqual([r["loss"] for r in first.history], [r["loss"] for r in second.history])
        for name, arr in first.checkpoint.tensors.items():
            np.testing.assert_array_equal(arr, second.checkpoint.tensors[name])

    def test_dropout_run_is_reproducible(self):
        corpus = micro_corpus()
        config = TrainConfig(batch_size=2, epochs=1, seed=1)
        model_config = ModelConfig(**{**MICRO.to_dict(), "dropout": 0.4})
        losses = [fit(corpus, corpus, model_config, config).history[0]["loss"] for _ in range(2)]
        self.assertEqual(losses[0], losses[1])

    def test_earlier_epoch_wins_ties(self):
        corpus = micro_corpus()
        with patch("agif.training.evaluate", side_effect=[report(0.3), report(0.5), report(0.5)]):
            result = fit(corpus, corpus, MICRO, TrainConfig(batch_size=2, epochs=3))
        self.assertEqual(result.best_epoch, 2)
        self.assertEqual([r["selected"] for r in result.history], [True, True, False])
        self.assertEqual(result.checkpoint.dev_metrics["overall_acc"], 0.5)

    def test_slot_f1_breaks_ties(self):
        corpus = micro_corpus()
        with patch("agif.training.evaluate", side_effect=[report(0.5, 0.2), report(0.5, 0.4)]):
            result = fit(corpus, corpus, MICRO, TrainConfig(batch_size=2, epochs=2))
        self.assertEqual(result.best_epoch, 2)

    def test_selection_metric(self):
        corpus = micro_corpus()
        reports = [report(0.9, 0.1), report(0.1, 0.9)]
        config = TrainConfig(batch_size=2, epochs=2, selection_metric="slot_f1")
        with patch("agif.training.evaluate", side_effect=reports):
            self.assertEqual(fit(corpus, corpus, MICRO, config).best_epoch, 2)

    def test_non_finite_loss(self):
        corpus = micro_corpus()
        with patch("agif.training.intent_loss", return_value=Tensor(np.array(np.nan))):
            with self.assertRaises(TrainingDivergedError):
                fit(corpus, corpus, MICRO, TrainConfig(batch_size=2, epochs=1))

    def test_empty_dev(self):
        with self.assertRaises(ValueError):
            fit(micro_corpus(), [], MICRO, TrainConfig(epochs=1))

    def test_overfits_a_toy_corpus(self):
        corpus = toy_corpus()
        self.assertEqual(len(corpus), 32)
        self.assertTrue(all(len(u.intents) == 2 for u in corpus))
        config = TrainConfig(batch_size=4, epochs=300, seed=0)
        self.assertEqual(config.learning_rate, 1e-3)
        result = fit(corpus, corpus, TOY, config)
        best = max(r["dev"]["overall_acc"] for r in result.history)
        self.assertEqual(result.checkpoint.dev_metrics["overall_acc"], best)
        self.assertGreaterEqual(best, 0.95)
        scores = evaluate(result.checkpoint.model, corpus)
        self.assertAlmostEqual(scores.overall_acc, best, places=6)

    def test_epoch_loss_decreases(self):
        corpus = toy_corpus()
        config = TrainConfig(seed=0)
        model = SLUModel.initialize(MICRO, build_vocab(corpus), seed=config.seed)
        optimizer = ad.AdamState(lr=config.learning_rate)
        rng = np.random.default_rng(config.seed)
        losses = [train_epoch(corpus, model, optimizer, config, rng, epoch).loss for epoch in range(1, 6)]
        self.assertTrue(all(b < a for a, b in zip(losses, losses[1:])), losses)


class TestCheckpoint(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.model = SLUModel.initialize(MICRO, build_vocab(micro_corpus()), seed=0)

    def test_round_trip_is_byte_identical(self):
        with tempfile.TemporaryDirectory() as tmp:
            first, second = os.path.join(tmp, "a"), os.path.join(tmp, "b")
            save_checkpoint(self.model, first, train_config=TrainConfig(), dev_metrics={"overall_acc": 0.25}, epoch=3)
            loaded = load_checkpoint(first)
            save_checkpoint(loaded, second)
            for filename in (MANIFEST_FILENAME, WEIGHTS_FILENAME):
                with open(os.path.join(first, filename), "rb") as a, open(os.path.join(second, filename), "rb") as b:
                    self.assertEqual(a.read(), b.read(), filename)
            self.assertEqual(loaded.epoch, 3)
            self.assertEqual(loaded.vocab, self.model.vocab)

    def test_loaded_model_predicts_the_same(self):
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(self.model, tmp)
            loaded = load_checkpoint(tmp).model
        self.assertEqual(loaded.predict(micro_corpus()), self.model.predict(micro_corpus()))

    def test_manifest_layout(self):
        manifest = Checkpoint.from_model(self.model).manifest()
        offsets = [entry["offset"] for entry in manifest["tensors"]]
        self.assertEqual(offsets[0], 0)
        self.assertEqual(offsets, sorted(offsets))
        total = sum(int(np.prod(e["shape"])) * 4 for e in manifest["tensors"])
        self.assertEqual(manifest["total_bytes"], total)

    def test_tampered_blob(self):
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(self.model, tmp)
            with open(os.path.join(tmp, WEIGHTS_FILENAME), "ab") as f:
                f.write(b"\0\0\0\0")
            with self.assertRaises(CheckpointError):
                load_checkpoint(tmp)

    def test_truncated_blob(self):
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(self.model, tmp)
            path = os.path.join(tmp, WEIGHTS_FILENAME)
            with open(path, "rb") as f:
                blob = f.read()
            with open(path, "wb") as f:
                f.write(blob[:-4])
            with self.assertRaises(CheckpointError):
                load_checkpoint(tmp)

    def test_incomplete_manifest(self):
        edits = {
            "total_bytes": lambda m: m.pop("total_bytes"),
            "tensor name": lambda m: m["tensors"][0].pop("name"),
            "tensor shape": lambda m: m["tensors"][1].update(shape="wide"),
            "empty": lambda m: m.clear(),
        }
        for label, edit in edits.items():
            with self.subTest(edit=label), tempfile.TemporaryDirectory() as tmp:
                save_checkpoint(self.model, tmp)
                path = os.path.join(tmp, MANIFEST_FILENAME)
                with open(path, encoding="utf-8") as f:
                    manifest = json.load(f)
                edit(manifest)
                with open(path, "w", encoding="utf-8") as f:
                    json.dump(manifest, f)
                with self.assertRaises(CheckpointError):
                    load_checkpoint(tmp)

    def test_missing_directory(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(CheckpointError):
                load_checkpoint(os.path.join(tmp, "nothing"))
