import dataclasses
from unittest import TestCase

import numpy as np

from agif import autodiff as ad
from agif.autodiff import Tensor
from agif.corpus import Utterance, build_vocab, encode_batch
from agif.layers.graph import (
    Aggregation,
    GraphLayerParams,
    batch_interaction_graph,
    build_interaction_graph,
    gat_layer,
    graph_interact,
    sentence_intent_summary,
    vanilla_attention_interact,
)
from agif.layers.recurrent import LSTMParams, lstm_cell, zero_state
from agif.model import (
    ForwardMode,
    IntentSource,
    InteractionMode,
    ModelConfig,
    ModelParams,
    SLUModel,
    encode,
    intent_pool,
    predict_slot,
    threshold_intents,
)
from agif.training import gradient_check, intent_loss, joint_loss, micro_corpus, slot_loss
from agif.util import ConfigError, ShapeError

MICRO = dict(
    embedding_dim=8,
    hidden_dim=16,
    key_dim=8,
    graph_dim=8,
    num_heads=2,
    num_layers=2,
    intent_hidden_dim=8,
    dropout=0.0,
)


def micro_model(dtype="float64", **changes) -> SLUModel:
    config = ModelConfig(**{**MICRO, **changes})
    return SLUModel.initialize(config, build_vocab(micro_corpus()), seed=0, dtype=np.dtype(dtype))


class TestModelConfig(TestCase):
    def test_enum_values_are_coerced(self):
        config = ModelConfig(interaction_mode="gcn", graph_activation="elu")
        self.assertEqual(config.interaction_mode, InteractionMode.GCN)
        self.assertEqual(config.to_dict()["graph_activation"], "elu")

    def test_invalid(self):
        with self.assertRaises(ConfigError):
            ModelConfig(hidden_dim=15)
        with self.assertRaises(ConfigError):
            ModelConfig(graph_dim=10, num_heads=4)
        with self.assertRaises(ConfigError):
            ModelConfig(threshold=1.0)
        with self.assertRaises(ValueError):
            ModelConfig(interaction_mode="lstm")

    def test_params_need_vocabulary_sizes(self):
        with self.assertRaises(ConfigError):
            ModelParams.initialize(ModelConfig(**MICRO))

    def test_regularized_weights(self):
        names = set(micro_model().params.regularized())
        self.assertIn("graph.0.W", names)
        self.assertIn("slot_decoder.W_s", names)
        self.assertIn("encoder.forward.W_ih", names)
        self.assertNotIn("graph.0.a", names)
        self.assertNotIn("encoder.embedding", names)
        self.assertNotIn("intent_decoder.b", names)
        self.assertNotIn("slot_decoder.lstm0.b", names)

    def test_graph_layer_widths(self):
        layers = micro_model().params.graph.layers
        self.assertEqual(len(layers), 2)
        self.assertEqual(layers[0].W.shape, (2, 4, 8))
        self.assertEqual(layers[1].W.shape, (2, 8, 8))
        self.assertTrue(all(layer.a is None for layer in micro_model(interaction_mode="gcn").params.graph.layers))
        self.assertEqual(micro_model(interaction_mode="sentence_level").params.graph.layers, [])


class TestEncoder(TestCase):
    def test_shape(self):
        model = micro_model()
        batch = encode_batch(micro_corpus(), model.vocab, dtype=np.float64)
        encoding = encode(batch, model.params, model.config)
        self.assertEqual(encoding.shape, (2, 6, 32))

    def test_single_token_attention_is_the_value(self):
        model = micro_model()
        batch = encode_batch([Utterance(["play"], ["O"], ["PlayMusic"])], model.vocab, dtype=np.float64)
        encoding = encode(batch, model.params, model.config)
        x = model.params.encoder.embedding.data[batch.token_ids[0, 0]]
        np.testing.assert_allclose(encoding.data[0, 0, 16:], model.params.encoder.W_v.data @ x, atol=1e-12)

    def test_padded_keys_get_no_attention(self):
        model = micro_model()
        batch = encode_batch(micro_corpus(), model.vocab, dtype=np.float64)
        altered = dataclasses.replace(batch, token_ids=batch.token_ids.copy())
        altered.token_ids[~altered.mask] = 4
        first = encode(batch, model.params, model.config).data
        second = encode(altered, model.params, model.config).data
        # utterance 1 has three tokens and three padded keys
        np.testing.assert_array_equal(first[1, :3, 16:], second[1, :3, 16:])
        np.testing.assert_array_equal(first[0], second[0])

    def test_token_outside_vocabulary(self):
        model = micro_model()
        batch = encode_batch(micro_corpus(), model.vocab, dtype=np.float64)
        batch.token_ids[0, 0] = model.vocab.num_tokens
        with self.assertRaises(ShapeError):
            encode(batch, model.params, model.config)


class TestIntentDecoder(TestCase):
    def test_pool_weights_are_convex(self):
        model = micro_model()
        batch = encode_batch(micro_corpus(), model.vocab, dtype=np.float64)
        encoding = encode(batch, model.params, model.config)
        context, weights = intent_pool(encoding, batch.lengths, model.params.intent_decoder)
        self.assertEqual(context.shape, (2, 32))
        np.testing.assert_allclose(weights.data.sum(axis=1), 1.0)
        self.assertTrue(np.all(weights.data >= 0))
        np.testing.assert_array_equal(weights.data[1, 3:], 0.0)

    def test_threshold(self):
        self.assertEqual(threshold_intents(np.array([0.9, 0.3, 0.6, 0.7, 0.2]), 0.5), [[0, 2, 3]])
        self.assertEqual(threshold_intents(np.array([[0.1, 0.4, 0.3]]), 0.5), [[1]])
        self.assertEqual(threshold_intents(np.array([[0.2, 0.2]]), 0.5), [[0]])


class TestGraph(TestCase):
    def test_complete_graph(self):
        self.assertTrue(build_interaction_graph(2).all())
        self.assertEqual(build_interaction_graph(0).tolist(), [[True]])

    def test_padded_nodes_are_isolated(self):
        adjacency, node_mask = batch_interaction_graph([1, 3])
        self.assertEqual(adjacency.shape, (2, 4, 4))
        np.testing.assert_array_equal(node_mask[0], [True, True, False, False])
        np.testing.assert_array_equal(adjacency[0, 0], [True, True, False, False])
        np.testing.assert_array_equal(adjacency[0, 3], [False, False, False, True])
        self.assertTrue(adjacency[1].all())

    def test_single_node(self):
        with ad.precision("float64"):
            rng = np.random.default_rng(0)
            layer = GraphLayerParams.initialize(8, 8, 2, rng)
            node = Tensor(rng.normal(size=(1, 8)))
            out, weights = gat_layer(node, build_interaction_graph(0), layer, final=True)
        self.assertEqual(out.shape, (1, 8))
        np.testing.assert_allclose(weights, 1.0)

    def test_intent_order_does_not_matter(self):
        for n in (2, 3):
            with self.subTest(n=n), ad.precision("float64"):
                rng = np.random.default_rng(n)
                layers = [GraphLayerParams.initialize(8, 4, 2, rng), GraphLayerParams.initialize(8, 8, 2, rng)]
                slot = Tensor(rng.normal(size=(1, 8)))
                nodes = rng.normal(size=(1, n, 8))
                adjacency, _ = batch_interaction_graph([n])
                out, _ = graph_interact(slot, Tensor(nodes), adjacency, layers)
                shuffled, _ = graph_interact(slot, Tensor(nodes[:, rng.permutation(n)]), adjacency, layers)
                np.testing.assert_allclose(out.data, shuffled.data, atol=1e-12)

    def test_no_layers_is_identity(self):
        slot = Tensor(np.ones((2, 8)))
        adjacency, _ = batch_interaction_graph([1, 2])
        out, weights = graph_interact(slot, Tensor(np.zeros((2, 2, 8))), adjacency, [])
        self.assertIs(out, slot)
        self.assertEqual(weights, [])


class TestSlotDecoder(TestCase):
    def test_zero_lstm_is_a_fixed_point(self):
        params = LSTMParams(
            ad.zeros((16, 5), requires_grad=True), ad.zeros((16, 4), requires_grad=True), ad.zeros((16,))
        )
        h, c = lstm_cell(Tensor(np.random.default_rng(0).normal(size=(3, 5))), zero_state(3, params), params)
        np.testing.assert_array_equal(h.data, 0.0)
        np.testing.assert_array_equal(c.data, 0.0)

    def test_zero_output_weights(self):
        distribution, labels = predict_slot(Tensor(np.ones((2, 8))), ad.zeros((5, 8)))
        np.testing.assert_allclose(distribution.data, 0.2)
        np.testing.assert_array_equal(labels, [0, 0])


class TestForward(TestCase):
    def setUp(self):
        self.model = micro_model()
        self.batch = encode_batch(micro_corpus(), self.model.vocab, dtype=np.float64)

    def test_outputs(self):
        trace = self.model.forward(self.batch)
        self.assertEqual([len(p) for p in trace.slot_predictions], [6, 3])
        probs = trace.slot_probs()
        self.assertEqual(probs.shape, (2, 6, self.model.vocab.num_slots))
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0)
        self.assertTrue(all(len(ids) >= 1 for ids in trace.predicted_intents))
        self.assertEqual(trace.graph_intents, trace.predicted_intents)

    def test_deterministic(self):
        first = self.model.forward(self.batch)
        second = self.model.forward(self.batch)
        np.testing.assert_array_equal(first.slot_probs(), second.slot_probs())
        np.testing.assert_array_equal(first.intent_probs.data, second.intent_probs.data)

    def test_gold_intents_feed_the_graph(self):
        trace = self.model.forward(self.batch, intent_source=IntentSource.GOLD)
        self.assertEqual(trace.graph_intents, self.batch.intent_ids)

    def test_attention_rows(self):
        trace = self.model.forward(self.batch, intent_source=IntentSource.GOLD)
        self.assertEqual(trace.slot_attention.shape, (2, 6, 3))
        weights = trace.utterance_attention(1)
        self.assertEqual(weights.shape, (3, 2))
        np.testing.assert_allclose(weights.sum(axis=1), 1.0)

    def test_variants(self):
        for mode in InteractionMode:
            with self.subTest(mode=mode.value):
                model = micro_model(interaction_mode=mode)
                trace = model.forward(self.batch, intent_source=IntentSource.GOLD)
                self.assertEqual(trace.slot_probs().shape[:2], (2, 6))
                if mode in (InteractionMode.SENTENCE_LEVEL, InteractionMode.SENTENCE_LEVEL_2LAYER):
                    self.assertIsNone(trace.slot_attention)
                else:
                    self.assertTrue(np.all(trace.utterance_attention(0)[:, 1:].sum(axis=1) > 0))
        self.assertEqual(len(micro_model(interaction_mode="sentence_level_2layer").params.slot_decoder.layers), 2)

    def test_mean_aggregation_weights(self):
        model = micro_model(interaction_mode="gcn")
        trace = model.forward(self.batch, intent_source=IntentSource.GOLD)
        np.testing.assert_allclose(trace.utterance_attention(0), 1 / 3)
        np.testing.assert_allclose(trace.utterance_attention(1), 1 / 2)

    def test_vanilla_attention_has_no_self_weight(self):
        model = micro_model(interaction_mode="vanilla_attention")
        weights = model.forward(self.batch, intent_source=IntentSource.GOLD).utterance_attention(0)
        np.testing.assert_array_equal(weights[:, 0], 0.0)
        np.testing.assert_allclose(weights[:, 1:].sum(axis=1), 1.0)

    def test_no_graph_layers(self):
        trace = micro_model(num_layers=0).forward(self.batch)
        self.assertIsNone(trace.slot_attention)

    def test_training_dropout_needs_rng(self):
        model = micro_model(dropout=0.4)
        with self.assertRaises(ValueError):
            model.forward(self.batch, ForwardMode.TRAIN, IntentSource.GOLD)

    def test_predict_tokens(self):
        frames = self.model.predict([["play", "some", "jazz"], ["book"]])
        self.assertEqual(frames[0].tokens, ("play", "some", "jazz"))
        self.assertEqual(len(frames[0].slots), 3)
        self.assertTrue(frames[1].intents)
        self.assertTrue(set(frames[1].intents) <= set(self.model.vocab.intents))

    def test_predict_utterances_keeps_tokens(self):
        frames = self.model.predict(micro_corpus())
        self.assertEqual([f.tokens for f in frames], [u.tokens for u in micro_corpus()])


class TestInteractionVariants(TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(8)

    def test_single_intent_summary_is_its_embedding(self):
        nodes = self.rng.normal(size=(2, 2, 4))
        mask = np.array([[True, False], [True, True]])
        summary = sentence_intent_summary(Tensor(nodes), mask).data
        np.testing.assert_array_equal(summary[0], nodes[0, 0])
        np.testing.assert_allclose(summary[1], nodes[1].sum(axis=0))

    def test_identical_intents_give_their_embedding_as_context(self):
        embedding = self.rng.normal(size=4)
        nodes = np.tile(embedding, (2, 3, 1))
        nodes[1, 2] = self.rng.normal(size=4)
        mask = np.array([[True, True, True], [True, True, False]])
        for scale in (0.1, 10.0):
            states = self.rng.normal(size=(2, 4)) * scale
            out, weights = vanilla_attention_interact(Tensor(states), Tensor(nodes), mask)
            np.testing.assert_allclose(out.data - states, np.tile(embedding, (2, 1)), atol=1e-12)
            np.testing.assert_allclose(weights[0], 1 / 3)
            np.testing.assert_allclose(weights[1], [0.5, 0.5, 0.0])

    def test_mean_aggregation_on_a_single_node(self):
        params = GraphLayerParams.initialize(4, 3, 2, self.rng, attention=False, dtype=np.float64)
        h = self.rng.normal(size=(1, 4))
        out, weights = gat_layer(Tensor(h), np.array([[True]]), params, final=True, aggregation=Aggregation.MEAN)
        projected = params.W.data @ h[0]
        expected = np.where(projected > 0, projected, 0.01 * projected).mean(axis=0)
        np.testing.assert_allclose(out.data[0], expected, atol=1e-12)
        np.testing.assert_array_equal(weights, 1.0)


class TestGradients(TestCase):
    def test_gradient_check(self):
        report = gradient_check(ModelConfig(**MICRO))
        self.assertEqual(set(report), set(micro_model().params.named_parameters()))
        self.assertLess(max(report.values()), 1e-3)

    def test_gradient_check_every_coordinate(self):
        report = gradient_check(ModelConfig(**MICRO), samples=None)
        self.assertLess(max(report.values()), 1e-3)

    def test_gradient_check_mean_aggregation(self):
        report = gradient_check(ModelConfig(**{**MICRO, "interaction_mode": "gcn"}))
        self.assertLess(max(report.values()), 1e-3)

    def test_padding_does_not_change_loss_or_gradients(self):
        def run(batch):
            model = micro_model()
            with ad.Tape() as tape:
                trace = model.forward(batch, ForwardMode.TRAIN, IntentSource.GOLD)
                loss = joint_loss(
                    intent_loss(trace.intent_probs, batch.intent_targets),
                    slot_loss(trace.slot_distributions, batch.slot_ids, batch.mask),
                    0.5,
                    model.params,
                    1e-6,
                )
            tape.backward(loss)
            return loss.item(), model.params.grads()

        batch = encode_batch(micro_corpus(), micro_model().vocab, dtype=np.float64)
        altered = dataclasses.replace(batch, token_ids=batch.token_ids.copy())
        altered.token_ids[~altered.mask] = 4
        loss, grads = run(batch)
        altered_loss, altered_grads = run(altered)
        self.assertEqual(loss, altered_loss)
        for name, grad in grads.items():
            np.testing.assert_array_equal(grad, altered_grads[name], err_msg=name)
