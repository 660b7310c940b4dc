import tempfile
import unittest
from pathlib import Path

import numpy as np

import autodiff as ad
import semantic_model as sm
from geometry_core import build_topology, make_mesh
from tests.fixtures import small_face, smooth_offsets, tiny_dataset, tiny_model_config, tiny_train_config


def tiny_model(variant: str = 'full', pool_stride: int = 1, seed: int = 0) -> sm.SemanticModel:
    topology, template = small_face()
    return sm.init_semantic_model(topology, tiny_model_config(variant, pool_stride), template, 40.0, seed)


def squared_error(model: sm.SemanticModel, code: sm.ExpressionCode, neutral, expressive) -> float:
    difference = sm.decode_mesh(model, code, neutral).vertices - expressive.vertices
    return float(np.mean(np.sum(difference**2, axis=-1)))


class TestModelConfig(unittest.TestCase):
    """
    Tests config validation.
    """
    def test_unknown_variant(self):
        """
        Checks that an unknown variant name is rejected.
        """
        with self.assertRaises(ValueError):
            sm.SemanticModelConfig(variant='no_encoder')

    def test_negative_loss_weight(self):
        """
        Checks that negative loss weights are rejected.
        """
        with self.assertRaises(ValueError):
            sm.LossWeights(edge=-1.0)

    def test_decoder_input_dim(self):
        """
        Checks that only the full variant feeds the identity code to the decoder.
        """
        self.assertEqual(tiny_model_config('full').decoder_input_dim, 8)
        self.assertEqual(tiny_model_config('no_id_decoder').decoder_input_dim, 4)

    def test_no_id_variant_has_no_identity_encoder(self):
        """
        Checks that the no_id_decoder variant has no identity-encoder parameters.
        """
        self.assertFalse(any(name.startswith('id/') for name in tiny_model('no_id_decoder').params))
        self.assertTrue(any(name.startswith('id/') for name in tiny_model('full').params))


class TestEncodeDecode(unittest.TestCase):
    """
    Tests encoding, decoding and retargeting.
    """
    def setUp(self):
        self.model = tiny_model()
        self.dataset = tiny_dataset()

    def test_shapes(self):
        """
        Checks code and displacement shapes for a batch.
        """
        expressives = self.dataset.subjects[0].expressives
        codes = sm.encode_expression_batch(self.model, expressives)
        self.assertEqual(codes.shape, (2, 4))
        neutrals = np.stack([self.dataset.subjects[0].neutral] * 2)
        self.assertEqual(sm.decode_displacement_batch(self.model, codes, neutrals).shape, (2, 81, 3))

    def test_pooled_model_shapes(self):
        """
        Checks that stride pooling keeps the output on every vertex.
        """
        model = tiny_model(pool_stride=4)
        self.assertEqual(model.pooled_count, 21)
        code = sm.encode_expression(model, make_mesh(model.topology, self.dataset.subjects[0].expressives[0]))
        neutral = make_mesh(model.topology, self.dataset.subjects[0].neutral)
        self.assertEqual(sm.decode_displacement(model, code, neutral).shape, (81, 3))

    def test_retarget_onto_source_is_reconstruction(self):
        """
        Checks that retargeting onto the source neutral equals decoding onto it.
        """
        neutral = make_mesh(self.model.topology, self.dataset.subjects[1].neutral)
        code = sm.encode_expression(self.model, make_mesh(self.model.topology, self.dataset.subjects[1].expressives[0]))
        retargeted = sm.retarget(self.model, code, neutral).vertices
        self.assertTrue(np.array_equal(retargeted, sm.decode_mesh(self.model, code, neutral).vertices))

    def test_full_variant_depends_on_identity(self):
        """
        Checks that the full decoder produces different displacements for different neutrals.
        """
        code = sm.ExpressionCode(values=np.array([0.5, -1.0, 0.25, 2.0]))
        first = sm.decode_displacement(self.model, code, make_mesh(self.model.topology, self.dataset.subjects[0].neutral))
        second = sm.decode_displacement(self.model, code, make_mesh(self.model.topology, self.dataset.subjects[2].neutral))
        self.assertFalse(np.array_equal(first, second))

    def test_no_id_variant_ignores_identity(self):
        """
        Checks bit-exact equality of no_id_decoder displacements across neutrals.
        """
        model = tiny_model('no_id_decoder')
        rng = np.random.default_rng(4)
        for _ in range(20):
            code = sm.ExpressionCode(values=rng.normal(size=4))
            a, b = rng.choice(3, size=2, replace=False)
            first = sm.decode_displacement(model, code, make_mesh(model.topology, self.dataset.subjects[a].neutral))
            second = sm.decode_displacement(model, code, make_mesh(model.topology, self.dataset.subjects[b].neutral))
            self.assertTrue(np.array_equal(first, second))

    def test_identity_encoder_variant_mismatch(self):
        """
        Checks that encode_identity() is unavailable for the no_id_decoder variant.
        """
        model = tiny_model('no_id_decoder')
        with self.assertRaises(sm.SemanticModelError) as ctx:
            sm.encode_identity(model, make_mesh(model.topology, self.dataset.subjects[0].neutral))
        self.assertEqual(ctx.exception.kind, 'variant_mismatch')
        neutral = make_mesh(self.model.topology, self.dataset.subjects[0].neutral)
        self.assertEqual(sm.encode_identity(self.model, neutral).shape, (4,))

    def test_topology_mismatch(self):
        """
        Checks that meshes on another topology are rejected.
        """
        other = build_topology(4, [(0, 1, 2), (0, 2, 3)], 3)
        with self.assertRaises(sm.SemanticModelError) as ctx:
            sm.encode_expression(self.model, make_mesh(other, np.zeros((4, 3))))
        self.assertEqual(ctx.exception.kind, 'topology_mismatch')

    def test_code_dim_mismatch(self):
        """
        Checks that codes of the wrong width are rejected.
        """
        with self.assertRaises(sm.SemanticModelError) as ctx:
            sm.decode_displacement_batch(self.model, np.zeros((1, 5)), self.dataset.subjects[0].neutral[None])
        self.assertEqual(ctx.exception.kind, 'code_dim_mismatch')

    def test_non_finite_code(self):
        """
        Checks that an expression code with NaN is rejected.
        """
        with self.assertRaises(sm.SemanticModelError) as ctx:
            sm.ExpressionCode(values=np.array([0.0, np.nan]))
        self.assertEqual(ctx.exception.kind, 'non_finite')


class TestLossIdentities(unittest.TestCase):
    """
    Tests compute_loss_terms() on hand-built outputs.
    """
    def setUp(self):
        self.topology, template = small_face()
        rng = np.random.default_rng(5)
        self.n_s = np.stack([template + smooth_offsets(template, rng, 2.0) for _ in range(2)])
        self.n_t = np.stack([template + smooth_offsets(template, rng, 2.0) for _ in range(2)])
        self.e_s = self.n_s + np.stack([smooth_offsets(template, rng, 1.0) for _ in range(2)])
        self.codes = ad.constant(rng.normal(size=(2, 4)))
        self.open_eyes = np.zeros((2, 2), dtype=bool)

    def terms(self, reconstruction, retargeted, closed, expressives=None):
        return sm.compute_loss_terms(
            self.topology,
            sm.LossWeights(),
            self.e_s if expressives is None else expressives,
            self.n_s,
            self.n_t,
            ad.constant(reconstruction),
            ad.constant(retargeted),
            self.codes,
            ad.constant(self.codes.data.copy()),
            closed,
        )

    def test_perfect_model(self):
        """
        Checks that a perfect model has exactly zero reconstruction, cycle and delta terms.
        """
        terms = self.terms(self.e_s, self.n_t + (self.e_s - self.n_s), self.open_eyes)
        self.assertEqual(float(terms.rec.data), 0.0)
        self.assertEqual(float(terms.cycle.data), 0.0)
        self.assertEqual(float(terms.delta.data), 0.0)

    def test_isometric_outputs(self):
        """
        Checks that translated neutrals give a zero edge term.
        """
        shift = np.array([3.0, -2.0, 5.0])
        terms = self.terms(self.n_s + shift, self.n_t + shift, self.open_eyes, expressives=self.n_s)
        self.assertLessEqual(float(terms.edge.data), 1e-12)

    def test_coincident_eyelids(self):
        """
        Checks that outputs with each upper lid on its lower lid give a zero eye term even when gated on.
        """
        closed = np.ones((2, 2), dtype=bool)
        reconstruction = self.n_s.copy()
        retargeted = self.n_t.copy()
        for upper, lower in self.topology.eyelid_polylines.values():
            reconstruction[:, upper] = reconstruction[:, lower]
            retargeted[:, upper] = retargeted[:, lower]
        terms = self.terms(reconstruction, retargeted, closed)
        self.assertLessEqual(float(terms.eyes.data), 1e-12)

    def test_open_eyes_skip_the_eye_term(self):
        """
        Checks that the eye term is zero when no eye is closed in the source.
        """
        terms = self.terms(self.e_s, self.n_t, self.open_eyes)
        self.assertEqual(float(terms.eyes.data), 0.0)

    def test_eye_term_ignores_open_samples(self):
        """
        Checks that the eye term of a batch with one closed sample equals that sample's term on its own.
        """
        closed = np.array([[True, False], [False, False]])
        batch_terms = self.terms(self.e_s, self.n_t, closed)
        alone = sm.compute_loss_terms(
            self.topology,
            sm.LossWeights(),
            self.e_s[:1],
            self.n_s[:1],
            self.n_t[:1],
            ad.constant(self.e_s[:1]),
            ad.constant(self.n_t[:1]),
            ad.constant(self.codes.data[:1]),
            ad.constant(self.codes.data[:1]),
            closed[:1],
        )
        self.assertGreater(float(alone.eyes.data), 0.0)
        self.assertTrue(np.isclose(float(batch_terms.eyes.data), float(alone.eyes.data), rtol=1e-12, atol=0.0))

    def test_total_is_weighted_sum(self):
        """
        Checks that the total equals the weighted sum of the five terms.
        """
        terms = self.terms(self.n_s, self.n_t, np.ones((2, 2), dtype=bool)).as_floats()
        w = sm.LossWeights()
        expected = (
            w.rec * terms['L_rec'] + w.cycle * terms['L_cycle'] + w.edge * terms['L_edge']
            + w.eyes * terms['L_eyes'] + w.delta * terms['L_delta']
        )
        self.assertAlmostEqual(terms['total'], expected, delta=1e-9 * max(1.0, abs(expected)))

    def test_closed_eye_mask(self):
        """
        Checks that a blinked expressive marks both eyes closed and an open one does not.
        """
        blinked = self.n_s.copy()
        for upper, lower in self.topology.eyelid_polylines.values():
            blinked[0, upper] = blinked[0, lower]
        mask = sm.closed_eye_mask(self.topology, blinked, self.n_s, 0.1)
        self.assertTrue(mask[0].all())
        self.assertFalse(mask[1].any())


class TestLossGradients(unittest.TestCase):
    """
    Tests that the full forward loss differentiates correctly.
    """
    def test_decoder_bias_gradient(self):
        """
        Checks the tape gradient of the total loss against finite differences for one parameter.
        """
        model = tiny_model()
        dataset = tiny_dataset()
        e_s = dataset.subjects[0].expressives
        n_s = np.stack([dataset.subjects[0].neutral] * 2)
        n_t = np.stack([dataset.subjects[1].neutral, dataset.subjects[2].neutral])
        weights = sm.LossWeights(edge=1.0)
        name = 'dec/spiral1/bias'
        params = sm.parameter_leaves(model)
        with ad.Tape() as tape:
            total = sm.loss_terms(model, e_s, n_s, n_t, weights, params).total
        (analytic,) = ad.backward(tape, total, [params[name]])

        def value(point):
            trial = sm.with_params(model, {**model.params, name: point})
            return float(sm.loss_terms(trial, e_s, n_s, n_t, weights).total.data)

        numeric = ad.numerical_gradient(value, model.params[name], h=1e-4)
        scale = max(float(np.max(np.abs(numeric))), 1e-2)
        self.assertLess(float(np.max(np.abs(analytic - numeric))) / scale, 1e-4)


class TestTraining(unittest.TestCase):
    """
    Tests train_semantic() and its batch sampler.
    """
    def test_deterministic(self):
        """
        Checks that two runs with one seed produce identical weights and curves.
        """
        dataset = tiny_dataset()
        first = sm.train_semantic(dataset, tiny_train_config())
        second = sm.train_semantic(dataset, tiny_train_config())
        self.assertEqual(len(first.curve), 3)
        self.assertEqual(first.curve, second.curve)
        for name, value in first.model.params.items():
            self.assertTrue(np.array_equal(value, second.model.params[name]))
        self.assertEqual(first.adam_state.step, 3)

    def test_training_moves_the_weights(self):
        """
        Checks that training changes the parameters from their initial values.
        """
        dataset = tiny_dataset()
        initial = sm.train_semantic(dataset, tiny_train_config(steps=0))
        trained = sm.train_semantic(dataset, tiny_train_config(steps=1)).model
        self.assertEqual(initial.curve, [])
        self.assertTrue(any(not np.array_equal(v, initial.model.params[k]) for k, v in trained.params.items()))

    def test_empty_dataset(self):
        """
        Checks that a dataset without expressive meshes is rejected.
        """
        dataset = tiny_dataset(expressions=0)
        with self.assertRaises(sm.SemanticModelError) as ctx:
            sm.train_semantic(dataset, tiny_train_config())
        self.assertEqual(ctx.exception.kind, 'empty_dataset')

    def test_single_subject(self):
        """
        Checks that a single-subject dataset is rejected.
        """
        with self.assertRaises(sm.SemanticModelError) as ctx:
            sm.train_semantic(tiny_dataset(subjects=1), tiny_train_config())
        self.assertEqual(ctx.exception.kind, 'single_subject')

    def test_target_neutral_is_another_subject(self):
        """
        Checks that sampled target neutrals never belong to the source subject.
        """
        dataset = tiny_dataset(subjects=3)
        rng = np.random.default_rng(6)
        _, sources, targets = sm.sample_training_batch(dataset, dataset.expressive_pairs(), 64, rng)
        for source, target in zip(sources, targets, strict=True):
            self.assertFalse(np.array_equal(source, target))

    def test_loss_curve_csv(self):
        """
        Checks the loss-curve CSV header and row count.
        """
        result = sm.train_semantic(tiny_dataset(), tiny_train_config(steps=2))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'loss.csv'
            sm.save_loss_curve(path, result.curve)
            lines = path.read_text(encoding='utf-8').splitlines()
        self.assertEqual(lines[0], 'step,L_rec,L_cycle,L_edge,L_eyes,L_delta,total')
        self.assertEqual(len(lines), 3)


class TestOptimizeCode(unittest.TestCase):
    """
    Tests optimize_code().
    """
    def test_never_worse_than_the_encoder(self):
        """
        Checks that the refined code reconstructs at least as well as the encoder's code.
        """
        model = tiny_model()
        dataset = tiny_dataset()
        neutral = make_mesh(model.topology, dataset.subjects[0].neutral)
        target_code = sm.ExpressionCode(values=np.array([1.0, -0.5, 0.3, 0.8]))
        expressive = sm.decode_mesh(model, target_code, neutral)
        start = sm.optimize_code(model, neutral, expressive, iters=0)
        refined = sm.optimize_code(model, neutral, expressive, iters=30, lr=0.05)
        self.assertTrue(np.array_equal(start.values, sm.encode_expression(model, expressive).values))
        bound = squared_error(model, start, neutral, expressive) * (1 + 1e-9) + 1e-12
        self.assertLessEqual(squared_error(model, refined, neutral, expressive), bound)

    def test_recovers_a_decoded_expression(self):
        """
        Checks that a mesh decoded from a known code is reconstructed to within 1e-3 mean vertex error in 200 steps.
        """
        model = tiny_model()
        dataset = tiny_dataset()
        subject = dataset.subjects[1]
        neutral = make_mesh(model.topology, subject.neutral)
        known_code = sm.encode_expression(model, make_mesh(model.topology, subject.expressives[0]))
        expressive = sm.decode_mesh(model, known_code, neutral)
        start = sm.optimize_code(model, neutral, expressive, iters=0)
        refined = sm.optimize_code(model, neutral, expressive, iters=200, lr=0.1)
        self.assertLessEqual(sm.mean_vertex_error(sm.decode_mesh(model, refined, neutral), expressive), 1e-3)
        self.assertLessEqual(
            squared_error(model, refined, neutral, expressive), squared_error(model, start, neutral, expressive)
        )


class TestBaselines(unittest.TestCase):
    """
    Tests delta transfer, the error helper and the linear blendshape baseline.
    """
    def setUp(self):
        self.topology, self.template = small_face()

    def mesh(self, vertices):
        return make_mesh(self.topology, vertices)

    def test_delta_transfer(self):
        """
        Checks that delta transfer adds E_s - N_s to the target neutral.
        """
        rng = np.random.default_rng(7)
        n_s, n_t = self.template + 1.0, self.template - 2.0
        e_s = n_s + rng.normal(size=n_s.shape)
        moved = sm.delta_transfer(self.mesh(e_s), self.mesh(n_s), self.mesh(n_t))
        self.assertTrue(np.allclose(moved.vertices, n_t + (e_s - n_s)))

    def test_mean_vertex_error(self):
        """
        Checks the mean Euclidean distance for a uniform 3-4-5 offset.
        """
        self.assertAlmostEqual(sm.mean_vertex_error(self.template, self.template + [3.0, 4.0, 0.0]), 5.0)

    def test_linear_basis_recovers_its_span(self):
        """
        Checks exact reconstruction of displacements inside the expression span and zero codes for zero displacement.
        """
        rng = np.random.default_rng(8)
        directions = rng.normal(size=(2, 81, 3))
        neutrals = [self.mesh(self.template + smooth_offsets(self.template, rng, 2.0)) for _ in range(4)]
        pairs = [(n, self.mesh(n.vertices + rng.normal() * directions[0] + rng.normal() * directions[1])) for n in neutrals]
        basis = sm.fit_linear_basis(neutrals, pairs, k_id=2, k_exp=2)
        inside_span = self.mesh(neutrals[0].vertices + 0.7 * directions[0] - 1.1 * directions[1])
        self.assertLess(sm.mean_vertex_error(sm.linear_reconstruct(basis, neutrals[0], inside_span), inside_span), 1e-9)
        self.assertTrue(np.allclose(sm.linear_coefficients(basis, neutrals[0], neutrals[0]), 0.0))

    def test_linear_basis_rank_checks(self):
        """
        Checks the degenerate and insufficient-sample errors.
        """
        rng = np.random.default_rng(9)
        direction = rng.normal(size=(81, 3))
        neutrals = [self.mesh(self.template + smooth_offsets(self.template, rng, 2.0)) for _ in range(3)]
        pairs = [(n, self.mesh(n.vertices + (i + 1) * direction)) for i, n in enumerate(neutrals)]
        with self.assertRaises(sm.SemanticModelError) as ctx:
            sm.fit_linear_basis(neutrals, pairs, k_id=1, k_exp=2)
        self.assertEqual(ctx.exception.kind, 'degenerate_covariance')
        with self.assertRaises(sm.SemanticModelError) as ctx:
            sm.fit_linear_basis(neutrals, pairs, k_id=4, k_exp=1)
        self.assertEqual(ctx.exception.kind, 'insufficient_samples')


class TestModelFiles(unittest.TestCase):
    """
    Tests save_semantic_model() and load_semantic_model().
    """
    def test_file_keeps_weights(self):
        """
        Checks that a loaded model decodes identically to the saved one.
        """
        model = tiny_model('no_id_decoder', pool_stride=2)
        dataset = tiny_dataset()
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'model.bin'
            sm.save_semantic_model(path, model)
            loaded = sm.load_semantic_model(path, model.topology)
        self.assertEqual(loaded.config, model.config)
        self.assertEqual(loaded.input_scale, model.input_scale)
        codes = np.ones((1, 4))
        neutral = dataset.subjects[0].neutral[None]
        expected = sm.decode_displacement_batch(model, codes, neutral)
        self.assertTrue(np.array_equal(sm.decode_displacement_batch(loaded, codes, neutral), expected))

    def test_other_topology(self):
        """
        Checks that loading onto another topology fails.
        """
        model = tiny_model()
        other = build_topology(4, [(0, 1, 2), (0, 2, 3)], 3)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'model.bin'
            sm.save_semantic_model(path, model)
            with self.assertRaises(sm.SemanticModelError) as ctx:
                sm.load_semantic_model(path, other)
        self.assertEqual(ctx.exception.kind, 'topology_mismatch')


if __name__ == '__main__':
    unittest.main()
