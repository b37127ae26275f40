import numpy as np
import pytest

from seqbridge import autodiff as ad
from seqbridge.errors import ConfigError, DomainError, ShapeError
from seqbridge.objectives import pretrain_loss
from seqbridge.predictor import (PARAM_TABLES, PredictorParams, grad,
                                 init_params, init_prior_head, predict,
                                 prior_encode)
from seqbridge.validation import as_onehot
from seqbridge.world import gen_structure


class TestInit:
    def test_same_seed_identical(self):
        a, b = init_params(9, 8, 4, 6, 5), init_params(9, 8, 4, 6, 5)
        for name in PARAM_TABLES:
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_shapes(self):
        p = init_params(0, d=8, K=4, T=6, f=5)
        assert p.token_embed.shape == (4, 8)
        assert p.time_embed.shape == (6, 8)
        assert p.feat_proj.shape == (5, 8)
        assert p.head.shape == (8, 4)
        assert p.dims == (8, 4, 6, 5)

    def test_different_seeds_differ(self):
        a, b = init_params(1, 8, 4, 6, 5), init_params(2, 8, 4, 6, 5)
        assert any(not np.array_equal(getattr(a, n), getattr(b, n))
                   for n in PARAM_TABLES)

    def test_fan_in_bound(self):
        p = init_params(0, d=16, K=4, T=6, f=9)
        assert np.abs(p.token_embed).max() <= 1 / np.sqrt(4)
        assert np.abs(p.feat_proj).max() <= 1 / np.sqrt(9)

    def test_bad_dims(self):
        with pytest.raises(ConfigError):
            init_params(0, d=0, K=4, T=6, f=5)

    def test_shape_header_validation(self):
        p = init_params(0, 4, 3, 5, 6)
        tables = {n: getattr(p, n) for n in PARAM_TABLES}
        tables["head_bias"] = np.zeros(7)
        with pytest.raises(ShapeError):
            PredictorParams(**tables)


class TestPredict:
    def test_rows_sum_to_one(self, tiny_structure, tiny_params):
        z = as_onehot(np.array([0, 1, 2, 0, 1, 2]), 3)
        out = predict(tiny_params, z, tiny_structure, 2)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(out >= 0)

    def test_zero_head_uniform(self, tiny_structure, tiny_params):
        tables = {n: getattr(tiny_params, n) for n in PARAM_TABLES}
        tables["head"] = np.zeros_like(tables["head"])
        tables["head_bias"] = np.zeros_like(tables["head_bias"])
        params = PredictorParams(**tables)
        out = predict(params, as_onehot(np.zeros(6, dtype=int), 3), tiny_structure, 0)
        np.testing.assert_allclose(out, 1 / 3, atol=1e-12)

    def test_batched_matches_single(self, tiny_structure, tiny_params):
        z1 = as_onehot(np.array([0, 1, 2, 0, 1, 2]), 3)
        z2 = as_onehot(np.array([2, 2, 2, 0, 0, 0]), 3)
        batched = predict(tiny_params, np.stack([z1, z2]), tiny_structure,
                          np.array([1, 3]))
        np.testing.assert_allclose(batched[0],
                                   predict(tiny_params, z1, tiny_structure, 1),
                                   atol=1e-12)
        np.testing.assert_allclose(batched[1],
                                   predict(tiny_params, z2, tiny_structure, 3),
                                   atol=1e-12)

    def test_permutation_equivariance(self):
        """Swapping two contact-free positions with swapped inputs swaps outputs."""
        S = gen_structure(3, L=8, num_chains=1, contact_density=0.01,
                          num_classes=3, noise_channels=2)
        # positions 0 and 7 only touch their backbone neighbors; build a
        # contact-free pair by removing their edges
        contacts = S.contacts.copy()
        contacts[0, :] = contacts[:, 0] = False
        contacts[7, :] = contacts[:, 7] = False
        feats = S.features.copy()
        feats[7] = feats[0]
        from seqbridge.world import StructureContext

        S2 = StructureContext(id="perm", L=8, contacts=contacts,
                              chain_of=np.zeros(8, dtype=int), features=feats)
        params = init_params(4, d=6, K=4, T=5, f=S2.feature_width)
        tokens = np.array([1, 2, 3, 0, 1, 2, 3, 2])
        swapped = tokens.copy()
        swapped[[0, 7]] = swapped[[7, 0]]
        out = predict(params, as_onehot(tokens, 4), S2, 2)
        out_swapped = predict(params, as_onehot(swapped, 4), S2, 2)
        np.testing.assert_allclose(out[0], out_swapped[7], atol=1e-12)
        np.testing.assert_allclose(out[7], out_swapped[0], atol=1e-12)

    def test_contact_locality(self, tiny_structure, tiny_params):
        """Changing a neighbor's state only moves rows with a contact to it."""
        base = np.array([0, 1, 2, 0, 1, 2])
        changed = base.copy()
        j = 0
        changed[j] = (changed[j] + 1) % 3
        a = predict(tiny_params, as_onehot(base, 3), tiny_structure, 1)
        b = predict(tiny_params, as_onehot(changed, 3), tiny_structure, 1)
        for i in range(6):
            if i == j:
                continue
            rows_equal = np.allclose(a[i], b[i], atol=1e-14)
            assert rows_equal == (not tiny_structure.contacts[i, j])

    def test_no_contact_rows_skip_aggregation(self, tiny_params):
        from seqbridge.world import StructureContext

        contacts = np.zeros((4, 4), dtype=bool)
        contacts[0, 1] = contacts[1, 0] = True
        S = StructureContext(id="iso", L=4, contacts=contacts,
                             chain_of=np.zeros(4, dtype=int),
                             features=np.linspace(0, 1, 4 * 9).reshape(4, 9))
        tables = {n: getattr(tiny_params, n) for n in PARAM_TABLES}
        with_bias = PredictorParams(**tables)
        tables2 = dict(tables)
        tables2["contact_bias"] = np.zeros_like(tables["contact_bias"])
        tables2["contact_in"] = np.zeros_like(tables["contact_in"])
        tables2["contact_out"] = np.zeros_like(tables["contact_out"])
        without = PredictorParams(**tables2)
        z = as_onehot(np.array([0, 1, 2, 0]), 3)
        a = predict(with_bias, z, S, 1)
        b = predict(without, z, S, 1)
        # isolated positions 2 and 3 see no aggregation term at all
        np.testing.assert_allclose(a[2], b[2], atol=1e-14)
        np.testing.assert_allclose(a[3], b[3], atol=1e-14)
        assert not np.allclose(a[0], b[0])

    def test_deterministic(self, tiny_structure, tiny_params):
        z = as_onehot(np.array([0, 1, 2, 0, 1, 2]), 3)
        np.testing.assert_array_equal(predict(tiny_params, z, tiny_structure, 2),
                                      predict(tiny_params, z, tiny_structure, 2))

    def test_time_out_of_range(self, tiny_structure, tiny_params):
        z = as_onehot(np.zeros(6, dtype=int), 3)
        with pytest.raises(DomainError):
            predict(tiny_params, z, tiny_structure, 5)

    def test_shape_errors(self, tiny_structure, tiny_params):
        with pytest.raises(ShapeError):
            predict(tiny_params, as_onehot(np.zeros(4, dtype=int), 3),
                    tiny_structure, 0)
        with pytest.raises(ShapeError):
            predict(tiny_params, as_onehot(np.zeros(6, dtype=int), 4),
                    tiny_structure, 0)


class TestPriorEncode:
    def test_zero_weights_tie_break_lowest(self, tiny_structure):
        from seqbridge.predictor import PriorHeadParams

        head = PriorHeadParams(proj=np.zeros((tiny_structure.feature_width, 3)),
                               bias=np.zeros(3))
        np.testing.assert_array_equal(prior_encode(head, tiny_structure),
                                      np.zeros(6, dtype=int))

    def test_output_length(self, tiny_structure, tiny_prior):
        assert prior_encode(tiny_prior, tiny_structure).shape == (6,)

    def test_overfit_single_structure(self):
        from seqbridge.training import TrainConfig, train_prior_head
        from seqbridge.world import make_world

        worlds = make_world(seed=33, n_structures=1, L_range=(8, 8), num_chains=1,
                            K=4, contact_density=0.2, n_mutants=4,
                            max_mutations=1, anneal_steps=400, num_classes=4,
                            noise_channels=6)
        cfg = TrainConfig(seed=1, prior_epochs=500, prior_lr=0.1)
        head = train_prior_head(worlds, cfg)
        np.testing.assert_array_equal(prior_encode(head, worlds[0].structure),
                                      worlds[0].native)

    def test_feature_width_mismatch(self, tiny_prior):
        S = gen_structure(8, L=5, num_chains=1, contact_density=0.2,
                          num_classes=2, noise_channels=1)
        assert S.feature_width != tiny_prior.proj.shape[0]
        with pytest.raises(ShapeError):
            prior_encode(tiny_prior, S)


class TestGrad:
    def test_constant_loss_zero_bundle(self, tiny_params):
        value, bundle = grad(lambda view: ad.mul(ad.vsum(ad.mul(view.head, 0.0)), 1.0),
                             tiny_params)
        assert value == 0.0
        for name in PARAM_TABLES:
            np.testing.assert_array_equal(bundle[name],
                                          np.zeros_like(getattr(tiny_params, name)))

    def test_matches_finite_differences(self, tiny_structure, tiny_schedule,
                                        tiny_params):
        X = np.array([0, 0, 1, 1, 2, 2])
        Y = np.array([2, 1, 0, 2, 1, 0])

        def loss_fn(view):
            return pretrain_loss(view, X, Y, tiny_structure, 2, tiny_schedule, 5)

        _, bundle = grad(loss_fn, tiny_params)

        def plain(tables):
            params = PredictorParams(**{n: tables[n] for n in PARAM_TABLES})
            return float(ad.value_of(pretrain_loss(params, X, Y, tiny_structure,
                                                   2, tiny_schedule, 5)))

        fd = ad.finite_difference_grad(
            plain, {n: getattr(tiny_params, n).copy() for n in PARAM_TABLES},
            h=1e-4)
        for name in PARAM_TABLES:
            denom = np.maximum(np.abs(fd[name]), 1e-6)
            assert np.max(np.abs(bundle[name] - fd[name]) / denom) <= 1e-4

    def test_stationary_at_loss_minimum(self, tiny_schedule):
        """A predictor already outputting one-hot truth has ~zero gradient."""
        S = gen_structure(14, L=2, num_chains=1, contact_density=0.9,
                          num_classes=2, noise_channels=1)
        params = init_params(3, d=4, K=3, T=5, f=S.feature_width)
        tables = {n: np.zeros_like(getattr(params, n)) for n in PARAM_TABLES}
        tables["head_bias"] = np.array([-40.0, 40.0, -40.0])  # one-hot on token 1
        peaked = PredictorParams(**tables)
        X, Y = np.array([0, 2]), np.array([1, 1])

        def loss_fn(view):
            return pretrain_loss(view, X, Y, S, 1, tiny_schedule, 3)

        value, bundle = grad(loss_fn, peaked)
        norm = np.sqrt(sum(float((g ** 2).sum()) for g in bundle.values()))
        assert norm < 1e-6
