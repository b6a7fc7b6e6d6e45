import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hain import numerics as nx
from hain.errors import ContractError, ShapeError
from hain.model import (PARAM_NAMES, HainConfig, HainParams, build_graph, cross_attention, embed,
                        feature_tokens, forward, global_attention, init_params, local_attention,
                        logit_input_gradient, param_bounds, param_tensors)
from hain.numerics import Rng

from helpers import random_params, tiny_config
from oracles import central_difference, forward_row, relative_error


def _with(params: HainParams, **arrays) -> HainParams:
    p = params.copy()
    p.arrays.update({k: np.asarray(v, dtype=float) for k, v in arrays.items()})
    return p


class TestHainConfig:
    def test_group_count(self):
        cfg = tiny_config(d=7, group_size=3)
        assert cfg.n_groups == 3
        np.testing.assert_array_equal(cfg.group_of(), [0, 0, 0, 1, 1, 1, 2])

    def test_default_scales(self):
        cfg = HainConfig(d=400, n_classes=2)
        assert cfg.pos_scale == pytest.approx(10.0)
        assert cfg.cross_scale == pytest.approx(40.0)

    @pytest.mark.parametrize("kw", [dict(d=0, n_classes=2), dict(d=3, n_classes=1),
                                    dict(d=3, n_classes=2, group_size=0),
                                    dict(d=3, n_classes=2, k_embed=0),
                                    dict(d=3, n_classes=2, pos_scale=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ContractError):
            HainConfig(**kw)

    def test_round_trips_through_dict(self):
        cfg = tiny_config()
        assert HainConfig(**cfg.to_dict()) == cfg


class TestInitParams:
    def test_deterministic(self):
        cfg = tiny_config()
        assert init_params(cfg, Rng(3)).bit_equal(init_params(cfg, Rng(3)))
        assert not init_params(cfg, Rng(3)).bit_equal(init_params(cfg, Rng(4)))

    def test_biases_zero(self):
        p = init_params(tiny_config(), Rng(0))
        for name in PARAM_NAMES:
            if name.startswith("b_"):
                assert not np.any(p[name])

    def test_within_glorot_bounds(self):
        cfg = tiny_config(d=9, k_embed=5, d_k=4, hidden=6, d_embed=3)
        p = init_params(cfg, Rng(1))
        bounds = param_bounds(cfg)
        # independent fan computation for a few representative matrices
        assert bounds["W_e"] == pytest.approx(math.sqrt(6 / (9 + 3)))
        assert bounds["W_h"] == pytest.approx(math.sqrt(6 / (2 * 5 + 3 + 6)))
        assert bounds["W_q2"] == pytest.approx(math.sqrt(6 / (5 + 4)))
        for name, arr in p.items():
            if bounds[name] > 0:
                assert np.all(np.abs(arr) < bounds[name]), name

    def test_shapes_validate(self):
        cfg = tiny_config()
        p = init_params(cfg, Rng(0))
        p.validate(cfg)
        assert list(p) == list(PARAM_NAMES)
        bad = _with(p, W_e=np.zeros((2, 2)))
        with pytest.raises(ShapeError):
            bad.validate(cfg)
        nan = _with(p, b_h=np.full(cfg.hidden, np.nan))
        with pytest.raises(ContractError):
            nan.validate(cfg)


class TestEmbed:
    def test_zero_weights(self):
        cfg = tiny_config()
        p = _with(init_params(cfg), W_e=np.zeros((cfg.d_embed, cfg.d)), b_e=np.zeros(cfg.d_embed))
        np.testing.assert_array_equal(embed(cfg, p, np.arange(cfg.d, dtype=float)), np.zeros(cfg.d_embed))

    def test_negative_identity_kills_positive_input(self):
        cfg = tiny_config(d=4, d_embed=4)
        p = _with(init_params(cfg), W_e=-np.eye(4), b_e=np.zeros(4))
        np.testing.assert_array_equal(embed(cfg, p, np.array([0.5, 1.0, 2.0, 3.0])), np.zeros(4))

    def test_matches_hand_recomputation(self):
        cfg = tiny_config()
        p = random_params(cfg, 2)
        x = np.random.default_rng(0).normal(size=cfg.d)
        expected = [max(0.0, sum(p["W_e"][r, j] * x[j] for j in range(cfg.d)) + p["b_e"][r])
                    for r in range(cfg.d_embed)]
        np.testing.assert_allclose(embed(cfg, p, x), expected, atol=1e-14)

    def test_length_mismatch(self):
        cfg = tiny_config()
        with pytest.raises(ShapeError):
            embed(cfg, init_params(cfg), np.ones(cfg.d + 1))


class TestLocalAttention:
    def test_singleton_group(self):
        cfg = tiny_config(d=3, group_size=1)
        p = random_params(cfg, 1)
        H = np.random.default_rng(1).normal(size=(3, cfg.k_embed))
        alpha, groups = local_attention(cfg, p, H)
        np.testing.assert_array_equal(alpha, [1.0, 1.0, 1.0])
        np.testing.assert_allclose(groups, H, atol=1e-15)

    def test_identical_tokens_uniform(self):
        cfg = tiny_config(d=6, group_size=3)
        H = np.tile(np.random.default_rng(2).normal(size=cfg.k_embed), (6, 1))
        alpha, _ = local_attention(cfg, random_params(cfg, 2), H)
        np.testing.assert_allclose(alpha, np.full(6, 1 / 3), atol=1e-15)

    def test_log_two_scores(self):
        cfg = tiny_config(d=2, group_size=2, k_embed=2)
        p = _with(init_params(cfg), w_a1=[1.0, 0.0], b_a1=[0.0])
        H = np.array([[math.atanh(math.log(2)), 0.0], [0.0, 5.0]])
        alpha, groups = local_attention(cfg, p, H)
        np.testing.assert_allclose(alpha, [2 / 3, 1 / 3], atol=1e-14)
        np.testing.assert_allclose(groups[0], 2 / 3 * H[0] + 1 / 3 * H[1], atol=1e-14)

    def test_short_last_group(self):
        cfg = tiny_config(d=7, group_size=3)
        H = np.random.default_rng(3).normal(size=(7, cfg.k_embed))
        alpha, groups = local_attention(cfg, random_params(cfg, 3), H)
        assert groups.shape == (3, cfg.k_embed)
        assert alpha[6] == 1.0
        np.testing.assert_allclose(groups[2], H[6], atol=1e-15)


class TestGlobalAttention:
    def test_single_group(self):
        cfg = tiny_config(d=3, group_size=3)
        p = random_params(cfg, 4)
        gv = np.random.default_rng(4).normal(size=(1, cfg.k_embed))
        A2, ag, pooled = global_attention(cfg, p, gv)
        np.testing.assert_array_equal(A2, [[1.0]])
        np.testing.assert_array_equal(ag, [1.0])
        np.testing.assert_allclose(pooled, gv[0] @ p["W_v2"], atol=1e-15)

    def test_identical_groups_uniform_rows(self):
        cfg = tiny_config(d=9, group_size=3)
        gv = np.tile(np.random.default_rng(5).normal(size=cfg.k_embed), (3, 1))
        A2, ag, _ = global_attention(cfg, random_params(cfg, 5), gv)
        np.testing.assert_allclose(A2, np.full((3, 3), 1 / 3), atol=1e-15)
        np.testing.assert_allclose(ag, np.full(3, 1 / 3), atol=1e-15)

    def test_matches_step_by_step_oracle(self):
        cfg = tiny_config(d=9, group_size=3)
        p = random_params(cfg, 6)
        x = np.random.default_rng(6).normal(size=9)
        ref = forward_row(cfg, p, x)
        A2, ag, pooled = global_attention(cfg, p, ref["group_vectors"])
        np.testing.assert_allclose(A2, ref["global_matrix"], atol=1e-12)
        np.testing.assert_allclose(ag, ref["alpha_global"], atol=1e-12)
        np.testing.assert_allclose(pooled, ref["pooled"], atol=1e-12)

    def test_mask_restricts_rows(self):
        cfg = tiny_config(d=9, group_size=3)
        gv = np.random.default_rng(7).normal(size=(3, cfg.k_embed))
        A2, _, _ = global_attention(cfg, random_params(cfg, 7), gv, mask=np.eye(3, dtype=bool))
        np.testing.assert_array_equal(A2, np.eye(3))


class TestCrossAttention:
    def test_single_feature(self):
        cfg = tiny_config(d=1, group_size=1)
        p = random_params(cfg, 8)
        out = cross_attention(cfg, p, np.ones(cfg.k_embed), np.ones((1, cfg.k_embed)))
        np.testing.assert_array_equal(out, [1.0])

    def test_identical_tokens_uniform(self):
        cfg = tiny_config(d=5)
        H = np.tile(np.arange(cfg.k_embed, dtype=float), (5, 1))
        out = cross_attention(cfg, random_params(cfg, 9), np.ones(cfg.k_embed), H)
        np.testing.assert_allclose(out, np.full(5, 0.2), atol=1e-15)

    def test_matches_oracle(self):
        cfg = tiny_config(d=7)
        p = random_params(cfg, 10, weight_scale=0.2)
        x = np.random.default_rng(10).normal(size=7)
        ref = forward_row(cfg, p, x)
        out = cross_attention(cfg, p, ref["pooled"], feature_tokens(cfg, p, x))
        np.testing.assert_allclose(out, ref["alpha_cross"], atol=1e-12)


def _simplex(v, axis=-1):
    assert np.all(v >= 0)
    np.testing.assert_allclose(np.sum(v, axis=axis), 1.0, atol=1e-9)


class TestForward:
    def test_zero_classifier(self):
        cfg = tiny_config(n_classes=2)
        p = _with(random_params(cfg, 11), W_out=np.zeros((cfg.hidden, 2)), b_out=np.zeros(2))
        out = forward(cfg, p, np.ones(cfg.d))
        np.testing.assert_array_equal(out.logits, [0.0, 0.0])
        np.testing.assert_array_equal(out.probabilities, [0.5, 0.5])

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        cfg = tiny_config(d=8, group_size=3, seed=seed)
        p = random_params(cfg, seed, weight_scale=0.3)
        x = np.random.default_rng(seed).normal(size=cfg.d)
        out = forward(cfg, p, x)
        ref = forward_row(cfg, p, x)
        for name in ("alpha_local", "alpha_global", "alpha_cross", "alpha_combined", "gates",
                     "global_matrix"):
            np.testing.assert_allclose(getattr(out.trace, name), ref[name], atol=1e-12, err_msg=name)
        np.testing.assert_allclose(out.embedded, ref["embedded"], atol=1e-12)
        np.testing.assert_allclose(out.logits, ref["logits"], atol=1e-12)
        np.testing.assert_allclose(out.probabilities, ref["probabilities"], atol=1e-12)

    def test_trace_simplices(self):
        cfg = tiny_config(d=10, group_size=4)
        out = forward(cfg, random_params(cfg, 12), np.random.default_rng(12).normal(size=10))
        tr = out.trace
        for g in range(cfg.n_groups):
            _simplex(tr.alpha_local[g * 4:(g + 1) * 4])
        for v in (tr.alpha_global, tr.alpha_cross, tr.alpha_combined, out.probabilities):
            _simplex(v)
        _simplex(tr.global_matrix, axis=1)
        assert np.all((tr.gates > 0) & (tr.gates < 1))

    def test_combined_is_renormalized_product(self):
        cfg = tiny_config(d=10, group_size=4)
        tr = forward(cfg, random_params(cfg, 13), np.random.default_rng(13).normal(size=10)).trace
        prod = tr.alpha_global[cfg.group_of()] * tr.alpha_local
        np.testing.assert_allclose(tr.alpha_combined, prod / prod.sum(), atol=1e-15)

    def test_probabilities_are_softmax_of_logits(self):
        cfg = tiny_config()
        out = forward(cfg, random_params(cfg, 14), np.ones(cfg.d))
        np.testing.assert_allclose(out.probabilities, nx.softmax_rows(out.logits)[0], atol=1e-15)

    def test_deterministic(self):
        cfg = tiny_config()
        p, x = random_params(cfg, 15), np.random.default_rng(15).normal(size=cfg.d)
        a, b = forward(cfg, p, x), forward(cfg, p, x)
        assert a.logits.tobytes() == b.logits.tobytes()
        assert a.trace.alpha_combined.tobytes() == b.trace.alpha_combined.tobytes()

    def test_batch_rows_match_single_rows(self):
        cfg = tiny_config()
        p = random_params(cfg, 16)
        X = np.random.default_rng(16).normal(size=(4, cfg.d))
        batch = forward(cfg, p, X)
        for i in range(4):
            np.testing.assert_allclose(batch.logits[i], forward(cfg, p, X[i]).logits, atol=1e-14)

    def test_shape_mismatch(self):
        cfg = tiny_config()
        with pytest.raises(ShapeError):
            forward(cfg, init_params(cfg), np.ones(cfg.d - 1))
        with pytest.raises(ShapeError):
            build_graph(cfg, param_tensors(init_params(cfg)), nx.constant(np.ones(cfg.d)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31), st.permutations(range(4)))
    def test_within_group_permutation_equivariance(self, seed, perm):
        cfg = tiny_config(d=10, group_size=4)
        p = random_params(cfg, seed % 1000)
        x = np.random.default_rng(seed).normal(size=10)
        order = np.arange(10)
        order[4:8] = 4 + np.array(perm)      # permute the middle group
        q = _with(p, feat_emb=p["feat_emb"][order], feat_pos=p["feat_pos"][order],
                  W_e=p["W_e"][:, order])
        a, b = forward(cfg, p, x), forward(cfg, q, x[order])
        np.testing.assert_allclose(b.trace.alpha_local, a.trace.alpha_local[order], atol=1e-12)
        np.testing.assert_allclose(b.trace.alpha_combined, a.trace.alpha_combined[order], atol=1e-12)
        np.testing.assert_allclose(b.logits, a.logits, atol=1e-9)


class TestGradients:
    def test_logit_gradient_matches_finite_differences(self):
        cfg = tiny_config()
        p = random_params(cfg, 17)
        x = np.random.default_rng(17).normal(size=cfg.d)
        for c in range(cfg.n_classes):
            _, g = logit_input_gradient(cfg, p, x, c)
            num = central_difference(lambda z: forward(cfg, p, z).logits[c], x)
            assert relative_error(g, num) < 1e-4

    def test_logit_gradient_batched_targets(self):
        cfg = tiny_config()
        p = random_params(cfg, 18)
        X = np.random.default_rng(18).normal(size=(3, cfg.d))
        _, G = logit_input_gradient(cfg, p, X, [0, 2, 1])
        for i, c in enumerate([0, 2, 1]):
            np.testing.assert_allclose(G[i], logit_input_gradient(cfg, p, X[i], c)[1], atol=1e-14)

    def test_every_parameter_of_scalar_loss(self):
        cfg = tiny_config(d=6, group_size=4)
        p = random_params(cfg, 19)
        X = np.random.default_rng(19).normal(size=(2, cfg.d))
        w = np.random.default_rng(20).normal(size=cfg.n_classes)

        def loss(params):
            g = build_graph(cfg, params, nx.constant(X))
            return nx.tsum(g["logits"] * nx.constant(w)) + nx.tsum(nx.square(g["alpha_cross"]))

        tensors = param_tensors(p, requires_grad=True)
        nx.backward(loss(tensors))
        for name in PARAM_NAMES:
            def f(arr, name=name):
                q = param_tensors(p)
                q[name] = nx.constant(arr)
                return float(loss(q).value)
            num = central_difference(f, p[name])
            assert relative_error(tensors[name].grad, num) < 1e-4, name
