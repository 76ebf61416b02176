from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedpgp.errors import InvalidParameterError, UnknownClassError
from fedpgp.losses import (Batch, LossConfig, ablation_loss, class_probabilities, contrastive_loss,
                           cross_entropy_loss, total_loss)
from fedpgp.numkit import Rng, finite_diff_grad, max_rel_error, normalize
from fedpgp.prompt import FullRankAdapter, LowRankAdapter, init_adapter

from helpers import gradient_error, random_instance

unit3 = st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3).filter(
    lambda v: np.linalg.norm(v) > 1e-2).map(normalize)


class TestClassProbabilities:
    def test_singleton(self, enc):
        p = class_probabilities(np.ones(enc.d_img), np.zeros((enc.d_token, enc.M)), [4], enc, 0.05)
        np.testing.assert_array_equal(p, [1.0])

    def test_identical_sequences_split_evenly(self, enc):
        p = class_probabilities(np.ones(enc.d_img), np.zeros((enc.d_token, enc.M)), [2, 2], enc, 0.05)
        np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-15)

    def test_sums_to_one(self, enc):
        rng = Rng(0)
        for _ in range(10):
            p = class_probabilities(rng.normal_array(enc.d_img), rng.normal_array((enc.d_token, enc.M)),
                                    range(enc.K), enc, 0.05)
            assert abs(p.sum() - 1) < 1e-12

    def test_empty_classes(self, enc):
        with pytest.raises(InvalidParameterError):
            class_probabilities(np.ones(enc.d_img), np.zeros((enc.d_token, enc.M)), [], enc, 0.05)


class TestCrossEntropy:
    def test_duplicate_prompts_give_ln_k(self, enc):
        batch = Batch.from_raw(Rng(1).normal_array((5, enc.d_img)), np.array([3, 3, 3, 3, 3]), enc)
        loss, _ = cross_entropy_loss(batch, np.zeros((enc.d_token, enc.M)), [3, 3, 3, 3], enc, 0.05)
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_unknown_label(self, enc):
        batch = Batch.from_raw(np.zeros((1, enc.d_img)) + 0.1, np.array([7]), enc)
        with pytest.raises(UnknownClassError):
            cross_entropy_loss(batch, np.zeros((enc.d_token, enc.M)), [0, 1], enc, 0.05)

    def test_gradient(self):
        enc, p_G, _, batch = random_instance(2)
        loss, g = cross_entropy_loss(batch, p_G, range(enc.K), enc, 0.5)
        assert loss >= 0
        num = finite_diff_grad(lambda m: cross_entropy_loss(batch, m, range(enc.K), enc, 0.5)[0], p_G)
        assert max_rel_error(g, num) <= 1e-5


class TestContrastive:
    def test_equal_similarities_ln2(self):
        zg = normalize([1.0, 0, 0])
        loss, _, _ = contrastive_loss(zg, normalize([0, 1.0, 0]), normalize([0, 0, 1.0]), 1.0)
        assert abs(loss - math.log(2)) <= 1e-12

    def test_orthogonal_anchor(self):
        loss, _, _ = contrastive_loss([1.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], 1.0)
        assert abs(loss - math.log1p(math.exp(-1))) <= 1e-9
        assert loss == pytest.approx(0.31326, abs=1e-5)

    def test_bad_tau(self):
        with pytest.raises(InvalidParameterError):
            contrastive_loss([1.0, 0], [1.0, 0], [0, 1.0], 0.0)

    @given(unit3, unit3, unit3)
    def test_positive_and_finite(self, zg, zc, zi):
        loss, dg, di = contrastive_loss(zg, zc, zi)
        assert 0 < loss < math.inf
        assert np.all(np.isfinite(dg)) and np.all(np.isfinite(di))

    def test_gradients(self):
        rng = Rng(7)
        for _ in range(10):
            zg, zc, zi = (normalize(rng.normal_array(4)) for _ in range(3))
            _, dg, di = contrastive_loss(zg, zc, zi, 0.7)
            assert max_rel_error(dg, finite_diff_grad(lambda v: contrastive_loss(v, zc, zi, 0.7)[0], zg)) < 1e-7
            assert max_rel_error(di, finite_diff_grad(lambda v: contrastive_loss(zg, zc, v, 0.7)[0], zi)) < 1e-7

    def test_projected_descent_separates(self):
        rng = Rng(11)
        for _ in range(20):
            zg, zc, zi = (normalize(rng.normal_array(5)) for _ in range(3))
            gaps = []
            for _ in range(100):
                gaps.append(zg @ zc - zg @ zi)
                _, dg, _ = contrastive_loss(zg, zc, zi)
                zg = normalize(zg - 0.05 * dg)
            assert np.all(np.diff(gaps) > 0)


class TestAblations:
    def test_no_positive(self):
        assert ablation_loss("no_positive", [1.0, 0], [0, 1.0], [1.0, 0])[0] == pytest.approx(0.0, abs=1e-15)
        assert ablation_loss("no_positive", [1.0, 0], [1.0, 0], [0, 1.0])[0] == pytest.approx(1.0)

    def test_no_negative_verbatim_and_negated(self):
        assert ablation_loss("no_negative", [1.0, 0], [1.0, 0], [0, 1.0])[0] == pytest.approx(1.0)
        assert ablation_loss("no_negative", [1.0, 0], [1.0, 0], [0, 1.0], pos_sign=-1.0)[0] == pytest.approx(-1.0)

    def test_unknown(self):
        with pytest.raises(InvalidParameterError):
            ablation_loss("both", [1.0], [1.0], [1.0])


class TestTotalLoss:
    @pytest.mark.parametrize("extra", ["contrastive", "no_positive", "no_negative"])
    def test_gradients_match_finite_differences(self, extra):
        assert max(gradient_error(s, extra) for s in range(5)) <= 1e-5

    @pytest.mark.parametrize("mu", [0.0, 0.5, 1.0, 2.0])
    def test_additivity(self, mu):
        enc, p_G, ad, batch = random_instance(4)
        rep = total_loss(batch, p_G, ad, range(enc.K), enc, LossConfig(mu=mu))
        assert abs(rep.total - (rep.l_ce + mu * rep.l_con)) <= 1e-12

    def test_mu_zero_is_pure_ce(self):
        enc, p_G, ad, batch = random_instance(5)
        rep = total_loss(batch, p_G, ad, range(enc.K), enc, LossConfig(mu=0.0, tau_cls=0.5))
        loss, g = cross_entropy_loss(batch, p_G + ad.delta(), range(enc.K), enc, 0.5)
        assert rep.total == loss
        np.testing.assert_array_equal(rep.grads["p_G"], g)

    def test_zero_adapter_reduces_to_positive_term(self):
        # z_i == z_G, so each class contributes softplus(1 - sim(z_G, z_C))
        enc, p_G, _, batch = random_instance(6)
        ad = init_adapter(Rng(0), enc.d_token, enc.M, 2)
        rep = total_loss(batch, p_G, ad, range(enc.K), enc, LossConfig())
        present = np.unique(batch.labels)
        zg, _ = enc.encode_prompt(p_G, present)
        s_pos = np.sum(zg * enc.handcrafted_features(present), axis=1)
        assert abs(rep.l_con - np.mean(np.logaddexp(0.0, 1.0 - s_pos))) <= 1e-12

    def test_template_prompt_with_zero_adapter_gives_ln2(self):
        enc, _, _, batch = random_instance(6)
        ad = init_adapter(Rng(0), enc.d_token, enc.M, 2)
        rep = total_loss(batch, enc.template_prompt(), ad, range(enc.K), enc, LossConfig())
        assert abs(rep.l_con - math.log(2)) <= 1e-12

    def test_full_rank_gradient(self):
        enc, p_G, _, batch = random_instance(7)
        D = Rng(1).normal_array(p_G.shape, 0.3)
        cfg = LossConfig(tau_cls=0.5)
        rep = total_loss(batch, p_G, FullRankAdapter(D), range(enc.K), enc, cfg)
        num = finite_diff_grad(lambda m: total_loss(batch, p_G, FullRankAdapter(m), range(enc.K), enc, cfg).total, D)
        assert max_rel_error(rep.grads["D"], num) <= 1e-5

    def test_without_adapter_only_global(self):
        enc, p_G, _, batch = random_instance(8)
        rep = total_loss(batch, p_G, None, range(enc.K), enc, LossConfig())
        assert rep.l_con is None and set(rep.grads) == {"p_G"}
