import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from idswap.core import TrainConfig
from idswap.losses import (
    FMVariant,
    LossReport,
    feature_matching_loss,
    fm_sum,
    gradient_penalty,
    hinge_d_loss,
    hinge_g_loss,
    identity_loss,
    reconstruction_loss,
    total_generator_loss,
)
from helpers import check_input_gradient


def _random_feats(rng, n_layers=5, batch=2):
    sizes = [(batch, 4, 8, 8), (batch, 8, 4, 4), (batch, 8, 2, 2), (batch, 16, 2, 2), (batch, 1, 2, 2)]
    return [
        torch.from_numpy(rng.standard_normal(sizes[i]).astype(np.float32)) for i in range(n_layers)
    ]


class TestIdentityLoss:
    def test_equal_vectors(self):
        v = torch.tensor([0.6, 0.8])
        assert float(identity_loss(v, v)) == pytest.approx(0.0, abs=1e-6)

    def test_orthogonal(self):
        assert float(identity_loss(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]))) == pytest.approx(1.0, abs=1e-6)

    def test_opposite(self):
        v = torch.tensor([1.0, 0.0])
        assert float(identity_loss(v, -v)) == pytest.approx(2.0, abs=1e-6)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            identity_loss(torch.zeros(3), torch.ones(3))

    def test_scale_invariance(self, rng):
        for _ in range(10):
            a = torch.from_numpy(rng.standard_normal(6).astype(np.float32))
            b = torch.from_numpy(rng.standard_normal(6).astype(np.float32))
            assert float(identity_loss(2 * a, b)) == pytest.approx(float(identity_loss(a, b)), abs=1e-6)
            assert float(identity_loss(a, 3 * b)) == pytest.approx(float(identity_loss(a, b)), abs=1e-6)

    def test_batched_mean(self):
        v_r = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        v_s = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
        assert float(identity_loss(v_r, v_s)) == pytest.approx(0.5, abs=1e-6)

    def test_range(self, rng):
        for _ in range(50):
            a = torch.from_numpy(rng.standard_normal(8).astype(np.float32))
            b = torch.from_numpy(rng.standard_normal(8).astype(np.float32))
            val = float(identity_loss(a, b))
            assert 0.0 - 1e-6 <= val <= 2.0 + 1e-6

    def test_gradcheck(self):
        torch.manual_seed(0)
        v_r = torch.randn(4, dtype=torch.float64, requires_grad=True)
        v_s = torch.randn(4, dtype=torch.float64)
        check_input_gradient(lambda: identity_loss(v_r, v_s), v_r, tol=1e-4)


class TestReconstructionLoss:
    def test_identical_images(self):
        img = torch.rand(3, 8, 8)
        assert float(reconstruction_loss(img, img, True)) == 0.0

    def test_different_identity_is_exactly_zero(self, rng):
        a = torch.from_numpy(rng.uniform(-1, 1, (3, 8, 8)).astype(np.float32))
        b = torch.from_numpy(rng.uniform(-1, 1, (3, 8, 8)).astype(np.float32))
        assert float(reconstruction_loss(a, b, False)) == 0.0

    def test_constant_difference(self):
        a = torch.zeros(3, 8, 8)
        b = torch.full((3, 8, 8), 0.5)
        assert float(reconstruction_loss(a, b, True)) == pytest.approx(0.5, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes"):
            reconstruction_loss(torch.zeros(3, 8, 8), torch.zeros(3, 4, 4), True)

    def test_gradcheck(self):
        torch.manual_seed(0)
        a = torch.randn(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
        b = torch.randn(1, 3, 4, 4, dtype=torch.float64)
        check_input_gradient(lambda: reconstruction_loss(a, b, True), a, tol=1e-4)


class TestFeatureMatching:
    def test_equal_features_zero_for_all_variants(self, rng):
        feats = _random_feats(rng)
        for variant in (FMVariant("oFM"), FMVariant("wFM", 4), FMVariant("wFM_bar", 4), FMVariant("nFM")):
            assert float(feature_matching_loss(feats, feats, variant)) == 0.0

    def test_nfm_always_zero(self, rng):
        a, b = _random_feats(rng), _random_feats(rng)
        assert float(feature_matching_loss(a, b, FMVariant("nFM"))) == 0.0

    def test_two_layer_example(self):
        # layer-2 features differ by exactly 1 everywhere; layer 1 identical
        layer1 = torch.zeros(2, 3, 4, 4)
        layer2_t = torch.ones(2, 5, 2, 2)
        layer2_r = layer2_t + 1.0
        feats_r = [layer1, layer2_r]
        feats_t = [layer1.clone(), layer2_t]
        assert float(feature_matching_loss(feats_r, feats_t, FMVariant("wFM", m=2))) == pytest.approx(1.0, abs=1e-6)
        assert float(feature_matching_loss(feats_r, feats_t, FMVariant("oFM"))) == pytest.approx(1.0, abs=1e-6)

    def test_scalar_oracle(self, rng):
        feats_r = _random_feats(rng)
        feats_t = _random_feats(rng)
        for variant, layers in (
            (FMVariant("oFM"), [1, 2, 3, 4, 5]),
            (FMVariant("wFM", 3), [3, 4, 5]),
            (FMVariant("wFM_bar", 3), [1, 2]),
        ):
            expected = sum(
                float(np.abs((feats_r[i - 1] - feats_t[i - 1]).numpy()).mean()) for i in layers
            )
            got = float(feature_matching_loss(feats_r, feats_t, variant))
            assert got == pytest.approx(expected, abs=1e-6)

    def test_partition_identity_exact(self, rng):
        for _ in range(100):
            feats_r = _random_feats(rng)
            feats_t = _random_feats(rng)
            m = int(rng.integers(2, 6))
            o = float(feature_matching_loss(feats_r, feats_t, FMVariant("oFM")))
            w = float(feature_matching_loss(feats_r, feats_t, FMVariant("wFM", m)))
            wb = float(feature_matching_loss(feats_r, feats_t, FMVariant("wFM_bar", m)))
            assert o == w + wb  # exact, not approximate

    def test_target_side_detached(self, rng):
        r = [torch.randn(1, 2, 2, 2, requires_grad=True)]
        t = [torch.randn(1, 2, 2, 2, requires_grad=True)]
        feature_matching_loss(r, t, FMVariant("oFM")).backward()
        assert r[0].grad is not None
        assert t[0].grad is None

    def test_shape_mismatch(self, rng):
        a = _random_feats(rng)
        b = _random_feats(rng)
        b[2] = torch.zeros(2, 3, 3, 3)
        with pytest.raises(ValueError, match="layer 3"):
            feature_matching_loss(a, b, FMVariant("oFM"))

    def test_length_mismatch(self, rng):
        a = _random_feats(rng)
        with pytest.raises(ValueError, match="lengths"):
            feature_matching_loss(a, a[:-1], FMVariant("oFM"))

    def test_m_out_of_range(self, rng):
        a = _random_feats(rng)
        with pytest.raises(ValueError, match="fm_start_layer"):
            feature_matching_loss(a, a, FMVariant("wFM", m=6))
        with pytest.raises(ValueError, match="fm_start_layer"):
            feature_matching_loss(a, a, FMVariant("wFM", m=1))

    def test_bad_kind_rejected(self):
        with pytest.raises(ValueError, match="variant"):
            FMVariant("xFM")

    def test_gradcheck_variants(self, rng):
        torch.manual_seed(3)
        for kind, m in (("oFM", 2), ("wFM", 2), ("wFM_bar", 2)):
            r = [torch.randn(1, 2, 3, 3, dtype=torch.float64, requires_grad=True) for _ in range(3)]
            t = [torch.randn(1, 2, 3, 3, dtype=torch.float64) for _ in range(3)]
            check_input_gradient(
                lambda: feature_matching_loss(r, t, FMVariant(kind, m)), r[1], tol=1e-4
            )


class TestFmSum:
    def test_zero_scales(self, rng):
        feats = _random_feats(rng)
        assert float(fm_sum([feats, feats], [feats, feats], FMVariant("oFM"))) == 0.0

    def test_additivity(self, rng):
        r1, t1 = _random_feats(rng), _random_feats(rng)
        r2, t2 = _random_feats(rng), _random_feats(rng)
        variant = FMVariant("wFM", 3)
        total = float(fm_sum([r1, r2], [t1, t2], variant))
        parts = float(feature_matching_loss(r1, t1, variant)) + float(
            feature_matching_loss(r2, t2, variant)
        )
        assert total == pytest.approx(parts, abs=1e-9)

    def test_single_scale_equals_plain_loss(self, rng):
        r, t = _random_feats(rng), _random_feats(rng)
        variant = FMVariant("oFM")
        assert float(fm_sum([r], [t], variant)) == float(feature_matching_loss(r, t, variant))


class TestHingeLosses:
    def test_d_saturated_is_zero(self):
        real = torch.full((2, 1, 4, 4), 1.5)
        fake = torch.full((2, 1, 4, 4), -2.0)
        assert float(hinge_d_loss(real, fake)) == 0.0

    def test_d_at_zero_scores(self):
        z = torch.zeros(2, 1, 4, 4)
        assert float(hinge_d_loss(z, z)) == pytest.approx(2.0, abs=1e-6)

    def test_d_scalar_oracle(self):
        real = torch.tensor([[0.5]])
        fake = torch.tensor([[-0.25]])
        assert float(hinge_d_loss(real, fake)) == pytest.approx(1.25, abs=1e-6)

    def test_d_sums_over_scales(self):
        z = torch.zeros(1, 1, 2, 2)
        assert float(hinge_d_loss([z, z], [z, z])) == pytest.approx(4.0, abs=1e-6)

    def test_g_zero_scores(self):
        assert float(hinge_g_loss(torch.zeros(2, 1, 4, 4))) == 0.0

    def test_g_constant_scores(self):
        assert float(hinge_g_loss(torch.full((1, 1, 3, 3), 3.0))) == pytest.approx(-3.0, abs=1e-6)

    def test_g_mean(self):
        assert float(hinge_g_loss(torch.tensor([1.0, -1.0]))) == pytest.approx(0.0, abs=1e-6)

    def test_g_sums_over_scales(self):
        a = torch.full((1, 1, 2, 2), 1.0)
        b = torch.full((1, 1, 1, 1), 2.0)
        assert float(hinge_g_loss([a, b])) == pytest.approx(-3.0, abs=1e-6)

    def test_scale_count_mismatch(self):
        z = torch.zeros(1, 1, 2, 2)
        with pytest.raises(ValueError, match="scale"):
            hinge_d_loss([z, z], [z])

    def test_d_gradcheck(self):
        torch.manual_seed(0)
        real = torch.randn(2, 1, 3, 3, dtype=torch.float64, requires_grad=True)
        fake = torch.randn(2, 1, 3, 3, dtype=torch.float64)
        # keep scores away from the hinge kink so central differences are valid
        check_input_gradient(lambda: hinge_d_loss(real * 0.5, fake), real, tol=1e-4)

    def test_g_gradcheck(self):
        torch.manual_seed(0)
        fake = torch.randn(2, 1, 3, 3, dtype=torch.float64, requires_grad=True)
        check_input_gradient(lambda: hinge_g_loss(fake), fake, tol=1e-4)


class _FlatLinearScore(nn.Module):
    """score = w . flatten(x) + b, one scalar per sample."""

    def __init__(self, weight, bias=0.0):
        super().__init__()
        self.weight = nn.Parameter(torch.as_tensor(weight, dtype=torch.float32))
        self.bias = nn.Parameter(torch.tensor(float(bias)))

    def forward(self, x):
        return x.reshape(x.shape[0], -1) @ self.weight + self.bias


class TestGradientPenalty:
    def test_unit_norm_linear_gives_zero(self, rng):
        w = rng.standard_normal(3 * 4 * 4)
        w /= np.linalg.norm(w)
        disc = _FlatLinearScore(w.astype(np.float32))
        real = torch.from_numpy(rng.uniform(-1, 1, (4, 3, 4, 4)).astype(np.float32))
        fake = torch.from_numpy(rng.uniform(-1, 1, (4, 3, 4, 4)).astype(np.float32))
        gp = gradient_penalty(disc, real, fake, alpha=torch.full((4,), 0.3))
        assert float(gp) < 1e-10

    def test_zero_discriminator_gives_one(self, rng):
        disc = _FlatLinearScore(np.zeros(3 * 4 * 4, dtype=np.float32))
        real = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 4, 4)).astype(np.float32))
        fake = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 4, 4)).astype(np.float32))
        gp = gradient_penalty(disc, real, fake, alpha=torch.full((2,), 0.5))
        assert float(gp) == pytest.approx(1.0, abs=1e-7)

    def test_two_parameter_analytic_oracle(self):
        # score = a * sum(x) + b * sum(x^2); grad = a + 2 b x, per pixel
        a, b = 0.7, -0.3

        class TwoParam(nn.Module):
            def __init__(self):
                super().__init__()
                self.a = nn.Parameter(torch.tensor(a))
                self.b = nn.Parameter(torch.tensor(b))

            def forward(self, x):
                flat = x.reshape(x.shape[0], -1)
                return self.a * flat.sum(dim=1) + self.b * (flat**2).sum(dim=1)

        torch.manual_seed(0)
        real = torch.rand(3, 1, 2, 2) * 2 - 1
        fake = torch.rand(3, 1, 2, 2) * 2 - 1
        alpha = torch.tensor([0.2, 0.5, 0.9])
        got = float(gradient_penalty(TwoParam(), real, fake, alpha=alpha))

        x_hat = (alpha.reshape(3, 1, 1, 1) * real + (1 - alpha.reshape(3, 1, 1, 1)) * fake).numpy()
        expected = 0.0
        for i in range(3):
            grad = a + 2 * b * x_hat[i].reshape(-1)
            expected += (np.linalg.norm(grad) - 1.0) ** 2
        expected /= 3
        assert got == pytest.approx(expected, abs=1e-4)

    def test_penalty_differentiable_wrt_disc_params(self):
        torch.manual_seed(1)
        disc = _FlatLinearScore(np.random.default_rng(0).standard_normal(4).astype(np.float32))
        disc.double()
        real = torch.randn(2, 1, 2, 2, dtype=torch.float64)
        fake = torch.randn(2, 1, 2, 2, dtype=torch.float64)
        alpha = torch.tensor([0.25, 0.75], dtype=torch.float64)

        from helpers import check_param_gradients

        check_param_gradients(
            lambda: gradient_penalty(disc, real, fake, alpha=alpha), disc, tol=1e-4
        )

    def test_mean_over_scales(self, rng):
        w = rng.standard_normal(4).astype(np.float32)
        disc_unit = _FlatLinearScore(w / np.linalg.norm(w))
        disc_zero = _FlatLinearScore(np.zeros(4, dtype=np.float32))
        real = torch.from_numpy(rng.uniform(-1, 1, (2, 1, 2, 2)).astype(np.float32))
        fake = torch.from_numpy(rng.uniform(-1, 1, (2, 1, 2, 2)).astype(np.float32))
        alpha = torch.full((2,), 0.5)
        gp = gradient_penalty([disc_unit, disc_zero], real, fake, alpha=alpha)
        assert float(gp) == pytest.approx(0.5, abs=1e-6)

    def test_requires_alpha_or_rng(self, rng):
        disc = _FlatLinearScore(np.zeros(4, dtype=np.float32))
        imgs = torch.zeros(2, 1, 2, 2)
        with pytest.raises(ValueError, match="alpha or rng"):
            gradient_penalty(disc, imgs, imgs)
        # rng path draws alphas deterministically
        g1 = gradient_penalty(disc, imgs, imgs, rng=np.random.default_rng(0))
        g2 = gradient_penalty(disc, imgs, imgs, rng=np.random.default_rng(0))
        assert float(g1) == float(g2)

    def test_shape_mismatch(self):
        disc = _FlatLinearScore(np.zeros(4, dtype=np.float32))
        with pytest.raises(ValueError, match="shapes"):
            gradient_penalty(disc, torch.zeros(2, 1, 2, 2), torch.zeros(3, 1, 2, 2), alpha=torch.ones(2))


class TestTotalGeneratorLoss:
    def test_all_zero(self):
        assert float(total_generator_loss(0.0, 0.0, 0.0, 0.0, TrainConfig())) == 0.0

    def test_default_weights_arithmetic(self):
        total = total_generator_loss(0.1, 0.02, 0.5, 0.03, TrainConfig())
        assert total == pytest.approx(2.0, abs=1e-9)

    def test_linear_in_lambda_id(self):
        import dataclasses

        cfg = TrainConfig()
        cfg2 = dataclasses.replace(cfg, lambda_id=2 * cfg.lambda_id)
        base = total_generator_loss(0.3, 0.1, 0.2, 0.4, cfg)
        doubled = total_generator_loss(0.3, 0.1, 0.2, 0.4, cfg2)
        assert doubled - base == pytest.approx(cfg.lambda_id * 0.3, rel=1e-9)

    def test_gp_not_in_generator_objective(self):
        import dataclasses

        cfg = TrainConfig()
        cfg_big_gp = dataclasses.replace(cfg, lambda_gp=1e6)
        assert total_generator_loss(0.1, 0.1, 0.1, 0.1, cfg) == total_generator_loss(
            0.1, 0.1, 0.1, 0.1, cfg_big_gp
        )


class TestLossReport:
    def test_total_matches_weighted_sum(self, rng):
        for _ in range(20):
            vals = {k: float(rng.uniform(0, 2)) for k in ("l_id", "l_recon", "l_adv_g", "l_adv_d", "l_gp", "l_fm")}
            cfg = TrainConfig()
            report = LossReport.from_components(cfg, **vals)
            expected = (
                cfg.lambda_id * vals["l_id"]
                + cfg.lambda_recon * vals["l_recon"]
                + vals["l_adv_g"]
                + cfg.lambda_gp * vals["l_gp"]
                + cfg.lambda_fm * vals["l_fm"]
            )
            assert abs(report.total_g - expected) < 1e-6

    def test_as_dict_field_order(self):
        report = LossReport.from_components(
            TrainConfig(), l_id=0, l_recon=0, l_adv_g=0, l_adv_d=0, l_gp=0, l_fm=0
        )
        assert list(report.as_dict()) == list(LossReport.FIELDS)
