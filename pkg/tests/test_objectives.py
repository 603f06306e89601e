import numpy as np
import pytest
from skimage.metrics import structural_similarity

from gsavatar.nets import make_confidence_net, mlp_forward
from gsavatar.objectives import (SSIM_C1, LossParts, LossWeights, confidence, confidence_backward, confidence_l1,
                                 image_loss, log_confidence_penalty, mask_loss, ssim, total_loss)
from gsavatar.pipeline import frame_step
from conftest import central_diff, rel_err
from scenes import random_scene


class TestConfidence:
    def test_zero_net_gives_two(self, rng):
        net = make_confidence_net(rng)
        conf = confidence(net, rng.uniform(size=(4, 5, 3)), rng.uniform(size=(4, 5)), mu=1.0)
        np.testing.assert_array_equal(conf.C, 2.0)

    def test_very_negative_output_approaches_mu(self, rng):
        net = make_confidence_net(rng)
        net.biases[-1][...] = -20.0
        conf = confidence(net, rng.uniform(size=(3, 3, 3)), rng.uniform(size=(3, 3)), mu=1.0)
        assert np.all(conf.C > 1.0) and np.all(conf.C - 1.0 < 3e-9)

    def test_pointwise_oracle(self, rng):
        net = make_confidence_net(rng)
        net.weights[-1][...] = rng.normal(size=net.weights[-1].shape)
        color, depth = rng.uniform(size=(4, 5, 3)), rng.uniform(size=(4, 5))
        conf = confidence(net, color, depth, mu=0.7)
        for y in range(4):
            for x in range(5):
                e = mlp_forward(net, np.append(color[y, x], depth[y, x]))[0][0]
                assert conf.C[y, x] == pytest.approx(0.7 + np.exp(e), abs=1e-12)

    def test_backward(self, rng):
        net = make_confidence_net(rng)
        for b in net.biases:
            b[...] = 0.1 * rng.normal(size=b.shape)
        net.weights[-1][...] = rng.normal(size=net.weights[-1].shape)
        color, depth = rng.uniform(size=(3, 4, 3)), rng.uniform(size=(3, 4))
        g = rng.normal(size=(3, 4))
        grads = confidence_backward(net, confidence(net, color, depth), g)
        for p, gp in zip(net.params(), grads):
            def f(v, p=p):
                old = p.copy()
                p[...] = v
                val = np.sum(confidence(net, color, depth).C * g)
                p[...] = old
                return val
            assert rel_err(gp, central_diff(f, p.copy())) < 1e-6

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            confidence(make_confidence_net(rng), np.zeros((2, 2, 3)), np.zeros((3, 2)))


class TestConfidenceL1:
    def test_perfect_render(self, rng):
        img = rng.uniform(size=(3, 3, 3))
        assert confidence_l1(np.full((3, 3), 2.0), img, img) == 0.0

    def test_unit_confidence_is_mae(self, rng):
        a, b = rng.uniform(size=(3, 4, 3)), rng.uniform(size=(3, 4, 3))
        assert confidence_l1(np.ones((3, 4)), a, b) == pytest.approx(np.mean(np.abs(a - b)), rel=1e-14)

    def test_single_pixel(self):
        assert confidence_l1(np.array([[2.0]]), np.array([[[0.5]]]), np.array([[[0.0]]])) == 1.0

    def test_gradients(self, rng):
        C = rng.uniform(1, 3, size=(3, 4))
        a, b = rng.uniform(size=(3, 4, 3)), rng.uniform(size=(3, 4, 3))
        _, d_a, d_C = confidence_l1(C, a, b, return_grads=True)
        assert rel_err(d_a, central_diff(lambda v: confidence_l1(C, v, b), a)) < 1e-7
        assert rel_err(d_C, central_diff(lambda v: confidence_l1(v, a, b), C)) < 1e-7

    def test_log_penalty_gradient(self, rng):
        C = rng.uniform(1, 3, size=(3, 4))
        _, d = log_confidence_penalty(C, return_grads=True)
        assert rel_err(d, central_diff(log_confidence_penalty, C)) < 1e-7


class TestMaskLoss:
    def test_equal(self, rng):
        m = rng.uniform(size=(4, 4))
        assert mask_loss(m, m) == 0.0

    def test_all_wrong(self):
        assert mask_loss(np.zeros((3, 3)), np.ones((3, 3))) == 1.0

    def test_pointwise_oracle(self, rng):
        a, m = rng.uniform(size=(5, 6)), rng.uniform(size=(5, 6))
        expected = sum(abs(a[i, j] - m[i, j]) for i in range(5) for j in range(6)) / 30
        assert mask_loss(a, m) == pytest.approx(expected, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mask_loss(np.zeros((2, 2)), np.zeros((2, 3)))


class TestSSIM:
    def test_identical(self, rng):
        a = rng.uniform(size=(16, 16, 3))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_constant_images_closed_form(self):
        a, b = np.zeros((16, 16)), np.ones((16, 16))
        assert ssim(a, b) == pytest.approx(SSIM_C1 / (1.0 + SSIM_C1), rel=1e-10)

    def test_symmetric(self, rng):
        for _ in range(5):
            a, b = rng.uniform(size=(20, 17, 3)), rng.uniform(size=(20, 17, 3))
            assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-14)

    def test_matches_skimage(self, rng):
        a = rng.uniform(size=(32, 40, 3))
        b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
        ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                    data_range=1.0, channel_axis=-1)
        assert ssim(a, b) == pytest.approx(ref, abs=1e-10)

    def test_small_image_uses_cropped_window(self, rng):
        a, b = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
        v = ssim(a, b)
        assert -1.0 <= v <= 1.0 and np.isfinite(v)

    def test_gradient(self, rng):
        for shape in ((14, 13, 3), (8, 8, 3)):
            a, b = rng.uniform(size=shape), rng.uniform(size=shape)
            _, g = ssim(a, b, return_grad=True)
            assert rel_err(g, central_diff(lambda v: ssim(v, b), a)) < 1e-6


class TestTotalLoss:
    def test_zero(self):
        assert total_loss(LossParts(0, 0, 0, 0), LossWeights()) == 0.0

    def test_color_only(self):
        assert total_loss(LossParts(1.0, 0, 0, 0), LossWeights()) == 1.0

    def test_weighted_sum(self):
        w = LossWeights()
        assert (w.lambda_m, w.lambda_s, w.lambda_l, w.mu) == (0.1, 0.01, 0.04, 1.0)
        assert total_loss(LossParts(0.5, 0.2, 0.1, 0.25), w) == pytest.approx(0.531, abs=1e-15)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_m=-0.1)
        with pytest.raises(ValueError):
            LossWeights(lambda_s=float("nan"))

    def test_terms_non_negative(self, rng):
        net = make_confidence_net(rng)
        for _ in range(5):
            c, t = rng.uniform(size=(12, 12, 3)), rng.uniform(size=(12, 12, 3))
            out = image_loss(net, c, rng.uniform(size=(12, 12)), rng.uniform(size=(12, 12)), t,
                             rng.uniform(size=(12, 12)), LossWeights())
            p = out.parts
            assert p.confidence_l1 >= 0 and p.mask >= 0 and p.ssim_term >= 0 and out.value >= 0

    def test_perceptual_plugin(self, rng):
        net = make_confidence_net(rng)
        c, t = rng.uniform(size=(12, 12, 3)), rng.uniform(size=(12, 12, 3))
        d, a, m = rng.uniform(size=(12, 12)), rng.uniform(size=(12, 12)), rng.uniform(size=(12, 12))
        w = LossWeights()
        plain = image_loss(net, c, d, a, t, m, w)

        def scorer(x, y):
            return float(np.mean((x - y) ** 2)), 2 * (x - y) / x.size

        with_p = image_loss(net, c, d, a, t, m, w, scorer)
        assert with_p.value == pytest.approx(plain.value + 0.04 * np.mean((c - t) ** 2), rel=1e-14)
        np.testing.assert_allclose(with_p.d_color - plain.d_color, 0.04 * 2 * (c - t) / c.size, atol=1e-18)


def test_fresh_confidence_doubles_l1_gradient(asset):
    """With E = 0 the colour term is C = 2 times plain L1, so its gradient doubles exactly."""
    rng = np.random.default_rng(3)
    avatar, _, pose, camera, target, mask, _ = random_scene(asset, rng)
    conf = make_confidence_net(rng)  # zero last layer: E = 0
    only_color = LossWeights(lambda_m=0.0, lambda_s=0.0, lambda_l=0.0)
    step = frame_step(avatar, asset, conf, pose, camera, target, mask, only_color)
    np.testing.assert_array_equal(step.loss.confidence.C, 2.0)
    color = step.render.color
    plain = np.sign(color - target) / color.size
    np.testing.assert_allclose(step.loss.d_color, 2.0 * plain, rtol=1e-15)
    # mu = 0 gives C = 1, the plain L1 pipeline
    plain_l1 = LossWeights(lambda_m=0.0, lambda_s=0.0, lambda_l=0.0, mu=0.0)
    half = frame_step(avatar, asset, conf, pose, camera, target, mask, plain_l1)
    np.testing.assert_allclose(step.grads.centers, 2.0 * half.grads.centers, rtol=1e-12, atol=1e-300)
    np.testing.assert_allclose(step.grads.sh, 2.0 * half.grads.sh, rtol=1e-12, atol=1e-300)
