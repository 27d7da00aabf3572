import math

import numpy as np
import pytest
import torch
from scipy import integrate

from stamp.backbone import build_network
from stamp.mask_gen import (
    LayerMaskParams,
    MaskGenerator,
    architecture_from_masks,
    channel_pool,
    clamp_psi,
    expected_mask,
    generate_masks,
    keep_probability,
    kl_gaussian,
    kl_kumaraswamy_beta,
    kl_regularizer,
    kumaraswamy_mean,
    sample_mask_relaxed,
    sample_pi,
)

D = torch.float64


def t(x):
    return torch.as_tensor(x, dtype=D)


def kl_quadrature(a, b, alpha):
    """KL(Kumaraswamy(a, b) || Beta(alpha, 1)) by direct integration of q log(q/p)."""

    def log_q(x):
        return math.log(a * b) + (a - 1) * math.log(x) + (b - 1) * math.log1p(-x ** a)

    def integrand(x):
        lq = log_q(x)
        lp = math.log(alpha) + (alpha - 1) * math.log(x)
        return math.exp(lq) * (lq - lp)

    parts = [integrate.quad(integrand, lo, hi, limit=500, epsabs=1e-10, epsrel=1e-8)[0]
             for lo, hi in ((0, 1e-6), (1e-6, 0.5), (0.5, 1 - 1e-6), (1 - 1e-6, 1))]
    return sum(parts)


class TestClamp:
    def test_values(self):
        assert clamp_psi(0.5, 0.01) == 0.5
        assert clamp_psi(1.5, 0.01) == 0.99
        assert clamp_psi(-0.3, 0.01) == 0.01

    def test_tensor_identity_inside(self):
        x = torch.linspace(0.01, 0.99, 50, dtype=D)
        assert torch.equal(clamp_psi(x, 0.01), x)

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            clamp_psi(0.3, 0.5)


class TestSamplePi:
    def test_uniform_inverse_cdf(self):
        assert sample_pi(t([1.0]), t([1.0]), t([0.5])).item() == pytest.approx(0.5, abs=1e-15)

    def test_uniform_mean_monte_carlo(self):
        g = torch.Generator().manual_seed(0)
        u = torch.rand(100_000, generator=g, dtype=D)
        pi = sample_pi(torch.ones_like(u), torch.ones_like(u), u)
        assert abs(pi.mean().item() - 0.5) <= 0.005

    @pytest.mark.parametrize("a", [0.5, 2.0, 5.0])
    def test_matches_beta_a_1(self, a):
        # Kumaraswamy(a, 1) has CDF x^a, the Beta(a, 1) CDF
        g = torch.Generator().manual_seed(1)
        u = torch.rand(100_000, generator=g, dtype=D)
        pi = np.sort(sample_pi(torch.full_like(u, a), torch.ones_like(u), u).numpy())
        ecdf = np.arange(1, len(pi) + 1) / len(pi)
        assert np.max(np.abs(ecdf - pi ** a)) <= 0.01

    def test_differentiable(self):
        a = t([2.0]).requires_grad_()
        b = t([3.0]).requires_grad_()
        sample_pi(a, b, t([0.3])).sum().backward()
        assert a.grad.item() != 0 and b.grad.item() != 0


def test_kumaraswamy_mean_quadrature():
    for a, b in [(0.5, 0.5), (2.0, 1.0), (1.0, 3.0), (5.0, 2.0)]:
        ref = integrate.quad(lambda x: x * a * b * x ** (a - 1) * (1 - x ** a) ** (b - 1), 0, 1)[0]
        assert kumaraswamy_mean(t(a), t(b)).item() == pytest.approx(ref, abs=1e-8)


class TestChannelPool:
    def test_constant(self):
        o = torch.full((1, 3, 4, 4), 2.5, dtype=D)
        assert torch.allclose(channel_pool(o), t([2.5] * 3))

    def test_half_half(self):
        o = torch.zeros(1, 1, 2, 2, dtype=D)
        o[0, 0, 0] = 1.0
        assert channel_pool(o).item() == 0.5

    def test_random_mean(self):
        o = torch.randn(1, 5, 3, 7, dtype=D, generator=torch.Generator().manual_seed(3))
        ref = o.numpy()[0].reshape(5, -1).sum(axis=1) / 21
        np.testing.assert_allclose(channel_pool(o).numpy(), ref, atol=1e-7)

    def test_rejects_r_gt_1(self):
        with pytest.raises(ValueError):
            channel_pool(torch.zeros(2, 3, 4, 4))


class TestKeepProbability:
    @pytest.mark.parametrize("pi,pre,expected", [(1.0, 0.5, 0.5), (0.8, 2.0, 0.792), (0.5, -1.0, 0.005)])
    def test_examples(self, pi, pre, expected):
        # gamma * o + beta = pre with gamma = 1, o = pre, beta = 0
        p = keep_probability(t([pi]), t([pre]), t([1.0]), t([0.0]), 0.01)
        assert p.item() == pytest.approx(expected, abs=1e-12)


class TestRelaxedMask:
    @pytest.mark.parametrize("tau", [0.01, 0.1, 1.0, 10.0])
    def test_zero_logit(self, tau):
        assert sample_mask_relaxed(t([0.5]), tau, t([0.5])).item() == pytest.approx(0.5)

    def test_low_temperature_mean(self):
        g = torch.Generator().manual_seed(4)
        for p in (0.1, 0.37, 0.8):
            v = torch.rand(100_000, generator=g, dtype=D)
            m = sample_mask_relaxed(torch.full_like(v, p), 0.01, v)
            assert abs(m.mean().item() - p) <= 0.01

    def test_antisymmetry(self):
        p, v = t([0.2, 0.7]), t([0.35, 0.9])
        m1 = sample_mask_relaxed(p, 0.3, v)
        m2 = sample_mask_relaxed(1 - p, 0.3, 1 - v)
        np.testing.assert_allclose(m2.numpy(), 1 - m1.numpy(), atol=1e-12)

    def test_range(self):
        g = torch.Generator().manual_seed(5)
        p = torch.rand(1000, generator=g, dtype=D).clamp(1e-3, 1 - 1e-3)
        m = sample_mask_relaxed(p, 0.1, torch.rand(1000, generator=g, dtype=D))
        assert ((m > 0) & (m < 1)).all()


class TestExpectedMask:
    def _params(self, a, b, eps=0.01):
        lp = LayerMaskParams(1, eps=eps, dtype=D)
        with torch.no_grad():
            lp.log_a.fill_(math.log(a))
            lp.log_b.fill_(math.log(b))
        return lp

    def test_uniform_times_gate(self):
        lp = self._params(1.0, 1.0)
        assert expected_mask(lp, t([0.6])).item() == pytest.approx(0.3)

    def test_a2_b1_upper_clamp(self):
        lp = self._params(2.0, 1.0)
        # E[pi] by quadrature of the inverse CDF (1 - u)^(1/2)
        e_pi = integrate.quad(lambda u: (1 - u) ** 0.5, 0, 1)[0]
        assert e_pi == pytest.approx(2 / 3, abs=1e-12)
        assert expected_mask(lp, t([5.0])).item() == pytest.approx(e_pi * 0.99, abs=1e-12)
        assert expected_mask(lp, t([5.0])).item() == pytest.approx(0.66, abs=1e-12)

    def test_monte_carlo(self):
        g = torch.Generator().manual_seed(6)
        rng = np.random.default_rng(6)
        for _ in range(20):
            a, b = rng.uniform(0.3, 4.0, size=2)
            lp = self._params(a, b)
            with torch.no_grad():
                lp.gamma.fill_(rng.uniform(-1, 2))
                lp.beta_mean.fill_(rng.uniform(-0.5, 0.5))
            pooled = t([rng.uniform(0, 1)])
            u = torch.rand(100_000, generator=g, dtype=D)
            p = keep_probability(sample_pi(lp.a.expand_as(u), lp.b.expand_as(u), u), pooled, lp.gamma, lp.beta_mean, lp.eps)
            se = p.std().item() / math.sqrt(len(p))
            assert abs(p.mean().item() - expected_mask(lp, pooled).item()) <= 3 * se + 1e-12


class TestKL:
    def test_zero_at_prior(self):
        lp = LayerMaskParams(4, alpha=0.7, sigma0=1.0, b_prior=1.0, dtype=D)
        assert abs(lp.kl().item()) <= 1e-9

    def test_against_quadrature_point(self):
        val = kl_kumaraswamy_beta(t(2.0), t(3.0), 1.0).item()
        assert val == pytest.approx(kl_quadrature(2.0, 3.0, 1.0), abs=1e-4)

    @pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0])
    def test_grid(self, alpha):
        for a in (0.5, 1, 2, 5):
            for b in (0.5, 1, 2, 5):
                val = kl_kumaraswamy_beta(t(float(a)), t(float(b)), alpha).item()
                assert val == pytest.approx(kl_quadrature(a, b, alpha), abs=1e-4), (a, b, alpha)
                assert val >= -1e-12

    def test_gaussian_value(self):
        ref = 0.5 * (0.01 + 1) - 0.5 + math.log(10)
        assert kl_gaussian(t(1.0), 0.1, 1.0).item() == pytest.approx(ref, abs=1e-12)
        assert ref == pytest.approx(2.3076, abs=1e-4)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            kl_kumaraswamy_beta(t([-1.0]), t([1.0]), 1.0)

    def test_gradient_finite_difference(self):
        gen = MaskGenerator({"l0": 3, "l1": 2}, alpha=0.8, dtype=D)
        rng = np.random.default_rng(7)
        with torch.no_grad():
            for p in gen.parameters():
                p.copy_(torch.as_tensor(rng.normal(0, 0.5, size=p.shape)))
        params = [gen.layer(n).log_a for n in gen.names] + [gen.layer(n).log_b for n in gen.names] \
            + [gen.layer(n).beta_mean for n in gen.names]
        grads = torch.autograd.grad(kl_regularizer(gen), params)
        h = 1e-5
        for p, g in zip(params, grads):
            for i in range(p.numel()):
                with torch.no_grad():
                    p.view(-1)[i] += h
                    up = kl_regularizer(gen).item()
                    p.view(-1)[i] -= 2 * h
                    down = kl_regularizer(gen).item()
                    p.view(-1)[i] += h
                fd = (up - down) / (2 * h)
                assert abs(fd - g.view(-1)[i].item()) <= 1e-4 * max(1.0, abs(fd))


class TestGenerateMasks:
    @pytest.fixture
    def setup(self):
        net = build_network("mini_vgg", (1, 8, 8), 3, widths=[4, 4, 6, 6, 8, 8], seed=0, dtype=D)
        gen = MaskGenerator(net.widths, dtype=D)
        img = torch.randn(1, 1, 8, 8, dtype=D, generator=torch.Generator().manual_seed(0))
        return net, gen, img

    def test_expected_deterministic(self, setup):
        net, gen, img = setup
        m1, _ = generate_masks(net, gen, img, "expected")
        m2, _ = generate_masks(net, gen, img, "expected")
        for n in net.mask_names:
            assert torch.equal(m1[n], m2[n])

    def test_hard_threshold_zero_keeps_all(self, setup):
        net, gen, img = setup
        m, _ = generate_masks(net, gen, img, "hard", threshold=0.0)
        for n in net.mask_names:
            assert torch.equal(m[n], torch.ones_like(m[n]))

    def test_ranges(self, setup):
        net, gen, img = setup
        rng = torch.Generator().manual_seed(1)
        relaxed, _ = generate_masks(net, gen, img, "relaxed", rng)
        expected, _ = generate_masks(net, gen, img, "expected")
        for n in net.mask_names:
            assert ((relaxed[n] > 0) & (relaxed[n] < 1)).all()
            assert ((expected[n] >= 0) & (expected[n] <= 1 - gen.layer(n).eps)).all()

    def test_relaxed_mean_matches_expected(self, setup):
        # the expected mask is exact per layer given the (expected-masked) upstream path,
        # so check the first layer whose input does not depend on sampled masks
        net, gen, img = setup
        rng = torch.Generator().manual_seed(2)
        with torch.no_grad():
            samples = torch.stack([generate_masks(net, gen, img, "relaxed", rng, tau=0.1)[0]["conv0"]
                                   for _ in range(2000)])
            expected, _ = generate_masks(net, gen, img, "expected")
        assert torch.max(torch.abs(samples.mean(0) - expected["conv0"])).item() <= 0.03

    def test_depends_only_on_set_rep(self, setup):
        net, gen, img = setup
        m1, _ = generate_masks(net, gen, img.clone(), "expected")
        m2, _ = generate_masks(net, gen, img.clone(), "expected")
        assert all(torch.equal(m1[n], m2[n]) for n in net.mask_names)

    def test_independent_variant(self, setup):
        net, _, _ = setup
        gen = MaskGenerator(net.widths, set_dependent=False, dtype=D)
        m, pooled = generate_masks(net, gen, None, "expected")
        assert pooled == {}
        assert torch.allclose(m["conv0"], gen.layer("conv0").expected_pi())

    def test_constant_gate_reduces_to_independent(self):
        lp = LayerMaskParams(5, dtype=D)
        with torch.no_grad():
            lp.gamma.zero_()
            lp.beta_mean.fill_(2.0)
        pooled = torch.rand(5, dtype=D)
        assert torch.allclose(expected_mask(lp, pooled), expected_mask(lp) * (1 - lp.eps))

    def test_architecture_keep_one_repair(self, setup):
        net, _, _ = setup
        em = {n: torch.zeros(w, dtype=D) for n, w in net.widths.items()}
        em["conv2"][3] = 0.004
        arch, repaired = architecture_from_masks(net, em, 0.01)
        assert arch.keep_indices["conv2"] == [3]
        assert set(repaired) == set(net.mask_names)
