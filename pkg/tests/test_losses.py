"""Tests for the MI and frequency loss functions against independent oracles."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dcesynth.losses import (
    LossWeights,
    SoftHistogramConfig,
    composite_generator_loss,
    entropy,
    freq_fft_loss,
    freq_pixel_loss,
    frequency_split,
    gaussian_kernel,
    gaussian_lowpass,
    mi_loss,
    soft_joint_histogram,
    soft_marginal_histogram,
)

CFG = SoftHistogramConfig()


def hard_joint_histogram(a_idx: np.ndarray, b_idx: np.ndarray, bins: int = 64) -> np.ndarray:
    """Counting oracle: exact 2-D histogram of bin indices."""
    joint = np.zeros((bins, bins), dtype=np.float64)
    for i, j in zip(a_idx.ravel(), b_idx.ravel()):
        joint[i, j] += 1.0
    return joint / joint.sum()


def hard_nmi(a_idx: np.ndarray, b_idx: np.ndarray, bins: int = 64) -> float:
    joint = hard_joint_histogram(a_idx, b_idx, bins)

    def h(p):
        p = p[p > 0]
        return float(-(p * np.log(p)).sum())

    ha, hb, hab = h(joint.sum(1)), h(joint.sum(0)), h(joint)
    return 2.0 * (ha + hb - hab) / (ha + hb)


def quantized_pair(seed: int, shape=(16, 16)):
    g = torch.Generator().manual_seed(seed)
    centers = CFG.bin_centers(torch.float64)
    ai = torch.randint(0, CFG.bins, shape, generator=g)
    bi = torch.randint(0, CFG.bins, shape, generator=g)
    return centers[ai], centers[bi], ai.numpy(), bi.numpy()


class TestSoftHistogram:
    def test_constant_images_concentrate_near_value(self):
        # 0.5 lies exactly on a bin edge, so mass splits over the two
        # adjacent bins; all of it must stay within one bin width of 0.5.
        a = torch.full((8, 8), 0.5)
        joint = soft_joint_histogram(a, a, CFG)
        assert float(joint.sum()) == pytest.approx(1.0, abs=1e-6)
        centers = CFG.bin_centers()
        near = torch.nonzero((centers - 0.5).abs() <= 1.0 / CFG.bins).flatten()
        block = joint[near][:, near]
        assert float(block.sum()) == pytest.approx(1.0, abs=1e-6)

    def test_marginal_consistency(self):
        g = torch.Generator().manual_seed(1)
        a = torch.rand(12, 12, generator=g)
        b = torch.rand(12, 12, generator=g)
        joint = soft_joint_histogram(a, b, CFG)
        assert torch.allclose(joint.sum(dim=0), soft_marginal_histogram(b, CFG), atol=1e-6)
        assert torch.allclose(joint.sum(dim=1), soft_marginal_histogram(a, CFG), atol=1e-6)

    def test_matches_hard_histogram_on_quantized_images(self):
        a, b, ai, bi = quantized_pair(7)
        soft = soft_joint_histogram(a, b, CFG).numpy()
        hard = hard_joint_histogram(ai, bi, CFG.bins)
        assert np.abs(soft - hard).max() < 1e-9

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shapes differ"):
            soft_joint_histogram(torch.rand(4, 4), torch.rand(5, 5), CFG)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="outside histogram range"):
            soft_joint_histogram(torch.full((4, 4), 1.5), torch.rand(4, 4), CFG)

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            SoftHistogramConfig(bins=1)
        with pytest.raises(ValueError):
            SoftHistogramConfig(bandwidth=-0.1)


class TestEntropy:
    def test_one_hot_is_zero(self):
        p = torch.zeros(64, dtype=torch.float64)
        p[3] = 1.0
        assert float(entropy(p)) == pytest.approx(0.0, abs=1e-9)

    def test_uniform_is_log_bins(self):
        p = torch.full((64,), 1.0 / 64, dtype=torch.float64)
        assert float(entropy(p)) == pytest.approx(math.log(64), abs=1e-6)

    def test_two_point_is_log2(self):
        p = torch.zeros(64, dtype=torch.float64)
        p[0] = p[1] = 0.5
        assert float(entropy(p)) == pytest.approx(math.log(2), abs=1e-9)

    def test_invalid_distribution_rejected(self):
        with pytest.raises(ValueError, match="sum"):
            entropy(torch.full((4,), 0.3))
        with pytest.raises(ValueError, match="negative"):
            entropy(torch.tensor([1.2, -0.2]))

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=30, deadline=None)
    def test_bounds(self, seed):
        g = torch.Generator().manual_seed(seed)
        p = torch.rand(64, generator=g) + 1e-6
        p = p / p.sum()
        h = float(entropy(p))
        assert 0.0 <= h <= math.log(64) + 1e-9


class TestMiLoss:
    def test_identity_is_one_in_hard_limit(self):
        a, _, _, _ = quantized_pair(3)
        assert float(mi_loss(a, a, CFG)) == pytest.approx(1.0, abs=1e-6)

    def test_independent_noise_matches_hard_oracle_64(self):
        # At 64x64 the 64-bin estimator has an intrinsic bias of ~0.12 NMI
        # (the hard-count oracle shows the same); assert agreement with it.
        g = torch.Generator().manual_seed(5)
        a = torch.rand(64, 64, generator=g, dtype=torch.float64)
        b = torch.rand(64, 64, generator=g, dtype=torch.float64)
        soft = float(mi_loss(a, b, CFG))
        ai = np.clip((a.numpy() * CFG.bins).astype(int), 0, CFG.bins - 1)
        bi = np.clip((b.numpy() * CFG.bins).astype(int), 0, CFG.bins - 1)
        assert soft == pytest.approx(hard_nmi(ai, bi), abs=0.02)

    def test_independent_noise_near_zero_at_128(self):
        g = torch.Generator().manual_seed(6)
        a = torch.rand(128, 128, generator=g, dtype=torch.float64)
        b = torch.rand(128, 128, generator=g, dtype=torch.float64)
        assert float(mi_loss(a, b, CFG)) <= 0.05

    def test_bijective_remap_preserves_mi(self):
        a, _, ai, _ = quantized_pair(11)
        b = 1.0 - a  # maps bin centers onto bin centers
        soft = float(mi_loss(a, b, CFG))
        assert soft == pytest.approx(1.0, abs=1e-6)
        assert soft == pytest.approx(hard_nmi(ai, CFG.bins - 1 - ai), abs=1e-6)

    def test_symmetric(self):
        g = torch.Generator().manual_seed(8)
        a = torch.rand(16, 16, generator=g)
        b = torch.rand(16, 16, generator=g)
        assert float(mi_loss(a, b, CFG)) == pytest.approx(float(mi_loss(b, a, CFG)), abs=1e-6)

    def test_invariant_under_shared_bijective_bin_remap(self):
        # remapping both images through one bin-center permutation preserves
        # NMI; the hard-count oracle on the original indices agrees
        a, b, ai, bi = quantized_pair(17)
        g = torch.Generator().manual_seed(18)
        perm = torch.randperm(CFG.bins, generator=g)
        centers = CFG.bin_centers(torch.float64)
        a_remap = centers[perm[torch.as_tensor(ai)]]
        b_remap = centers[perm[torch.as_tensor(bi)]]
        original = float(mi_loss(a, b, CFG))
        remapped = float(mi_loss(a_remap, b_remap, CFG))
        assert remapped == pytest.approx(original, abs=1e-6)
        assert remapped == pytest.approx(hard_nmi(ai, bi), abs=1e-6)

    def test_range(self):
        for seed in range(10):
            g = torch.Generator().manual_seed(seed)
            a = torch.rand(16, 16, generator=g)
            b = torch.rand(16, 16, generator=g)
            v = float(mi_loss(a, b, CFG))
            assert 0.0 - 1e-6 <= v <= 1.0 + 1e-3

    def test_constant_pair_defined_as_one(self, caplog):
        # constants at bin centers have exactly zero soft entropy
        centers = CFG.bin_centers(torch.float64)
        a = torch.full((8, 8), float(centers[16]), dtype=torch.float64)
        b = torch.full((8, 8), float(centers[48]), dtype=torch.float64)
        with caplog.at_level("WARNING"):
            v = float(mi_loss(a, b, CFG))
        assert v == 1.0
        assert "zero" in caplog.text


class TestGaussianLowpass:
    def test_kernel_normalized_and_symmetric(self):
        k = gaussian_kernel(13, 2.0, dtype=torch.float64)
        assert float(k.sum()) == pytest.approx(1.0, abs=1e-7)
        assert torch.allclose(k, torch.rot90(k), atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            gaussian_kernel(12, 2.0)
        with pytest.raises(ValueError, match="odd"):
            gaussian_lowpass(torch.rand(16, 16), kernel_size=8)

    def test_constant_image_is_fixed_point(self):
        x = torch.full((32, 32), 0.37, dtype=torch.float64)
        y = gaussian_lowpass(x, 13, 2.0)
        assert torch.allclose(y, x, atol=1e-7)

    def test_impulse_response_is_kernel(self):
        n = 31
        x = torch.zeros(n, n, dtype=torch.float64)
        x[n // 2, n // 2] = 1.0
        y = gaussian_lowpass(x, 13, 2.0)
        k = gaussian_kernel(13, 2.0, dtype=torch.float64)
        center = y[n // 2 - 6 : n // 2 + 7, n // 2 - 6 : n // 2 + 7]
        assert torch.allclose(center, k, atol=1e-12)
        assert float(y.sum()) == pytest.approx(1.0, abs=1e-9)


class TestFrequencySplit:
    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=25, deadline=None)
    def test_low_plus_high_identity(self, seed):
        g = torch.Generator().manual_seed(seed)
        x = torch.rand(24, 24, generator=g)
        low, high = frequency_split(x, 13, 2.0)
        assert float((x - (low + high)).abs().max()) <= 1e-6

    def test_constant_has_zero_high_band(self):
        x = torch.full((20, 20), 0.6, dtype=torch.float64)
        _, high = frequency_split(x, 13, 2.0)
        assert float(high.abs().max()) < 1e-7

    def test_checkerboard_energy_mostly_high_band(self):
        n = 32
        ii, jj = torch.meshgrid(torch.arange(n), torch.arange(n), indexing="ij")
        x = ((ii + jj) % 2).double()  # period-2 checkerboard
        low, high = frequency_split(x, 13, 2.0)
        assert float(high.norm()) > float((low - low.mean()).norm())


class TestFreqPixelLoss:
    def test_zero_on_identical(self):
        x = torch.rand(16, 16)
        assert float(freq_pixel_loss(x, x)) == pytest.approx(0.0, abs=1e-8)

    def test_constant_shift_lands_in_low_band(self):
        g = torch.Generator().manual_seed(2)
        x = torch.rand(24, 24, generator=g, dtype=torch.float64)
        c = 0.123
        gimg = x + c
        x_low, x_high = frequency_split(x, 13, 2.0)
        g_low, g_high = frequency_split(gimg, 13, 2.0)
        assert float((x_high - g_high).abs().mean()) == pytest.approx(0.0, abs=1e-9)
        assert float((x_low - g_low).abs().mean()) == pytest.approx(c, abs=1e-9)
        assert float(freq_pixel_loss(x, gimg)) == pytest.approx(c, abs=1e-8)

    def test_symmetric(self):
        g = torch.Generator().manual_seed(4)
        x = torch.rand(16, 16, generator=g)
        y = torch.rand(16, 16, generator=g)
        assert float(freq_pixel_loss(x, y)) == pytest.approx(float(freq_pixel_loss(y, x)), abs=1e-7)


class TestFreqFftLoss:
    def test_zero_on_identical(self):
        x = torch.rand(16, 16)
        assert float(freq_fft_loss(x, x)) == pytest.approx(0.0, abs=1e-8)

    def test_impulse_closed_form(self):
        # DFT (orthonormal) of a unit impulse at the origin has every real
        # coefficient equal to 1/n; cross-checked against an explicit DFT.
        n = 16
        x = torch.zeros(n, n, dtype=torch.float64)
        g = torch.zeros(n, n, dtype=torch.float64)
        g[0, 0] = 1.0
        assert float(freq_fft_loss(x, g)) == pytest.approx(1.0 / n, abs=1e-12)
        ii = torch.arange(n, dtype=torch.float64)
        w = torch.exp(-2j * math.pi * torch.outer(ii, ii) / n) / math.sqrt(n)
        direct = (w.to(torch.complex128) @ g.to(torch.complex128) @ w.to(torch.complex128)).real
        assert float(direct.abs().mean()) == pytest.approx(1.0 / n, abs=1e-12)

    def test_translation_sensitive(self):
        g = torch.Generator().manual_seed(9)
        x = torch.rand(16, 16, generator=g)
        shifted = torch.roll(x, shifts=1, dims=0)
        assert float(freq_fft_loss(x, shifted)) > 1e-4

    def test_amplitude_mode_translation_invariant(self):
        g = torch.Generator().manual_seed(10)
        x = torch.rand(16, 16, generator=g)
        shifted = torch.roll(x, shifts=3, dims=1)
        assert float(freq_fft_loss(x, shifted, mode="amplitude")) == pytest.approx(0.0, abs=1e-6)


class TestCompositeLoss:
    def _pair(self, seed):
        g = torch.Generator().manual_seed(seed)
        real = 0.05 + 0.9 * torch.rand(2, 16, 16, generator=g)
        fake = 0.05 + 0.9 * torch.rand(2, 16, 16, generator=g)
        cond = 0.05 + 0.9 * torch.rand(3, 16, 16, generator=g)
        return real, fake, cond

    def test_perfect_fake_and_zero_adv_gives_zero(self):
        # quantize to bin centers so the soft NMI of an exact match is 1;
        # off-center values carry a small soft-binning identity slack
        g = torch.Generator().manual_seed(1)
        centers = CFG.bin_centers()
        real = centers[torch.randint(0, CFG.bins, (2, 16, 16), generator=g)]
        cond = 0.05 + 0.9 * torch.rand(3, 16, 16, generator=g)
        total, terms = composite_generator_loss(real, real.clone(), cond, 0.0, LossWeights())
        assert float(total) == pytest.approx(0.0, abs=1e-5)
        assert float(terms["L1"]) == pytest.approx(0.0, abs=1e-8)

    def test_all_weights_zero_reduces_to_adv(self):
        real, fake, cond = self._pair(2)
        w = LossWeights(l1=0, mi=0, rec_pix=0, rec_fft=0)
        total, _ = composite_generator_loss(real, fake, cond, 1.25, w)
        assert float(total) == pytest.approx(1.25, abs=1e-8)

    def test_total_recomputable_from_breakdown(self):
        real, fake, cond = self._pair(3)
        w = LossWeights()
        total, t = composite_generator_loss(real, fake, cond, 0.7, w)
        recomputed = (
            float(t["adv"])
            + w.l1 * float(t["L1"])
            + w.mi * float(t["MI"])
            + w.rec_pix * float(t["freq_pix"])
            + w.rec_fft * float(t["freq_fft"])
        )
        assert float(total) == pytest.approx(recomputed, abs=1e-6)

    def test_monotone_in_each_weight(self):
        real, fake, cond = self._pair(4)
        base = LossWeights()
        t0, terms = composite_generator_loss(real, fake, cond, 0.0, base)
        for name in ("l1", "mi", "rec_pix", "rec_fft"):
            assert float(terms[{"l1": "L1", "mi": "MI", "rec_pix": "freq_pix", "rec_fft": "freq_fft"}[name]]) > 0
            kwargs = {name: getattr(base, name) + 5.0}
            bumped = LossWeights(**{**base.__dict__, **kwargs, "histogram": base.histogram})
            t1, _ = composite_generator_loss(real, fake, cond, 0.0, bumped)
            assert float(t1) >= float(t0)

    def test_literal_mi_form(self):
        real, fake, cond = self._pair(5)
        w = LossWeights(literal_mi_term=True)
        total, t = composite_generator_loss(real, fake, cond, 0.0, w)
        nmi = 1.0 - float(t["MI"])
        expected = (
            w.l1 * float(t["L1"])
            + (1.0 - w.mi * nmi)
            + w.rec_pix * float(t["freq_pix"])
            + w.rec_fft * float(t["freq_fft"])
        )
        assert float(total) == pytest.approx(expected, abs=1e-5)

    def test_mi_against_inputs_flag(self):
        real, fake, cond = self._pair(6)
        w = LossWeights(mi_reference="inputs")
        _, t = composite_generator_loss(real, fake, cond, 0.0, w)
        _, t_target = composite_generator_loss(real, fake, cond, 0.0, LossWeights())
        assert float(t["MI"]) != pytest.approx(float(t_target["MI"]), abs=1e-9)

    def test_invalid_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(l1=-1.0)
        with pytest.raises(ValueError):
            LossWeights(gauss_kernel_size=12)
        with pytest.raises(ValueError):
            LossWeights(mi_reference="nonsense")


def numeric_grad(f, x, h=1e-4):
    """Central-difference gradient oracle, elementwise."""
    grad = torch.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def analytic_grad(f, x):
    xg = x.clone().requires_grad_(True)
    f(xg).backward()
    return xg.grad.detach()


class TestGradients:
    """Analytic gradients vs central finite differences (float64, h=1e-4).

    The MI checks use the nominal 1/bins bandwidth: agreement between autograd
    and finite differences does not depend on the bandwidth, and the h=1e-4
    difference quotient is only well conditioned for kernels at least that wide.
    """

    FD_CFG = SoftHistogramConfig(bandwidth=1.0 / 64)

    def _images(self, seed, shape):
        g = torch.Generator().manual_seed(seed)
        return (0.05 + 0.9 * torch.rand(*shape, generator=g)).double()

    def test_mi_loss_grad(self):
        real = self._images(21, (16, 16))
        fake = self._images(22, (16, 16))
        f = lambda z: mi_loss(real, z, self.FD_CFG)
        ga, gn = analytic_grad(f, fake), numeric_grad(f, fake.clone())
        assert float((ga - gn).norm() / gn.norm()) <= 1e-3

    def test_freq_pixel_grad(self):
        real = self._images(23, (16, 16))
        fake = self._images(24, (16, 16))
        f = lambda z: freq_pixel_loss(real, z)
        ga, gn = analytic_grad(f, fake), numeric_grad(f, fake.clone())
        assert float((ga - gn).norm() / gn.norm()) <= 1e-3

    def test_freq_fft_grad(self):
        real = self._images(25, (16, 16))
        fake = self._images(26, (16, 16))
        f = lambda z: freq_fft_loss(real, z)
        ga, gn = analytic_grad(f, fake), numeric_grad(f, fake.clone())
        assert float((ga - gn).norm() / gn.norm()) <= 1e-3

    def test_composite_grad(self):
        real = self._images(27, (2, 16, 16))
        fake = self._images(28, (2, 16, 16))
        cond = self._images(29, (3, 16, 16))
        w = LossWeights(histogram=self.FD_CFG)
        f = lambda z: composite_generator_loss(real, z, cond, 0.0, w)[0]
        ga, gn = analytic_grad(f, fake), numeric_grad(f, fake.clone())
        assert float((ga - gn).norm() / gn.norm()) <= 1e-3
