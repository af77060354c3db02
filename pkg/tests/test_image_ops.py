import numpy as np
import pytest

import oracles
from conftest import gradcheck, probe_loss, well_separated_uniform
from kasr import image_ops, tensor as T
from kasr.image_ops import (
    DegradationSpec,
    augment_pair,
    bicubic_resize,
    degrade_classical,
    dihedral_apply,
    dihedral_invert,
    gaussian_kernel,
    minmax_normalize,
    psnr,
    self_ensemble,
    sobel_map,
    ssim,
)
from kasr.tensor import ContractError, DimensionError, Tensor


def delta_kernel(size=3):
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return k


class TestDegradationSpec:
    def test_kernel_must_sum_to_one(self):
        with pytest.raises(ContractError):
            DegradationSpec(np.ones((3, 3)), 2)

    def test_scale_domain(self):
        with pytest.raises(ContractError):
            DegradationSpec(delta_kernel(), 5)


class TestDegradeClassical:
    def test_delta_identity(self):
        rng = np.random.default_rng(0)
        hr = rng.uniform(0, 1, (1, 3, 8, 8))
        spec = DegradationSpec(delta_kernel(), 1, 0.0, 0)
        np.testing.assert_array_equal(degrade_classical(hr, spec), hr)

    def test_box_kernel_constant_invariance(self):
        hr = np.full((1, 3, 12, 12), 0.5)
        spec = DegradationSpec(np.full((3, 3), 1.0 / 9.0), 2, 0.0, 0)
        np.testing.assert_allclose(degrade_classical(hr, spec), 0.5, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_bruteforce(self, seed):
        rng = np.random.default_rng(200 + seed)
        hr = rng.uniform(0, 1, (1, 3, 8, 8))
        spec = DegradationSpec(gaussian_kernel(3, 1.2), 2, 0.0, 0)
        got = degrade_classical(hr, spec)
        want = oracles.degrade_bruteforce(hr, spec.kernel, 2)
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_noise_is_seeded(self):
        hr = np.full((1, 3, 8, 8), 0.5)
        spec = DegradationSpec(delta_kernel(), 2, 0.05, 99)
        a = degrade_classical(hr, spec)
        b = degrade_classical(hr, spec)
        np.testing.assert_array_equal(a, b)
        c = degrade_classical(hr, DegradationSpec(delta_kernel(), 2, 0.05, 100))
        assert not np.array_equal(a, c)

    def test_indivisible_dims_rejected(self):
        with pytest.raises(DimensionError):
            degrade_classical(np.zeros((1, 3, 9, 9)), DegradationSpec(delta_kernel(), 2))


class TestGaussianKernel:
    def test_size_one(self):
        np.testing.assert_array_equal(gaussian_kernel(1, 1.0), [[1.0]])

    def test_tiny_sigma_limit(self):
        k = gaussian_kernel(3, 1e-3)
        assert k[1, 1] == pytest.approx(1.0)
        assert k[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_symmetry_and_peak(self):
        k = gaussian_kernel(5, 1.0)
        np.testing.assert_allclose(k, k[::-1, :])
        np.testing.assert_allclose(k, k[:, ::-1])
        assert k[2, 2] == k.max()
        assert abs(k.sum() - 1.0) < 1e-9
        # direct evaluation of the formula
        want = np.exp(-np.array([[x * x + y * y for x in range(-2, 3)]
                                 for y in range(-2, 3)]) / 2.0)
        np.testing.assert_allclose(k, want / want.sum())

    def test_even_size_rejected(self):
        with pytest.raises(ContractError):
            gaussian_kernel(4, 1.0)


class TestSobel:
    def test_constant_image_is_flat(self):
        img = Tensor(np.full((1, 3, 6, 6), 0.3))
        out = sobel_map(img)
        assert out.data.max() <= np.sqrt(1e-12) * 1.001

    def test_step_edge_peaks_on_edge(self):
        img = np.zeros((1, 1, 8, 8))
        img[..., 4:] = 1.0  # vertical edge between columns 3 and 4
        out = sobel_map(Tensor(img)).data[0, 0]
        assert out[:, 3:5].min() > 1.0
        assert out[:, 0].max() < 1e-5 and out[:, 7].max() < 1e-5

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_bruteforce(self, seed):
        rng = np.random.default_rng(300 + seed)
        img = rng.uniform(0, 1, (1, 1, 8, 8))
        got = sobel_map(Tensor(img)).data
        np.testing.assert_allclose(got, oracles.sobel_bruteforce(img), atol=1e-6)

    def test_nonnegative(self):
        rng = np.random.default_rng(301)
        img = rng.uniform(0, 1, (2, 3, 7, 7))
        assert sobel_map(Tensor(img)).data.min() >= 0.0

    def test_gradcheck(self):
        rng = np.random.default_rng(302)
        gradcheck(probe_loss(sobel_map), rng.uniform(0.1, 0.9, (1, 2, 6, 6)))


class TestMinmaxNormalize:
    def test_basic(self):
        x = Tensor(np.array([0.0, 5.0, 10.0]).reshape(1, 1, 1, 3))
        np.testing.assert_allclose(
            minmax_normalize(x).data.reshape(-1), [0.0, 0.5, 1.0]
        )

    def test_constant_maps_to_zero(self):
        x = Tensor(np.full((2, 3, 4, 4), 0.7))
        np.testing.assert_array_equal(minmax_normalize(x).data, 0.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_output_spans_unit_interval(self, seed):
        rng = np.random.default_rng(400 + seed)
        x = Tensor(rng.uniform(-3, 3, (2, 3, 5, 5)))
        out = minmax_normalize(x).data
        for i in range(2):
            assert out[i].min() == 0.0
            assert out[i].max() == 1.0

    def test_idempotent_on_unit_span(self):
        rng = np.random.default_rng(401)
        x = rng.uniform(0, 1, (1, 1, 4, 4))
        x.reshape(-1)[0] = 0.0
        x.reshape(-1)[-1] = 1.0
        once = minmax_normalize(Tensor(x)).data
        twice = minmax_normalize(Tensor(once)).data
        np.testing.assert_allclose(twice, once, atol=1e-6)

    def test_per_image_granularity(self):
        data = np.zeros((2, 1, 1, 2))
        data[0] = [[0.0, 1.0]]
        data[1] = [[0.0, 10.0]]
        out = minmax_normalize(Tensor(data)).data
        np.testing.assert_allclose(out[0].reshape(-1), [0.0, 1.0])
        np.testing.assert_allclose(out[1].reshape(-1), [0.0, 1.0])

    def test_gradcheck(self):
        rng = np.random.default_rng(402)
        x0 = well_separated_uniform(rng, (2, 1, 4, 4))
        gradcheck(probe_loss(minmax_normalize), x0)


class TestBicubic:
    def test_scale_one_identity(self):
        rng = np.random.default_rng(500)
        img = rng.uniform(0, 1, (1, 3, 5, 7))
        np.testing.assert_allclose(bicubic_resize(img, 1.0), img, atol=1e-6)

    def test_constant_preserved(self):
        img = np.full((1, 3, 4, 4), 0.42)
        np.testing.assert_allclose(bicubic_resize(img, 2.0), 0.42, atol=1e-6)
        np.testing.assert_allclose(bicubic_resize(img, 0.5), 0.42, atol=1e-6)

    def test_ramp_matches_direct_evaluation(self):
        ramp = np.tile(np.arange(4, dtype=np.float64) / 3.0, (4, 1))
        img = np.broadcast_to(ramp, (1, 1, 4, 4)).copy()
        got = bicubic_resize(img, 2.0)
        want = oracles.bicubic_bruteforce(img, 2.0)
        np.testing.assert_allclose(got, want, atol=1e-5)

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("scale", [0.5, 2.0])
    def test_matches_bruteforce(self, seed, scale):
        rng = np.random.default_rng(600 + seed)
        img = rng.uniform(0, 1, (1, 2, 6, 6))
        np.testing.assert_allclose(
            bicubic_resize(img, scale),
            oracles.bicubic_bruteforce(img, scale),
            atol=1e-5,
        )


class TestMetrics:
    def test_psnr_identical_capped(self):
        img = np.random.default_rng(700).uniform(0, 1, (1, 3, 8, 8))
        assert psnr(img, img) == 100.0

    def test_psnr_analytic(self):
        a = np.zeros((1, 3, 4, 4))
        b = np.full((1, 3, 4, 4), 0.5)
        assert psnr(a, b) == pytest.approx(10 * np.log10(1 / 0.25), abs=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_psnr_matches_bruteforce(self, seed):
        rng = np.random.default_rng(800 + seed)
        a = rng.uniform(0, 1, (1, 3, 6, 6))
        b = rng.uniform(0, 1, (1, 3, 6, 6))
        assert psnr(a, b) == pytest.approx(oracles.psnr_bruteforce(a, b), abs=1e-9)
        assert psnr(a, b) == pytest.approx(psnr(b, a), abs=1e-12)

    def test_psnr_shape_mismatch(self):
        with pytest.raises(DimensionError):
            psnr(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 5)))

    def test_ssim_identical(self):
        img = np.random.default_rng(900).uniform(0, 1, (1, 3, 12, 12))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)

    def test_ssim_negative_image_below_one(self):
        img = np.random.default_rng(901).uniform(0, 1, (1, 1, 12, 12))
        assert ssim(img, 1.0 - img) < 1.0

    @pytest.mark.parametrize("seed", range(10))
    def test_ssim_matches_bruteforce(self, seed):
        rng = np.random.default_rng(1000 + seed)
        a = rng.uniform(0, 1, (1, 1, 16, 16))
        b = rng.uniform(0, 1, (1, 1, 16, 16))
        assert ssim(a, b) == pytest.approx(oracles.ssim_bruteforce(a, b), abs=1e-6)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)

    def test_ssim_too_small_rejected(self):
        with pytest.raises(ContractError):
            ssim(np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 8, 8)))


class TestAugment:
    def test_identity_draw(self):
        class FixedRng:
            def integers(self, lo, hi):
                return 0

        rng = np.random.default_rng(1100)
        lr = rng.uniform(0, 1, (1, 3, 4, 4))
        hr = rng.uniform(0, 1, (1, 3, 8, 8))
        lr2, hr2 = augment_pair(lr, hr, FixedRng())
        np.testing.assert_array_equal(lr2, lr)
        np.testing.assert_array_equal(hr2, hr)

    @pytest.mark.parametrize("seed", range(8))
    def test_pixel_multiset_preserved(self, seed):
        rng = np.random.default_rng(1200 + seed)
        lr = rng.uniform(0, 1, (1, 3, 4, 4))
        hr = rng.uniform(0, 1, (1, 3, 8, 8))
        lr2, hr2 = augment_pair(lr, hr, rng)
        np.testing.assert_array_equal(np.sort(lr2.reshape(-1)), np.sort(lr.reshape(-1)))
        np.testing.assert_array_equal(np.sort(hr2.reshape(-1)), np.sort(hr.reshape(-1)))

    @pytest.mark.parametrize("k", range(8))
    def test_dihedral_inverse(self, k):
        rng = np.random.default_rng(1300 + k)
        img = rng.uniform(0, 1, (2, 3, 5, 5))
        np.testing.assert_array_equal(dihedral_invert(dihedral_apply(img, k), k), img)

    def test_mismatched_pair_rejected(self):
        with pytest.raises(DimensionError):
            augment_pair(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 9, 8)),
                         np.random.default_rng(0))


class TestSelfEnsemble:
    def test_equivariant_model_collapses(self):
        rng = np.random.default_rng(1400)
        lr = rng.uniform(0, 1, (1, 3, 8, 8))
        model = lambda x: bicubic_resize(x, 2.0)
        np.testing.assert_allclose(self_ensemble(model, lr), model(lr), atol=1e-5)

    def test_identity_model(self):
        rng = np.random.default_rng(1401)
        lr = rng.uniform(0, 1, (1, 3, 6, 6))
        np.testing.assert_allclose(self_ensemble(lambda x: x, lr), lr, atol=1e-12)

    def test_constant_input_matches_direct_average(self):
        def model(x):
            # deliberately non-equivariant: adds an orientation-dependent ramp
            ramp = np.linspace(0, 1, x.shape[-1])[None, None, None, :]
            return x + 0.1 * ramp

        lr = np.full((1, 3, 6, 6), 0.5)
        outs = [
            dihedral_invert(model(dihedral_apply(lr, k)), k) for k in range(8)
        ]
        np.testing.assert_allclose(
            self_ensemble(model, lr), np.mean(outs, axis=0), atol=1e-12
        )
