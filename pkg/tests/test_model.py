import numpy as np
import pytest

from conftest import central_diff, rel_error
from ncfreg.engine import objective
from ncfreg.losses import LossWeights, SSIMParams
from ncfreg.model import (
    ModelConfig,
    ccm_forward,
    count_params,
    init_params,
    ncf_forward,
    sm_forward,
)
from ncfreg.volume import make_grid
from test_diffcore import naive_conv3d


def _randomize_zero_layers(params, rng, scale=0.05):
    """Give the zero-initialized output layers small random values."""
    for name in ("ccm.4.weight", "ccm.4.bias", "sm.1.weight", "sm.1.bias"):
        params.arrays[name][...] = rng.uniform(-scale, scale, size=params.arrays[name].shape)
    return params


class TestCount:
    def test_default_is_53046(self):
        assert count_params() == 53_046
        assert init_params(dtype=np.float64).n_params() == 53_046

    def test_closed_form_for_h1_c1(self):
        assert count_params(ModelConfig(hidden_width=1, sm_channels=1)) == 182

    @pytest.mark.parametrize("h,c", [(1, 1), (2, 5), (7, 3), (64, 8), (128, 16)])
    def test_formula_matches_allocated_arrays(self, h, c):
        cfg = ModelConfig(hidden_width=h, sm_channels=c)
        ccm = (3 * h + h) + 3 * (h * h + h) + (3 * h + 3)
        sm = (3 * c * 27 + c) + (c * 3 * 27 + 3)
        assert count_params(cfg) == ccm + sm == init_params(cfg).n_params()

    def test_doubling_width_roughly_quadruples_ccm(self):
        # the SM term does not depend on h; h=1 leaves a CCM term of 16
        sm = count_params(ModelConfig(hidden_width=1)) - 16
        ccm = lambda h: count_params(ModelConfig(hidden_width=h)) - sm
        assert ccm(128) == 50_435
        assert 3.8 < ccm(256) / ccm(128) < 4.1

    def test_bad_config(self):
        with pytest.raises(ValueError):
            ModelConfig(hidden_width=0)
        with pytest.raises(ValueError):
            ModelConfig(activation_slope=1.0)


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = init_params(seed=3), init_params(seed=3)
        for name in a.arrays:
            assert a.arrays[name].tobytes() == b.arrays[name].tobytes()

    def test_different_seeds_differ(self):
        a, b = init_params(seed=1), init_params(seed=2)
        assert not np.array_equal(a.arrays["ccm.1.weight"], b.arrays["ccm.1.weight"])

    def test_precision_independent_values(self):
        a, b = init_params(seed=4, dtype=np.float32), init_params(seed=4, dtype=np.float64)
        np.testing.assert_array_equal(a.arrays["ccm.2.weight"], b.arrays["ccm.2.weight"].astype(np.float32))

    def test_fan_in_bounds(self):
        p = init_params(seed=0, dtype=np.float64).arrays
        assert np.abs(p["ccm.0.weight"]).max() <= np.sqrt(1 / 3)
        assert np.abs(p["ccm.1.weight"]).max() <= np.sqrt(1 / 128)
        assert np.abs(p["sm.0.weight"]).max() <= np.sqrt(1 / 81)

    @pytest.mark.parametrize("seed", [0, 1, 17])
    def test_identity_at_initialization(self, seed, rng):
        shape = (6, 5, 7)
        grid = make_grid(shape)
        offset, phi, _ = ncf_forward(init_params(seed=seed, dtype=np.float64), grid)
        assert np.all(offset == 0)
        np.testing.assert_array_equal(phi, grid)


class TestCCM:
    def test_pointwise(self, rng):
        params = _randomize_zero_layers(init_params(seed=0, dtype=np.float64), rng)
        coords = rng.uniform(-1, 1, size=(20, 3))
        batch, _ = ccm_forward(params, coords)
        perm = rng.permutation(20)
        np.testing.assert_allclose(ccm_forward(params, coords[perm])[0], batch[perm], rtol=1e-12)
        single = np.vstack([ccm_forward(params, coords[i:i + 1])[0] for i in range(20)])
        np.testing.assert_allclose(single, batch, rtol=1e-10, atol=1e-14)

    def test_hand_evaluation_on_3cubed_grid(self):
        cfg = ModelConfig(hidden_width=2, sm_channels=1)
        params = init_params(cfg, dtype=np.float64)
        W = [np.array([[0.1, -0.2, 0.3], [0.05, 0.0, -0.1]]),
             np.array([[1.0, -1.0], [0.5, 0.5]]),
             np.array([[0.0, 1.0], [1.0, 0.0]]),
             np.array([[2.0, 0.0], [0.0, -3.0]]),
             np.array([[0.1, 0.2], [0.3, 0.4], [-0.5, 0.6]])]
        b = [np.array([0.01, -0.02]), np.zeros(2), np.array([0.1, -0.1]), np.zeros(2), np.array([0.0, 0.0, 0.1])]
        for i in range(5):
            params.arrays[f"ccm.{i}.weight"][...] = W[i]
            params.arrays[f"ccm.{i}.bias"][...] = b[i]
        coords = make_grid((3, 3, 3)).reshape(3, -1).T
        out, _ = ccm_forward(params, coords)
        for n, x in enumerate(coords):
            h = [float(v) for v in x]
            for i in range(5):
                z = [sum(W[i][o][k] * h[k] for k in range(len(h))) + b[i][o] for o in range(len(b[i]))]
                h = [v if (i == 4 or v >= 0) else 0.01 * v for v in z]
            np.testing.assert_allclose(out[n], h, rtol=1e-12, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ccm_forward(init_params(), np.zeros((4, 2)))


class TestSM:
    def test_zero_last_layer_is_identity(self, rng):
        coarse = rng.normal(size=(3, 5, 4, 6))
        out, _ = sm_forward(init_params(seed=0, dtype=np.float64), coarse)
        np.testing.assert_array_equal(out, coarse)

    def test_constant_field_stays_constant(self, rng):
        params = _randomize_zero_layers(init_params(seed=0, dtype=np.float64), rng)
        coarse = np.broadcast_to(np.array([0.1, -0.2, 0.3])[:, None, None, None], (3, 4, 5, 6)).copy()
        out, _ = sm_forward(params, coarse)
        for a in range(3):
            np.testing.assert_allclose(out[a], out[a, 0, 0, 0], rtol=1e-12)

    def test_matches_naive_convolution(self, rng):
        cfg = ModelConfig(sm_channels=2)
        params = _randomize_zero_layers(init_params(cfg, seed=0, dtype=np.float64), rng)
        p = params.arrays
        coarse = rng.normal(size=(3, 4, 4, 4))
        z = naive_conv3d(coarse, p["sm.0.weight"], p["sm.0.bias"])
        a = np.where(z >= 0, z, 0.01 * z)
        ref = coarse + naive_conv3d(a, p["sm.1.weight"], p["sm.1.bias"])
        np.testing.assert_allclose(sm_forward(params, coarse)[0], ref, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sm_forward(init_params(), np.zeros((2, 4, 4, 4)))


class TestNCF:
    def test_compositional(self, rng):
        params = _randomize_zero_layers(init_params(seed=0, dtype=np.float64), rng)
        grid = make_grid((5, 4, 6))
        offset, phi, _ = ncf_forward(params, grid)
        coarse, _ = ccm_forward(params, grid.reshape(3, -1).T)
        ref, _ = sm_forward(params, coarse.T.reshape(grid.shape))
        np.testing.assert_allclose(offset, ref, rtol=1e-12)
        np.testing.assert_allclose(phi, grid + ref, rtol=1e-12)

    def test_one_voxel_offset_samples_neighbour(self, rng):
        from ncfreg.diffcore import trilinear_sample
        shape = (6, 5, 4)
        vol = rng.normal(size=shape)
        grid = make_grid(shape)
        phi = grid.copy()
        phi[0] += 2 / (shape[0] - 1)
        out = trilinear_sample(vol, phi)
        np.testing.assert_allclose(out[:-1], vol[1:], atol=1e-12)


def test_end_to_end_gradient_6cubed(rng):
    """Total-loss gradient w.r.t. a random subset of parameters, double precision."""
    shape = (6, 6, 6)
    fixed = rng.uniform(size=shape)
    moving = rng.uniform(size=shape)
    params = _randomize_zero_layers(init_params(seed=5, dtype=np.float64), rng, scale=0.2)
    grid = make_grid(shape)
    weights, ssim = LossWeights(), SSIMParams(window=5)
    _, grads = objective(params, grid, fixed, moving, weights, ssim, grad=True)

    errors = []
    for name, arr in params.arrays.items():
        picks = rng.choice(arr.size, size=min(3, arr.size), replace=False)
        f = lambda: objective(params, grid, fixed, moving, weights, ssim).total
        num = central_diff(f, arr, h=1e-6, idx=picks)
        ana = grads[name].reshape(-1)[picks]
        scale = np.abs(num.reshape(-1)[picks]).max()
        errors.append((name, float(np.abs(ana - num.reshape(-1)[picks]).max() / max(scale, 1e-10))))
    assert sum(3 if params.arrays[n].size >= 3 else params.arrays[n].size for n, _ in errors) >= 20
    worst = max(errors, key=lambda e: e[1])
    assert worst[1] < 1e-3, errors
