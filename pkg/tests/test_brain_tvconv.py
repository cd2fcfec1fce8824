"""
Tests for translation-variant convolution and the compensation block.
"""

import numpy as np
import pytest

from brain.tvconv import (
    build_cb,
    build_tvconv,
    cb_forward,
    generate_weights,
    interpolation_matrix,
    resize_affine,
    tvconv_forward,
)
from errors import ShapeError
from tensor import Tensor, ops, verification_mode


def reference_tvconv(x: np.ndarray, kernels: np.ndarray, k: int) -> np.ndarray:
    """Per-position depthwise convolution by explicit loops; kernels is (C*K*K, H, W)."""
    n, c, h, w = x.shape
    ker = kernels.reshape(c, k, k, h, w)
    r = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.zeros_like(x)
    for y in range(h):
        for x_ in range(w):
            for i in range(k):
                for j in range(k):
                    out[:, :, y, x_] += xp[:, :, y + i, x_ + j] * ker[:, i, j, y, x_]
    return out


class TestWeightGenerator:

    def test_kernel_dims(self, rng):
        p = build_tvconv(rng, 3, (4, 5), affine_channels=2, hidden=4)
        assert generate_weights(p).dims == (27, 4, 5)

    def test_kernels_vary_with_position(self, rng):
        kernels = generate_weights(build_tvconv(rng, 2, (4, 4), affine_channels=2, hidden=4)).data
        assert not np.allclose(kernels[:, 0, 0], kernels[:, 3, 3])

    def test_affine_channel_mismatch(self, rng):
        p = build_tvconv(rng, 2, (4, 4), affine_channels=2, hidden=4)
        p.affine = Tensor(np.zeros((3, 4, 4)))
        with pytest.raises(ShapeError):
            generate_weights(p)


class TestInterpolation:

    def test_rows_sum_to_one(self):
        np.testing.assert_allclose(interpolation_matrix(3, 7).sum(axis=1), 1.0)

    def test_same_size_is_identity(self):
        np.testing.assert_allclose(interpolation_matrix(4, 4), np.eye(4))

    def test_upsampling_constant_map(self):
        out = resize_affine(Tensor(np.full((2, 2, 2), 3.0)), (5, 3))
        assert out.dims == (2, 5, 3)
        np.testing.assert_allclose(out.data, 3.0, rtol=1e-6)

    def test_no_resize_returns_same_tensor(self):
        affine = Tensor(np.zeros((1, 2, 2)))
        assert resize_affine(affine, (2, 2)) is affine


class TestTvConv:

    def test_matches_loop_reference(self, rng):
        with verification_mode():
            p = build_tvconv(rng, 3, (4, 4), affine_channels=2, hidden=4)
            x = rng.standard_normal((2, 3, 4, 4))
            out = tvconv_forward(Tensor(x), p).data
            expected = reference_tvconv(x, generate_weights(p).data, 3)
        np.testing.assert_allclose(out, expected, atol=1e-10)

    def test_kernels_do_not_depend_on_input(self, rng):
        p = build_tvconv(rng, 2, (3, 3), affine_channels=2, hidden=4)
        before = generate_weights(p).data.copy()
        tvconv_forward(Tensor(rng.standard_normal((1, 2, 3, 3))), p)
        np.testing.assert_array_equal(generate_weights(p).data, before)

    def test_linear_in_input(self, rng):
        p = build_tvconv(rng, 2, (3, 3), affine_channels=2, hidden=4)
        x = Tensor(rng.standard_normal((1, 2, 3, 3)))
        np.testing.assert_allclose(tvconv_forward(x * 2.0, p).data, 2.0 * tvconv_forward(x, p).data, rtol=1e-5)

    def test_spatial_mismatch_without_resize(self, rng):
        p = build_tvconv(rng, 2, (4, 4), affine_channels=2, hidden=4)
        with pytest.raises(ShapeError):
            tvconv_forward(Tensor(np.zeros((1, 2, 6, 6))), p)

    def test_resize_allows_other_extents(self, rng):
        p = build_tvconv(rng, 2, (4, 4), affine_channels=2, hidden=4)
        assert tvconv_forward(Tensor(np.zeros((1, 2, 6, 6))), p, resize=True).dims == (1, 2, 6, 6)

    def test_channel_mismatch(self, rng):
        p = build_tvconv(rng, 2, (4, 4), affine_channels=2, hidden=4)
        with pytest.raises(ShapeError):
            tvconv_forward(Tensor(np.zeros((1, 3, 4, 4))), p)


class TestCompensationBlock:

    def test_downsamples_by_eight(self, rng):
        p = build_cb(rng, 4, 8, (2, 2), affine_channels=2, hidden=4)
        assert cb_forward(Tensor(rng.standard_normal((1, 4, 16, 16))), p).dims == (1, 8, 2, 2)

    def test_depthwise_stand_in(self, rng):
        p = build_cb(rng, 4, 8, (2, 2), use_tvconv=False)
        assert p.tv is None and p.depthwise.groups == 8
        assert cb_forward(Tensor(rng.standard_normal((1, 4, 16, 16))), p).dims == (1, 8, 2, 2)

    def test_extent_must_divide_by_eight(self, rng):
        p = build_cb(rng, 4, 8, (2, 2), use_tvconv=False)
        with pytest.raises(ShapeError):
            cb_forward(Tensor(np.zeros((1, 4, 12, 12))), p)


def shift_gap(layer, x: np.ndarray, s: int, r: int) -> float:
    """Normalized interior difference between layer(shift(x)) and shift(layer(x)), shifting s columns right."""
    shifted = np.zeros_like(x)
    shifted[..., s:] = x[..., :-s]
    moved = layer(Tensor(shifted)).data[..., r:-r, s + r:-r]
    plain = layer(Tensor(x)).data[..., r:-r, r:-r - s]
    return float(np.linalg.norm(moved - plain) / np.linalg.norm(plain))


class TestTranslationVariance:

    @pytest.mark.parametrize("seed", range(10))
    def test_conv_is_equivariant_tvconv_is_not(self, seed):
        rng = np.random.default_rng(seed)
        with verification_mode():
            weight = Tensor(rng.standard_normal((3, 3, 3, 3)))
            p = build_tvconv(rng, 3, (12, 12), affine_channels=2, hidden=4)
            x = rng.standard_normal((1, 3, 12, 12))
            assert shift_gap(lambda t: ops.conv2d(t, weight, pad=1), x, 2, 1) <= 1e-6
            assert shift_gap(lambda t: tvconv_forward(t, p), x, 2, 1) > 1e-3
