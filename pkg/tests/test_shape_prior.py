import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paircomp.masks import ShapeError
from paircomp.shape_prior import (
    ROTATION_LIMIT,
    MultiViewFusion,
    encode_object,
    fuse_multiview,
    image_patches,
    rotate_augment,
    synth_multiview,
)
from paircomp.tensor import FFNParams, LayerNormParams, LinearParams, Tensor

rng = np.random.default_rng(5)


def make_embed(patch_size=8, d=16, zero_bias=True):
    d_in = patch_size * patch_size * 3
    w = Tensor(rng.normal(0, d_in**-0.5, size=(d_in, d)), requires_grad=True)
    b = Tensor(np.zeros(d), requires_grad=True) if zero_bias else \
        Tensor(rng.normal(size=d), requires_grad=True)
    return LinearParams(w, b)


def make_fusion(d=16):
    ln = LayerNormParams(Tensor(np.ones(d)), Tensor(np.zeros(d)))
    lin1 = LinearParams(Tensor(rng.normal(0, d**-0.5, size=(d, 2 * d))),
                        Tensor(np.zeros(2 * d)))
    lin2 = LinearParams(Tensor(rng.normal(0, (2 * d)**-0.5, size=(2 * d, d))),
                        Tensor(np.zeros(d)))
    return MultiViewFusion(ln=ln, mlp=FFNParams(lin1, lin2))


class TestEncodeObject:
    def test_token_count(self):
        img = rng.random((32, 32, 3))
        code = encode_object(img, 8, make_embed())
        assert code.shape == (16, 16)

    def test_zero_image_zero_tokens(self):
        code = encode_object(np.zeros((16, 16, 3)), 8, make_embed())
        assert np.abs(code.data).max() == 0.0

    def test_patch_locality(self):
        img1 = rng.random((16, 16, 3))
        img2 = img1.copy()
        img2[0:8, 8:16] += 0.5  # exactly patch (0, 1)
        embed = make_embed()
        c1 = encode_object(img1, 8, embed).data
        c2 = encode_object(img2, 8, embed).data
        differs = np.abs(c1 - c2).max(axis=1) > 0
        assert differs.tolist() == [False, True, False, False]

    def test_linear_in_image(self):
        img = rng.random((16, 16, 3))
        embed = make_embed()
        one = encode_object(img, 8, embed).data
        three = encode_object(3.0 * img, 8, embed).data
        assert np.abs(three - 3.0 * one).max() < 1e-9

    def test_indivisible_rejected(self):
        with pytest.raises(ShapeError):
            encode_object(rng.random((15, 16, 3)), 8, make_embed())

    def test_patch_order_row_major(self):
        img = np.zeros((4, 4, 1))
        img[2:, :2] = 1.0  # patch grid position (1, 0) -> token 2
        pats = image_patches(img, 2)
        assert pats.shape == (4, 4)
        assert [p.sum() for p in pats] == [0.0, 0.0, 4.0, 0.0]


class TestFuseMultiview:
    def test_identical_views_permutation_invariant(self):
        code = Tensor(rng.normal(size=(4, 16)))
        fusion = make_fusion()
        out1 = fuse_multiview([code] * 3, [0, 1, 2], fusion).data
        out2 = fuse_multiview([code] * 3, [2, 0, 1], fusion).data
        assert np.array_equal(out1, out2)

    def test_permutation_reorders_token_blocks(self):
        codes = [Tensor(rng.normal(size=(2, 16))) for _ in range(3)]
        fusion = make_fusion()
        out1 = fuse_multiview(codes, [0, 1, 2], fusion).data
        out2 = fuse_multiview(codes, [1, 2, 0], fusion).data
        # same token multiset, shifted block order
        assert np.allclose(out1[2:4], out2[0:2], atol=1e-12)

    def test_single_view_reduces_to_ln_mlp(self):
        code = Tensor(rng.normal(size=(5, 16)))
        fusion = make_fusion()
        from paircomp.tensor import ffn, layer_norm
        direct = ffn(layer_norm(code, fusion.ln), fusion.mlp).data
        assert np.array_equal(fuse_multiview([code], [0], fusion).data, direct)

    def test_token_count_multiplies(self):
        codes = [Tensor(rng.normal(size=(4, 16))) for _ in range(6)]
        out = fuse_multiview(codes, list(range(6)), make_fusion())
        assert out.shape == (24, 16)

    def test_ragged_views_rejected(self):
        codes = [Tensor(rng.normal(size=(4, 16))), Tensor(rng.normal(size=(3, 16)))]
        with pytest.raises(ShapeError):
            fuse_multiview(codes, [0, 1], make_fusion())

    def test_bad_perm_rejected(self):
        code = Tensor(rng.normal(size=(2, 16)))
        with pytest.raises(ValueError):
            fuse_multiview([code, code], [0, 0], make_fusion())


class TestSynthMultiview:
    def test_single_view_is_input(self):
        img = rng.random((16, 16, 3))
        vs = synth_multiview(img, 1, seed=4)
        assert vs.k == 1
        assert np.array_equal(vs.views[0], img)

    def test_deterministic(self):
        img = rng.random((16, 16, 3))
        a = synth_multiview(img, 6, seed=9)
        b = synth_multiview(img, 6, seed=9)
        assert np.array_equal(a.views, b.views)
        assert a.source == "synthetic-stub"

    def test_view_zero_identity(self):
        img = rng.random((16, 16, 3))
        vs = synth_multiview(img, 4, seed=2)
        assert np.abs(vs.views[0] - img).max() == 0.0

    def test_views_differ_from_input(self):
        img = rng.random((16, 16, 3))
        vs = synth_multiview(img, 4, seed=2)
        for k in range(1, 4):
            assert np.abs(vs.views[k] - img).max() > 1e-6

    def test_zero_views_rejected(self):
        with pytest.raises(ValueError):
            synth_multiview(rng.random((8, 8, 3)), 0, seed=0)


def smooth_image(h=33, w=33):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return 0.5 + 0.4 * np.sin(2 * np.pi * xs / w) * np.cos(2 * np.pi * ys / h)


def centered_disk(h=33, w=33, r=10.0):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    return (((xs - cx) ** 2 + (ys - cy) ** 2) <= r * r).astype(np.float64)


class TestRotateAugment:
    def test_zero_angle_identity(self):
        img = rng.random((17, 17, 3))
        mask = (rng.random((17, 17)) > 0.5).astype(float)
        out_img, out_mask = rotate_augment(img, mask, theta=0.0)
        assert np.array_equal(out_img, img)
        assert np.array_equal(out_mask, mask)

    def test_round_trip_psnr(self):
        img = smooth_image()
        theta = 0.3
        once, _ = rotate_augment(img, np.ones((33, 33)), theta=theta)
        back, _ = rotate_augment(once, np.ones((33, 33)), theta=-theta)
        inner = (slice(8, 25), slice(8, 25))  # ignore the zero-filled frame
        mse = ((back[inner] - img[inner]) ** 2).mean()
        psnr = 10 * np.log10(1.0 / mse)
        assert psnr > 30.0

    def test_disk_area_preserved(self):
        mask = centered_disk()
        _, rot = rotate_augment(np.zeros((33, 33, 3)), mask, theta=0.4)
        assert abs(rot.sum() - mask.sum()) / mask.sum() < 0.05

    def test_mask_stays_binary(self):
        mask = centered_disk()
        for theta in (-0.5, 0.1, 0.52):
            _, rot = rotate_augment(np.zeros((33, 33, 3)), mask, theta=theta)
            assert np.isin(rot, (0.0, 1.0)).all()

    def test_sampled_angle_within_limits(self):
        # distribution check over many draws
        thetas = [np.random.default_rng(s).uniform(-ROTATION_LIMIT, ROTATION_LIMIT)
                  for s in range(10_000)]
        assert all(-ROTATION_LIMIT <= t <= ROTATION_LIMIT for t in thetas)

    def test_seeded_rotation_deterministic(self):
        img = rng.random((16, 16, 3))
        mask = centered_disk(16, 16, 5)
        a = rotate_augment(img, mask, seed=11)
        b = rotate_augment(img, mask, seed=11)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_mismatched_shapes_rejected(self):
        with pytest.raises(ShapeError):
            rotate_augment(rng.random((8, 8, 3)), np.ones((9, 8)), theta=0.1)

    @given(st.floats(-ROTATION_LIMIT, ROTATION_LIMIT))
    @settings(max_examples=20, deadline=None)
    def test_out_of_frame_fills_zero(self, theta):
        img = np.ones((9, 9, 3))
        out, _ = rotate_augment(img, np.ones((9, 9)), theta=theta)
        assert out.min() >= 0.0 and out.max() <= 1.0 + 1e-12
