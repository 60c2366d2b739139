import numpy as np
import pytest

from ladmim import synthgen
from ladmim.backbone import Backbone

SPEC = synthgen.default_scene_spec()


class TestGeometry:
    def test_grid_shape_32px(self):
        bb = Backbone(patch_size=4, pool=1, out_dim=48, seed=0)
        assert bb.grid_shape((32, 32)) == (8, 8)
        assert bb.n_tokens((32, 32)) == 64

    def test_pooling_halves_grid(self):
        bb = Backbone(patch_size=4, pool=2, out_dim=48, seed=0)
        assert bb.grid_shape((32, 32)) == (4, 4)

    def test_indivisible_image_rejected(self):
        bb = Backbone(patch_size=4, pool=1, seed=0)
        with pytest.raises(ValueError):
            bb.grid_shape((30, 32))

    def test_bad_construction(self):
        with pytest.raises(ValueError):
            Backbone(patch_size=0, seed=0)


class TestExtraction:
    def test_shapes(self):
        bb = Backbone(patch_size=4, pool=1, out_dim=48, seed=0)
        img = synthgen.generate_normal(SPEC, 5, 0).pixels
        feats = bb.extract_features(img)
        assert feats.shape == (64, 48)
        assert feats.dtype == np.float32

    def test_constant_image_gives_identical_tokens(self):
        bb = Backbone(patch_size=4, pool=1, out_dim=48, seed=0)
        img = np.full((32, 32, 3), 120, dtype=np.uint8)
        feats = bb.extract_features(img, standardize=False)
        assert np.allclose(feats, feats[0])

    def test_locality_one_patch_changed(self):
        # editing pixels inside one 4x4 window changes only that token
        bb = Backbone(patch_size=4, pool=1, out_dim=48, seed=0)
        img = synthgen.generate_normal(SPEC, 5, 1).pixels.copy()
        base = bb.extract_features(img, standardize=False)
        img[12:16, 20:24] = (1, 2, 3)  # token row 3, col 5 -> index 29
        changed = bb.extract_features(img, standardize=False)
        diff = np.abs(changed - base).sum(axis=1)
        assert diff[29] > 0
        assert np.all(diff[np.arange(64) != 29] == 0)

    def test_pooling_averages_tokens(self):
        bb1 = Backbone(patch_size=4, pool=1, out_dim=16, seed=3)
        bb2 = Backbone(patch_size=4, pool=2, out_dim=16, seed=3)
        img = synthgen.generate_normal(SPEC, 5, 2).pixels
        fine = bb1.extract_features(img, standardize=False).reshape(8, 8, 16)
        coarse = bb2.extract_features(img, standardize=False).reshape(4, 4, 16)
        manual = fine.reshape(4, 2, 4, 2, 16).mean(axis=(1, 3))
        assert np.allclose(coarse, manual, atol=1e-6)

    def test_raw_patches_match_pixels(self):
        bb = Backbone(patch_size=4, pool=1, seed=0)
        img = synthgen.generate_normal(SPEC, 5, 3).pixels
        raw = bb.raw_patches(img)
        assert raw.shape == (64, 48)
        window = img[0:4, 0:4].astype(np.float32) / 255.0
        assert np.array_equal(raw[0], window.reshape(-1))


class TestStandardization:
    def test_train_tokens_near_unit_scale(self):
        bb = Backbone(patch_size=4, pool=1, out_dim=48, seed=0)
        imgs = [synthgen.generate_normal(SPEC, 5, i).pixels for i in range(40)]
        bb.fit_standardization(imgs)
        feats = bb.extract_batch(imgs).reshape(-1, 48)
        assert np.abs(feats.mean(axis=0)).max() < 1e-3
        assert np.abs(feats.std(axis=0) - 1.0).max() < 1e-3

    def test_zero_variance_channels_left_unscaled(self):
        bb = Backbone(patch_size=4, pool=1, out_dim=8, seed=0)
        imgs = [np.full((32, 32, 3), 90, dtype=np.uint8)] * 3
        bb.fit_standardization(imgs)
        assert np.all(bb.feat_std == 1.0)


class TestFrozenness:
    def test_same_seed_same_weights(self):
        a = Backbone(seed=11)
        b = Backbone(seed=11)
        c = Backbone(seed=12)
        assert np.array_equal(a.projection, b.projection)
        assert not np.array_equal(a.projection, c.projection)

    def test_projection_not_writable(self):
        bb = Backbone(seed=0)
        with pytest.raises(ValueError):
            bb.projection[0, 0] = 1.0

    def test_state_round_trip_hash(self):
        bb = Backbone(patch_size=4, pool=1, out_dim=48, seed=7)
        imgs = [synthgen.generate_normal(SPEC, 5, i).pixels for i in range(8)]
        bb.fit_standardization(imgs)
        clone = Backbone.from_state(bb.state(), patch_size=4, pool=1, out_dim=48)
        assert clone.params_hash() == bb.params_hash()
        img = imgs[0]
        assert np.array_equal(clone.extract_features(img), bb.extract_features(img))
