import hashlib
import json
import os

import jsonschema
import numpy as np
import pytest

from ladmim import synthgen
from ladmim.backbone import Backbone

SPEC = synthgen.default_scene_spec()
SEED = 20240


def patch_pool(images, patch=4):
    """All patch-size tiles of all images as flat 8-bit-valued vectors."""
    tiles = []
    for img in images:
        x = img.astype(np.float64)
        h, w, c = x.shape
        t = x.reshape(h // patch, patch, w // patch, patch, c).transpose(0, 2, 1, 3, 4)
        tiles.append(t.reshape(-1, patch * patch * c))
    return np.concatenate(tiles, axis=0)


def nn_distances(queries, pool):
    """Exact squared distance of each query tile to its nearest pool tile.

    Entries are small integers, so the dot-product expansion is exact in
    float64; equal tiles give exactly 0.
    """
    q2 = (queries ** 2).sum(axis=1)[:, None]
    p2 = (pool ** 2).sum(axis=1)[None, :]
    d2 = q2 + p2 - 2.0 * queries @ pool.T
    return d2.min(axis=1)


class TestNormalGeneration:
    def test_required_objects_in_regions(self):
        img = synthgen.generate_normal(SPEC, SEED, 7)
        assert len(img.objects) == len(SPEC.slots)
        assert synthgen.validate_layout(SPEC, img.objects)

    def test_deterministic_pixels(self):
        a = synthgen.generate_normal(SPEC, SEED, 7)
        b = synthgen.generate_normal(SPEC, SEED, 7)
        assert np.array_equal(a.pixels, b.pixels)

    def test_200_samples_satisfy_validator(self):
        for i in range(200):
            img = synthgen.generate_normal(SPEC, SEED, i)
            assert synthgen.validate_layout(SPEC, img.objects), f"index {i}"

    def test_small_vocabulary_rejected(self):
        with pytest.raises(synthgen.LayoutError):
            synthgen.SceneSpec(kinds=SPEC.kinds[:2], slots=SPEC.slots[:2])

    def test_group_kinds_permute_across_scenes(self):
        # every slot of a permutation group should see every kind of that
        # group somewhere in a modest sample
        seen = {si: set() for group in SPEC.groups for si in group}
        for i in range(40):
            img = synthgen.generate_normal(SPEC, SEED, i)
            for o in img.objects:
                if o.slot in seen:
                    seen[o.slot].add(o.kind)
        for group in SPEC.groups:
            expected = {SPEC.kinds[SPEC.slots[si].kind].name for si in group}
            for si in group:
                assert seen[si] == expected

    def test_both_permutations_validate(self):
        base = synthgen.generate_normal(SPEC, SEED, 3)
        a, b = [o for o in base.objects if o.slot in SPEC.groups[0]]
        a.x, b.x = b.x, a.x
        a.y, b.y = b.y, a.y
        a.slot, b.slot = b.slot, a.slot
        assert synthgen.validate_layout(SPEC, base.objects)

    def test_overlapping_groups_rejected(self):
        with pytest.raises(synthgen.LayoutError):
            synthgen.SceneSpec(kinds=SPEC.kinds, slots=SPEC.slots,
                               groups=((0, 1), (1, 2)))

    def test_mixed_size_group_rejected(self):
        kinds = (synthgen.ObjectKind("small-square", "square", (10, 10, 10), 6),
                 synthgen.ObjectKind("big-square", "square", (240, 240, 240), 8),
                 SPEC.kinds[2])
        slots = (synthgen.Slot(0, 1, 8, 1, 8), synthgen.Slot(1, 17, 24, 1, 8))
        with pytest.raises(synthgen.LayoutError):
            synthgen.SceneSpec(kinds=kinds, slots=slots, groups=((0, 1),))


class TestLogicalAnomalies:
    def test_missing_drops_one_object(self):
        img = synthgen.generate_logical_anomaly(SPEC, SEED, 3, "missing")
        assert len(img.objects) == len(SPEC.slots) - 1
        assert not synthgen.validate_layout(SPEC, img.objects)

    def test_extra_adds_vocabulary_object(self):
        img = synthgen.generate_logical_anomaly(SPEC, SEED, 3, "extra")
        assert len(img.objects) == len(SPEC.slots) + 1
        extra = [o for o in img.objects if o.slot < 0]
        assert len(extra) == 1
        assert extra[0].kind in {k.name for k in SPEC.kinds}

    def test_swap_exchanges_positions_only(self):
        normal = synthgen.generate_normal(SPEC, SEED, 3)
        swapped = synthgen.generate_logical_anomaly(SPEC, SEED, 3, "swapped-position")
        pos_n = {(o.x, o.y) for o in normal.objects}
        pos_s = {(o.x, o.y) for o in swapped.objects}
        assert pos_n == pos_s  # same positions, two of them relabeled
        moved = [o for o, p in zip(swapped.objects, normal.objects)
                 if (o.x, o.y) != (p.x, p.y)]
        assert len(moved) == 2
        # the pair crosses permutation groups, otherwise the exchanged
        # layout would still be a normal one
        assert moved[0].kind != moved[1].kind
        assert not synthgen.validate_layout(SPEC, swapped.objects)

    def test_wrong_combination_recolors_within_shape(self):
        img = synthgen.generate_logical_anomaly(SPEC, SEED, 11, "wrong-combination")
        names = [o.kind for o in img.objects]
        # one kind now appears twice, its shape-partner is gone
        assert len(set(names)) == len(SPEC.slots) - 1
        assert not synthgen.validate_layout(SPEC, img.objects)

    def test_unknown_kind_rejected(self):
        with pytest.raises(synthgen.KindError):
            synthgen.generate_logical_anomaly(SPEC, SEED, 0, "upside-down")

    def test_missing_needs_multiple_objects(self):
        one = synthgen.SceneSpec(kinds=SPEC.kinds, slots=SPEC.slots[:1])
        with pytest.raises(synthgen.KindError):
            synthgen.generate_logical_anomaly(one, SEED, 0, "missing")


class TestStructuralAnomalies:
    @pytest.mark.parametrize("kind", synthgen.STRUCTURAL_KINDS)
    def test_layout_still_valid(self, kind):
        img = synthgen.generate_structural_anomaly(SPEC, SEED, 5, kind)
        assert synthgen.validate_layout(SPEC, img.objects)

    def test_scratch_uses_non_vocabulary_color(self):
        img = synthgen.generate_structural_anomaly(SPEC, SEED, 5, "scratch")
        assert (img.pixels == np.array(synthgen.SCRATCH_COLOR, dtype=np.uint8)).all(-1).any()

    def test_blob_small_footprint(self):
        img = synthgen.generate_structural_anomaly(SPEC, SEED, 6, "blob")
        blob = (img.pixels == np.array(synthgen.BLOB_COLOR, dtype=np.uint8)).all(-1)
        assert 0 < blob.sum() <= 16  # <= 4x4 px


@pytest.fixture(scope="module")
def pools():
    train = [synthgen.generate_normal(SPEC, SEED, i).pixels for i in range(200)]
    probe = [synthgen.generate_normal(SPEC, SEED, 1000 + i).pixels for i in range(50)]
    pool = patch_pool(train)
    threshold = np.percentile(nn_distances(patch_pool(probe), pool), 99)
    return pool, threshold


class TestPatchLocality:
    """Logical anomalies must be locally normal; structural must not be."""

    def test_logical_patches_within_normal_vocabulary(self, pools):
        pool, threshold = pools
        for i, kind in enumerate(synthgen.LOGICAL_KINDS * 5):
            img = synthgen.generate_logical_anomaly(SPEC, SEED, 2000 + i, kind)
            dmax = nn_distances(patch_pool([img.pixels]), pool).max()
            assert dmax <= threshold, f"{kind} produced an out-of-vocabulary patch"

    def test_structural_patches_exceed_threshold(self, pools):
        pool, threshold = pools
        for i, kind in enumerate(synthgen.STRUCTURAL_KINDS * 5):
            img = synthgen.generate_structural_anomaly(SPEC, SEED, 3000 + i, kind)
            dmax = nn_distances(patch_pool([img.pixels]), pool).max()
            assert dmax > threshold, f"{kind} stayed inside the normal vocabulary"


class TestPpmRoundTrip:
    def test_bit_exact(self, tmp_path):
        img = synthgen.generate_normal(SPEC, SEED, 0)
        path = tmp_path / "img.ppm"
        synthgen.write_ppm(path, img.pixels)
        assert np.array_equal(synthgen.read_ppm(path), img.pixels)

    def test_rejects_non_p6(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P3\n2 2\n255\n")
        with pytest.raises(ValueError):
            synthgen.read_ppm(path)


class TestWriteDataset:
    COUNTS = {"train_normal": 20, "test_normal": 6, "test_logical": 8, "test_structural": 6}

    def test_counts_and_schema(self, tmp_path):
        manifest = synthgen.write_dataset(SPEC, self.COUNTS, SEED, tmp_path)
        assert len(manifest["images"]) == sum(self.COUNTS.values())
        files = os.listdir(tmp_path / "images")
        assert len(files) == sum(self.COUNTS.values())
        jsonschema.validate(manifest, synthgen.MANIFEST_SCHEMA)

    def test_train_split_purity(self, tmp_path):
        manifest = synthgen.write_dataset(SPEC, self.COUNTS, SEED, tmp_path)
        assert all(r["label"] == "normal"
                   for r in manifest["images"] if r["split"] == "train")

    def test_rerun_identical_manifest_hash(self, tmp_path):
        synthgen.write_dataset(SPEC, self.COUNTS, SEED, tmp_path / "a")
        synthgen.write_dataset(SPEC, self.COUNTS, SEED, tmp_path / "b")
        ha = hashlib.sha256((tmp_path / "a" / "manifest.json").read_bytes()).hexdigest()
        hb = hashlib.sha256((tmp_path / "b" / "manifest.json").read_bytes()).hexdigest()
        assert ha == hb

    def test_parallel_equals_serial(self, tmp_path):
        synthgen.write_dataset(SPEC, self.COUNTS, SEED, tmp_path / "serial", n_workers=1)
        synthgen.write_dataset(SPEC, self.COUNTS, SEED, tmp_path / "par", n_workers=4)
        for rec in json.loads((tmp_path / "serial" / "manifest.json").read_text())["images"]:
            a = (tmp_path / "serial" / rec["path"]).read_bytes()
            b = (tmp_path / "par" / rec["path"]).read_bytes()
            assert a == b
