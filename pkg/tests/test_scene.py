"""Palettes, raster ingestion, one-hot encoding, class merging and procedural scenes."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from topocalib.scene import (
    ClassInfo,
    ClassPalette,
    MergeMap,
    ProceduralSpec,
    SemanticBEV,
    encode_onehot,
    generate_procedural_bev,
    intersection_palette,
    labels_to_colors,
    load_bev,
    load_label_mask,
    load_palette,
    merge_classes,
    save_bev,
    save_label_mask,
    save_palette,
)


class TestPalette:
    def test_intersection_colors(self):
        pal = intersection_palette()
        assert pal.entries[pal.id_of("road")].color == (255, 0, 0)
        assert pal.entries[pal.id_of("terrain")].color == (0, 0, 255)
        assert pal.entries[pal.id_of("bicycle_path")].color == (0, 255, 0)
        assert pal.background_id == 0

    def test_non_contiguous_ids_rejected(self):
        with pytest.raises(ValueError):
            ClassPalette({0: ClassInfo("a", (0, 0, 0)), 2: ClassInfo("b", (1, 1, 1))})

    def test_duplicate_colors_rejected(self):
        with pytest.raises(ValueError):
            ClassPalette({0: ClassInfo("a", (0, 0, 0)), 1: ClassInfo("b", (0, 0, 0))})

    def test_json_round_trip(self, tmp_path):
        pal = intersection_palette()
        save_palette(pal, tmp_path / "p.json")
        assert load_palette(tmp_path / "p.json") == pal


class TestLoadBEV:
    def _save(self, tmp_path, rgb):
        path = tmp_path / "bev.png"
        Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path)
        return path

    def test_uniform_background(self, tmp_path):
        bev = load_bev(self._save(tmp_path, np.zeros((2, 2, 3))), intersection_palette())
        assert (bev.labels == 0).all()

    def test_red_is_road(self, tmp_path):
        rgb = np.zeros((4, 5, 3))
        rgb[1:3, 2:4] = (255, 0, 0)
        pal = intersection_palette()
        bev = load_bev(self._save(tmp_path, rgb), pal)
        assert (bev.labels[1:3, 2:4] == pal.id_of("road")).all()
        assert (bev.labels == pal.id_of("road")).sum() == 4

    def test_unknown_color_names_pixel(self, tmp_path):
        rgb = np.zeros((4, 4, 3))
        rgb[2, 3] = (7, 8, 9)
        with pytest.raises(ValueError, match=r"\(7, 8, 9\).*row=2, col=3"):
            load_bev(self._save(tmp_path, rgb), intersection_palette())

    def test_unreadable_file(self, tmp_path):
        (tmp_path / "x.png").write_bytes(b"not an image")
        with pytest.raises(ValueError):
            load_bev(tmp_path / "x.png", intersection_palette())

    def test_save_load_round_trip(self, tmp_path, bev):
        save_bev(bev, tmp_path / "b.png")
        back = load_bev(tmp_path / "b.png", bev.palette, bev.meters_per_pixel)
        np.testing.assert_array_equal(back.labels, bev.labels)

    def test_invalid_bev_rejected(self):
        with pytest.raises(ValueError):
            SemanticBEV(np.zeros((1, 4), np.uint8), intersection_palette(), 1.0)
        with pytest.raises(ValueError):
            SemanticBEV(np.full((4, 4), 9, np.uint8), intersection_palette(), 1.0)
        with pytest.raises(ValueError):
            SemanticBEV(np.zeros((4, 4), np.uint8), intersection_palette(), 0.0)

    def test_label_mask_round_trip(self, tmp_path):
        labels = np.random.default_rng(0).integers(0, 30, (16, 12)).astype(np.uint8)
        save_label_mask(labels, tmp_path / "m.png")
        np.testing.assert_array_equal(load_label_mask(tmp_path / "m.png"), labels)

    def test_color_label_mask_rejected(self, tmp_path):
        path = self._save(tmp_path, np.zeros((4, 4, 3)))
        with pytest.raises(ValueError):
            load_label_mask(path)


class TestOneHot:
    def test_single_pixel(self):
        oh = encode_onehot(np.array([[2]]), 4)
        np.testing.assert_array_equal(oh[:, 0, 0], [0, 0, 1, 0])

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.uint8, (8, 8), elements=st.integers(0, 3)))
    def test_partition_and_inverse(self, labels):
        oh = encode_onehot(labels, 4)
        assert set(np.unique(oh)) <= {0.0, 1.0}
        np.testing.assert_array_equal(oh.sum(0), 1.0)
        np.testing.assert_array_equal(oh.argmax(0), labels)

    def test_accepts_bev(self, bev):
        oh = encode_onehot(bev)
        assert oh.shape == (4,) + bev.shape


class TestMerge:
    def test_car_merged_into_road(self):
        # source: 0 background, 1 road, 2 car
        labels = np.array([[0, 1], [2, 2]], np.uint8)
        out = merge_classes(labels, MergeMap({0: 0, 1: 1, 2: 1}))
        np.testing.assert_array_equal(out, [[0, 1], [1, 1]])

    def test_identity(self):
        labels = np.random.default_rng(1).integers(0, 4, (9, 9)).astype(np.uint8)
        np.testing.assert_array_equal(merge_classes(labels, MergeMap({i: i for i in range(4)})), labels)

    def test_thirty_classes_to_four(self):
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 30, (64, 64)).astype(np.uint8)
        mapping = {i: int(rng.integers(0, 4)) for i in range(30)}
        out = merge_classes(labels, MergeMap(mapping))
        assert set(np.unique(out).tolist()) <= {0, 1, 2, 3}
        for i in range(30):
            assert (out[labels == i] == mapping[i]).all()

    def test_label_outside_domain(self):
        with pytest.raises(ValueError, match="row=1, col=0"):
            merge_classes(np.array([[0], [5]], np.uint8), MergeMap({0: 0, 1: 1}))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, 5), min_size=6, max_size=6))
    def test_projection_is_idempotent(self, targets):
        # fixed points are the ids that map to themselves; everything else maps onto one
        fixed = sorted({t for i, t in enumerate(targets) if targets[t] == t} | {0})
        proj = {i: (i if i in fixed else fixed[t % len(fixed)]) for i, t in enumerate(targets)}
        labels = np.arange(6, dtype=np.uint8).reshape(2, 3)
        once = merge_classes(labels, MergeMap(proj))
        np.testing.assert_array_equal(merge_classes(once, MergeMap(proj)), once)

    def test_validate(self):
        pal = intersection_palette()
        with pytest.raises(ValueError):
            MergeMap({0: 0, 1: 9}).validate(None, pal)
        with pytest.raises(ValueError):
            MergeMap({0: 0}).validate(pal, pal)
        MergeMap({i: i for i in range(4)}).validate(pal, pal)

    def test_json_keys_are_strings(self):
        m = MergeMap.from_json({"0": 0, "7": 1})
        assert m.mapping == {0: 0, 7: 1}
        assert m.to_json() == {"0": 0, "7": 1}


class TestProcedural:
    def test_deterministic(self):
        a = generate_procedural_bev(ProceduralSpec(), seed=4)
        b = generate_procedural_bev(ProceduralSpec(), seed=4)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_three_foreground_classes(self, bev):
        assert sorted(np.unique(bev.labels).tolist()) == [0, 1, 2, 3]

    def test_two_foreground_classes(self):
        out = generate_procedural_bev(ProceduralSpec(n_foreground=2), seed=0)
        assert sorted(np.unique(out.labels).tolist()) == [0, 1, 2]

    def test_seeds_differ(self):
        a = generate_procedural_bev(ProceduralSpec(), seed=1)
        b = generate_procedural_bev(ProceduralSpec(), seed=2)
        assert np.mean(a.labels != b.labels) >= 0.01

    @pytest.mark.parametrize("spec", [ProceduralSpec(size=(32, 64)), ProceduralSpec(n_foreground=1)])
    def test_degenerate_specs(self, spec):
        with pytest.raises(ValueError):
            generate_procedural_bev(spec, seed=0)

    def test_colors_follow_palette(self, bev):
        rgb = labels_to_colors(bev.labels, bev.palette)
        road = bev.labels == bev.palette.id_of("road")
        assert (rgb[road] == (255, 0, 0)).all()

    def test_spec_json_round_trip(self):
        spec = ProceduralSpec(size=(96, 128), n_blobs=2)
        assert ProceduralSpec.from_json(spec.to_json()) == spec
