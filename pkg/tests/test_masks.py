import numpy as np
import pytest

from maskdiff.errors import ConfigError, DataError, ShapeError
from maskdiff.masks import (
    MaskSet,
    ORGAN_CLASSES,
    box_from_mask,
    box_mask,
    downsample_mask,
    load_mask_file,
    load_mask_npz,
    load_mask_png,
    mask_from_rgb_png_bytes,
    mask_to_rgb_png_bytes,
    save_mask_npz,
    save_mask_png,
)


def make_maskset(size=32, box=(4, 4, 6, 5)):
    rng = np.random.default_rng(0)
    channels = {}
    for i, name in enumerate(ORGAN_CLASSES):
        m = np.zeros((size, size), dtype=np.uint8)
        m[4 + 6 * i : 9 + 6 * i, 6 : 6 + 8] = 1
        channels[name] = m
    return MaskSet(channels, box_mask(size, *box) if box else None)


class TestDownsample:
    def test_coverage_rule(self):
        m = np.zeros((8, 8), dtype=np.uint8)
        m[0:4, 0:2] = 1          # half of top-left 4x4 block -> 1
        m[0:1, 4:8] = 1          # quarter of top-right block -> 0
        out = downsample_mask(m, 4)
        assert out.shape == (2, 2)
        assert out[0, 0] == 1 and out[0, 1] == 0 and out[1, 0] == 0 and out[1, 1] == 0

    def test_all_ones_and_zeros(self):
        assert downsample_mask(np.ones((8, 8), dtype=np.uint8), 4).all()
        assert not downsample_mask(np.zeros((8, 8), dtype=np.uint8), 4).any()

    def test_rejects_nonbinary_and_bad_shape(self):
        with pytest.raises(ConfigError):
            downsample_mask(np.full((8, 8), 2, dtype=np.uint8), 4)
        with pytest.raises(ShapeError):
            downsample_mask(np.zeros((9, 8), dtype=np.uint8), 4)


class TestMaskSet:
    def test_union_and_latents(self):
        ms = make_maskset()
        manual = np.zeros((32, 32), dtype=np.uint8)
        for c in ms.organ_channels.values():
            manual |= c
        assert np.array_equal(ms.anatomy_union, manual)
        assert np.array_equal(ms.latent_anatomy, downsample_mask(manual, 4))
        assert np.array_equal(ms.latent_pathology, downsample_mask(ms.pathology_box, 4))

    def test_rejects_non_rectangle_pathology(self):
        bad = np.zeros((32, 32), dtype=np.uint8)
        bad[2:6, 2:6] = 1
        bad[3, 3] = 0
        with pytest.raises(ConfigError):
            MaskSet(make_maskset().organ_channels, bad)

    def test_rejects_nonbinary(self):
        ch = make_maskset().organ_channels
        ch = dict(ch)
        ch["lungs"] = ch["lungs"] * 3
        with pytest.raises(ConfigError):
            MaskSet(ch)

    def test_rejects_wrong_channels(self):
        ch = dict(make_maskset().organ_channels)
        del ch["aorta"]
        with pytest.raises(ConfigError):
            MaskSet(ch)

    def test_box_accessors(self):
        ms = make_maskset(box=(3, 5, 7, 2))
        assert ms.box == (3, 5, 7, 2)
        assert box_from_mask(np.zeros((8, 8), dtype=np.uint8)) is None
        empty = ms.with_box(None)
        assert empty.box is None
        assert np.array_equal(empty.anatomy_union, ms.anatomy_union)

    def test_box_bounds(self):
        with pytest.raises(ConfigError):
            box_mask(16, 10, 10, 8, 8)

    def test_fingerprint_changes_with_box(self):
        a, b = make_maskset(box=(4, 4, 6, 5)), make_maskset(box=(4, 4, 6, 6))
        assert a.fingerprint() != b.fingerprint()
        assert a.fingerprint() == make_maskset(box=(4, 4, 6, 5)).fingerprint()


class TestMaskIo:
    def test_png_roundtrip(self, tmp_path):
        ms = make_maskset()
        p = tmp_path / "mask.png"
        save_mask_png(ms, p)
        back = load_mask_png(p)
        for n in ORGAN_CLASSES:
            assert np.array_equal(back.organ_channels[n], ms.organ_channels[n])
        assert np.array_equal(back.pathology_box, ms.pathology_box)

    def test_png_without_pathology(self, tmp_path):
        ms = make_maskset(box=None)
        p = tmp_path / "mask.png"
        save_mask_png(ms, p, include_pathology=False)
        back = load_mask_file(p)
        assert back.box is None

    def test_npz_roundtrip(self, tmp_path):
        ms = make_maskset()
        p = tmp_path / "mask.npz"
        save_mask_npz(ms, p)
        back = load_mask_npz(p)
        for n in ORGAN_CLASSES:
            assert np.array_equal(back.organ_channels[n], ms.organ_channels[n])
        assert back.box == ms.box

    def test_rgb_roundtrip(self):
        ms = make_maskset(box=None)
        data = mask_to_rgb_png_bytes(ms)
        back = mask_from_rgb_png_bytes(data)
        for n in ORGAN_CLASSES:
            assert np.array_equal(back.organ_channels[n], ms.organ_channels[n])

    def test_corrupt_inputs(self, tmp_path):
        p = tmp_path / "junk.png"
        p.write_bytes(b"not a png")
        with pytest.raises(DataError):
            load_mask_png(p)
        with pytest.raises(DataError):
            mask_from_rgb_png_bytes(b"nope")
