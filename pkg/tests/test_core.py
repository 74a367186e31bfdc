"""Data containers, gradient schemes, patch extraction, and file formats."""

import json
import os

import numpy as np
import pytest

from svdti.core import (
    DimensionMismatchError,
    DwiVolume,
    GradientScheme,
    MetricMaps,
    PayloadSizeError,
    extract_patches,
    read_metric_maps,
    read_scheme,
    read_volume,
    volume_channels,
    write_metric_maps,
    write_scheme,
    write_volume,
)


def _scheme(n=3):
    rng = np.random.default_rng(5)
    vecs = rng.normal(size=(n, 3))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    bvals = np.concatenate([[0.0], np.full(n, 1000.0)])
    bvecs = np.concatenate([np.zeros((1, 3)), vecs])
    return GradientScheme(bvals=bvals, bvecs=bvecs)


class TestGradientScheme:
    def test_basic_indexing(self):
        s = _scheme(4)
        assert s.n_measurements == 5
        np.testing.assert_array_equal(s.b0_indices, [0])
        np.testing.assert_array_equal(s.dwi_indices, [1, 2, 3, 4])

    def test_rejects_non_unit_direction(self):
        bvals = np.array([0.0, 1000.0])
        bvecs = np.array([[0.0, 0, 0], [0.5, 0, 0]])
        with pytest.raises(ValueError, match="unit"):
            GradientScheme(bvals=bvals, bvecs=bvecs)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            GradientScheme(bvals=np.zeros(2), bvecs=np.zeros((3, 3)))

    def test_rejects_negative_bval(self):
        with pytest.raises(ValueError):
            GradientScheme(bvals=np.array([-1.0]), bvecs=np.zeros((1, 3)))

    def test_b0_direction_not_constrained(self):
        s = GradientScheme(bvals=np.array([0.0]), bvecs=np.zeros((1, 3)))
        assert s.dwi_indices.size == 0


class TestDwiVolume:
    def test_preserves_float32(self, six_dir_scheme):
        data = np.ones((4, 4, 4, 7), dtype=np.float32)
        vol = DwiVolume(data=data, mask=np.ones((4, 4, 4), bool),
                        scheme=six_dir_scheme)
        assert vol.data.dtype == np.float32

    def test_promotes_other_dtypes(self, six_dir_scheme):
        data = np.ones((4, 4, 4, 7), dtype=np.int32)
        vol = DwiVolume(data=data, mask=np.ones((4, 4, 4), bool),
                        scheme=six_dir_scheme)
        assert vol.data.dtype == np.float64

    def test_rejects_channel_mismatch(self, six_dir_scheme):
        with pytest.raises(DimensionMismatchError):
            DwiVolume(data=np.ones((4, 4, 4, 5)), mask=np.ones((4, 4, 4), bool),
                      scheme=six_dir_scheme)

    def test_rejects_negative_masked_signal(self, six_dir_scheme):
        data = np.ones((4, 4, 4, 7))
        data[1, 1, 1, 2] = -0.5
        with pytest.raises(ValueError):
            DwiVolume(data=data, mask=np.ones((4, 4, 4), bool),
                      scheme=six_dir_scheme)

    def test_masked_out_voxels_unconstrained(self, six_dir_scheme):
        data = np.ones((4, 4, 4, 7))
        data[0, 0, 0] = np.nan
        mask = np.ones((4, 4, 4), bool)
        mask[0, 0, 0] = False
        vol = DwiVolume(data=data, mask=mask, scheme=six_dir_scheme)
        assert vol.dims == (4, 4, 4)


class TestVolumeChannels:
    def test_b0_average_first(self):
        bvals = np.array([0.0, 1000.0, 0.0])
        bvecs = np.array([[0, 0, 0], [1.0, 0, 0], [0, 0, 0]])
        scheme = GradientScheme(bvals=bvals, bvecs=bvecs)
        data = np.zeros((2, 2, 2, 3))
        data[..., 0] = 1.0
        data[..., 1] = 0.4
        data[..., 2] = 3.0
        vol = DwiVolume(data=data, mask=np.ones((2, 2, 2), bool), scheme=scheme)
        ch = volume_channels(vol)
        assert ch.shape == (2, 2, 2, 2)
        np.testing.assert_allclose(ch[..., 0], 2.0)  # mean of the two b0s
        np.testing.assert_allclose(ch[..., 1], 0.4)


class TestPatches:
    def test_origin_order_and_centers(self, tiny_volume):
        maps = MetricMaps(fa=np.zeros((5, 4, 3)), md=np.zeros((5, 4, 3)),
                          ad=np.zeros((5, 4, 3)), mask=tiny_volume.mask)
        patches = extract_patches(tiny_volume, maps, 3, 1)
        origins = [p.origin for p in patches]
        assert origins == sorted(origins)  # x fastest, then y, then z
        n = 3
        for p in patches:
            cx, cy, cz = (o + n // 2 for o in p.origin)
            assert tiny_volume.mask[cx, cy, cz]
            assert p.signal.shape == (3, 3, 3, 7)
            assert p.target.shape == (3, 3, 3, 3)

    def test_mask_mismatch_rejected(self, tiny_volume):
        other = tiny_volume.mask.copy()
        other[2, 2, 2] = False
        maps = MetricMaps(fa=np.zeros((5, 4, 3)), md=np.zeros((5, 4, 3)),
                          ad=np.zeros((5, 4, 3)), mask=other)
        with pytest.raises(ValueError):
            extract_patches(tiny_volume, maps, 3, 1)


class TestVolumeRoundTrip:
    def test_bytes_exact(self, tmp_path, tiny_volume):
        base = tmp_path / "vol"
        write_volume(tiny_volume, base)
        back = read_volume(base)
        assert back.data.dtype == tiny_volume.data.dtype
        np.testing.assert_array_equal(back.data, tiny_volume.data)
        np.testing.assert_array_equal(back.mask, tiny_volume.mask)
        np.testing.assert_array_equal(back.scheme.bvals, tiny_volume.scheme.bvals)
        np.testing.assert_array_equal(back.scheme.bvecs, tiny_volume.scheme.bvecs)

    def test_float32_payload_round_trips(self, tmp_path, six_dir_scheme):
        data = np.random.default_rng(0).uniform(
            0.1, 1.0, size=(4, 4, 4, 7)).astype(np.float32)
        vol = DwiVolume(data=data, mask=np.ones((4, 4, 4), bool),
                        scheme=six_dir_scheme)
        write_volume(vol, tmp_path / "v32")
        back = read_volume(tmp_path / "v32")
        assert back.data.dtype == np.float32
        np.testing.assert_array_equal(back.data, data)

    def test_header_is_sorted_json(self, tmp_path, tiny_volume):
        write_volume(tiny_volume, tmp_path / "v")
        text = (tmp_path / "v.vol.json").read_text()
        header = json.loads(text)
        assert text == json.dumps(header, indent=2, sort_keys=True) + "\n"
        assert header["axis_order"] == "x-fastest"
        assert header["byte_order"] == "little"

    def test_payload_size_mismatch(self, tmp_path, tiny_volume):
        write_volume(tiny_volume, tmp_path / "v")
        raw = tmp_path / "v.vol.raw"
        raw.write_bytes(raw.read_bytes()[:-1])
        with pytest.raises(PayloadSizeError, match="bytes"):
            read_volume(tmp_path / "v")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_volume(tmp_path / "absent")

    def test_fortran_order_payload(self, tmp_path, six_dir_scheme):
        # first byte run must walk x at fixed (y, z, channel)
        data = np.zeros((3, 2, 2, 7))
        data[:, 0, 0, 0] = [1.0, 2.0, 3.0]
        vol = DwiVolume(data=data, mask=np.ones((3, 2, 2), bool),
                        scheme=six_dir_scheme)
        write_volume(vol, tmp_path / "f")
        blob = (tmp_path / "f.vol.raw").read_bytes()
        head = np.frombuffer(blob[: 3 * 8], dtype="<f8")
        np.testing.assert_array_equal(head, [1.0, 2.0, 3.0])

    def test_idempotent_rewrite(self, tmp_path, tiny_volume):
        write_volume(tiny_volume, tmp_path / "v")
        first = ((tmp_path / "v.vol.json").read_bytes(),
                 (tmp_path / "v.vol.raw").read_bytes())
        write_volume(tiny_volume, tmp_path / "v")
        second = ((tmp_path / "v.vol.json").read_bytes(),
                  (tmp_path / "v.vol.raw").read_bytes())
        assert first == second


class TestMetricMapsIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        shape = (4, 5, 6)
        mask = rng.uniform(size=shape) > 0.3
        maps = MetricMaps(fa=rng.uniform(0, 1, shape), md=rng.normal(size=shape) * 1e-3,
                          ad=rng.normal(size=shape) * 1e-3, mask=mask)
        write_metric_maps(maps, tmp_path / "m")
        back = read_metric_maps(tmp_path / "m")
        np.testing.assert_array_equal(back.fa, maps.fa)
        np.testing.assert_array_equal(back.md, maps.md)
        np.testing.assert_array_equal(back.ad, maps.ad)
        np.testing.assert_array_equal(back.mask, maps.mask)

    def test_wrong_kind_rejected(self, tmp_path, tiny_volume):
        write_volume(tiny_volume, tmp_path / "v")
        with pytest.raises(ValueError, match="kind"):
            read_metric_maps(tmp_path / "v")


class TestSchemeFiles:
    def test_round_trip_exact(self, tmp_path):
        s = _scheme(5)
        write_scheme(s, tmp_path / "s")
        back = read_scheme(tmp_path / "s")
        np.testing.assert_array_equal(back.bvals, s.bvals)
        np.testing.assert_array_equal(back.bvecs, s.bvecs)

    def test_layout_one_and_three_rows(self, tmp_path):
        s = _scheme(4)
        write_scheme(s, tmp_path / "s")
        assert len((tmp_path / "s.bval").read_text().strip().splitlines()) == 1
        assert len((tmp_path / "s.bvec").read_text().strip().splitlines()) == 3

    def test_single_direction_scheme(self, tmp_path):
        s = GradientScheme(bvals=np.array([1000.0]), bvecs=np.array([[1.0, 0, 0]]))
        write_scheme(s, tmp_path / "one")
        back = read_scheme(tmp_path / "one")
        assert back.n_measurements == 1
        np.testing.assert_array_equal(back.bvecs, s.bvecs)


def test_atomic_write_leaves_no_temp_files(tmp_path, tiny_volume):
    write_volume(tiny_volume, tmp_path / "v")
    leftovers = [f for f in os.listdir(tmp_path)
                 if not f.startswith("v.vol")]
    assert leftovers == []
