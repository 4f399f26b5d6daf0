import math

import numpy as np
import pytest
import yaml
from numpy.testing import assert_allclose, assert_array_equal
from scipy import ndimage as ndi
from skimage.filters import threshold_otsu

from src.errors import DimensionMismatch, EmptyMask, ManifestMissing, TruncatedFrame
from src.synth_data import (
    ShapeParams,
    SynthConfig,
    generate_shape,
    geometry_force_field,
    rasterize_shape,
    read_frameset,
    render_fluorescence,
    synthesize_frameset,
    write_frameset,
)


def brute_force_distance(mask: np.ndarray) -> np.ndarray:
    """Distância de cada pixel da máscara ao pixel de fundo mais próximo (borda do frame conta)."""
    padded = np.pad(mask, 1)
    bg = np.argwhere(~padded)
    out = np.zeros(mask.shape)
    for r, c in np.argwhere(mask):
        d = np.sqrt(((bg - (r + 1, c + 1)) ** 2).sum(axis=1))
        out[r, c] = d.min()
    return out


class TestShapes:
    def test_disc_area(self):
        mask = rasterize_shape(ShapeParams(center=(50.0, 50.0), base_radius=20.0), 100, 100)
        assert mask.sum() == pytest.approx(math.pi * 400, rel=0.02)

    def test_fixed_seed_identical(self):
        _, a = generate_shape(np.random.default_rng(11), 64, 64)
        _, b = generate_shape(np.random.default_rng(11), 64, 64)
        assert_array_equal(a, b)

    @pytest.mark.parametrize("seed", range(8))
    def test_single_four_connected_component(self, seed):
        params, mask = generate_shape(np.random.default_rng(seed), 64, 64)
        _, n = ndi.label(mask)
        assert n == 1
        assert np.min(params.radius(np.linspace(0, 2 * np.pi, 360))) > 0

    def test_harmonic_limit(self):
        with pytest.raises(ValueError):
            SynthConfig(harmonics=9)


class TestForceField:
    def test_edge_and_deep_interior(self):
        mask = np.zeros((60, 60), bool)
        mask[5:55, 5:55] = True
        force = geometry_force_field(mask, amplitude=1000.0, decay=1.0)
        assert force[5, 30] == pytest.approx(1000.0 * math.exp(-1.0), rel=1e-6)
        assert force[30, 30] < 1e-3
        assert np.all(force[~mask] == 0)

    def test_matches_brute_force_distance(self):
        _, mask = generate_shape(np.random.default_rng(4), 32, 32)
        force = geometry_force_field(mask, amplitude=2.0, decay=5.0)
        expected = np.where(mask, 2.0 * np.exp(-brute_force_distance(mask) / 5.0), 0.0)
        assert_allclose(force, expected, rtol=1e-6)

    def test_empty_mask(self):
        with pytest.raises(EmptyMask):
            geometry_force_field(np.zeros((8, 8), bool), 1.0, 1.0)


class TestFluorescence:
    def test_contrast(self):
        _, mask = generate_shape(np.random.default_rng(2), 64, 64)
        image = render_fluorescence(mask, np.random.default_rng(3))
        assert image[mask].mean() > 10 * image[~mask].mean()
        assert image.min() >= 0

    def test_fixed_seed_identical(self):
        _, mask = generate_shape(np.random.default_rng(2), 64, 64)
        a = render_fluorescence(mask, np.random.default_rng(9))
        b = render_fluorescence(mask, np.random.default_rng(9))
        assert_array_equal(a, b)

    @pytest.mark.parametrize("seed", range(5))
    def test_otsu_recovers_mask(self, seed):
        _, mask = generate_shape(np.random.default_rng(seed), 64, 64)
        image = render_fluorescence(mask, np.random.default_rng(seed + 100))
        recovered = image > threshold_otsu(image[image > 0])
        assert (recovered == mask).mean() >= 0.95


class TestFrameset:
    def test_deterministic(self):
        a = synthesize_frameset(3, 32, 32, seed=5)
        b = synthesize_frameset(3, 32, 32, seed=5)
        for fa, fb in zip(a.frames, b.frames):
            assert_array_equal(fa.input_image, fb.input_image)
            assert_array_equal(fa.force_map, fb.force_map)

    def test_independent_of_thread_count(self, monkeypatch):
        monkeypatch.setenv("TFM_THREADS", "3")
        a = synthesize_frameset(4, 32, 32, seed=6)
        monkeypatch.setenv("TFM_THREADS", "1")
        b = synthesize_frameset(4, 32, 32, seed=6)
        for fa, fb in zip(a.frames, b.frames):
            assert_array_equal(fa.input_image, fb.input_image)

    def test_force_scale(self):
        fs = synthesize_frameset(4, 64, 64, seed=1)
        peak = max(f.force_map.max() for f in fs.frames)
        assert 500 < peak <= 1500 * 1.5

    def test_time_lapse_frames_are_similar(self):
        fs = synthesize_frameset(2, 64, 64, seed=2, cfg=SynthConfig(frames_per_cell=2))
        a, b = (f.force_map > 0 for f in fs.frames)
        overlap = (a & b).sum() / (a | b).sum()
        assert overlap > 0.8

    def test_hetero_records_sigma2(self):
        fs = synthesize_frameset(2, 32, 32, seed=3, hetero=True)
        assert fs.sigma2 is not None and len(fs.sigma2) == 2
        inside = fs.frames[0].force_map > 0
        assert np.all(fs.sigma2[0][~inside] == 0)
        assert fs.sigma2[0].max() <= SynthConfig().hetero_scale + 1e-6


class TestDiskFormat:
    def test_round_trip_bitwise(self, tmp_path):
        fs = synthesize_frameset(3, 32, 48, seed=8, hetero=True)
        write_frameset(fs, tmp_path / "set")
        back = read_frameset(tmp_path / "set")
        assert back.manifest.width == 48 and back.manifest.height == 32 and len(back) == 3
        for fa, fb in zip(fs.frames, back.frames):
            assert fa.input_image.tobytes() == fb.input_image.tobytes()
            assert fa.force_map.tobytes() == fb.force_map.tobytes()
        assert fs.sigma2[2].tobytes() == back.sigma2[2].tobytes()

    def test_file_layout(self, tmp_path):
        write_frameset(synthesize_frameset(2, 32, 32, seed=1), tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["force_0000.raw", "force_0001.raw", "input_0000.raw", "input_0001.raw", "manifest.yaml"]
        manifest = yaml.safe_load((tmp_path / "manifest.yaml").read_text())
        assert manifest["dtype"] == "f32le" and manifest["frames"] == 2
        assert (tmp_path / "input_0001.raw").stat().st_size == 32 * 32 * 4

    def test_rewrite_removes_stale_frames(self, tmp_path):
        write_frameset(synthesize_frameset(4, 32, 32, seed=1, hetero=True), tmp_path)
        write_frameset(synthesize_frameset(2, 32, 32, seed=2), tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["force_0000.raw", "force_0001.raw", "input_0000.raw", "input_0001.raw", "manifest.yaml"]
        assert len(read_frameset(tmp_path)) == 2

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ManifestMissing):
            read_frameset(tmp_path)

    def test_truncated_frame_names_index(self, tmp_path):
        write_frameset(synthesize_frameset(3, 32, 32, seed=1), tmp_path)
        path = tmp_path / "force_0002.raw"
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(TruncatedFrame) as info:
            read_frameset(tmp_path)
        assert info.value.index == 2

    def test_manifest_dims_disagree_with_files(self, tmp_path):
        write_frameset(synthesize_frameset(2, 32, 32, seed=1), tmp_path)
        manifest = yaml.safe_load((tmp_path / "manifest.yaml").read_text())
        manifest["width"] = 16
        (tmp_path / "manifest.yaml").write_text(yaml.safe_dump(manifest))
        with pytest.raises(DimensionMismatch):
            read_frameset(tmp_path)
