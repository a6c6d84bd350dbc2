"""Frame format, sequence IO, and the laser model."""

import math

import numpy as np
import pytest

from heatgraph.frames import (LaserSource, SequenceManifest, ThermalFrame,
                              ThermalSequence, detect_laser, laser_flux,
                              load_sequence, save_sequence)
from heatgraph.validation import ValidationError


def frame(values, t=0.0, layer=0):
    values = np.asarray(values, dtype=float)
    return ThermalFrame(width=values.shape[1], height=values.shape[0],
                        time_s=t, layer_index=layer, values=values)


class TestThermalFrame:
    def test_rejects_nonpositive_temperature(self):
        with pytest.raises(ValidationError):
            frame([[300.0, -1.0]])

    def test_rejects_non_finite(self):
        with pytest.raises(ValidationError):
            frame([[300.0, np.nan]])

    def test_size_mismatch(self):
        with pytest.raises(ValidationError):
            ThermalFrame(width=3, height=2, time_s=0.0, layer_index=0,
                         values=np.ones(5))


class TestSequenceIO:
    def make_sequence(self):
        rng = np.random.default_rng(7)
        frames = [
            frame(rng.uniform(300.0, 900.0, size=(4, 5)), t=0.1 * i, layer=i // 2)
            for i in range(4)
        ]
        manifest = SequenceManifest(pixel_pitch_mm=0.5, layer_height_mm=0.05,
                                    frames=[])
        return ThermalSequence(manifest=manifest, frames=frames)

    def test_roundtrip_bit_exact(self, tmp_path):
        seq = self.make_sequence()
        path = save_sequence(seq, str(tmp_path / "seq"))
        loaded = load_sequence(path)
        assert len(loaded.frames) == len(seq.frames)
        for a, b in zip(seq.frames, loaded.frames):
            assert a.time_s == b.time_s
            assert a.layer_index == b.layer_index
            assert np.array_equal(a.values, b.values)
        assert loaded.manifest.pixel_pitch_mm == seq.manifest.pixel_pitch_mm
        assert loaded.manifest.layer_height_mm == seq.manifest.layer_height_mm
        assert loaded.manifest.threshold_K == seq.manifest.threshold_K

    def test_two_frame_manifest_sorted(self, tmp_path):
        seq = self.make_sequence()
        path = save_sequence(seq, str(tmp_path / "seq"))
        loaded = load_sequence(path)
        times = [f.time_s for f in loaded.frames]
        assert times == sorted(times) and len(set(times)) == len(times)

    def test_nan_token_names_file_and_row(self, tmp_path):
        d = tmp_path / "seq"
        save_sequence(self.make_sequence(), str(d))
        bad = d / "frame_00001.txt"
        lines = bad.read_text().splitlines()
        lines[2] = lines[2].replace(lines[2].split()[0], "NaN", 1)
        bad.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValidationError, match=r"frame_00001\.txt:3.*non-finite"):
            load_sequence(str(d / "manifest.json"))

    def test_out_of_order_timestamps_rejected(self, tmp_path):
        d = tmp_path / "seq"
        path = save_sequence(self.make_sequence(), str(d))
        text = (d / "manifest.json").read_text()
        text = text.replace('"time_s": 0.1,', '"time_s": 0.35,', 1)
        (d / "manifest.json").write_text(text)
        with pytest.raises(ValidationError, match="non-monotone timestamps"):
            load_sequence(path)

    def test_missing_frame_file(self, tmp_path):
        d = tmp_path / "seq"
        path = save_sequence(self.make_sequence(), str(d))
        (d / "frame_00002.txt").unlink()
        with pytest.raises(ValidationError, match="missing frame file"):
            load_sequence(path)

    def test_decreasing_layer_index_rejected(self):
        from heatgraph.frames import FrameEntry
        with pytest.raises(ValidationError, match="layer_index decreases"):
            SequenceManifest(pixel_pitch_mm=1, layer_height_mm=1, frames=[
                FrameEntry("a", 0.0, 1), FrameEntry("b", 1.0, 0)])


class TestLaserFlux:
    def test_zero_distance_gives_intensity(self):
        src = LaserSource(intensity_I=3.5, decay_eta=2.0, center=(1.0, 1.0))
        assert laser_flux(src, (1.0, 1.0)) == 3.5

    def test_derived_value_at_log2_distance(self):
        # q = I exp(-d eta) with I=2, eta=1, d=ln2 -> exactly 1
        src = LaserSource(intensity_I=2.0, decay_eta=1.0, center=(0.0, 0.0))
        assert laser_flux(src, (math.log(2.0), 0.0)) == pytest.approx(1.0, rel=1e-12)

    def test_zero_decay_is_flat(self):
        src = LaserSource(intensity_I=7.0, decay_eta=0.0, center=(0.0, 0.0))
        assert laser_flux(src, (123.0, -45.0)) == 7.0

    def test_monotone_in_distance(self):
        src = LaserSource(intensity_I=5.0, decay_eta=0.7, center=(0.0, 0.0))
        fluxes = [laser_flux(src, (d, 0.0)) for d in np.linspace(0, 10, 50)]
        assert all(a >= b for a, b in zip(fluxes, fluxes[1:]))

    def test_negative_intensity_rejected(self):
        with pytest.raises(ValidationError):
            LaserSource(intensity_I=-1.0, decay_eta=0.0, center=(0, 0))


class TestDetectLaser:
    def test_uniform_frame_detects_nothing(self):
        f = frame(np.full((10, 10), 423.15))
        assert detect_laser(f, 423.15) is None

    def test_single_hot_pixel_centroid(self):
        vals = np.full((10, 10), 423.0)
        vals[3, 7] = 2000.0
        pos = detect_laser(frame(vals), 423.15, pixel_pitch_mm=0.5)
        assert pos == (7 * 0.5, 3 * 0.5)

    def test_two_adjacent_hot_pixels_give_midpoint(self):
        vals = np.full((10, 10), 423.0)
        vals[3, 7] = 2000.0
        vals[3, 8] = 2000.0
        pos = detect_laser(frame(vals), 423.15)
        assert pos == (7.5, 3.0)

    def test_gate_respects_threshold_factor(self):
        vals = np.full((10, 10), 423.0)
        vals[5, 5] = 1.49 * 423.15  # below the 1.5x gate
        assert detect_laser(frame(vals), 423.15) is None
