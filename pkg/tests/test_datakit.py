import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dualmae.datakit import (
    MOTION_CLASSES,
    AugmentationConfig,
    FramePolicy,
    augment_clip,
    decode_clip,
    encode_clip,
    frame_difference,
    frame_indices,
    generate_synthetic_clip,
    make_synthetic_dataset,
    read_clip_file,
    read_manifest,
    sample_frames,
    write_clip_file,
    write_manifest,
)
from dualmae.errors import ConfigError, FormatError


def bright_centroid(frame, threshold=0.45):
    """Independent centroid of pixels brighter than the background ceiling."""
    ys, xs = [], []
    gray = frame.mean(axis=0)
    for y in range(gray.shape[0]):
        for x in range(gray.shape[1]):
            if gray[y, x] > threshold:
                ys.append(y)
                xs.append(x)
    return sum(ys) / len(ys), sum(xs) / len(xs)


class TestSyntheticClips:
    def test_static_class_repeats_frame_zero(self):
        clip = generate_synthetic_clip((3, 16, 32, 32), "static_noise", seed=7)
        for t in range(16):
            np.testing.assert_array_equal(clip[:, t], clip[:, 0])

    @pytest.mark.parametrize("cls", MOTION_CLASSES)
    def test_deterministic_per_seed(self, cls):
        a = generate_synthetic_clip((3, 16, 32, 32), cls, seed=1)
        b = generate_synthetic_clip((3, 16, 32, 32), cls, seed=1)
        assert a.tobytes() == b.tobytes()
        assert a.dtype == np.float32
        assert a.min() >= 0 and a.max() <= 1

    @pytest.mark.parametrize("seed", range(5))
    def test_translating_square_centroid_moves_one_pixel_per_frame(self, seed):
        clip = generate_synthetic_clip((3, 16, 32, 32), "translating_square", seed=seed, velocity=(0, 1))
        y0, x0 = bright_centroid(clip[:, 0])
        for t in range(16):
            y, x = bright_centroid(clip[:, t])
            assert y == pytest.approx(y0, abs=1e-12)
            assert x == pytest.approx(x0 + t, abs=1e-12)

    def test_classes_distinguishable_by_frame_difference(self):
        per_class = {
            cls: np.mean([frame_difference(generate_synthetic_clip((3, 16, 32, 32), cls, s)) for s in range(20)])
            for cls in MOTION_CLASSES
        }
        values = sorted(per_class.values())
        assert per_class["static_noise"] == 0.0
        assert all(b - a > 1e-3 for a, b in zip(values, values[1:]))

    def test_invalid_requests(self):
        with pytest.raises(ConfigError):
            generate_synthetic_clip((3, 16, 32, 32), "spinning_top", seed=0)
        with pytest.raises(ConfigError):
            generate_synthetic_clip((3, 16, 32, 32), 9, seed=0)
        with pytest.raises(ConfigError):
            generate_synthetic_clip((3, 16, 32), 0, seed=0)
        with pytest.raises(ConfigError):
            generate_synthetic_clip((3, 16, 32, 32), 0, seed=0, velocity=(0, 3))

    def test_dataset_is_balanced(self):
        clips, labels = make_synthetic_dataset(3, (1, 4, 16, 16), seed=0)
        assert clips.shape == (12, 1, 4, 16, 16)
        assert np.bincount(labels).tolist() == [3, 3, 3, 3]


class TestAugmentation:
    def clip(self, seed=0):
        return generate_synthetic_clip((3, 8, 32, 32), "rotating_bar", seed)

    def test_all_disabled_is_identity(self):
        clip = self.clip()
        np.testing.assert_array_equal(augment_clip(clip, AugmentationConfig()), clip)

    def test_flip_definition(self):
        clip = self.clip()
        out = augment_clip(clip, AugmentationConfig(flip=True, flip_p=1.0))
        W = clip.shape[-1]
        for w in range(W):
            np.testing.assert_array_equal(out[..., w], clip[..., W - 1 - w])

    def test_fixed_seed_is_bit_identical(self):
        cfg = AugmentationConfig(crop=True, flip=True, color_jitter=True, erase=True, erase_p=1.0, rotation=True, seed=11)
        clip = self.clip()
        assert augment_clip(clip, cfg).tobytes() == augment_clip(clip, cfg).tobytes()

    def test_target_shape_and_range(self):
        cfg = AugmentationConfig(size=(16, 24), crop=True, color_jitter=True, brightness=0.9, seed=3)
        out = augment_clip(self.clip(), cfg)
        assert out.shape == (3, 8, 16, 24)
        assert out.min() >= 0 and out.max() <= 1

    def test_same_spatial_transform_for_every_frame(self):
        # a static clip stays static after augmentation
        clip = generate_synthetic_clip((3, 8, 32, 32), "static_noise", 4)
        cfg = AugmentationConfig(crop=True, flip=True, rotation=True, scaling=True, translation=True, erase=True, erase_p=1.0, seed=5)
        out = augment_clip(clip, cfg)
        for t in range(8):
            np.testing.assert_array_equal(out[:, t], out[:, 0])

    def test_temporal_downsample_keeps_length(self):
        clip = self.clip()
        out = augment_clip(clip, AugmentationConfig(temporal_downsample=True))
        assert out.shape == clip.shape
        np.testing.assert_array_equal(out[:, 1], clip[:, 0])
        np.testing.assert_array_equal(out[:, 2], clip[:, 2])

    def test_oversized_target_rejected(self):
        with pytest.raises(ConfigError):
            augment_clip(self.clip(), AugmentationConfig(size=(64, 64), crop=True))

    @pytest.mark.parametrize("kwargs", [{"flip_p": 1.5}, {"crop_scale": (0.0, 1.0)}, {"crop_scale": (0.5, 1.2)}, {"erase_p": -0.1}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            AugmentationConfig(**kwargs)


class TestFrameSampling:
    def test_first(self):
        clip = np.zeros((3, 16, 8, 8), dtype=np.float32)
        assert [j for j, _ in sample_frames(clip, FramePolicy("first", 1))] == [0]

    @pytest.mark.parametrize("T", range(1, 21))
    def test_middle_is_floor_half(self, T):
        assert frame_indices(T, FramePolicy("middle", 1)) == [T // 2]

    def test_random_reproducible(self):
        assert frame_indices(16, FramePolicy("random", 1, seed=3)) == frame_indices(16, FramePolicy("random", 1, seed=3))

    def test_frames_are_exact_slices_in_increasing_order(self):
        clip = generate_synthetic_clip((3, 16, 16, 16), "expanding_disc", 2)
        out = sample_frames(clip, FramePolicy("random", 5, seed=9))
        idx = [j for j, _ in out]
        assert idx == sorted(set(idx))
        for j, frame in out:
            np.testing.assert_array_equal(frame, clip[:, j])

    def test_too_many_frames(self):
        with pytest.raises(ConfigError):
            frame_indices(4, FramePolicy("random", 5))

    def test_random_policy_uniform(self):
        T = 16
        counts = np.bincount([frame_indices(T, FramePolicy("random", 1, seed=s))[0] for s in range(10_000)], minlength=T)
        assert stats.chisquare(counts).pvalue > 0.001


class TestClipFiles:
    def test_round_trip(self, tmp_path):
        clip = generate_synthetic_clip((3, 4, 16, 16), 0, 1)
        write_clip_file(clip, tmp_path / "a.cvmt")
        assert read_clip_file(tmp_path / "a.cvmt").tobytes() == clip.tobytes()

    def test_header_layout(self):
        data = encode_clip(np.zeros((2, 3, 4, 5), dtype=np.float32))
        assert data[:4] == b"CVMT" and data[4] == 1 and data[5:9] == b"\0\0\0\0"
        assert struct.unpack("<4I", data[9:25]) == (2, 3, 4, 5)
        assert len(data) == 25 + 4 * 120

    @settings(max_examples=100, deadline=None)
    @given(st.tuples(*[st.integers(1, 6)] * 4), st.integers(0, 2**31))
    def test_round_trip_random_shapes(self, shape, seed):
        clip = np.random.default_rng(seed).uniform(size=shape).astype(np.float32)
        assert decode_clip(encode_clip(clip)).tobytes() == clip.tobytes()

    def test_bad_magic(self):
        data = b"XXXX" + encode_clip(np.zeros((1, 1, 1, 1), dtype=np.float32))[4:]
        with pytest.raises(FormatError) as err:
            decode_clip(data)
        assert err.value.offset == 0

    def test_truncated_payload(self):
        full = encode_clip(np.zeros((3, 8, 4, 4), dtype=np.float32))
        header = bytearray(full[:25])
        struct.pack_into("<I", header, 13, 16)
        with pytest.raises(FormatError, match="truncated") as err:
            decode_clip(bytes(header) + full[25:])
        assert err.value.offset == len(full)

    def test_dimension_overflow(self):
        header = struct.pack("<4sB4s4I", b"CVMT", 1, b"\0" * 4, 4096, 4096, 4096, 4096)
        with pytest.raises(FormatError, match="overflow"):
            decode_clip(header)

    def test_manifest_round_trip(self, tmp_path):
        write_manifest([("a.cvmt", 0), ("b.cvmt", 3)], tmp_path / "m.csv")
        assert (tmp_path / "m.csv").read_text().splitlines()[0] == "path,label"
        rows = read_manifest(tmp_path / "m.csv")
        assert [(p.name, y) for p, y in rows] == [("a.cvmt", 0), ("b.cvmt", 3)]
