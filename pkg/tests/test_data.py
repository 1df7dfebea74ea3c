"""Synthetic generator, frame-folder round trip, and augmentation."""

import numpy as np
import pytest

from mfnet.data import (
    CLASS_NAMES,
    REVERSAL_PAIR,
    AugmentSpec,
    SyntheticSpec,
    augment_clip,
    bilinear_resize,
    export_frame_folders,
    generate_synthetic,
    load_frame_folder,
    make_clip,
    normalize,
    split_by_id_hash,
)

SMALL = SyntheticSpec(image_size=(32, 32), num_frames=8, rng_seed=0)


class TestGenerator:
    def test_class_inventory(self):
        assert len(CLASS_NAMES) == 6
        for a, b in REVERSAL_PAIR.items():
            assert REVERSAL_PAIR[b] == a and a != b

    def test_balanced_and_deterministic(self):
        a = generate_synthetic(SMALL, 3)
        b = generate_synthetic(SMALL, 3)
        assert len(a) == 18
        labels = [s.label for s in a]
        assert all(labels.count(c) == 3 for c in range(6))
        for sa, sb in zip(a, b):
            assert sa.clip_id == sb.clip_id
            np.testing.assert_array_equal(sa.frames, sb.frames)

    def test_frame_shape_and_range(self):
        clip = generate_synthetic(SMALL, 1)[0].frames
        assert clip.shape == (8, 3, 32, 32)
        assert clip.dtype == np.float32
        assert 0.0 <= clip.min() and clip.max() <= 1.0

    def test_twin_classes_are_exact_frame_reversals(self):
        """Clip i of a reversed class equals clip i of its twin, backwards."""
        import numpy.random as npr

        spec = SMALL
        for fwd, rev in ((0, 1), (2, 3), (4, 5)):
            for i in range(3):
                f = make_clip(fwd, npr.default_rng(
                    npr.SeedSequence([spec.rng_seed, fwd, i])), spec)
                r = make_clip(rev, npr.default_rng(
                    npr.SeedSequence([spec.rng_seed, fwd, i])), spec)
                np.testing.assert_array_equal(r, f[::-1])

    def test_forward_and_reverse_clips_share_frame_sets(self):
        """Reversal changes order only: the two classes are statistically
        inseparable frame-by-frame, which is what defeats the baseline."""
        rng = np.random.default_rng(np.random.SeedSequence([0, 0, 0]))
        fwd = make_clip(0, rng, SMALL)
        rng = np.random.default_rng(np.random.SeedSequence([0, 0, 0]))
        rev = make_clip(1, rng, SMALL)
        np.testing.assert_array_equal(np.sort(fwd, axis=0), np.sort(rev, axis=0))

    def test_moving_square_actually_moves(self):
        clip = generate_synthetic(SMALL, 1)[0].frames
        assert np.abs(clip[0] - clip[-1]).max() > 0.3

    def test_count_validation(self):
        with pytest.raises(ValueError):
            generate_synthetic(SMALL, 0)

    def test_quantized_to_8bit_grid(self):
        clip = generate_synthetic(SMALL, 1)[0].frames
        np.testing.assert_allclose(clip * 255.0, np.round(clip * 255.0),
                                   atol=1e-3)


class TestSplit:
    def test_exact_counts_and_disjoint(self):
        samples = generate_synthetic(SMALL, 5)
        train, evals = split_by_id_hash(samples, 2)
        assert len(train) == 18 and len(evals) == 12
        train_ids = {s.clip_id for s in train}
        eval_ids = {s.clip_id for s in evals}
        assert not train_ids & eval_ids
        for c in range(6):
            assert sum(s.label == c for s in evals) == 2

    def test_split_is_deterministic(self):
        samples = generate_synthetic(SMALL, 4)
        a = split_by_id_hash(samples, 1)
        b = split_by_id_hash(list(reversed(samples)), 1)
        assert [s.clip_id for s in a[1]] == [s.clip_id for s in b[1]]

    def test_oversized_eval_rejected(self):
        with pytest.raises(ValueError):
            split_by_id_hash(generate_synthetic(SMALL, 2), 3)


class TestFrameFolders:
    def test_round_trip_is_pixel_exact(self, tmp_path):
        samples = generate_synthetic(SMALL, 2)
        export_frame_folders(samples, tmp_path)
        loaded, skipped = load_frame_folder(tmp_path)
        assert skipped == 0
        assert len(loaded) == len(samples)
        by_id = {s.clip_id: s for s in samples}
        for s in loaded:
            src = by_id[s.clip_id]
            assert s.label == src.label
            assert s.num_frames == src.num_frames
            np.testing.assert_array_equal(s.frames, src.frames)

    def test_lazy_frame_count(self, tmp_path):
        export_frame_folders(generate_synthetic(SMALL, 1), tmp_path)
        loaded, _ = load_frame_folder(tmp_path)
        s = loaded[0]
        assert s._frames is None
        assert s.num_frames == 8
        assert s._frames is None  # counting must not decode

    def test_skips_malformed_clips(self, tmp_path):
        export_frame_folders(generate_synthetic(SMALL, 1), tmp_path)
        (tmp_path / "empty_clip").mkdir()
        (tmp_path / "unlabeled").mkdir()
        img = tmp_path / "unlabeled" / "frame_00000.png"
        img.write_bytes((tmp_path / "grow_00000" / "frame_00000.png").read_bytes())
        loaded, skipped = load_frame_folder(tmp_path)
        assert len(loaded) == 6
        assert skipped == 2

    def test_classes_file_written(self, tmp_path):
        export_frame_folders(generate_synthetic(SMALL, 1), tmp_path)
        names = (tmp_path / "classes.txt").read_text().split()
        assert tuple(names) == CLASS_NAMES


class TestResize:
    def test_identity(self):
        rng = np.random.default_rng(0)
        img = rng.random((3, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(bilinear_resize(img, (8, 8)), img)

    def test_constant_image_preserved(self):
        img = np.full((3, 9, 9), 0.4, dtype=np.float64)
        out = bilinear_resize(img, (5, 7))
        np.testing.assert_allclose(out, 0.4, atol=1e-12)

    def test_mean_roughly_preserved_on_downscale(self):
        rng = np.random.default_rng(1)
        img = rng.random((1, 16, 16))
        out = bilinear_resize(img, (8, 8))
        assert abs(out.mean() - img.mean()) < 0.05


class TestAugment:
    def _clip(self, seed=0, hw=(48, 48)):
        rng = np.random.default_rng(seed)
        return rng.random((4, 3) + hw).astype(np.float32)

    def test_output_shape(self):
        spec = AugmentSpec(crop_size=(32, 32))
        out = augment_clip(self._clip(), spec, np.random.default_rng(0), True)
        assert out.shape == (4, 3, 32, 32)

    def test_eval_needs_no_rng_and_is_deterministic(self):
        spec = AugmentSpec(crop_size=(32, 32))
        a = augment_clip(self._clip(), spec, None, training=False)
        b = augment_clip(self._clip(), spec, None, training=False)
        np.testing.assert_array_equal(a, b)

    def test_eval_is_centre_crop_at_scale_one(self):
        spec = AugmentSpec(crop_size=(32, 32))
        clip = self._clip(hw=(32, 48))
        out = augment_clip(clip, spec, None, training=False)
        np.testing.assert_allclose(out, clip[:, :, :, 8:40], atol=1e-6)

    def test_train_crop_shared_across_frames(self):
        """A static clip must stay static after augmentation."""
        frame = np.random.default_rng(2).random((3, 48, 48)).astype(np.float32)
        clip = np.stack([frame] * 5)
        spec = AugmentSpec(crop_size=(32, 32))
        out = augment_clip(clip, spec, np.random.default_rng(3), training=True)
        for t in range(1, 5):
            np.testing.assert_array_equal(out[t], out[0])

    def test_train_seed_determinism(self):
        spec = AugmentSpec(crop_size=(32, 32))
        a = augment_clip(self._clip(), spec, np.random.default_rng(7), True)
        b = augment_clip(self._clip(), spec, np.random.default_rng(7), True)
        np.testing.assert_array_equal(a, b)

    def test_output_stays_in_unit_range(self):
        spec = AugmentSpec(crop_size=(24, 24))
        for seed in range(5):
            out = augment_clip(self._clip(seed), spec,
                               np.random.default_rng(seed), True)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_flip_disabled_by_default(self):
        assert AugmentSpec().horizontal_flip is False


class TestNormalize:
    def test_closed_form(self):
        frames = np.full((2, 3, 4, 4), 0.75, dtype=np.float32)
        out = normalize(frames, 0.5, 0.5)
        np.testing.assert_allclose(out, 0.5, atol=1e-6)

    def test_per_channel_constants(self):
        frames = np.zeros((1, 3, 2, 2), dtype=np.float32)
        out = normalize(frames, [0.1, 0.2, 0.3], [1.0, 1.0, 1.0])
        np.testing.assert_allclose(out[0, :, 0, 0], [-0.1, -0.2, -0.3],
                                   atol=1e-6)
