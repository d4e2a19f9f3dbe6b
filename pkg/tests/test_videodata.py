import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcl.errors import BoundsError, ConfigError, DomainError, InputError
from pcl.videodata import (AugmentConfig, Clip, MotionParams, RESIDUAL, SyntheticSpec,
                           VideoDataset, augment, derive_seed, frames_to_float,
                           generate_synthetic, prepare_clip, read_tensor, render_video,
                           sample_clip, to_residual, uniform_starts, write_tensor)


def _video(rng, t=100, h=12, w=12):
    return rng.integers(0, 256, size=(t, h, w, 3), dtype=np.uint8)


# ------------------------------------------------------------------ clips


def test_sample_clip_indexes_requested_frames(rng):
    frames = _video(rng)
    clip = sample_clip(frames, 10, 16)
    assert clip.n_frames == 16
    np.testing.assert_array_equal(clip.data, frames_to_float(frames[10:26]))
    assert clip.data.dtype == np.float32
    assert clip.data.min() >= 0 and clip.data.max() <= 1


def test_sample_clip_past_end_is_bounds_error(rng):
    frames = _video(rng)
    with pytest.raises(BoundsError):
        sample_clip(frames, 90, 16)
    with pytest.raises(BoundsError):
        sample_clip(frames, -1, 4)
    with pytest.raises(BoundsError):
        sample_clip(frames[:8], None, 16, rng)


def test_sample_clip_undecodable_input():
    with pytest.raises(InputError):
        sample_clip(None, 0, 4)


def test_sample_clip_pure_given_seed(rng):
    frames = _video(rng)
    a = sample_clip(frames, None, 8, np.random.default_rng(5))
    b = sample_clip(frames, None, 8, np.random.default_rng(5))
    np.testing.assert_array_equal(a.data, b.data)


def test_frames_to_float_layout():
    frames = np.zeros((2, 3, 4, 3), dtype=np.uint8)
    frames[1, 2, 3, 0] = 255
    x = frames_to_float(frames)
    assert x.shape == (3, 2, 3, 4)
    assert x[0, 1, 2, 3] == 1.0 and x.sum() == 1.0


def test_residual_of_constant_video_is_zero(rng):
    frame = rng.random((3, 1, 6, 6), dtype=np.float32)
    res = to_residual(Clip(np.repeat(frame, 5, axis=1)))
    assert res.domain == RESIDUAL and res.n_frames == 4
    assert np.all(res.data == 0)


def test_residual_five_frames_matches_loop(rng):
    data = rng.random((3, 5, 4, 4), dtype=np.float32)
    res = to_residual(Clip(data)).data
    for t in range(4):
        np.testing.assert_array_equal(res[:, t], data[:, t + 1] - data[:, t])
    assert res.min() >= -1 and res.max() <= 1


def test_residual_shift_equivariance(rng):
    data = rng.random((3, 6, 5, 5)).astype(np.float32) * 0.5
    shifted = data + np.float32(0.25)
    np.testing.assert_allclose(to_residual(Clip(shifted)).data, to_residual(Clip(data)).data,
                               atol=1e-6)


def test_residual_rejects_residual_input(rng):
    res = to_residual(Clip(rng.random((3, 3, 4, 4), dtype=np.float32)))
    with pytest.raises(DomainError):
        to_residual(res)


def test_clip_validates_layout():
    with pytest.raises(InputError):
        Clip(np.zeros((4, 2, 2, 2), dtype=np.float32))
    with pytest.raises(DomainError):
        Clip(np.zeros((3, 2, 2, 2), dtype=np.float32), "depth")


def test_derive_seed_stable_and_distinct():
    assert derive_seed(0, "v1", 3) == derive_seed(0, "v1", 3)
    assert len({derive_seed(0, v, e) for v in ("a", "b") for e in range(5)}) == 10


# ---------------------------------------------------------- augmentation


def test_augment_deterministic_given_seed(rng):
    clip = Clip(rng.random((3, 4, 16, 16), dtype=np.float32))
    cfg = AugmentConfig(crop_size=(12, 12))
    a, b = augment(clip, cfg, 9), augment(clip, cfg, 9)
    np.testing.assert_array_equal(a.data, b.data)
    assert a.spatial == (12, 12)


def test_augment_grayscale_equalises_channels(rng):
    clip = Clip(rng.random((3, 4, 10, 10), dtype=np.float32))
    out = augment(clip, AugmentConfig(crop_size=(8, 8), grayscale_prob=1.0), 1).data
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out[1], out[2])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_augment_temporally_consistent_and_bounded(seed):
    frame = np.random.default_rng(seed).random((3, 1, 10, 10), dtype=np.float32)
    clip = Clip(np.repeat(frame, 4, axis=1))
    cfg = AugmentConfig(crop_size=(8, 8), jitter_prob=1.0, blur_prob=1.0)
    out = augment(clip, cfg, seed).data
    for t in range(1, 4):
        np.testing.assert_array_equal(out[:, t], out[:, 0])
    assert out.min() >= 0 and out.max() <= 1


def test_augment_does_not_mutate_input(rng):
    data = rng.random((3, 3, 8, 8), dtype=np.float32)
    keep = data.copy()
    augment(Clip(data), AugmentConfig(crop_size=(8, 8), flip_prob=1.0), 0)
    np.testing.assert_array_equal(data, keep)


def test_augment_disabled_centre_crop_only(rng):
    data = rng.random((3, 2, 10, 10), dtype=np.float32)
    out = augment(Clip(data), AugmentConfig(crop_size=(6, 6), enabled=False), 0,
                  random_crop=False)
    np.testing.assert_array_equal(out.data, data[:, :, 2:8, 2:8])


def test_augment_flip_mirrors_width(rng):
    data = rng.random((3, 2, 6, 6), dtype=np.float32)
    cfg = AugmentConfig(crop_size=(6, 6), jitter_prob=0, grayscale_prob=0, blur_prob=0,
                        flip_prob=1.0)
    np.testing.assert_array_equal(augment(Clip(data), cfg, 0).data, data[..., ::-1])


def test_augment_rejects_bad_inputs(rng):
    with pytest.raises(DomainError):
        augment(Clip(rng.random((3, 2, 6, 6), dtype=np.float32)), AugmentConfig(crop_size=(8, 8)))
    with pytest.raises(ConfigError):
        AugmentConfig(flip_prob=1.5)


def test_prepare_clip_residual_keeps_length(rng):
    frames = _video(rng, t=20)
    clip = prepare_clip(frames, 3, 8, AugmentConfig(crop_size=(10, 10)), 0, residual=True)
    assert clip.domain == RESIDUAL and clip.n_frames == 8 and clip.spatial == (10, 10)


def test_uniform_starts():
    assert uniform_starts(48, 9, 5) == [0, 10, 20, 29, 39]
    assert uniform_starts(48, 9, 1) == [19]
    assert uniform_starts(5, 9, 3) == []


# ------------------------------------------------------------ containers


@pytest.mark.parametrize("dtype", ["u1", "f4", "f8", "i4"])
def test_tensor_file_round_trip(tmp_path, rng, dtype):
    arr = (rng.random((3, 4, 5)) * 100).astype(dtype)
    write_tensor(tmp_path / "x.pclt", arr)
    back = read_tensor(tmp_path / "x.pclt")
    assert back.dtype == arr.dtype
    np.testing.assert_array_equal(back, arr)


def test_tensor_file_header_layout(tmp_path):
    write_tensor(tmp_path / "x.pclt", np.arange(6, dtype=np.uint8).reshape(2, 3))
    blob = (tmp_path / "x.pclt").read_bytes()
    assert blob[:4] == b"PCLT"
    assert blob[4:8] == bytes([1, 0, 0, 2])
    assert blob[8:16] == bytes([2, 0, 0, 0, 3, 0, 0, 0])
    assert blob[16:] == bytes(range(6))


def test_tensor_file_rejects_garbage(tmp_path):
    (tmp_path / "bad.pclt").write_bytes(b"nope")
    with pytest.raises(InputError):
        read_tensor(tmp_path / "bad.pclt")
    write_tensor(tmp_path / "t.pclt", np.zeros(4, dtype=np.uint8))
    (tmp_path / "t.pclt").write_bytes((tmp_path / "t.pclt").read_bytes()[:-1])
    with pytest.raises(InputError):
        read_tensor(tmp_path / "t.pclt")


# -------------------------------------------------------------- synthetic


def test_synthetic_corpus_is_deterministic_and_split():
    spec = SyntheticSpec()
    a = generate_synthetic(spec, 0)
    b = generate_synthetic(spec, 0)
    assert [r.video_id for r in a.records] == [r.video_id for r in b.records]
    r = a.records[17]
    np.testing.assert_array_equal(a.frames(r), b.frames(r))
    assert a.frames(r).shape == (48, 32, 32, 3) and a.frames(r).dtype == np.uint8
    counts = {s: len(a.split(s)) for s in ("train", "val", "test")}
    assert counts == {"train": 208, "val": 32, "test": 80}
    assert a.n_classes == 8 and len(set(a.class_names)) == 8


def test_synthetic_seed_changes_videos():
    spec = SyntheticSpec(n_classes=2, videos_per_class=3, frames_per_video=8)
    a, b = generate_synthetic(spec, 0), generate_synthetic(spec, 1)
    assert not np.array_equal(a.frames(a.records[0]), b.frames(b.records[0]))


def test_synthetic_single_frame_carries_no_static_class_cue():
    # the mean image of first frames is statistically alike across classes
    spec = SyntheticSpec(n_classes=2, videos_per_class=30, frames_per_video=4)
    ds = generate_synthetic(spec, 0)
    means = [np.mean([ds.frames(r)[0].mean() for r in ds.records if r.label == c]) for c in (0, 1)]
    assert abs(means[0] - means[1]) < 0.1 * 255


def test_render_video_moves_object():
    spec = SyntheticSpec(n_classes=2, videos_per_class=1, frames_per_video=10,
                         motion_params=[MotionParams(90.0, 2.0), MotionParams(0.0, 2.0)])
    v = render_video(spec, 3, 0).astype(np.int32)
    assert np.abs(v[1:] - v[:-1]).sum() > 0


def test_synthetic_spec_validation():
    with pytest.raises(ConfigError) as exc:
        SyntheticSpec(n_classes=2, motion_params=[MotionParams(0, 1), MotionParams(0, 1)])
    assert exc.value.path == "motion_params[1]"
    with pytest.raises(ConfigError):
        SyntheticSpec(n_classes=3, motion_params=[MotionParams(0, 1)])
    with pytest.raises(ConfigError):
        SyntheticSpec(split_fractions=(0.5, 0.5, 0.5))


def test_dataset_save_load_round_trip(tmp_path, tiny_dataset):
    tiny_dataset.save(tmp_path / "ds")
    back = VideoDataset.load(tmp_path / "ds")
    assert back.class_names == tiny_dataset.class_names
    assert [(r.video_id, r.label, r.split) for r in back.records] == \
        [(r.video_id, r.label, r.split) for r in tiny_dataset.records]
    for r0, r1 in zip(tiny_dataset.records, back.records):
        np.testing.assert_array_equal(back.frames(r1), tiny_dataset.frames(r0))


def test_dataset_load_missing_manifest(tmp_path):
    with pytest.raises(InputError):
        VideoDataset.load(tmp_path)
