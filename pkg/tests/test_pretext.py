import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from pcl.errors import BoundsError, DomainError
from pcl.pretext import (DEFAULT_TRANSFORMS, OrderTask, RotationTask, TransformTask,
                         all_permutations, build_task, label_to_permutation,
                         make_order_instance, make_rotation_instance, make_transform_instance,
                         permutation_to_label, pretext_loss, reverse_time, rotate,
                         swap_adjacent)
from pcl.videodata import Clip


def _clip(rng, t=6, h=8, w=8):
    return Clip(rng.random((3, t, h, w), dtype=np.float32))


def _indexed_video(t=60, h=4, w=4):
    """Frame i has every pixel equal to i, so clips reveal their source frames."""
    return np.broadcast_to(np.arange(t, dtype=np.uint8)[:, None, None, None], (t, h, w, 3)).copy()


def test_order_labels_cover_six_classes():
    labels = [permutation_to_label(p) for p in itertools.permutations(range(3))]
    assert labels == list(range(6))
    assert OrderTask(3).n_classes == 6


@given(st.permutations(list(range(5))))
def test_permutation_codec_round_trip(perm):
    label = permutation_to_label(perm)
    assert 0 <= label < math.factorial(5)
    assert label_to_permutation(label, 5) == tuple(perm)


def test_permutation_codec_errors():
    with pytest.raises(DomainError):
        permutation_to_label([0, 0, 1])
    with pytest.raises(BoundsError):
        label_to_permutation(6, 3)


def test_rotation_pixel_mapping(rng):
    data = rng.random((3, 2, 5, 5), dtype=np.float32)
    out = rotate(data, 1)
    h = data.shape[2]
    for r in range(h):
        for c in range(h):
            np.testing.assert_array_equal(out[:, :, r, c], data[:, :, c, h - 1 - r])
    np.testing.assert_array_equal(rotate(data, 4), data)


def test_rotation_requires_square(rng):
    with pytest.raises(DomainError):
        make_rotation_instance(_clip(rng, h=6, w=8), 0)
    with pytest.raises(DomainError):
        TransformTask().apply(_clip(rng, h=6, w=8), DEFAULT_TRANSFORMS.index("rotate90"))
    # temporal ops work on any frame shape
    TransformTask().apply(_clip(rng, h=6, w=8), DEFAULT_TRANSFORMS.index("reverse"))


def test_reverse_is_involution(rng):
    data = _clip(rng).data
    np.testing.assert_array_equal(reverse_time(reverse_time(data)), data)
    np.testing.assert_array_equal(swap_adjacent(swap_adjacent(data)), data)


def test_swap_adjacent_odd_length():
    data = np.arange(5, dtype=np.float32).reshape(1, 5, 1, 1).repeat(3, 0)
    assert swap_adjacent(data)[0, :, 0, 0].tolist() == [1, 0, 3, 2, 4]


@pytest.mark.parametrize("task", [RotationTask(), TransformTask()])
def test_single_clip_tasks_invert_every_label(task, rng):
    clip = _clip(rng)
    outs = set()
    for label in range(task.n_classes):
        moved = task.apply(clip, label)
        np.testing.assert_array_equal(task.invert(moved, label).data, clip.data)
        outs.add(moved.data.tobytes())
    assert len(outs) == task.n_classes


def test_instances_do_not_mutate_input(rng):
    clip = _clip(rng)
    keep = clip.data.copy()
    for seed in range(10):
        make_rotation_instance(clip, seed)
        make_transform_instance(clip, seed)
    np.testing.assert_array_equal(clip.data, keep)


def test_instance_labels_in_range(rng):
    clip = _clip(rng)
    labels = {make_transform_instance(clip, s).label for s in range(100)}
    assert labels == set(range(len(DEFAULT_TRANSFORMS)))
    inst = make_rotation_instance(clip, 3)
    np.testing.assert_array_equal(inst.clips[0].data, rotate(clip.data, inst.label))


def test_order_instance_clips_follow_permutation():
    frames = _indexed_video()
    for seed in range(20):
        inst = make_order_instance(frames, 3, seed, n_frames=8, video_id="v")
        assert 0 <= inst.label < 6 and inst.video_id == "v"
        firsts = [int(round(c.data[0, 0, 0, 0] * 255)) for c in inst.clips]
        perm = label_to_permutation(inst.label, 3)
        ordered = sorted(firsts)
        assert [ordered[p] for p in perm] == firsts
        # consecutive segments do not overlap and gaps stay within 0..8
        for a, b in zip(ordered, ordered[1:]):
            assert 8 <= b - a <= 16
        for c in inst.clips:
            vals = (c.data[0, :, 0, 0] * 255).round().astype(int)
            assert list(vals) == list(range(vals[0], vals[0] + 8))


def test_order_instance_too_short():
    with pytest.raises(BoundsError):
        make_order_instance(_indexed_video(t=20), 3, 0, n_frames=8)


def test_order_exact_fit_has_no_gaps():
    starts = OrderTask(3).segment_starts(24, 8, np.random.default_rng(0))
    assert starts == [0, 8, 16]


def test_build_task_registry():
    assert build_task("none") is None
    assert build_task("order").n_classes == 6
    assert build_task("rotation").n_classes == 4
    assert build_task("transform").n_classes == 5
    with pytest.raises(DomainError):
        build_task("jigsaw")
    assert len(all_permutations(3)) == 6


def test_pretext_loss_checks_labels():
    logits = torch.zeros(2, 4)
    assert float(pretext_loss(logits, torch.tensor([0, 3]))) == pytest.approx(math.log(4))
    with pytest.raises(BoundsError):
        pretext_loss(logits, torch.tensor([0, 4]))
