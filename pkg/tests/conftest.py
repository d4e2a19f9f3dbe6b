import logging
import warnings

import numpy as np
import pytest
import torch

from pcl.videodata import SyntheticSpec, generate_synthetic

ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _quiet_and_single_threaded():
    torch.set_num_threads(1)
    logging.getLogger("pcl").setLevel(logging.WARNING)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small synthetic corpus: 4 classes x 6 videos, 24 frames of 16x16."""
    spec = SyntheticSpec(n_classes=4, videos_per_class=6, frames_per_video=24,
                         frame_size=(16, 16), split_fractions=(0.5, 0.17, 0.33),
                         object_radius=(3.0, 4.0))
    return generate_synthetic(spec, seed=3)


TINY_TRAIN = {
    "data": {"synthetic": {"n_classes": 4, "videos_per_class": 6, "frames_per_video": 24,
                           "frame_size": [16, 16], "split_fractions": [0.5, 0.17, 0.33],
                           "object_radius": [3.0, 4.0]}, "seed": 3},
    "train": {"epochs": 2, "batch_size": 4, "clip_len": 4,
              "encoder": {"width_multiplier": 0.1, "feature_dim": 16},
              "augment": {"crop_size": [12, 12]}},
    "eval": {"clips_per_video": 2},
    "finetune": {"epochs": 1, "batch_size": 4},
}


@pytest.fixture
def tiny_raw():
    import copy
    return copy.deepcopy(TINY_TRAIN)
