import json
import math

import numpy as np
import pytest
import torch

from pcl.config import resolve
from pcl.errors import ConfigError, DivergenceError
from pcl.runner import expand_matrix
from pcl.training import (TrainConfig, init_state, load_checkpoint, total_loss, train,
                          validation_losses, validation_metric)


def _cfg(tiny_raw, **train):
    tiny_raw["train"].update(train)
    return resolve(tiny_raw).train


# ------------------------------------------------------------------- losses


def test_total_loss_examples():
    assert total_loss(1.0, 0.5, 0.5) == pytest.approx(1.25)
    assert total_loss(0.8, 0.5, 1.0) == pytest.approx(1.3)
    assert total_loss(None, 0.7, 0.5) == pytest.approx(0.7)
    assert total_loss(0.4, None, 0.5) == pytest.approx(0.4)
    assert TrainConfig().alpha == 0.5


def test_total_loss_alpha_zero_is_pretext():
    assert total_loss(torch.tensor(2.0), torch.tensor(9.0), 0.0).item() == 2.0


@pytest.mark.parametrize("bad", [math.nan, math.inf])
def test_total_loss_non_finite(bad):
    with pytest.raises(DivergenceError):
        total_loss(torch.tensor(bad), torch.tensor(1.0), 0.5)
    with pytest.raises(DivergenceError):
        total_loss(1.0, bad, 0.5)


# ------------------------------------------------------------------- config


def test_config_needs_some_objective():
    with pytest.raises(ConfigError) as exc:
        TrainConfig(task="none", use_contrastive=False)
    assert exc.value.path == "task"


def test_negative_alpha_names_field(tiny_raw):
    tiny_raw["train"]["alpha"] = -1
    with pytest.raises(ConfigError) as exc:
        resolve(tiny_raw)
    assert exc.value.path == "train.alpha"


def test_bad_pretext_views():
    with pytest.raises(ConfigError):
        TrainConfig(pretext_views="both")


def test_encoder_input_follows_clip_and_crop(tiny_raw):
    cfg = _cfg(tiny_raw)
    assert cfg.encoder.input_shape == (3, 4, 12, 12)


# ----------------------------------------------------------------- training


def test_training_logs_each_epoch(tiny_raw, tiny_dataset, tmp_path):
    state = train(_cfg(tiny_raw), tiny_dataset, tmp_path)
    lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [l["epoch"] for l in lines] == [0, 1]
    for l in lines:
        assert np.isfinite(l["loss_total"]) and np.isfinite(l["val_metric"])
        assert l["loss_pretext"] is not None and l["loss_contrast"] is not None
    assert (tmp_path / "best.pt").is_file() and (tmp_path / "last.pt").is_file()
    assert state.best_metric == max(l["val_metric"] for l in lines)
    np.testing.assert_allclose(np.linalg.norm(state.bank.memory, axis=-1), 1.0, atol=1e-4)


def test_contrastive_only_has_no_pretext_loss(tiny_raw, tiny_dataset):
    state = train(_cfg(tiny_raw, task="none", epochs=1), tiny_dataset)
    assert state.history[0]["loss_pretext"] is None
    assert state.model.pretext_head is None


def test_pretext_only_has_no_contrast_loss(tiny_raw, tiny_dataset):
    state = train(_cfg(tiny_raw, use_contrastive=False, epochs=1), tiny_dataset)
    assert state.history[0]["loss_contrast"] is None


@pytest.mark.parametrize("task", ["rotation", "order"])
def test_other_tasks_train(tiny_raw, tiny_dataset, task):
    state = train(_cfg(tiny_raw, task=task, epochs=1), tiny_dataset)
    assert np.isfinite(state.history[0]["loss_total"])


@pytest.mark.parametrize("views", ["primary", "independent", "shared"])
@pytest.mark.parametrize("mode", ["bank", "batch"])
def test_view_and_negative_modes(tiny_raw, tiny_dataset, views, mode):
    tiny_raw["train"]["nce"] = {"mode": mode}
    state = train(_cfg(tiny_raw, pretext_views=views, epochs=1), tiny_dataset)
    assert np.isfinite(state.history[0]["loss_total"])


def test_zero_learning_rate_leaves_weights(tiny_raw, tiny_dataset):
    cfg = _cfg(tiny_raw, lr=0.0, epochs=1)
    before = {k: v.clone() for k, v in init_state(cfg, ["x"]).model.state_dict().items()
              if "running" not in k and "num_batches" not in k}
    after = train(cfg, tiny_dataset).model.state_dict()
    for k, v in before.items():
        assert torch.equal(v, after[k]), k


def test_validation_needs_videos(tiny_raw, tiny_dataset):
    cfg = _cfg(tiny_raw)
    state = init_state(cfg, [r.video_id for r in tiny_dataset.split("train")])
    with pytest.raises(ConfigError):
        validation_metric(state, [], tiny_dataset)


def test_validation_metric_is_per_video_mean(tiny_raw, tiny_dataset):
    cfg = _cfg(tiny_raw)
    state = init_state(cfg, [r.video_id for r in tiny_dataset.split("train")])
    val = tiny_dataset.split("val")
    once = validation_metric(state, val, tiny_dataset)
    twice = validation_metric(state, val + val, tiny_dataset)
    assert once == pytest.approx(twice, abs=1e-9)
    losses = validation_losses(state, val, tiny_dataset)
    assert len(losses) == len(val)
    assert once == pytest.approx(-losses.mean())


def test_empty_validation_split_is_config_error(tiny_raw, tiny_dataset):
    no_val = tiny_dataset.subset([r for r in tiny_dataset.records if r.split != "val"])
    with pytest.raises(ConfigError):
        train(_cfg(tiny_raw), no_val)


def test_best_checkpoint_tracks_best_epoch(tiny_raw, tiny_dataset, tmp_path):
    state = train(_cfg(tiny_raw, epochs=3), tiny_dataset, tmp_path)
    ckpt, best = load_checkpoint(tmp_path / "best.pt")
    assert ckpt["epoch"] == state.best_epoch + 1
    assert best.best_metric == state.best_metric


def test_resume_reproduces_uninterrupted_run(tiny_raw, tiny_dataset, tmp_path):
    cfg = _cfg(tiny_raw, epochs=3)
    full = train(cfg, tiny_dataset, tmp_path / "full")
    train(cfg, tiny_dataset, tmp_path / "part", stop_after=1)
    resumed = train(cfg, tiny_dataset, tmp_path / "part", resume=tmp_path / "part" / "last.pt")
    assert resumed.history == full.history
    assert (tmp_path / "part" / "metrics.jsonl").read_bytes() == \
        (tmp_path / "full" / "metrics.jsonl").read_bytes()


def test_checkpoint_version_checked(tiny_raw, tiny_dataset, tmp_path):
    train(_cfg(tiny_raw, epochs=1), tiny_dataset, tmp_path)
    ckpt = torch.load(tmp_path / "last.pt", weights_only=False)
    ckpt["format_version"] = 99
    torch.save(ckpt, tmp_path / "old.pt")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "old.pt")


def test_table4_matrix_has_eight_cells():
    import yaml
    from pcl import bundled_config

    matrix = yaml.safe_load(bundled_config("table4").read_text())
    cells = list(expand_matrix(matrix))
    assert len(cells) == 8
    assert len({c[0] for c in cells}) == 8
