import logging

import pytest
import torch

from pcl.errors import ConfigError, InputError
from pcl.models import (FAMILIES, Encoder, EncoderConfig, PCLModel, PretextHead,
                        count_parameters, head_configs, normalize)

SMALL = dict(width_multiplier=0.1, input_shape=(3, 4, 16, 16), feature_dim=16)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("stem", ["compact", "wide"])
def test_encoder_output_shape(family, stem):
    enc = Encoder(EncoderConfig(family=family, stem=stem, **SMALL))
    out = enc(torch.rand(2, *SMALL["input_shape"]))
    assert out.shape == (2, 16) and torch.isfinite(out).all()


@pytest.mark.parametrize("family", FAMILIES)
def test_identical_clips_identical_features(family):
    torch.manual_seed(0)
    enc = Encoder(EncoderConfig(family=family, **SMALL)).eval()
    clip = torch.rand(1, *SMALL["input_shape"])
    with torch.no_grad():
        out = enc(clip.repeat(3, 1, 1, 1, 1))
    assert torch.equal(out[0], out[1]) and torch.equal(out[1], out[2])


def test_encoder_rejects_wrong_shape():
    enc = Encoder(EncoderConfig(**SMALL))
    with pytest.raises(InputError):
        enc(torch.rand(2, 3, 5, 16, 16))
    with pytest.raises(InputError):
        enc(torch.rand(3, 4, 16, 16))


def test_encoder_config_errors():
    with pytest.raises(ConfigError):
        EncoderConfig(family="vgg")
    with pytest.raises(ConfigError):
        EncoderConfig(width_multiplier=0)
    with pytest.raises(ConfigError):
        EncoderConfig(input_shape=(1, 4, 8, 8))
    with pytest.raises(ConfigError):
        EncoderConfig(stem="tiny")


def test_width_multiplier_scales_parameters():
    small = count_parameters(Encoder(EncoderConfig(**SMALL)))
    big = count_parameters(Encoder(EncoderConfig(**{**SMALL, "width_multiplier": 0.25})))
    assert big > 3 * small


def test_projection_is_unit_128d():
    model = PCLModel(EncoderConfig(**SMALL))
    z = model.project(model.encode(torch.rand(3, *SMALL["input_shape"])))
    assert z.shape == (3, 128)
    torch.testing.assert_close(z.norm(dim=1), torch.ones(3))


def test_normalize_guards_zero_rows(caplog):
    v = torch.tensor([[3.0, 4.0], [0.0, 0.0]])
    with caplog.at_level(logging.WARNING, logger="pcl.models"):
        out = normalize(v)
    assert torch.isfinite(out).all()
    torch.testing.assert_close(out[0], torch.tensor([0.6, 0.8]))
    assert torch.equal(out[1], torch.zeros(2))
    assert "near-zero" in caplog.text


def test_order_head_gives_six_logits():
    model = PCLModel(EncoderConfig(**SMALL), n_pretext_classes=6, pretext_clips=3)
    feats = model.encode(torch.rand(6, *SMALL["input_shape"]))
    logits = model.classify_pretext(feats.reshape(2, -1))
    assert logits.shape == (2, 6)
    with pytest.raises(InputError):
        model.classify_pretext(feats)


def test_single_clip_head_is_linear():
    head = PretextHead(16, 4)
    assert isinstance(head.net, torch.nn.Linear)
    assert head(torch.rand(5, 16)).shape == (5, 4)


def test_optional_heads_and_configs():
    model = PCLModel(EncoderConfig(**SMALL), use_projection=False)
    assert model.projector is None and model.pretext_head is None
    cfgs = head_configs(PCLModel(EncoderConfig(**SMALL), n_pretext_classes=4))
    assert cfgs["projector"]["out_dim"] == 128
