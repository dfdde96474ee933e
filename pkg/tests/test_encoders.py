import inspect

import pytest
import torch

from flowspeak.encoders import (ENCODERS, DurationPredictor, EncoderError, build_encoder,
                                durations_from_log)
from flowspeak.model import ModelConfig

VARIANTS = sorted(ENCODERS)


def make(variant, seed=0):
    torch.manual_seed(seed)
    kw = ModelConfig(n_vocab=10, n_mels=6, encoder_variant=variant, encoder_channels=16,
                     encoder_blocks=2, encoder_dropout=0.0, transformer_filter=32).encoder_kwargs()
    return build_encoder(variant, 10, **kw).double().eval()


@pytest.mark.parametrize("variant", VARIANTS)
def test_output_contract(variant):
    enc = make(variant)
    ids = torch.randint(3, 10, (2, 7))
    out = enc(ids, torch.tensor([7, 4]))
    assert out.hidden.shape == (2, 16, 7)
    assert out.prior_mean.shape == (2, 6, 7)
    assert out.mask.shape == (2, 1, 7)
    assert torch.all(out.prior_mean[1, :, 4:] == 0) and torch.all(out.hidden[1, :, 4:] == 0)


@pytest.mark.parametrize("variant", VARIANTS)
def test_padding_does_not_leak(variant):
    enc = make(variant)
    ids = torch.randint(3, 10, (1, 5))
    short = enc(ids).prior_mean
    padded = torch.cat([ids, torch.randint(3, 10, (1, 4))], dim=1)
    long = enc(padded, torch.tensor([5])).prior_mean
    assert torch.allclose(long[..., :5], short, atol=1e-10)


@pytest.mark.parametrize("variant", VARIANTS)
def test_encoder_takes_no_speaker_input(variant):
    params = inspect.signature(make(variant).forward).parameters
    assert list(params) == ["ids", "lengths"]


@pytest.mark.parametrize("variant", VARIANTS)
def test_encoder_input_errors(variant):
    enc = make(variant)
    with pytest.raises(EncoderError):
        enc(torch.zeros(5, dtype=torch.long))
    with pytest.raises(EncoderError):
        enc(torch.zeros(1, 2000, dtype=torch.long))
    with pytest.raises(EncoderError):
        enc(torch.zeros(2, 3, dtype=torch.long), torch.tensor([3, 0]))


def test_unknown_variant():
    with pytest.raises(EncoderError, match="trans"):
        build_encoder("lstm", 10)


def test_residual_default_dilations():
    enc = build_encoder("res", 10, channels=8, out_channels=4)
    assert [b.conv.dilation[0] for b in enc.blocks] == [1, 2, 4] * 4 + [1]


def test_duration_predictor_detaches_hidden_and_uses_speaker():
    torch.manual_seed(0)
    dp = DurationPredictor(8, 3, 16, 3, 0.0).double()
    hidden = torch.randn(2, 8, 5, dtype=torch.float64, requires_grad=True)
    spk = torch.randn(2, 3, dtype=torch.float64)
    mask = torch.ones(2, 1, 5, dtype=torch.float64)
    out = dp(hidden, spk, mask)
    assert out.shape == (2, 5)
    out.sum().backward()
    assert hidden.grad is None
    assert not torch.allclose(dp(hidden, spk + 1, mask), out)
    with pytest.raises(EncoderError):
        dp(hidden, torch.randn(2, 4, dtype=torch.float64), mask)


def test_duration_predictor_masks_padding():
    dp = DurationPredictor(8, 3, 16, 3, 0.0).double()
    mask = torch.tensor([[[1.0, 1.0, 1.0, 0.0]]], dtype=torch.float64)
    out = dp(torch.randn(1, 8, 4, dtype=torch.float64), torch.randn(1, 3, dtype=torch.float64), mask)
    assert out[0, 3] == 0


def test_durations_from_log_floor_and_scale():
    log_d = torch.log(torch.tensor([[0.2, 1.0, 2.5, 4.0]], dtype=torch.float64))
    mask = torch.tensor([[[1.0, 1.0, 1.0, 0.0]]], dtype=torch.float64)
    assert durations_from_log(log_d, mask).tolist() == [[1, 1, 3, 0]]
    assert durations_from_log(log_d, mask, 2.0).tolist() == [[1, 2, 5, 0]]
