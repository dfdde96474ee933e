import math

import numpy as np
import pytest
import torch

from flowspeak.flow import (ActNorm, AffineCoupling, FlowDecoder, FlowError, FlowNumericalError,
                            InvertibleMixing, SingularMixingError, prior_logprob, squeeze,
                            squeeze_frames, unsqueeze, unsqueeze_frames)
from oracles import jacobian_fd, relative_error


def random_decoder(channels=4, blocks=2, spk_dim=3, hidden=8, seed=0, dtype=torch.float64, lu=False):
    torch.manual_seed(seed)
    dec = FlowDecoder(in_channels=channels, hidden=hidden, kernel_size=3, n_blocks=blocks, n_layers=2,
                      spk_dim=spk_dim, dropout=0.0, lu=lu).to(dtype)
    gen = torch.Generator().manual_seed(seed)
    dec.randomize_coupling_outputs_(0.3, gen)
    x = torch.randn(2, channels, 8, dtype=dtype, generator=gen)
    dec(x, None, torch.randn(2, spk_dim, dtype=dtype, generator=gen))  # data-dependent init
    return dec.eval()


def test_squeeze_shapes_and_round_trip():
    x = torch.randn(1, 80, 4)
    y, m, trunc = squeeze(x)
    assert y.shape == (1, 160, 2) and not trunc
    back, _ = unsqueeze(y, m)
    assert torch.equal(back, x)


def test_squeeze_odd_truncates_with_flag():
    x = torch.randn(1, 80, 5)
    y, _, trunc = squeeze(x)
    assert y.shape == (1, 160, 2) and trunc
    with pytest.raises(FlowError):
        squeeze(torch.randn(1, 80, 1))


def test_squeeze_stacks_adjacent_frames():
    mel = torch.arange(12.0).reshape(6, 2)  # frames-first (T=6, C=2)
    y, _ = squeeze_frames(mel)
    assert y.tolist() == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9, 10, 11]]
    assert torch.equal(unsqueeze_frames(y), mel)


@torch.no_grad()
def test_actnorm_identity_and_logdet_closed_form():
    an = ActNorm(4, ddi=False).double()
    x = torch.randn(2, 4, 5, dtype=torch.float64)
    mask = torch.ones(2, 1, 5, dtype=torch.float64)
    y, ld = an(x, mask)
    assert torch.equal(y, x) and torch.all(ld == 0)
    with torch.no_grad():
        an.logs.copy_(torch.tensor([0.1, -0.2, 0.3, 0.5], dtype=torch.float64).view(1, 4, 1))
    mask[1, :, 3:] = 0
    _, ld = an(x, mask)
    s = 0.1 - 0.2 + 0.3 + 0.5
    np.testing.assert_allclose(ld.numpy(), [5 * s, 3 * s], rtol=1e-12)


@torch.no_grad()
def test_actnorm_data_dependent_init_normalizes():
    an = ActNorm(3).double()
    x = torch.randn(4, 3, 50, dtype=torch.float64) * torch.tensor([2.0, 0.5, 3.0]).view(1, 3, 1) + 7
    y, _ = an(x, torch.ones(4, 1, 50, dtype=torch.float64))
    np.testing.assert_allclose(y.mean(dim=(0, 2)).numpy(), 0, atol=1e-9)
    np.testing.assert_allclose(y.std(dim=(0, 2), unbiased=False).numpy(), 1, atol=1e-6)


@torch.no_grad()
def test_mixing_logdet_matches_slogdet_and_inverts():
    mix = InvertibleMixing(6).double()
    x = torch.randn(1, 6, 7, dtype=torch.float64)
    mask = torch.ones(1, 1, 7, dtype=torch.float64)
    y, ld = mix(x, mask)
    w = mix.weight.detach().numpy()
    assert math.isclose(float(ld), 7 * np.linalg.slogdet(w)[1], rel_tol=1e-12, abs_tol=1e-12)
    back, _ = mix(y, mask, reverse=True)
    np.testing.assert_allclose(back.numpy(), x.numpy(), atol=1e-12)


def test_lu_mixing_matches_raw():
    mix = InvertibleMixing(6, lu=True).double()
    w, lad = mix.matrix_and_logabsdet()
    np.testing.assert_allclose(float(lad.detach()), np.linalg.slogdet(w.detach().numpy())[1], atol=1e-10)


def test_singular_mixing_names_block():
    mix = InvertibleMixing(4)
    mix.block_index = 7
    with torch.no_grad():
        mix.weight.zero_()
    with pytest.raises(SingularMixingError, match="7"):
        mix(torch.randn(1, 4, 3), torch.ones(1, 1, 3))


def test_zero_init_coupling_is_identity():
    c = AffineCoupling(4, 8, 3, 2, spk_dim=3).double()
    x = torch.randn(2, 4, 6, dtype=torch.float64)
    y, ld = c(x, torch.ones(2, 1, 6, dtype=torch.float64), torch.randn(2, 3, dtype=torch.float64))
    assert torch.equal(y, x) and torch.all(ld == 0)


def test_coupling_round_trip_single_precision():
    torch.manual_seed(3)
    c = AffineCoupling(8, 16, 3, 2, spk_dim=5, zero_init=False)
    x = torch.randn(2, 8, 9)
    g = torch.randn(2, 5)
    mask = torch.ones(2, 1, 9)
    y, ld = c(x, mask, g)
    back, ld_inv = c(y, mask, g, reverse=True)
    assert (back - x).abs().max() < 1e-5
    assert torch.allclose(ld, -ld_inv)


def test_coupling_nonfinite_scale_names_block():
    c = AffineCoupling(4, 8, 3, 2, spk_dim=3, zero_init=False)
    c.block_index = 5
    with torch.no_grad():
        c.end.bias.fill_(float("nan"))
    with pytest.raises(FlowNumericalError, match="5"):
        c(torch.randn(1, 4, 3), torch.ones(1, 1, 3), torch.randn(1, 3))


def test_logdet_matches_finite_difference_jacobian():
    # 2 mel channels x 6 frames -> 4 channels x 3 frames after squeeze
    dec = random_decoder(channels=2)
    assert dec.blocks[0].mixing.weight.shape == (4, 4)
    g = torch.randn(1, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(9))
    x = torch.randn(1, 2, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(10))

    def fn(v):
        with torch.no_grad():
            return dec(torch.as_tensor(v).view(1, 2, 6), None, g).z.numpy()

    jac = jacobian_fd(fn, x.numpy())
    with torch.no_grad():
        analytic = float(dec(x, None, g).logdet)
    assert relative_error(analytic, np.linalg.slogdet(jac)[1]) < 1e-3


def test_logdet_is_sum_of_contributions():
    dec = random_decoder(channels=4, blocks=3)
    st = dec(torch.randn(2, 4, 10, dtype=torch.float64), None, torch.randn(2, 3, dtype=torch.float64))
    total = torch.zeros(2, dtype=torch.float64)
    for c in st.contributions:
        total = total + c
    assert torch.equal(total, st.logdet)
    assert len(st.contributions) == 9


def test_mask_padding_does_not_change_outputs():
    dec = random_decoder(channels=4)
    g = torch.randn(1, 3, dtype=torch.float64)
    x = torch.randn(1, 4, 6, dtype=torch.float64)
    ref = dec(x, torch.ones(1, 1, 6, dtype=torch.float64), g)
    padded = torch.cat([x, torch.randn(1, 4, 4, dtype=torch.float64) * 100], dim=-1)
    mask = torch.cat([torch.ones(1, 1, 6), torch.zeros(1, 1, 4)], dim=-1).double()
    out = dec(padded, mask, g)
    np.testing.assert_allclose(out.z[..., :6].detach().numpy(), ref.z.detach().numpy(), atol=1e-12)
    np.testing.assert_allclose(out.logdet.detach().numpy(), ref.logdet.detach().numpy(), atol=1e-12)
    assert torch.all(out.z[..., 6:] == 0)


def test_speaker_sensitivity():
    dec = random_decoder(channels=4)
    x = torch.randn(1, 4, 8, dtype=torch.float64)
    a = dec(x, None, torch.randn(1, 3, dtype=torch.float64)).z
    b = dec(x, None, torch.randn(1, 3, dtype=torch.float64)).z
    assert (a - b).abs().max() > 1e-6


def test_reset_identity_gives_identity_map():
    dec = random_decoder(channels=4, blocks=3).reset_identity()
    x = torch.randn(1, 4, 8, dtype=torch.float64)
    st = dec(x, None, torch.randn(1, 3, dtype=torch.float64))
    np.testing.assert_allclose(st.z.detach().numpy(), x.numpy(), atol=1e-14)
    assert float(st.logdet.detach().abs().max()) == 0.0


def test_lu_decoder_round_trip():
    dec = random_decoder(channels=4, lu=True)
    x = torch.randn(2, 4, 8, dtype=torch.float64)
    g = torch.randn(2, 3, dtype=torch.float64)
    st = dec(x, None, g)
    assert (dec.inverse(st.z, st.mask, g) - x).abs().max() < 1e-10


def test_shape_checks():
    dec = random_decoder(channels=4)
    with pytest.raises(FlowError):
        dec(torch.randn(1, 5, 8, dtype=torch.float64), None, torch.randn(1, 3, dtype=torch.float64))
    with pytest.raises(FlowError):
        dec(torch.randn(1, 4, 8, dtype=torch.float64), None, torch.randn(1, 4, dtype=torch.float64))


def test_prior_logprob_closed_forms():
    z = torch.randn(1, 3, 4, dtype=torch.float64)
    mask = torch.ones(1, 1, 4, dtype=torch.float64)
    lp = float(prior_logprob(z, z.clone(), mask))
    assert math.isclose(lp, -12 / 2 * math.log(2 * math.pi), rel_tol=1e-14)
    mu = z.clone()
    mu[0, 1, 2] += 1.0
    assert math.isclose(float(prior_logprob(z, mu, mask)), lp - 0.5, rel_tol=1e-14)
    means = torch.randn(1, 3, 4, dtype=torch.float64)
    direct = sum(-0.5 * ((float(z[0, c, t]) - float(means[0, c, t])) ** 2 + math.log(2 * math.pi))
                 for c in range(3) for t in range(4))
    assert math.isclose(float(prior_logprob(z, means, mask)), direct, rel_tol=1e-12)
    with pytest.raises(FlowError):
        prior_logprob(z, means[..., :3], mask)
