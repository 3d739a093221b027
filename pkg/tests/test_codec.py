import numpy as np
import pytest
import torch

from ambisep.codec import CodecConfig, TfCodec, codec_param_count


def test_shapes_and_nonnegative_features():
    codec = TfCodec(CodecConfig(16, 8, 4))
    z = codec.encode(torch.randn(2, 4, 100))
    assert z.shape == (2, 4, 16, (100 - 8) // 4 + 1)
    assert (z >= 0).all()
    assert codec.decode(z, 100).shape == (2, 4, 100)


def test_full_scale_codec_count():
    assert codec_param_count(CodecConfig()) == 16384
    assert sum(p.numel() for p in TfCodec().parameters()) == 16384


def test_channels_share_the_filterbank():
    codec = TfCodec(CodecConfig(8, 8, 4))
    x = torch.randn(1, 50)
    z = codec.encode(torch.stack([x, 2 * x], dim=1))
    assert torch.allclose(z[:, 1], 2 * z[:, 0])


def test_decoder_is_linear():
    codec = TfCodec(CodecConfig(8, 8, 4)).double()
    a, b = torch.rand(2, 8, 12, dtype=torch.float64), torch.rand(2, 8, 12, dtype=torch.float64)
    assert torch.allclose(codec.decode(a + 3 * b, 52), codec.decode(a, 52) + 3 * codec.decode(b, 52))


def test_decode_pads_or_truncates_to_length():
    codec = TfCodec(CodecConfig(8, 8, 4))
    z = torch.rand(1, 8, 5)  # natural length 4*4+8 = 24
    full = codec.decode(z, 24)
    assert torch.allclose(codec.decode(z, 20), full[..., :20])
    longer = codec.decode(z, 30)
    assert torch.equal(longer[..., 24:], torch.zeros(1, 6))


def test_overlap_add_by_hand():
    codec = TfCodec(CodecConfig(1, 4, 2)).double()
    with torch.no_grad():
        codec.decoder.copy_(torch.tensor([[[1.0, 2.0, 3.0, 4.0]]]))
    y = codec.decode(torch.tensor([[[1.0, 10.0]]], dtype=torch.float64), 6)
    np.testing.assert_allclose(y.detach().numpy()[0], [1, 2, 13, 24, 30, 40])


def test_errors():
    with pytest.raises(ValueError):
        CodecConfig(8, 4, 8)
    with pytest.raises(ValueError):
        TfCodec(CodecConfig(8, 8, 4)).encode(torch.zeros(1, 5))
    with pytest.raises(ValueError):
        TfCodec(CodecConfig(8, 8, 4)).decode(torch.zeros(1, 7, 5), 24)
