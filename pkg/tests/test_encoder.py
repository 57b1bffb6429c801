import numpy as np
import pytest

from piptrack.config import ModelConfig
from piptrack.encoder import Encoder, encode_frames
from piptrack.tensor import Tensor, no_grad


def _frames(T=3, H=32, W=48, seed=0):
    return np.random.default_rng(seed).random((T, 3, H, W)).astype(np.float32)


def test_toy_shape_stride_four():
    cfg = ModelConfig(C=32, stride=4)
    enc = Encoder(cfg, np.random.default_rng(0))
    with no_grad():
        fm = encode_frames(enc, Tensor(_frames(2, 64, 96)), cfg)
    assert fm.feats.shape == (2, 32, 16, 24)
    assert fm.stride == 4


def test_full_scale_shape():
    cfg = ModelConfig.full()
    enc = Encoder(cfg, np.random.default_rng(0))
    with no_grad():
        fm = encode_frames(enc, Tensor(np.zeros((1, 3, 368, 512), dtype=np.float32)), cfg)
    assert fm.feats.shape == (1, 256, 46, 64)


def test_stride_can_change_at_inference():
    cfg = ModelConfig(C=16, stride=8, encoder_widths=(8, 8, 16))
    enc = Encoder(cfg, np.random.default_rng(0))
    x = Tensor(_frames(1, 32, 48))
    with no_grad():
        f8 = encode_frames(enc, x, cfg).feats
        f4 = encode_frames(enc, x, cfg, stride=4).feats
    assert f8.shape == (1, 16, 4, 6)
    assert f4.shape == (1, 16, 8, 12)
    assert enc.stage_strides(8) == [1, 2, 2]
    assert enc.stage_strides(4) == [1, 2, 1]


def test_non_divisible_size_asks_for_padding():
    cfg = ModelConfig(C=16, encoder_widths=(8, 8, 16))
    enc = Encoder(cfg, np.random.default_rng(0))
    with pytest.raises(ValueError, match="pad"):
        encode_frames(enc, Tensor(_frames(1, 30, 48)), cfg)


def test_frames_are_processed_independently():
    cfg = ModelConfig(C=16, encoder_widths=(8, 8, 16))
    enc = Encoder(cfg, np.random.default_rng(0))
    frames = _frames(4)
    frames[2] = frames[0]
    perm = [3, 1, 0, 2]
    with no_grad():
        out = encode_frames(enc, Tensor(frames), cfg).feats.data
        outp = encode_frames(enc, Tensor(frames[perm]), cfg).feats.data
    assert np.array_equal(out[2], out[0])
    np.testing.assert_allclose(outp, out[perm], rtol=1e-5, atol=1e-5)


def test_batched_video_layout():
    cfg = ModelConfig(C=16, encoder_widths=(8, 8, 16))
    enc = Encoder(cfg, np.random.default_rng(0))
    v = np.stack([_frames(2, seed=1), _frames(2, seed=2)])
    with no_grad():
        fm = encode_frames(enc, Tensor(v), cfg)
    assert fm.feats.shape == (2, 2, 16, 8, 12)
