import numpy as np
import pytest

from cardiogcn.errors import ShapeMismatch
from cardiogcn.nn import (CONTAINER_VERSION, AdamConfig, AdamState, Conv2d, Dense, EncoderConfig, adam_step,
                          build_encoder, encode, load_weights, save_weights)


def brute_conv(x, weight, bias, stride, pad):
    """Direct nested-loop cross-correlation, NHWC."""
    b, h, w, c = x.shape
    o, _, k, _ = weight.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    out = np.zeros((b, ho, wo, o))
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                patch = xp[n, i * stride:i * stride + k, j * stride:j * stride + k, :]
                for q in range(o):
                    out[n, i, j, q] = np.sum(patch * weight[q].transpose(1, 2, 0)) + bias[q]
    return out


def test_identity_1x1_conv(rng):
    layer = Conv2d(3, 3, kernel=1, dtype=np.float64)
    layer.params["weight"][:] = np.eye(3)[:, :, None, None]
    x = rng.normal(size=(2, 5, 5, 3))
    assert np.array_equal(layer.forward(x), x)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_loops(rng, stride):
    layer = Conv2d(2, 3, 3, stride, rng=rng, dtype=np.float64)
    layer.params["bias"][:] = rng.normal(size=3)
    x = rng.normal(size=(2, 7, 6, 2))
    ref = brute_conv(x, layer.params["weight"], layer.params["bias"], stride, 1)
    assert np.allclose(layer.forward(x), ref, atol=1e-12)


@pytest.mark.parametrize("size", [7, 8, 33, 64])
def test_stride_two_halves_with_ceil(size):
    layer = Conv2d(1, 1, 3, 2)
    assert layer.output_size(size, size) == (-(-size // 2),) * 2
    assert layer.forward(np.zeros((1, size, size, 1), np.float32)).shape[1:3] == (-(-size // 2),) * 2


def test_conv_rejects_wrong_channels():
    with pytest.raises(ShapeMismatch):
        Conv2d(3, 4).forward(np.zeros((1, 8, 8, 2), np.float32))


def test_zero_dense_gives_bias(rng):
    layer = Dense(5, 4, dtype=np.float64)
    layer.params["weight"][:] = 0
    layer.params["bias"][:] = [1, 2, 3, 4]
    out = layer.forward(rng.normal(size=(3, 5)))
    assert np.array_equal(out, np.tile([1.0, 2, 3, 4], (3, 1)))


def test_adam_zero_grad_keeps_params():
    p = {"w": np.ones(4)}
    state = AdamState()
    for _ in range(5):
        adam_step(p, {"w": np.zeros(4)}, state, AdamConfig(learning_rate=0.1))
    assert np.array_equal(p["w"], np.ones(4))


def test_adam_first_step_is_lr_sign():
    p = {"w": np.zeros(5)}
    g = {"w": np.array([3.0, -0.2, 1e-3, -50.0, 7.0])}
    adam_step(p, g, AdamState(), AdamConfig(learning_rate=0.01))
    assert np.allclose(p["w"], -0.01 * np.sign(g["w"]), rtol=1e-4)


def test_adam_deterministic(rng):
    g = [rng.normal(size=6) for _ in range(10)]

    def run():
        p, state = {"w": np.zeros(6)}, AdamState()
        for gi in g:
            adam_step(p, {"w": gi}, state, AdamConfig(learning_rate=1e-3))
        return p["w"]

    assert np.array_equal(run(), run())


def test_adam_config_validation():
    with pytest.raises(ValueError):
        AdamConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        AdamConfig(beta1=1.0)
    AdamConfig(learning_rate=0.0)


def test_encoder_embedding_shape():
    cfg = EncoderConfig()
    enc = build_encoder(cfg, np.random.default_rng(0))
    assert cfg.feature_shape(256) == (2, 2, 128)
    z = encode(enc, np.zeros((256, 256), np.float32))
    assert z.shape == (128,) and np.isfinite(z).all()
    zb = encode(enc, np.random.default_rng(1).random((3, 256, 256)))
    assert zb.shape == (3, 128)
    gap = build_encoder(EncoderConfig(head="gap"), np.random.default_rng(0))
    assert encode(gap, np.zeros((256, 256))).shape == (128,)


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(blocks=((8, 3),))
    with pytest.raises(ValueError):
        EncoderConfig(head="attention")


def test_weights_container_round_trip(tmp_path, rng):
    tensors = {"a.weight": rng.normal(size=(3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32)}
    path = tmp_path / "w.cgw"
    save_weights(path, tensors, {"k": 1})
    blob = path.read_bytes()
    assert blob[:4] == b"CGW1"
    back, cfg = load_weights(path)
    assert cfg == {"k": 1}
    assert all(np.array_equal(back[k], tensors[k]) for k in tensors)
    bad = tmp_path / "bad.cgw"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        load_weights(bad)
    assert CONTAINER_VERSION == 1
