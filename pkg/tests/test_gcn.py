import numpy as np
import pytest

from cardiogcn.anatomy import ring_crossing_free
from cardiogcn.errors import EmptyDataset, LayoutMismatch
from cardiogcn.gcn import (ABLATION_VARIANTS, DecoderConfig, GCNModel, RingConv, RingTopology, gcn_forward,
                           keypoint_loss, loss, mean_keypoint_error_px, ring_windows, targets_from, train)
from cardiogcn.gradcheck import run_all
from cardiogcn.keypoints import DisplacementSet, KeypointSet, to_displacement
from cardiogcn.nn import AdamConfig, EncoderConfig
from cardiogcn.phantom import AugmentConfig

SMALL_ENC = EncoderConfig(blocks=((4, 2), (8, 2)), embedding_size=16, input_pool=4)


def small(decoder=None, seed=0):
    return GCNModel(SMALL_ENC, decoder, seed=seed, image_size=64)


def test_default_topology():
    topo = RingTopology()
    assert (topo.n_ring, topo.n_la, topo.inner_size) == (43, 21, 64)
    assert topo.pad_mask.sum() == 21 and not topo.pad_mask[:43].any()
    assert sorted(topo.la_slots.tolist()) == list(range(43, 64))


def test_ring_windows_centred():
    idx = ring_windows(10, 3)
    assert idx[0].tolist() == [9, 0, 1] and idx[9].tolist() == [8, 9, 0]
    assert ring_windows(64, 64)[5].tolist() == [(5 - 32 + j) % 64 for j in range(64)]


def test_ring_zero_weights_give_relu_bias(rng):
    pad = np.zeros(64, bool)
    pad[43:] = True
    layer = RingConv(3, 4, 64, 1, 64, pad, dtype=np.float64)
    for k in ("inner_weight", "outer_weight"):
        layer.params[k][:] = 0
    layer.params["inner_bias"][:] = [-1, 0.5, 2, -0.1]
    layer.params["outer_bias"][:] = [0.3, -2, 1, 0]
    a, b = layer.forward(rng.normal(size=(2, 64, 3)), rng.normal(size=(2, 64, 3)))
    assert np.array_equal(a, np.broadcast_to([0, 0.5, 2, 0], a.shape))
    assert np.array_equal(b[:, :43], np.broadcast_to([0.3, 0, 1, 0], (2, 43, 4)))
    assert (b[:, 43:] == 0).all()


def test_ring_circular_equivariance(rng):
    layer = RingConv(3, 5, 64, 3, 64, None, rng=rng, dtype=np.float64)
    x, y = rng.normal(size=(1, 64, 3)), rng.normal(size=(1, 64, 3))
    a, b = layer.forward(x, y)
    for k in (1, 17):
        ar, br = layer.forward(np.roll(x, k, axis=1), np.roll(y, k, axis=1))
        assert np.allclose(ar, np.roll(a, k, axis=1)) and np.allclose(br, np.roll(b, k, axis=1))


def test_output_sizes_and_parameter_count():
    model = GCNModel()
    assert model.parameter_count() == 455303
    out = model.forward(np.zeros((2, 256, 256), np.float32))
    assert out["endo"].shape == (2, 43, 2) and out["la"].shape == (2, 21, 2) and out["disp"].shape == (2, 43)
    pred, _ = model.materialize(out)
    assert pred.shape == (2, 107, 2)


def test_predict_in_frame_and_crossing_free(rng):
    model = small(seed=3)
    for kps, ds in model.predict(rng.uniform(size=(4, 64, 64)) * 5):
        assert isinstance(ds, DisplacementSet)
        for arr in (kps.endo, kps.epi, kps.la):
            assert arr.min() >= 0 and arr.max() <= 1
        assert ring_crossing_free(kps)
        assert (ds.disp > 0).all()


def test_coordinate_head_output():
    model = small(DecoderConfig(displacement_head=False))
    out = gcn_forward(model, np.zeros((64, 64)))
    assert isinstance(out, KeypointSet) and out.count == 107


@pytest.mark.parametrize("name", sorted(ABLATION_VARIANTS))
def test_variants_instantiate(name):
    for head in (True, False):
        dec = DecoderConfig(**{**ABLATION_VARIANTS[name].to_dict(), "displacement_head": head})
        model = small(dec)
        assert len(model.rings) == len(dec.channels)
        kps, _ = model.predict(np.zeros((1, 64, 64)))[0]
        assert kps.count == 107


def test_decoder_config_validation():
    with pytest.raises(ValueError):
        DecoderConfig(secondary_field=2)
    with pytest.raises(ValueError):
        DecoderConfig(primary_field=65).w(RingTopology())


def test_loss_values():
    zero = np.zeros((1, 107, 2))
    assert keypoint_loss(zero, zero)[0] == 0.0
    target = zero.copy()
    target[0, 0] = [0.3, 0.4]
    assert np.isclose(keypoint_loss(zero, target)[0], 0.5)
    value, _, _ = keypoint_loss(zero, zero, np.full((1, 43), 0.2), np.zeros((1, 43)))
    assert np.isclose(value, 0.2)
    with pytest.raises(LayoutMismatch):
        keypoint_loss(zero, np.zeros((1, 106, 2)))


def test_loss_on_sets(phantom):
    kps = phantom[2]
    assert loss(kps, kps) == 0.0
    assert loss(to_displacement(kps), to_displacement(kps)) == 0.0
    with pytest.raises(LayoutMismatch):
        loss(kps, to_displacement(kps))


def test_mean_keypoint_error_px():
    a = np.zeros((1, 2, 2))
    b = a + np.array([3, 4]) / 256
    assert np.isclose(mean_keypoint_error_px(a, b), 5.0)


def test_gradients_pass_finite_difference():
    for group, errs in run_all().items():
        limit = 1e-3 if group.startswith("end_to_end") else 1e-4
        assert max(errs.values()) < limit, group


def _tiny_dataset(phantoms, n=8):
    return [(img, kps) for img, _, kps in phantoms[:n]]


def test_training_reduces_loss(phantoms):
    ds = _tiny_dataset(phantoms)
    model = GCNModel(seed=0)
    res = train(model, ds, 60, seed=0, adam_cfg=AdamConfig(learning_rate=1e-3),
                augment_cfg=AugmentConfig.identity())
    assert res.best_val_loss < 0.5 * res.history[0]["train_loss"]
    windows = np.array([h["train_loss"] for h in res.history]).reshape(6, 10).mean(axis=1)
    assert (np.diff(windows) < 0).all()
    pts, disp = targets_from([k for _, k in ds])
    assert np.isclose(model.batch_loss(np.stack([i for i, _ in ds]), pts, disp), res.best_val_loss, rtol=1e-4)


def test_training_deterministic(phantoms):
    ds = _tiny_dataset(phantoms, 4)

    def run():
        model = small(seed=1)
        imgs = [(img[::4, ::4], kps) for img, kps in ds]
        return train(model, imgs, 3, seed=5, adam_cfg=AdamConfig(learning_rate=1e-3), batch_size=2).history

    assert run() == run()


def test_zero_learning_rate_keeps_parameters(phantoms):
    model = small(seed=2)
    before = {k: v.copy() for k, v in model.parameters().items()}
    ds = [(img[::4, ::4], kps) for img, _, kps in phantoms[:3]]
    train(model, ds, 2, adam_cfg=AdamConfig(learning_rate=0.0))
    assert all(np.array_equal(before[k], v) for k, v in model.parameters().items())


def test_empty_dataset():
    with pytest.raises(EmptyDataset):
        train(small(), [], 1)


def test_save_load_round_trip(tmp_path, rng):
    model = small(DecoderConfig(channels=(8, 4), secondary_field=3), seed=4)
    path = tmp_path / "m.cgw"
    model.save(path)
    back = GCNModel.load(path)
    x = rng.uniform(size=(2, 64, 64))
    a, b = model.forward(x), back.forward(x)
    assert all(np.array_equal(a[k], b[k]) for k in a)
