"""Central finite-difference checks of every hand-written backward pass.

All checks run in float64.  The error of a tensor is the norm-wise relative
error ``|analytic - numeric| / max(|analytic|, |numeric|)`` over the checked
entries (a random subset for large tensors).
"""
import numpy as np

from .gcn import DecoderConfig, GCNModel, RingConv, keypoint_loss, targets_from
from .keypoints import SamplingConfig
from .nn import Conv2d, Dense, EncoderConfig

F64 = np.float64


def rel_error(analytic, numeric):
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def _entries(arr, max_entries, rng):
    if arr.size <= max_entries:
        return np.arange(arr.size)
    return np.sort(rng.choice(arr.size, size=max_entries, replace=False))


def numeric_grad(f, arr, idx, step):
    flat = arr.reshape(-1)
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * step)
    return out


def check_conv(seed=0, stride=2, step=1e-3):
    rng = np.random.default_rng(seed)
    layer = Conv2d(3, 4, 3, stride, rng=rng, dtype=F64)
    x = rng.normal(size=(2, 8, 8, 3))
    r = rng.normal(size=(2,) + layer.output_size(8, 8) + (4,))

    def f():
        return float((layer.forward(x) * r).sum())

    layer.zero_grad()
    layer.forward(x)
    gx = layer.backward(r)
    errs = {"input": rel_error(gx, numeric_grad(f, x, np.arange(x.size), step))}
    for k, p in layer.params.items():
        errs[k] = rel_error(layer.grads[k], numeric_grad(f, p, np.arange(p.size), step))
    return errs


def check_dense(seed=0, step=1e-3):
    rng = np.random.default_rng(seed)
    layer = Dense(6, 5, rng=rng, dtype=F64)
    layer.params["bias"][:] = rng.normal(size=5)
    x = rng.normal(size=(3, 6))
    r = rng.normal(size=(3, 5))

    def f():
        return float((layer.forward(x) * r).sum())

    layer.zero_grad()
    layer.forward(x)
    gx = layer.backward(r)
    errs = {"input": rel_error(gx, numeric_grad(f, x, np.arange(x.size), step))}
    for k, p in layer.params.items():
        errs[k] = rel_error(layer.grads[k], numeric_grad(f, p, np.arange(p.size), step))
    return errs


def check_ring(seed=0, channels=4, w=64, v=3, step=1e-6, max_entries=300):
    rng = np.random.default_rng(seed)
    size = 64
    pad = np.zeros(size, dtype=bool)
    pad[43:] = True
    layer = RingConv(channels, channels, w, v, size, pad, rng=rng, dtype=F64)
    layer.params["inner_bias"][:] = rng.normal(size=channels) * 0.1
    layer.params["outer_bias"][:] = rng.normal(size=channels) * 0.1
    inner = rng.normal(size=(2, size, channels))
    outer = rng.normal(size=(2, size, channels))
    outer[:, pad] = 0.0
    ri = rng.normal(size=inner.shape)
    ro = rng.normal(size=outer.shape)

    def f():
        a, b = layer.forward(inner, outer)
        return float((a * ri).sum() + (b * ro).sum())

    layer.zero_grad()
    layer.forward(inner, outer)
    gi, go = layer.backward(ri, ro)
    errs = {
        "inner": rel_error(gi, numeric_grad(f, inner, np.arange(inner.size), step)),
        "outer": rel_error(go, numeric_grad(f, outer, np.arange(outer.size), step)),
    }
    for k, p in layer.params.items():
        idx = _entries(p, max_entries, rng)
        errs[k] = rel_error(layer.grads[k].ravel()[idx], numeric_grad(f, p, idx, step))
    return errs


def check_loss(seed=0, step=1e-6, displacement=True):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(size=(2, 107, 2))
    target = rng.uniform(size=(2, 107, 2))
    pd = rng.uniform(size=(2, 43)) if displacement else None
    td = rng.uniform(size=(2, 43)) if displacement else None

    def f():
        return keypoint_loss(pred, target, pd, td)[0]

    _, g, gd = keypoint_loss(pred, target, pd, td)
    errs = {"pred": rel_error(g, numeric_grad(f, pred, np.arange(pred.size), step))}
    if displacement:
        errs["disp"] = rel_error(gd, numeric_grad(f, pd, np.arange(pd.size), step))
    return errs


def reduced_model(displacement=True, channels=(4, 2), seed=0):
    enc = EncoderConfig(blocks=((4, 2), (8, 2)), embedding_size=16, input_pool=1, coord_channels=True)
    dec = DecoderConfig(channels=channels, secondary_field=1, displacement_head=displacement)
    return GCNModel(enc, dec, SamplingConfig(), seed=seed, image_size=32, dtype=F64)


def _reference_targets(rng, batch):
    """Smooth ring-shaped targets so normals are well defined."""
    from .keypoints import KeypointSet

    out = []
    for _ in range(batch):
        c = rng.uniform(0.4, 0.6, size=2)
        th = np.linspace(0.2 * np.pi, 1.8 * np.pi, 43)
        r = rng.uniform(0.15, 0.2)
        endo = c + r * np.stack([np.sin(th), -np.cos(th)], axis=1)
        epi = c + (r + 0.05) * np.stack([np.sin(th), -np.cos(th)], axis=1)
        phi = np.linspace(-0.8, 0.8, 21)
        la = c + np.stack([0.1 * np.sin(phi), 0.25 + 0.05 * np.cos(phi)], axis=1)
        out.append(KeypointSet(endo=endo, epi=epi, la=la, width=32, height=32))
    return out


def check_heads(seed=0, step=1e-6, max_entries=200):
    """Gradients of the head parameters (coordinate + displacement) through the loss."""
    return check_end_to_end(seed=seed, step=step, max_entries=max_entries, only=("inner_head", "outer_head"))


def check_end_to_end(seed=0, displacement=True, step=1e-6, max_entries=60, only=None, batch=2):
    rng = np.random.default_rng(seed)
    model = reduced_model(displacement=displacement, seed=seed)
    for name, p in model.parameters().items():
        if name.endswith("bias"):
            p[...] = rng.normal(size=p.shape) * 0.5
    images = rng.uniform(size=(batch, 32, 32))
    pts, disp = targets_from(_reference_targets(rng, batch))

    def f():
        return model.batch_loss(images, pts, disp)

    model.loss_and_backward(images, pts, disp)
    grads = {k: v.copy() for k, v in model.gradients().items()}
    errs = {}
    for name, p in model.parameters().items():
        if only is not None and not name.startswith(only):
            continue
        idx = _entries(p, max_entries, rng)
        errs[name] = rel_error(grads[name].ravel()[idx], numeric_grad(f, p, idx, step))
    return errs


def run_all(seed=0):
    """Every check; returns ``{group: {tensor: error}}``."""
    return {
        "conv": check_conv(seed),
        "conv_stride1": check_conv(seed, stride=1),
        "dense": check_dense(seed),
        "ring_conv": check_ring(seed),
        "loss": check_loss(seed),
        "loss_no_disp": check_loss(seed, displacement=False),
        "heads": check_heads(seed),
        "end_to_end": check_end_to_end(seed),
        "end_to_end_coord": check_end_to_end(seed, displacement=False),
    }
