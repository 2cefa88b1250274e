"""Dual-ring graph-convolutional keypoint decoder.

Ring layout (defaults)::

    inner ring, 64 slots:  0..42 endo (A..E..B), 43..63 LA from the B side back to the A side
    outer ring, 64 slots:  0..42 epi  (C..F..D), 43..63 zero padding

The dense projection targets all 128 slots; padded outer slots are forced to
zero before every ring layer and ignored at the output.
"""
import copy
import logging
from dataclasses import dataclass, asdict, field

import numpy as np

from .errors import EmptyDataset, LayoutMismatch, ShapeMismatch
from .imaging import rasterize_keypoints
from .keypoints import (EPS_DISP, DisplacementSet, KeypointSet, SamplingConfig, from_displacement,
                        to_displacement)
from .nn import (DTYPE, AdamConfig, AdamState, Dense, EncoderConfig, Module, adam_step,
                 build_encoder, he_uniform, load_weights, save_weights)
from .phantom import AugmentConfig, augment

log = logging.getLogger(__name__)

TOPOLOGY_VERSION = 1


@dataclass(frozen=True)
class RingTopology:
    n_side: int = 20
    m_side: int = 10

    @property
    def n_ring(self):
        return 2 * self.n_side + 3

    @property
    def n_la(self):
        return 2 * self.m_side + 1

    @property
    def inner_size(self):
        return self.n_ring + self.n_la

    @property
    def outer_size(self):
        return self.inner_size

    @property
    def pad_mask(self):
        mask = np.zeros(self.outer_size, dtype=bool)
        mask[self.n_ring:] = True
        return mask

    @property
    def la_slots(self):
        """Inner-ring slot of each LA keypoint (LA array order A side -> G -> B side)."""
        return self.inner_size - 1 - np.arange(self.n_la)

    @property
    def endo_slots(self):
        return np.arange(self.n_ring)


@dataclass(frozen=True)
class DecoderConfig:
    channels: tuple = (8, 4)
    primary_field: int = None  # defaults to the inner ring size (w = n + m)
    secondary_field: int = 1
    displacement_head: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.channels and self.secondary_field < 1:
            raise ValueError("secondary receptive field must be >= 1")
        if self.channels and self.secondary_field % 2 == 0:
            raise ValueError("secondary receptive field must be odd")

    def w(self, topology):
        w = topology.inner_size if self.primary_field is None else self.primary_field
        if not 1 <= w <= topology.inner_size:
            raise ValueError(f"primary receptive field {w} must be in [1, {topology.inner_size}]")
        return w

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


# Decoder variants of the ablation table
ABLATION_VARIANTS = {
    "48-4_v11": DecoderConfig(channels=(48, 32, 32, 16, 16, 8, 8, 4), secondary_field=11),
    "32-4_v5": DecoderConfig(channels=(32, 16, 8, 4), secondary_field=5),
    "8-4_v1": DecoderConfig(channels=(8, 4), secondary_field=1),
    "none": DecoderConfig(channels=()),
}


def ring_windows(size, width):
    """(size, width) circular neighbour indices: slot i sees i - width//2 ... i + width - width//2 - 1."""
    return (np.arange(size)[:, None] + np.arange(width)[None, :] - width // 2) % size


class RingConv(Module):
    """One multi-structure ring convolution (distinct inner/outer weights, ReLU)."""

    def __init__(self, c_in, c_out, w, v, size, pad_mask=None, rng=None, dtype=DTYPE):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out, self.w, self.v, self.size = c_in, c_out, w, v, size
        self.pad_mask = pad_mask
        self.idx_w = ring_windows(size, w)
        self.idx_v = ring_windows(size, v)
        fan_in = (w + v) * c_in
        self.params = {
            "inner_weight": he_uniform(rng, (fan_in, c_out), fan_in, dtype),
            "inner_bias": np.zeros(c_out, dtype=dtype),
            "outer_weight": he_uniform(rng, (fan_in, c_out), fan_in, dtype),
            "outer_bias": np.zeros(c_out, dtype=dtype),
        }
        self.zero_grad()

    def _gather(self, same, other):
        b = same.shape[0]
        a = same[:, self.idx_w].reshape(b, self.size, self.w * self.c_in)
        o = other[:, self.idx_v].reshape(b, self.size, self.v * self.c_in)
        return np.concatenate([a, o], axis=2)

    def forward(self, inner, outer):
        expect = (self.size, self.c_in)
        if inner.shape[1:] != expect or outer.shape[1:] != expect:
            raise ShapeMismatch(f"ring layer expects (B, {self.size}, {self.c_in}), got {inner.shape}/{outer.shape}")
        xi = self._gather(inner, outer)
        xo = self._gather(outer, inner)
        pi = xi @ self.params["inner_weight"] + self.params["inner_bias"]
        po = xo @ self.params["outer_weight"] + self.params["outer_bias"]
        mi, mo = pi > 0, po > 0
        if self.pad_mask is not None:
            mo[:, self.pad_mask] = False
        self._cache = (xi, xo, mi, mo)
        return pi * mi, po * mo

    def _scatter(self, dx, width, idx, out):
        b = dx.shape[0]
        np.add.at(out, (slice(None), idx), dx.reshape(b, self.size, width, self.c_in))

    def backward(self, g_inner, g_outer):
        xi, xo, mi, mo = self._cache
        gi, go = g_inner * mi, g_outer * mo
        b = gi.shape[0]
        self.grads["inner_weight"] += xi.reshape(-1, xi.shape[2]).T @ gi.reshape(-1, self.c_out)
        self.grads["inner_bias"] += gi.sum(axis=(0, 1))
        self.grads["outer_weight"] += xo.reshape(-1, xo.shape[2]).T @ go.reshape(-1, self.c_out)
        self.grads["outer_bias"] += go.sum(axis=(0, 1))
        dxi = gi @ self.params["inner_weight"].T
        dxo = go @ self.params["outer_weight"].T
        split = self.w * self.c_in
        d_inner = np.zeros((b, self.size, self.c_in), dtype=gi.dtype)
        d_outer = np.zeros_like(d_inner)
        self._scatter(dxi[..., :split], self.w, self.idx_w, d_inner)
        self._scatter(dxi[..., split:], self.v, self.idx_v, d_outer)
        self._scatter(dxo[..., :split], self.w, self.idx_w, d_outer)
        self._scatter(dxo[..., split:], self.v, self.idx_v, d_inner)
        return d_inner, d_outer


def ring_conv_layer(layer, inner, outer):
    """Functional form of :class:`RingConv` for a single sample ``(64, C)`` pair."""
    a, b = layer.forward(inner[None], outer[None])
    return a[0], b[0]


# ---------------------------------------------------------------------------
# differentiable normals / displacement

def batch_normals(ring):
    """Outward normals of (B, N, 2) open rings plus what backward needs.

    Same definition as :func:`keypoints.outward_normals` with ``fallback=True``.
    """
    t = np.empty_like(ring)
    t[:, 1:-1] = ring[:, 2:] - ring[:, :-2]
    t[:, 0] = ring[:, 1] - ring[:, 0]
    t[:, -1] = ring[:, -1] - ring[:, -2]
    norm = np.sqrt(t[..., 0] ** 2 + t[..., 1] ** 2)
    bad = norm < 1e-12
    safe = np.where(bad, 1.0, norm)
    u = t / safe[..., None]
    n = np.stack([u[..., 1], -u[..., 0]], axis=-1)
    radial = ring - ring.mean(axis=1, keepdims=True)
    rn = np.sqrt((radial ** 2).sum(-1))
    rsafe = np.where(rn > 1e-12, rn, 1.0)
    if bad.any():
        unit = np.where((rn > 1e-12)[..., None], radial / rsafe[..., None],
                        np.array([0.0, -1.0], dtype=ring.dtype))
        n = np.where(bad[..., None], unit, n)
    sign = np.where((n * radial).sum(-1) < 0, -1.0, 1.0).astype(ring.dtype)
    n = n * sign[..., None]
    return n, (u, safe, sign, bad, radial / rsafe[..., None], rsafe, bad & (rn > 1e-12))


def batch_normals_backward(g_n, aux):
    u, norm, sign, bad, r_unit, r_norm, radial_used = aux
    g_ring = np.zeros_like(g_n)
    if radial_used.any():
        # fallback normal = sign * (p_i - centroid) / |p_i - centroid|
        g_ru = np.where(radial_used[..., None], g_n * sign[..., None], 0.0)
        g_r = (g_ru - r_unit * (g_ru * r_unit).sum(-1, keepdims=True)) / r_norm[..., None]
        g_ring += g_r - g_r.sum(axis=1, keepdims=True) / g_r.shape[1]
    # n = sign * R u with R(u) = (u_y, -u_x); du = (I - u u^T) dt / |t|
    g_u = np.stack([-g_n[..., 1], g_n[..., 0]], axis=-1) * sign[..., None]
    g_u = np.where(bad[..., None], 0.0, g_u)
    g_t = (g_u - u * (g_u * u).sum(-1, keepdims=True)) / norm[..., None]
    g_ring[:, 2:] += g_t[:, 1:-1]
    g_ring[:, :-2] -= g_t[:, 1:-1]
    g_ring[:, 1] += g_t[:, 0]
    g_ring[:, 0] -= g_t[:, 0]
    g_ring[:, -1] += g_t[:, -1]
    g_ring[:, -2] -= g_t[:, -1]
    return g_ring


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# loss

def keypoint_loss(pred, target, pred_disp=None, target_disp=None):
    """Per-sample loss and gradients.

    ``pred``/``target`` are (B, K, 2) keypoint arrays; the displacement term is
    the mean absolute error over the displacement entries.  Returns
    ``(mean loss over batch, d/d pred, d/d pred_disp)``.
    """
    if pred.shape != target.shape:
        raise LayoutMismatch(f"prediction {pred.shape} vs target {target.shape}")
    b = pred.shape[0]
    diff = pred - target
    dist = np.sqrt((diff ** 2).sum(-1))
    loss = dist.sum(axis=1)
    g = np.where(dist[..., None] > 0, diff / np.where(dist > 0, dist, 1.0)[..., None], 0.0) / b
    g_disp = None
    if pred_disp is not None:
        if target_disp is None or pred_disp.shape != target_disp.shape:
            raise LayoutMismatch("displacement prediction and target disagree")
        dd = pred_disp - target_disp
        loss = loss + np.abs(dd).mean(axis=1)
        g_disp = np.sign(dd) / dd.shape[1] / b
    return float(loss.mean()), g.astype(pred.dtype), None if g_disp is None else g_disp.astype(pred.dtype)


def loss(pred, target):
    """Loss between two keypoint layouts (KeypointSet or DisplacementSet pairs)."""
    if isinstance(pred, DisplacementSet) != isinstance(target, DisplacementSet):
        raise LayoutMismatch("prediction and target must both carry displacements or neither")
    if isinstance(pred, DisplacementSet):
        pk, tk = from_displacement(pred, fallback=True), from_displacement(target, fallback=True)
        value, _, _ = keypoint_loss(pk.all_points()[None], tk.all_points()[None],
                                    pred.disp[None], target.disp[None])
        return value
    if pred.count != target.count:
        raise LayoutMismatch(f"{pred.count} vs {target.count} keypoints")
    value, _, _ = keypoint_loss(pred.all_points()[None], target.all_points()[None])
    return value


# ---------------------------------------------------------------------------
# model

class GCNModel:
    """Encoder + dense projection + ring layers + coordinate/displacement heads."""

    def __init__(self, encoder_cfg=None, decoder_cfg=None, sampling_cfg=None, seed=0, image_size=256,
                 dtype=DTYPE):
        self.encoder_cfg = encoder_cfg or EncoderConfig()
        self.decoder_cfg = decoder_cfg or DecoderConfig()
        self.sampling_cfg = sampling_cfg or SamplingConfig()
        self.image_size = image_size
        self.topology = RingTopology(self.sampling_cfg.n_side, self.sampling_cfg.m_side)
        self.seed = seed
        self.dtype = dtype
        self._build(np.random.default_rng(seed))

    def _build(self, rng):
        topo, dec = self.topology, self.decoder_cfg
        s = topo.inner_size
        self.encoder = build_encoder(self.encoder_cfg, rng, self.dtype, self.image_size)
        x = self.encoder_cfg.embedding_size
        c1 = dec.channels[0] if dec.channels else 3
        self.proj_channels = c1
        self.projection = Dense(x, 2 * s * c1, rng=rng, dtype=self.dtype)
        self.rings = []
        if dec.channels:
            w = dec.w(topo)
            prev = c1
            for c in dec.channels:
                self.rings.append(RingConv(prev, c, w, dec.secondary_field, s, topo.pad_mask, rng, self.dtype))
                prev = c
            self.inner_head = Dense(prev, 3 if dec.displacement_head else 2, rng=rng, dtype=self.dtype)
            self.outer_head = None if dec.displacement_head else Dense(prev, 2, rng=rng, dtype=self.dtype)
        else:
            self.inner_head = self.outer_head = None

    # -- parameter plumbing ------------------------------------------------
    def modules(self):
        mods = {"encoder": self.encoder, "projection": self.projection}
        for i, r in enumerate(self.rings):
            mods[f"ring{i}"] = r
        if self.inner_head is not None:
            mods["inner_head"] = self.inner_head
        if self.outer_head is not None:
            mods["outer_head"] = self.outer_head
        return mods

    def _leaf_modules(self):
        for prefix, mod in self.modules().items():
            if hasattr(mod, "layers"):
                for i, layer in enumerate(mod.layers):
                    if layer.params:
                        yield f"{prefix}.{i}", layer
            else:
                yield prefix, mod

    def parameters(self):
        return {f"{p}.{k}": v for p, m in self._leaf_modules() for k, v in m.params.items()}

    def gradients(self):
        return {f"{p}.{k}": m.grads[k] for p, m in self._leaf_modules() for k in m.params}

    def set_parameters(self, tensors):
        for p, m in self._leaf_modules():
            for k in m.params:
                name = f"{p}.{k}"
                if name not in tensors:
                    raise KeyError(f"missing tensor {name}")
                if tensors[name].shape != m.params[k].shape:
                    raise ShapeMismatch(f"{name}: {tensors[name].shape} vs {m.params[k].shape}")
                m.params[k][...] = tensors[name]

    def zero_grad(self):
        for _, m in self._leaf_modules():
            m.zero_grad()

    def astype(self, dtype):
        self.dtype = dtype
        for _, m in self._leaf_modules():
            m.astype(dtype)
        return self

    def parameter_count(self):
        return int(sum(v.size for v in self.parameters().values()))

    def config(self):
        return {
            "encoder": self.encoder_cfg.to_dict(),
            "decoder": self.decoder_cfg.to_dict(),
            "sampling": {"n_side": self.sampling_cfg.n_side, "m_side": self.sampling_cfg.m_side,
                         "annulus": self.sampling_cfg.annulus,
                         "boundary_offset": self.sampling_cfg.boundary_offset},
            "image_size": self.image_size,
            "topology_version": TOPOLOGY_VERSION,
        }

    # -- forward / backward ------------------------------------------------
    def forward(self, images):
        """Raw network outputs for a (B, H, W) batch (no clamping)."""
        x = np.asarray(images)
        if x.ndim == 2:
            x = x[None]
        b = x.shape[0]
        topo = self.topology
        s = topo.inner_size
        emb = self.encoder.forward(x[..., None].astype(self.dtype))
        z = self.projection.forward(emb).reshape(b, 2, s, self.proj_channels)
        inner, outer = z[:, 0], z[:, 1].copy()
        outer[:, topo.pad_mask] = 0.0
        for ring in self.rings:
            inner, outer = ring.forward(inner, outer)
        if self.rings:
            hi = self.inner_head.forward(inner)
            ho = self.outer_head.forward(outer) if self.outer_head is not None else None
        else:
            hi, ho = inner, outer[..., :2]
        n = topo.n_ring
        out = {"endo": hi[:, :n, :2], "la": hi[:, topo.la_slots, :2]}
        if self.decoder_cfg.displacement_head:
            raw = hi[:, :n, 2]
            out["disp_raw"] = raw
            out["disp"] = softplus(raw) + EPS_DISP
        else:
            out["epi"] = ho[:, :n, :2]
        self._batch = b
        return out

    def _backward_heads(self, g_endo, g_la, g_disp_raw=None, g_epi=None):
        topo = self.topology
        b, s, n = self._batch, topo.inner_size, topo.n_ring
        width = 3 if self.decoder_cfg.displacement_head else 2
        g_hi = np.zeros((b, s, width), dtype=self.dtype)
        g_hi[:, :n, :2] += g_endo
        g_hi[:, topo.la_slots, :2] += g_la
        if g_disp_raw is not None:
            g_hi[:, :n, 2] += g_disp_raw
        g_ho = None
        if g_epi is not None:
            g_ho = np.zeros((b, s, 2), dtype=self.dtype)
            g_ho[:, :n] = g_epi
        if self.rings:
            g_inner = self.inner_head.backward(g_hi)
            g_outer = (self.outer_head.backward(g_ho) if self.outer_head is not None
                       else np.zeros_like(g_inner))
            for ring in reversed(self.rings):
                g_inner, g_outer = ring.backward(g_inner, g_outer)
        else:
            g_inner = np.zeros((b, s, 3), dtype=self.dtype)
            g_inner[..., :width] = g_hi
            g_outer = np.zeros((b, s, 3), dtype=self.dtype)
            if g_ho is not None:
                g_outer[..., :2] = g_ho
        g_outer = g_outer.copy()
        g_outer[:, topo.pad_mask] = 0.0
        g_z = np.stack([g_inner, g_outer], axis=1).reshape(b, -1)
        g_emb = self.projection.backward(g_z)
        self.encoder.backward(g_emb)

    def materialize(self, out):
        """(B, 107, 2) training-path keypoints (endo, epi, la) and normal cache."""
        if self.decoder_cfg.displacement_head:
            normals, aux = batch_normals(out["endo"])
            epi = out["endo"] + out["disp"][..., None] * normals
            return np.concatenate([out["endo"], epi, out["la"]], axis=1), (normals, aux)
        return np.concatenate([out["endo"], out["epi"], out["la"]], axis=1), None

    def loss_and_backward(self, images, target_points, target_disp=None):
        """Forward, loss, backward for a batch; gradients land in :meth:`gradients`."""
        self.zero_grad()
        out = self.forward(images)
        pred, cache = self.materialize(out)
        disp = out.get("disp")
        value, g_pred, g_disp = keypoint_loss(pred, target_points.astype(self.dtype),
                                              disp, None if disp is None else target_disp.astype(self.dtype))
        n = self.topology.n_ring
        g_endo, g_epi, g_la = g_pred[:, :n], g_pred[:, n:2 * n], g_pred[:, 2 * n:]
        if cache is not None:
            normals, aux = cache
            g_endo = g_endo + g_epi
            g_d = (g_epi * normals).sum(-1) + g_disp
            g_n = g_epi * out["disp"][..., None]
            g_endo = g_endo + batch_normals_backward(g_n, aux)
            g_raw = g_d * sigmoid(out["disp_raw"])
            self._backward_heads(g_endo, g_la, g_disp_raw=g_raw)
        else:
            self._backward_heads(g_endo, g_la, g_epi=g_epi)
        return value

    def batch_loss(self, images, target_points, target_disp=None):
        out = self.forward(images)
        pred, _ = self.materialize(out)
        disp = out.get("disp")
        value, _, _ = keypoint_loss(pred, target_points.astype(self.dtype), disp,
                                    None if disp is None else target_disp.astype(self.dtype))
        return value

    # -- inference -----------------------------------------------------------
    def predict(self, images):
        """Clamped predictions as a list of KeypointSet (and DisplacementSet when applicable)."""
        out = self.forward(images)
        topo, cfg = self.topology, self.sampling_cfg
        results = []
        for i in range(self._batch):
            common = dict(n_side=cfg.n_side, m_side=cfg.m_side, width=self.image_size, height=self.image_size)
            if self.decoder_cfg.displacement_head:
                # keep the ring strictly inside the frame so clamping the epicardium
                # cannot erase its outward clearance
                endo = np.clip(out["endo"][i].astype(np.float64), EPS_DISP, 1 - EPS_DISP)
                la = np.clip(out["la"][i].astype(np.float64), 0, 1)
                ds = DisplacementSet(endo=endo, la=la, disp=out["disp"][i].astype(np.float64), **common)
                results.append((from_displacement(ds, fallback=True), ds))
            else:
                kps = KeypointSet(endo=np.clip(out["endo"][i], 0, 1), epi=np.clip(out["epi"][i], 0, 1),
                                  la=np.clip(out["la"][i], 0, 1), **common)
                results.append((kps, None))
        return results

    def save(self, path):
        save_weights(path, self.parameters(), self.config())

    @classmethod
    def load(cls, path):
        tensors, cfg = load_weights(path)
        model = cls.from_config(cfg)
        model.set_parameters(tensors)
        return model

    @classmethod
    def from_config(cls, cfg, seed=0):
        if cfg.get("topology_version") != TOPOLOGY_VERSION:
            raise ValueError(f"unsupported topology version {cfg.get('topology_version')!r}")
        enc = EncoderConfig(**cfg["encoder"])
        dec = DecoderConfig(**cfg["decoder"])
        samp = SamplingConfig(**cfg["sampling"])
        return cls(enc, dec, samp, seed=seed, image_size=cfg.get("image_size", 256))


def gcn_forward(model, img):
    """Single-image forward: KeypointSet, or DisplacementSet for displacement models."""
    kps, ds = model.predict(np.asarray(img)[None])[0]
    return ds if ds is not None else kps


def infer(model, img):
    """Keypoints and rasterised mask for one image."""
    kps, _ = model.predict(np.asarray(img)[None])[0]
    return kps, rasterize_keypoints(kps)


# ---------------------------------------------------------------------------
# training

def targets_from(kps_list):
    pts = np.stack([k.all_points() for k in kps_list])
    disp = np.stack([to_displacement(k).disp for k in kps_list])
    return pts, disp


def mean_keypoint_error_px(pred, target, size=256):
    """Mean Euclidean keypoint error in pixels for (B, K, 2) normalised arrays."""
    d = (np.asarray(pred) - np.asarray(target)) * size
    return float(np.sqrt((d ** 2).sum(-1)).mean())


@dataclass
class TrainResult:
    model: GCNModel
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def evaluate_loss(model, images, kps_list, batch_size=32):
    pts, disp = targets_from(kps_list)
    total = 0.0
    for i in range(0, len(images), batch_size):
        sl = slice(i, i + batch_size)
        total += model.batch_loss(images[sl], pts[sl], disp[sl]) * len(images[sl])
    return total / len(images)


def train(model, dataset, epochs, seed=0, adam_cfg=None, augment_cfg=None, val_dataset=None,
          batch_size=8, callback=None):
    """Minibatch Adam training with best-validation weight retention.

    ``dataset``/``val_dataset`` are sequences of ``(image, KeypointSet)``.  When no
    validation set is given the un-augmented training set, scored after each
    epoch, selects the retained weights.
    """
    if not dataset:
        raise EmptyDataset("training set is empty")
    adam_cfg = adam_cfg or AdamConfig()
    augment_cfg = augment_cfg or AugmentConfig()
    images = [np.asarray(img, dtype=np.float32) for img, _ in dataset]
    kps = [k for _, k in dataset]
    if val_dataset:
        val_images = np.stack([np.asarray(img, dtype=np.float32) for img, _ in val_dataset])
        val_kps = [k for _, k in val_dataset]
    else:
        val_images, val_kps = np.stack(images), kps
    state = AdamState()
    params = model.parameters()
    result = TrainResult(model=model)
    best = None
    identity = augment_cfg == AugmentConfig.identity()
    base_pts, base_disp = targets_from(kps)
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, epoch])
        running, seen = 0.0, 0
        for bi, idx in enumerate(_batches(len(images), batch_size, rng)):
            if identity:
                imgs = np.stack([images[i] for i in idx])
                pts, disp = base_pts[idx], base_disp[idx]
            else:
                pairs = [augment(images[i], kps[i], augment_cfg, seed=[seed, epoch, int(i)]) for i in idx]
                imgs = np.stack([p[0] for p in pairs])
                pts, disp = targets_from([p[1] for p in pairs])
            value = model.loss_and_backward(imgs, pts, disp)
            adam_step(params, model.gradients(), state, adam_cfg)
            running += value * len(idx)
            seen += len(idx)
        train_loss = running / seen
        val_loss = evaluate_loss(model, val_images, val_kps)
        entry = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}
        result.history.append(entry)
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best = {k: v.copy() for k, v in params.items()}
        if callback is not None:
            callback(entry)
        log.debug("epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
    if best is not None:
        model.set_parameters(best)
    return result


def clone_model(model):
    return copy.deepcopy(model)
