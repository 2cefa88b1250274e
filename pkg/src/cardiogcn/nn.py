"""Small numpy neural-network engine with hand-written reverse-mode gradients.

Tensors are plain ``numpy`` arrays.  Images use NHWC layout.  Every layer keeps
the activations it needs from ``forward`` and turns an output gradient into an
input gradient in ``backward``, accumulating parameter gradients in ``grads``.
Computation runs in the dtype of the parameters (float32 by default; the
finite-difference checks cast to float64).
"""
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch

DTYPE = np.float32


def he_uniform(rng, shape, fan_in, dtype=DTYPE):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    def __init__(self):
        self.params = {}
        self.grads = {}

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        self.zero_grad()
        return self

    def named_parameters(self, prefix=""):
        for k, v in self.params.items():
            yield prefix + k, v

    def parameter_count(self):
        return int(sum(v.size for v in self.params.values()))


class Conv2d(Module):
    """Cross-correlation, NHWC, zero padding.

    Output size is ``floor((H + 2 p - k) / s) + 1``, which for k=3, p=1, s=2 is
    ``ceil(H / 2)``.
    """

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None, rng=None, dtype=DTYPE):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.in_ch, self.out_ch, self.k, self.stride = in_ch, out_ch, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.params = {
            "weight": he_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype),
            "bias": np.zeros(out_ch, dtype=dtype),
        }
        self.zero_grad()

    def output_size(self, h, w):
        p, k, s = self.padding, self.k, self.stride
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.in_ch:
            raise ShapeMismatch(f"conv expects (B, H, W, {self.in_ch}), got {x.shape}")
        b, h, w, c = x.shape
        p, k, s = self.padding, self.k, self.stride
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        ho, wo = self.output_size(h, w)
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
        cols = win.reshape(b * ho * wo, c * k * k)
        wmat = self.params["weight"].reshape(self.out_ch, -1)
        out = cols @ wmat.T + self.params["bias"]
        self._cache = (x.shape, xp.shape, cols, ho, wo)
        return out.reshape(b, ho, wo, self.out_ch)

    def backward(self, grad):
        xshape, pshape, cols, ho, wo = self._cache
        b, h, w, c = xshape
        p, k, s = self.padding, self.k, self.stride
        g = grad.reshape(-1, self.out_ch)
        wmat = self.params["weight"].reshape(self.out_ch, -1)
        self.grads["weight"] += (g.T @ cols).reshape(self.params["weight"].shape)
        self.grads["bias"] += g.sum(axis=0)
        dcols = (g @ wmat).reshape(b, ho, wo, c, k, k)
        dxp = np.zeros(pshape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[..., i, j]
        return dxp[:, p:p + h, p:p + w, :] if p else dxp


class Dense(Module):
    """Affine map over the last axis."""

    def __init__(self, n_in, n_out, rng=None, dtype=DTYPE):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.params = {
            "weight": he_uniform(rng, (n_in, n_out), n_in, dtype),
            "bias": np.zeros(n_out, dtype=dtype),
        }
        self.zero_grad()

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ShapeMismatch(f"dense expects last axis {self.n_in}, got {x.shape}")
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, grad):
        x2 = self._x.reshape(-1, self.n_in)
        g2 = grad.reshape(-1, self.n_out)
        self.grads["weight"] += x2.T @ g2
        self.grads["bias"] += g2.sum(axis=0)
        return grad @ self.params["weight"].T


class ReLU(Module):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class AvgPool(Module):
    """Non-overlapping ``f`` x ``f`` average pooling (input sides must divide by f)."""

    def __init__(self, factor):
        super().__init__()
        self.f = factor

    def forward(self, x):
        f = self.f
        if f == 1:
            return x
        b, h, w, c = x.shape
        if h % f or w % f:
            raise ShapeMismatch(f"pool factor {f} does not divide {h}x{w}")
        self._shape = x.shape
        return x.reshape(b, h // f, f, w // f, f, c).mean(axis=(2, 4))

    def backward(self, grad):
        f = self.f
        if f == 1:
            return grad
        g = np.repeat(np.repeat(grad, f, axis=1), f, axis=2)
        return g / (f * f)


class GlobalAvgPool(Module):
    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, grad):
        b, h, w, c = self._shape
        return np.broadcast_to(grad[:, None, None, :] / (h * w), self._shape).copy()


class Flatten(Module):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class CoordChannels(Module):
    """Appends normalised x and y coordinate planes (pixel centres) to the input."""

    def forward(self, x):
        b, h, w, _ = x.shape
        ys = ((np.arange(h) + 0.5) / h).astype(x.dtype)
        xs = ((np.arange(w) + 0.5) / w).astype(x.dtype)
        planes = np.stack(np.broadcast_arrays(xs[None, :], ys[:, None]), axis=-1)
        return np.concatenate([x, np.broadcast_to(planes, (b, h, w, 2))], axis=-1)

    def backward(self, grad):
        return grad[..., :-2]


class Sequential(Module):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def named_parameters(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}{i}.")

    def named_grads(self, prefix=""):
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Sequential):
                yield from layer.named_grads(f"{prefix}{i}.")
            else:
                for k in layer.params:
                    yield f"{prefix}{i}.{k}", layer.grads[k]

    def parameter_count(self):
        return int(sum(layer.parameter_count() for layer in self.layers))


# ---------------------------------------------------------------------------
# encoder

@dataclass(frozen=True)
class EncoderConfig:
    blocks: tuple = ((16, 2), (32, 2), (64, 2), (128, 2), (128, 2))
    embedding_size: int = 128
    # fixed average-pooling stem applied before the first convolution
    input_pool: int = 4
    coord_channels: bool = True
    kernel: int = 3
    # "flatten" keeps where features fired; "gap" averages them away
    head: str = "flatten"

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(int(v) for v in b) for b in self.blocks))
        if any(s not in (1, 2) for _, s in self.blocks):
            raise ValueError("encoder strides must be 1 or 2")
        if self.embedding_size < 8:
            raise ValueError("embedding size must be >= 8")
        if self.head not in ("flatten", "gap"):
            raise ValueError(f"unknown encoder head {self.head!r}")

    def feature_shape(self, image_size):
        side = image_size // self.input_pool
        for _, stride in self.blocks:
            side = (side - 1) // stride + 1
        return side, side, self.blocks[-1][0]

    def to_dict(self):
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        return d


def build_encoder(cfg, rng, dtype=DTYPE, image_size=256):
    layers = [AvgPool(cfg.input_pool)]
    ch = 1
    if cfg.coord_channels:
        layers.append(CoordChannels())
        ch += 2
    for out_ch, stride in cfg.blocks:
        layers += [Conv2d(ch, out_ch, cfg.kernel, stride, rng=rng, dtype=dtype), ReLU()]
        ch = out_ch
    if cfg.head == "gap":
        layers += [GlobalAvgPool(), Dense(ch, cfg.embedding_size, rng=rng, dtype=dtype), ReLU()]
    else:
        h, w, c = cfg.feature_shape(image_size)
        layers += [Flatten(), Dense(h * w * c, cfg.embedding_size, rng=rng, dtype=dtype), ReLU()]
    return Sequential(layers)


def encode(encoder, img):
    """Embedding of one ``(H, W)`` image or a ``(B, H, W)`` batch."""
    x = np.asarray(img)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ShapeMismatch(f"encoder expects (H, W) or (B, H, W), got {x.shape}")
    dtype = encoder.layers[-2].params["weight"].dtype
    out = encoder.forward(x[..., None].astype(dtype))
    return out[0] if single else out


# ---------------------------------------------------------------------------
# optimiser

@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, cfg):
    """In-place Adam update with bias correction; returns ``state``."""
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps_hat)).astype(p.dtype)
    return state


# ---------------------------------------------------------------------------
# weights container
#
#   bytes 0-3   magic b"CGW1"
#   bytes 4-7   little-endian uint32 header length N
#   next N      UTF-8 JSON {"version", "config", "tensors": [{name, shape, dtype, offset, nbytes}]}
#   remainder   tensor data, little-endian, offsets relative to the start of this section

MAGIC = b"CGW1"
CONTAINER_VERSION = 1


def save_weights(path, tensors, config=None):
    manifest, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        raw = data.tobytes()
        manifest.append({"name": name, "shape": list(data.shape), "dtype": "<f4",
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"version": CONTAINER_VERSION, "config": config or {}, "tensors": manifest},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_weights(path):
    """Return ``(tensors, config)`` from a container written by :func:`save_weights`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a weights container")
    (n,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + n].decode("utf-8"))
    if header.get("version") != CONTAINER_VERSION:
        raise ValueError(f"{path}: unsupported container version {header.get('version')}")
    base = 8 + n
    tensors = {}
    for t in header["tensors"]:
        start = base + t["offset"]
        arr = np.frombuffer(blob[start:start + t["nbytes"]], dtype=t["dtype"])
        tensors[t["name"]] = arr.reshape(t["shape"]).astype(DTYPE)
    return tensors, header["config"]
