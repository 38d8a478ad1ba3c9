"""Small differentiable embedding networks with hand-written forward/backward.

Everything runs in float64 numpy. Inputs are (N, H, W, C) image batches,
outputs are (N, d) raw embeddings; gradients are exact reverse-mode
accumulations, verified against central finite differences by the test
suite and the ``gradcheck`` CLI command.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import (
    CorruptionError,
    DegenerateEmbeddingError,
    FormatError,
    FrozenModelError,
    NumericError,
    UsageError,
    ValidationError,
)

_NORM_EPS = 1e-12

CHECKPOINT_MAGIC = b"CDFN"
CHECKPOINT_VERSION = 1


def _kaiming_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Affine:
    kind = "affine"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.in_features = in_features
        self.out_features = out_features
        self.w = _kaiming_uniform((in_features, out_features), in_features, rng)
        self.b = np.zeros(out_features)

    def descriptor(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_features": self.out_features}

    @property
    def params(self):
        return (self.w, self.b)

    def forward(self, x):
        return x @ self.w + self.b, x

    def backward(self, dout, cache):
        x = cache
        return dout @ self.w.T, (x.T @ dout, dout.sum(axis=0))


class Relu:
    kind = "relu"

    def __init__(self):
        pass

    def descriptor(self):
        return {"kind": self.kind}

    @property
    def params(self):
        return ()

    def forward(self, x):
        return np.maximum(x, 0.0), x > 0.0

    def backward(self, dout, cache):
        return dout * cache, ()


class Conv2d:
    """3x3-style convolution, stride 1, 'same' zero padding, NHWC layout."""

    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator):
        if kernel % 2 != 1:
            raise ValidationError("convolution kernel must be odd for same padding")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        fan_in = kernel * kernel * in_channels
        self.w = _kaiming_uniform((kernel, kernel, in_channels, out_channels), fan_in, rng)
        self.b = np.zeros(out_channels)

    def descriptor(self):
        return {"kind": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel": self.kernel}

    @property
    def params(self):
        return (self.w, self.b)

    def forward(self, x):
        n, h, w, _ = x.shape
        p = self.kernel // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        out2d = np.tile(self.b, (n * h * w, 1))
        for i in range(self.kernel):
            for j in range(self.kernel):
                patch = xp[:, i:i + h, j:j + w, :].reshape(n * h * w, self.in_channels)
                out2d += patch @ self.w[i, j]
        return out2d.reshape(n, h, w, self.out_channels), xp

    def backward(self, dout, cache):
        xp = cache
        n, h, w, _ = dout.shape
        p = self.kernel // 2
        dout2d = dout.reshape(n * h * w, self.out_channels)
        dw = np.empty_like(self.w)
        dxp = np.zeros_like(xp)
        for i in range(self.kernel):
            for j in range(self.kernel):
                patch = xp[:, i:i + h, j:j + w, :].reshape(n * h * w, self.in_channels)
                dw[i, j] = patch.T @ dout2d
                dxp[:, i:i + h, j:j + w, :] += (dout2d @ self.w[i, j].T).reshape(n, h, w, self.in_channels)
        db = dout2d.sum(axis=0)
        return dxp[:, p:p + h, p:p + w, :], (dw, db)


class MaxPool2:
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped.

    Gradient routes to the first maximum in each window, which keeps
    backward deterministic under ties.
    """

    kind = "pool"

    def __init__(self):
        pass

    def descriptor(self):
        return {"kind": self.kind}

    @property
    def params(self):
        return ()

    def forward(self, x):
        n, h, w, c = x.shape
        h2, w2 = h // 2, w // 2
        windows = (x[:, :2 * h2, :2 * w2, :]
                   .reshape(n, h2, 2, w2, 2, c)
                   .transpose(0, 1, 3, 5, 2, 4)
                   .reshape(n, h2, w2, c, 4))
        idx = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, dout, cache):
        (n, h, w, c), idx = cache
        h2, w2 = h // 2, w // 2
        dwindows = np.zeros((n, h2, w2, c, 4))
        np.put_along_axis(dwindows, idx[..., None], dout[..., None], axis=-1)
        dx = np.zeros((n, h, w, c))
        dx[:, :2 * h2, :2 * w2, :] = (dwindows
                                      .reshape(n, h2, w2, c, 2, 2)
                                      .transpose(0, 1, 4, 2, 5, 3)
                                      .reshape(n, 2 * h2, 2 * w2, c))
        return dx, ()


class Flatten:
    kind = "flatten"

    def __init__(self):
        pass

    def descriptor(self):
        return {"kind": self.kind}

    @property
    def params(self):
        return ()

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache):
        return dout.reshape(cache), ()


_LAYER_KINDS = {cls.kind: cls for cls in (Affine, Relu, Conv2d, MaxPool2, Flatten)}


class EmbeddingNetwork:
    """A stack of layers mapping image batches to d-dimensional embeddings."""

    def __init__(self, layers, input_shape: tuple[int, int, int], embedding_dim: int):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.embedding_dim = int(embedding_dim)
        self._frozen = False
        self._tape = None

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def copy_parameters(self) -> list[np.ndarray]:
        return [p.copy() for p in self.parameters()]

    def load_parameters(self, values) -> None:
        if self._frozen:
            raise FrozenModelError("cannot load parameters into a frozen network")
        params = self.parameters()
        if len(values) != len(params):
            raise ValidationError(f"expected {len(params)} parameter arrays, got {len(values)}")
        for p, v in zip(params, values):
            if p.shape != v.shape:
                raise ValidationError(f"parameter shape mismatch: {p.shape} vs {v.shape}")
            p[...] = v

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for p in self.parameters():
            digest.update(np.ascontiguousarray(p).tobytes())
        return digest.hexdigest()

    # -- forward / backward -------------------------------------------------

    def forward(self, batch, record: bool = False) -> np.ndarray:
        """Embed a batch; pass ``record=True`` to keep the tape for backward.

        Plain (non-recording) forward mutates no state and is safe for
        concurrent callers on a frozen network.
        """
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ValidationError(f"batch shape {x.shape} does not match input shape {self.input_shape}")
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            if record:
                caches.append(cache)
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite activation in forward pass")
        if x.shape[1] != self.embedding_dim:
            raise ValidationError(f"architecture produces dim {x.shape[1]}, declared {self.embedding_dim}")
        if record:
            self._tape = (x.shape[0], caches)
        return x

    def backward(self, upstream) -> list[np.ndarray]:
        """Gradients of sum(upstream * forward(batch)) for every parameter.

        Requires a preceding ``forward(..., record=True)`` on the same batch.
        """
        if self._tape is None:
            raise UsageError("backward called without a recorded forward")
        n, caches = self._tape
        dout = np.asarray(upstream, dtype=np.float64)
        if dout.shape != (n, self.embedding_dim):
            raise ValidationError(f"upstream gradient shape {dout.shape} != {(n, self.embedding_dim)}")
        grads_rev = []
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dout, layer_grads = layer.backward(dout, cache)
            grads_rev.extend(reversed(layer_grads))
        return list(reversed(grads_rev))

    # -- freezing -----------------------------------------------------------

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "EmbeddingNetwork":
        self._frozen = True
        return self

    # -- descriptor ----------------------------------------------------------

    def descriptor(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "embedding_dim": self.embedding_dim,
            "frozen": self._frozen,
            "layers": [layer.descriptor() for layer in self.layers],
        }


def freeze(net: EmbeddingNetwork) -> EmbeddingNetwork:
    return net.freeze()


def is_frozen(net: EmbeddingNetwork) -> bool:
    return net.frozen


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


def apply_momentum_sgd(params, grads, lr: float, momentum: float, velocity=None):
    """In-place momentum SGD: v <- momentum*v + g; p <- p - lr*v."""
    if not (lr > 0.0):
        raise ValidationError("learning rate must be > 0")
    if not (0.0 <= momentum < 1.0):
        raise ValidationError("momentum must lie in [0, 1)")
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValidationError(f"{len(params)} parameters but {len(grads)} gradients")
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, velocity):
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
        v *= momentum
        v += g
        p -= lr * v
    return velocity


def sgd_step(net: EmbeddingNetwork, grads, lr: float, momentum: float = 0.0, velocity=None):
    """One momentum-SGD step on the network parameters; returns the velocity."""
    if net.frozen:
        raise FrozenModelError("network is frozen; no parameter updates allowed")
    return apply_momentum_sgd(net.parameters(), grads, lr, momentum, velocity)


# ---------------------------------------------------------------------------
# Hypersphere normalization
# ---------------------------------------------------------------------------


def normalize_embedding(raw) -> np.ndarray:
    """Map a raw vector onto the unit hypersphere."""
    v = np.asarray(raw, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= _NORM_EPS:
        raise DegenerateEmbeddingError(f"cannot normalize vector with norm {norm:.3e}")
    return v / norm


def normalize_rows(mat) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize a matrix; returns (unit rows, original norms)."""
    m = np.asarray(mat, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms <= _NORM_EPS):
        raise DegenerateEmbeddingError("row with (near-)zero norm cannot be normalized")
    return m / norms[:, None], norms


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

ARCHITECTURES = ("conv-small", "affine-small")


def _build_layers(descriptors, rng: np.random.Generator):
    layers = []
    for d in descriptors:
        kind = d.get("kind")
        if kind == "affine":
            layers.append(Affine(d["in_features"], d["out_features"], rng))
        elif kind == "conv":
            layers.append(Conv2d(d["in_channels"], d["out_channels"], d["kernel"], rng))
        elif kind in _LAYER_KINDS:
            layers.append(_LAYER_KINDS[kind]())
        else:
            raise ValidationError(f"unknown layer kind {kind!r}")
    return layers


def network_from_descriptor(descriptor: dict, seed: int = 0) -> EmbeddingNetwork:
    rng = np.random.default_rng(seed)
    net = EmbeddingNetwork(
        _build_layers(descriptor["layers"], rng),
        tuple(descriptor["input_shape"]),
        descriptor["embedding_dim"],
    )
    if descriptor.get("frozen"):
        net.freeze()
    return net


def build_network(input_shape: tuple[int, int, int], embedding_dim: int = 64,
                  arch: str = "conv-small", seed: int = 0) -> EmbeddingNetwork:
    """Construct a preset architecture with seeded Kaiming-uniform init.

    ``conv-small``: two 3x3 conv blocks (16/32 channels, ReLU, 2x2 pool)
    followed by affine layers of widths [256, 256, d]. ``affine-small``:
    flatten then affine widths [128, d]; the fast option for tests.
    """
    h, w, c = (int(v) for v in input_shape)
    if arch == "conv-small":
        flat = (h // 4) * (w // 4) * 32
        descr = [
            {"kind": "conv", "in_channels": c, "out_channels": 16, "kernel": 3},
            {"kind": "relu"},
            {"kind": "pool"},
            {"kind": "conv", "in_channels": 16, "out_channels": 32, "kernel": 3},
            {"kind": "relu"},
            {"kind": "pool"},
            {"kind": "flatten"},
            {"kind": "affine", "in_features": flat, "out_features": 256},
            {"kind": "relu"},
            {"kind": "affine", "in_features": 256, "out_features": 256},
            {"kind": "relu"},
            {"kind": "affine", "in_features": 256, "out_features": embedding_dim},
        ]
    elif arch == "affine-small":
        descr = [
            {"kind": "flatten"},
            {"kind": "affine", "in_features": h * w * c, "out_features": 128},
            {"kind": "relu"},
            {"kind": "affine", "in_features": 128, "out_features": embedding_dim},
        ]
    else:
        raise ValidationError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    return network_from_descriptor(
        {"input_shape": [h, w, c], "embedding_dim": embedding_dim, "layers": descr}, seed=seed
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
#
# Binary layout: magic "CDFN", u32 version, u32 descriptor length, descriptor
# JSON (utf-8), then every parameter tensor as raw little-endian float64 in
# declaration order. All integers little-endian.


def save_checkpoint(net: EmbeddingNetwork, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    descr = json.dumps(net.descriptor(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(descr)))
        f.write(descr)
        for p in net.parameters():
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> EmbeddingNetwork:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a checkpoint file")
    version, dlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if len(data) < 12 + dlen:
        raise CorruptionError("checkpoint truncated inside descriptor")
    try:
        descriptor = json.loads(data[12:12 + dlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"checkpoint descriptor is not valid JSON: {e}") from e
    frozen = bool(descriptor.get("frozen"))
    descriptor = {**descriptor, "frozen": False}
    net = network_from_descriptor(descriptor, seed=0)
    offset = 12 + dlen
    values = []
    for p in net.parameters():
        nbytes = p.size * 8
        if offset + nbytes > len(data):
            raise CorruptionError("checkpoint payload shorter than descriptor demands")
        values.append(np.frombuffer(data, dtype="<f8", count=p.size, offset=offset).reshape(p.shape).copy())
        offset += nbytes
    if offset != len(data):
        raise CorruptionError("checkpoint payload longer than descriptor demands")
    net.load_parameters(values)
    if frozen:
        net.freeze()
    return net
