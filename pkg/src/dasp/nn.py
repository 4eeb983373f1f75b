"""Small numpy MLPs with hand-written reverse-mode gradients, Adam, seeded RNG
and the binary checkpoint container.

Everything is float64. Networks map row-batches ``(n, in_dim) -> (n, out_dim)``;
a 1-D input is treated as a batch of one and the output is squeezed back.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericFault, ShapeError

ACTIVATIONS = ("relu", "identity")


@dataclass
class Layer:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"layer weight {self.weight.shape} incompatible with bias {self.bias.shape}")


class Mlp:
    """Fully connected network, relu between hidden layers."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ShapeError(
                    f"layer widths do not chain: {prev.weight.shape} -> {nxt.weight.shape}")
        self.layers = layers

    @classmethod
    def create(cls, sizes, rng: "Rng", hidden_activation="relu", output_activation="identity"):
        """Glorot-uniform weights, zero biases. ``sizes = [in, h1, ..., out]``."""
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            act = output_activation if i == len(sizes) - 2 else hidden_activation
            layers.append(Layer(w, np.zeros(fan_out), act))
        return cls(layers)

    @classmethod
    def zeros(cls, sizes, hidden_activation="relu", output_activation="identity"):
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = output_activation if i == len(sizes) - 2 else hidden_activation
            layers.append(Layer(np.zeros((fan_in, fan_out)), np.zeros(fan_out), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [layer.weight.shape[1] for layer in self.layers]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def param_names(self, prefix="") -> list[str]:
        names = []
        for i in range(len(self.layers)):
            names.extend((f"{prefix}layer{i}.weight", f"{prefix}layer{i}.bias"))
        return names

    def copy(self) -> "Mlp":
        return Mlp([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def copy_from(self, other: "Mlp"):
        for dst, src in zip(self.params(), other.params()):
            dst[...] = src

    def _as_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected input width {self.input_dim}, got shape {x.shape}")
        return x, single

    def forward_cached(self, x):
        """Forward pass on a 2-D batch, keeping pre-activations for backward."""
        x, _ = self._as_batch(x)
        inputs, pre = [], []
        h = x
        for layer in self.layers:
            inputs.append(h)
            a = h @ layer.weight + layer.bias
            pre.append(a)
            h = np.maximum(a, 0.0) if layer.activation == "relu" else a
        return h, (inputs, pre)

    def backward_cached(self, cache, grad_out, params=True):
        """Gradients summed over the batch. With ``params=False`` only the
        input gradient is computed and the parameter list holds ``None``."""
        inputs, pre = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != pre[-1].shape:
            raise ShapeError(f"grad_out shape {g.shape} does not match output {pre[-1].shape}")
        grads = [None] * (2 * len(self.layers))
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer.activation == "relu":
                g = g * (pre[i] > 0.0)
            if params:
                grads[2 * i] = inputs[i].T @ g
                grads[2 * i + 1] = g.sum(axis=0)
            g = g @ layer.weight.T
        return grads, g

    def __call__(self, x):
        return forward(self, x)


def forward(net: Mlp, x):
    single = np.ndim(x) == 1
    y, _ = net.forward_cached(x)
    return y[0] if single else y


def backward(net: Mlp, x, grad_out):
    """Gradients of ``sum <grad_out, forward(net, x)>``.

    Returns ``(param_grads, grad_in)`` where ``param_grads`` follows
    ``net.params()`` order and is summed over the batch.
    """
    single = np.ndim(x) == 1
    _, cache = net.forward_cached(x)
    grads, grad_in = net.backward_cached(cache, grad_out)
    return grads, (grad_in[0] if single else grad_in)


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=3e-4, **kw):
        return cls(lr=lr, m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **kw)


def adam_step(state: AdamState, params, grads, names=None):
    """Bias-corrected Adam update applied in place to ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state have different lengths")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ShapeError(f"grad {i} shape {g.shape} != param shape {params[i].shape}")
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"param[{i}]"
            raise NumericFault(f"non-finite gradient in {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Rng:
    """Seeded sampler; child streams are derived deterministically by key."""

    def __init__(self, seed: int, _key: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(int(k) for k in key))

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)


def sample_standard_normal(rng: Rng, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.normal(n)


# --- checkpoint container -------------------------------------------------

MAGIC = b"DASPCKPT"
VERSION = 1


def save_checkpoint(path, arrays: dict):
    """Write named float64 arrays: magic, version byte, record count, then
    ``u32 name_len | name | u32 ndim | u64 dims... | f64 data`` per record."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<BI", VERSION, len(arrays))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        buf += struct.pack("<I", len(encoded)) + encoded
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a DASPCKPT file")
    version, count = struct.unpack_from("<BI", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 13
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return out


def mlp_state(net: Mlp, prefix: str) -> dict:
    return dict(zip(net.param_names(prefix), net.params()))


def load_mlp_state(net: Mlp, arrays: dict, prefix: str):
    for name, p in zip(net.param_names(prefix), net.params()):
        if arrays[name].shape != p.shape:
            raise ShapeError(f"checkpoint entry {name} has shape {arrays[name].shape}, want {p.shape}")
        p[...] = arrays[name]
