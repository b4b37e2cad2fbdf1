"""Small dense MLPs with hand-written reverse pass, Adam, and a binary param format.

Hidden layers use tanh, the output layer is linear. Inputs may be a single
vector of shape ``(n_in,)`` or a batch of shape ``(batch, n_in)``; weights are
stored as ``(fan_in, fan_out)`` so a batch multiplies from the left.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, FormatError, NumericError, TrainingError

__all__ = [
    "Mlp",
    "AdamState",
    "mlp_init",
    "mlp_forward",
    "mlp_backward",
    "adam_init",
    "adam_step",
    "write_mlp",
    "read_mlp",
    "check_finite",
]

PARAM_MAGIC = b"DQNC"
PARAM_VERSION = 1


def check_finite(arr, what="array"):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


@dataclass
class Mlp:
    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("weights/biases must be non-empty and paired")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: W {w.shape} incompatible with b {b.shape}")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise DimensionError(f"layer {i} input dim {w.shape[0]} != previous output")

    @property
    def n_in(self):
        return self.weights[0].shape[0]

    @property
    def n_out(self):
        return self.weights[-1].shape[1]

    @property
    def dims(self):
        return [self.n_in] + [w.shape[1] for w in self.weights]

    def params(self):
        """Flat list ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_params(cls, flat):
        return cls(list(flat[0::2]), list(flat[1::2]))

    def copy(self):
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self):
        return Mlp([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])


def mlp_init(sizes, rng, zero_last=True):
    """Glorot-uniform init; the final layer is zeroed so couplings start at identity."""
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2:
        raise DimensionError("need at least input and output sizes")
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        if last and zero_last:
            w = np.zeros((fan_in, fan_out))
        else:
            s = np.sqrt(6.0 / max(fan_in + fan_out, 1))
            w = rng.uniform(-s, s, size=(fan_in, fan_out))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases)


def _as_batch(x, n_in):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != n_in:
        raise DimensionError(f"input shape {x.shape} does not match n_in={n_in}")
    return xb, single


def forward_cached(net, xb):
    """Batched forward pass that keeps the activations needed by backward_cached."""
    acts = [xb]
    h = xb
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def backward_cached(net, acts, g_out):
    """Reverse pass of ``sum(g_out * net(x))`` given the cache from forward_cached.

    Returns ``(grads, g_in)`` where grads is an Mlp of parameter gradients summed
    over the batch.
    """
    gws, gbs = [None] * len(net.weights), [None] * len(net.weights)
    g = g_out
    last = len(net.weights) - 1
    for i in range(last, -1, -1):
        if i < last:
            g = g * (1.0 - acts[i + 1] ** 2)
        gws[i] = acts[i].T @ g
        gbs[i] = g.sum(axis=0)
        g = g @ net.weights[i].T
    return Mlp(gws, gbs), g


def mlp_forward(net, x):
    xb, single = _as_batch(x, net.n_in)
    out, _ = forward_cached(net, xb)
    return out[0] if single else out


def mlp_backward(net, x, upstream):
    """Gradients of ``upstream . net(x)`` w.r.t. the parameters and the input."""
    xb, single = _as_batch(x, net.n_in)
    g = np.asarray(upstream, dtype=np.float64)
    g = g[None, :] if g.ndim == 1 else g
    if g.shape != (xb.shape[0], net.n_out):
        raise DimensionError(f"upstream shape {np.shape(upstream)} != output shape")
    _, acts = forward_cached(net, xb)
    grads, g_in = backward_cached(net, acts, g)
    return grads, (g_in[0] if single else g_in)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    extra: dict = field(default_factory=dict)


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        lr=lr, beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_step(params, grads, state):
    """One bias-corrected Adam *descent* step. Returns new (params, state)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and Adam state disagree in length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise DimensionError(f"grad {i} shape {g.shape} != param shape {params[i].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block {i}", last_good=params)
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps, dict(state.extra))


# -- binary parameter format ----------------------------------------------------
# magic "DQNC" | u32 version | u32 n_layers | n_layers x (u32 fan_in, u32 fan_out)
# | per layer: W row-major f64, b f64 ; all little-endian


def write_mlp(fh, net):
    check_finite(np.concatenate([p.ravel() for p in net.params()]), "MLP parameters")
    fh.write(PARAM_MAGIC)
    fh.write(struct.pack("<II", PARAM_VERSION, len(net.weights)))
    for w in net.weights:
        fh.write(struct.pack("<II", *w.shape))
    for w, b in zip(net.weights, net.biases):
        fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated parameter block")
    return buf


def read_mlp(fh):
    if _read_exact(fh, 4) != PARAM_MAGIC:
        raise FormatError("bad parameter magic")
    version, n_layers = struct.unpack("<II", _read_exact(fh, 8))
    if version != PARAM_VERSION:
        raise FormatError(f"unsupported parameter version {version}")
    shapes = [struct.unpack("<II", _read_exact(fh, 8)) for _ in range(n_layers)]
    weights, biases = [], []
    for fan_in, fan_out in shapes:
        w = np.frombuffer(_read_exact(fh, 8 * fan_in * fan_out), dtype="<f8")
        b = np.frombuffer(_read_exact(fh, 8 * fan_out), dtype="<f8")
        weights.append(w.reshape(fan_in, fan_out).astype(np.float64))
        biases.append(b.astype(np.float64))
    return Mlp(weights, biases)


def mlp_to_bytes(net):
    buf = io.BytesIO()
    write_mlp(buf, net)
    return buf.getvalue()


def mlp_from_bytes(data):
    return read_mlp(io.BytesIO(data))
