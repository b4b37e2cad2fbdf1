"""Invertible layers, the latent flow, the conditional dequantizer and rounding.

Everything operates on batches: ``z`` has shape ``(n, d)`` and every log-det
is returned per row with shape ``(n,)``. Single vectors are accepted by the
public helpers and squeezed back on return.

Every layer exposes the same four hooks used by the training code:

    fwd(z, ctx)  -> (x, logdet, cache)
    fwd_grad(cache, g_x, g_logdet) -> (g_z, param_grads)
    inv(x, ctx)  -> (z, logdet, cache)
    inv_grad(cache, g_z, g_logdet) -> (g_x, param_grads)

``param_grads`` is a list aligned with ``layer.params()``.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np
from scipy.special import expit, log_expit, logit

from .errors import DimensionError, DomainError, FormatError, NumericError
from .numcore import Mlp, backward_cached, forward_cached, mlp_init, read_mlp, write_mlp

SCALE_CLAMP = 5.0
BOX_EPS = 1e-6
LOG_2PI = np.log(2.0 * np.pi)

__all__ = [
    "AffineCoupling",
    "Reverse",
    "BoxSquash",
    "Sigmoid",
    "FlowStack",
    "DequantFlow",
    "build_latent_flow",
    "build_dequant_flow",
    "round_forward",
    "round_inverse",
    "std_normal_logpdf",
    "sigmoid_layer",
    "logit_layer",
    "save_checkpoint",
    "load_checkpoint",
]


def std_normal_logpdf(e):
    e = np.asarray(e, dtype=np.float64)
    return -0.5 * np.sum(e * e, axis=-1) - 0.5 * e.shape[-1] * LOG_2PI


def _batch(v):
    v = np.asarray(v, dtype=np.float64)
    return (v[None, :], True) if v.ndim == 1 else (v, False)


class AffineCoupling:
    """x_B = z_B * exp(s(z_A, ctx)) + t(z_A, ctx); x_A = z_A.

    ``mask`` marks pass-through coordinates. The raw scale is soft-clamped as
    ``s = c * tanh(s_raw / c)``.
    """

    kind = "coupling"

    def __init__(self, mask, net, clamp=SCALE_CLAMP, n_ctx=0):
        mask = np.asarray(mask, dtype=bool)
        self.mask = mask
        self.ia = np.flatnonzero(mask)
        self.ib = np.flatnonzero(~mask)
        self.n_ctx = int(n_ctx)
        self.clamp = float(clamp)
        if net.n_in != self.ia.size + self.n_ctx or net.n_out != 2 * self.ib.size:
            raise DimensionError(
                f"conditioner {net.n_in}->{net.n_out} does not fit mask "
                f"({self.ia.size} pass, {self.ib.size} transformed, {self.n_ctx} ctx)"
            )
        self.net = net

    @classmethod
    def create(cls, mask, rng, hidden=(64, 64), n_ctx=0, clamp=SCALE_CLAMP):
        mask = np.asarray(mask, dtype=bool)
        n_a, n_b = int(mask.sum()), int((~mask).sum())
        net = mlp_init([n_a + n_ctx, *hidden, 2 * n_b], rng, zero_last=True)
        return cls(mask, net, clamp=clamp, n_ctx=n_ctx)

    @property
    def d(self):
        return self.mask.size

    def params(self):
        return self.net.params()

    def set_params(self, flat):
        self.net = Mlp.from_params(flat)

    def _condition(self, za, ctx):
        h = za if ctx is None or self.n_ctx == 0 else np.concatenate([za, ctx], axis=1)
        out, acts = forward_cached(self.net, h)
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite conditioner output")
        nb = self.ib.size
        s_raw, t = out[:, :nb], out[:, nb:]
        th = np.tanh(s_raw / self.clamp)
        return self.clamp * th, t, th, acts

    def _net_grad(self, acts, th, g_s, g_t):
        g_sraw = g_s * (1.0 - th * th)
        grads, g_h = backward_cached(self.net, acts, np.concatenate([g_sraw, g_t], axis=1))
        return grads.params(), g_h[:, : self.ia.size]

    def fwd(self, z, ctx=None):
        s, t, th, acts = self._condition(z[:, self.ia], ctx)
        es = np.exp(s)
        x = z.copy()
        x[:, self.ib] = z[:, self.ib] * es + t
        return x, s.sum(axis=1), (z, s, es, th, acts)

    def fwd_grad(self, cache, g_x, g_ld):
        z, s, es, th, acts = cache
        zb = z[:, self.ib]
        gxb = g_x[:, self.ib]
        g_s = gxb * zb * es + g_ld[:, None]
        grads, g_ha = self._net_grad(acts, th, g_s, gxb)
        g_z = g_x.copy()
        g_z[:, self.ib] = gxb * es
        g_z[:, self.ia] += g_ha
        return g_z, grads

    def inv(self, x, ctx=None):
        s, t, th, acts = self._condition(x[:, self.ia], ctx)
        ens = np.exp(-s)
        z = x.copy()
        z[:, self.ib] = (x[:, self.ib] - t) * ens
        return z, -s.sum(axis=1), (z, ens, th, acts)

    def inv_grad(self, cache, g_z, g_ld):
        z, ens, th, acts = cache
        gzb = g_z[:, self.ib]
        g_t = -gzb * ens
        g_s = -gzb * z[:, self.ib] - g_ld[:, None]
        grads, g_ha = self._net_grad(acts, th, g_s, g_t)
        g_x = g_z.copy()
        g_x[:, self.ib] = gzb * ens
        g_x[:, self.ia] += g_ha
        return g_x, grads

    def spec(self):
        return {"type": self.kind, "mask": self.mask.astype(int).tolist(), "clamp": self.clamp,
                "n_ctx": self.n_ctx}


class Reverse:
    """Coordinate reversal; volume preserving."""

    kind = "reverse"

    def __init__(self, d):
        self._d = int(d)

    @property
    def d(self):
        return self._d

    def params(self):
        return []

    def set_params(self, flat):
        pass

    def fwd(self, z, ctx=None):
        return z[:, ::-1].copy(), np.zeros(z.shape[0]), None

    def fwd_grad(self, cache, g_x, g_ld):
        return g_x[:, ::-1].copy(), []

    inv = fwd
    inv_grad = fwd_grad

    def spec(self):
        return {"type": self.kind, "d": self._d}


class BoxSquash:
    """Elementwise x = K * sigmoid(y), mapping R^d onto the open box (0, K)^d."""

    kind = "squash"

    def __init__(self, d, K):
        self._d = int(d)
        self.K = float(K)

    @property
    def d(self):
        return self._d

    def params(self):
        return []

    def set_params(self, flat):
        pass

    def fwd(self, y, ctx=None):
        sig = expit(y)
        ld = np.sum(np.log(self.K) + log_expit(y) + log_expit(-y), axis=1)
        return self.K * sig, ld, (sig, y)

    def fwd_grad(self, cache, g_x, g_ld):
        sig = cache[0]
        # d/dy [log s + log(1-s)] = 1 - 2s
        return g_x * self.K * sig * (1.0 - sig) + g_ld[:, None] * (1.0 - 2.0 * sig), []

    def inv(self, x, ctx=None):
        p = x / self.K
        if np.any(p <= 0.0) or np.any(p >= 1.0):
            raise DomainError(f"squash inverse needs x in (0, {self.K:g})")
        y = logit(p)
        ld = -np.sum(np.log(self.K) + np.log(p) + np.log1p(-p), axis=1)
        return y, ld, p

    def inv_grad(self, p, g_y, g_ld):
        dy = 1.0 / (self.K * p * (1.0 - p))
        dld = -(1.0 / p - 1.0 / (1.0 - p)) / self.K
        return g_y * dy + g_ld[:, None] * dld, []

    def spec(self):
        return {"type": self.kind, "d": self._d, "K": self.K}


class Sigmoid:
    """Elementwise sigmoid onto (delta, 1 - delta); inverse is the logit."""

    kind = "sigmoid"

    def __init__(self, d, delta=BOX_EPS):
        self._d = int(d)
        self.delta = float(delta)

    @property
    def d(self):
        return self._d

    def params(self):
        return []

    def set_params(self, flat):
        pass

    def fwd(self, v, ctx=None):
        u = np.clip(expit(v), self.delta, 1.0 - self.delta)
        ld = np.sum(log_expit(v) + log_expit(-v), axis=1)
        return u, ld, expit(v)

    def fwd_grad(self, sig, g_u, g_ld):
        return g_u * sig * (1.0 - sig) + g_ld[:, None] * (1.0 - 2.0 * sig), []

    def inv(self, u, ctx=None):
        if np.any(u <= 0.0) or np.any(u >= 1.0) or not np.all(np.isfinite(u)):
            raise DomainError("logit needs u strictly inside (0, 1)")
        v = logit(u)
        ld = -np.sum(np.log(u) + np.log1p(-u), axis=1)
        return v, ld, u

    def inv_grad(self, u, g_v, g_ld):
        return g_v / (u * (1.0 - u)) - g_ld[:, None] * (1.0 / u - 1.0 / (1.0 - u)), []

    def spec(self):
        return {"type": self.kind, "d": self._d, "delta": self.delta}


def sigmoid_layer(v):
    """Sigmoid with its log-det; accepts a vector or a batch."""
    vb, single = _batch(v)
    u, ld, _ = Sigmoid(vb.shape[1]).fwd(vb)
    return (u[0], float(ld[0])) if single else (u, ld)


def logit_layer(u):
    ub, single = _batch(u)
    v, ld, _ = Sigmoid(ub.shape[1]).inv(ub)
    return (v[0], float(ld[0])) if single else (v, ld)


class _Chain:
    """Ordered composition of layers with summed log-dets."""

    def __init__(self, layers, d):
        self.layers = list(layers)
        self.d = int(d)
        for layer in self.layers:
            if layer.d != self.d:
                raise DimensionError(f"layer of dim {layer.d} in a flow of dim {self.d}")

    def params(self):
        out = []
        for layer in self.layers:
            out += layer.params()
        return out

    def set_params(self, flat):
        flat = list(flat)
        i = 0
        for layer in self.layers:
            n = len(layer.params())
            layer.set_params(flat[i:i + n])
            i += n
        if i != len(flat):
            raise DimensionError("parameter list length does not match the flow")

    def _check(self, v):
        if v.shape[1] != self.d:
            raise DimensionError(f"expected dim {self.d}, got {v.shape[1]}")

    def _fwd(self, z, ctx=None):
        self._check(z)
        ld = np.zeros(z.shape[0])
        caches = []
        for layer in self.layers:
            z, l, c = layer.fwd(z, ctx)
            ld += l
            caches.append(c)
        return z, ld, caches

    def _fwd_grad(self, caches, g_x, g_ld):
        grads = []
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            g_x, g = layer.fwd_grad(c, g_x, g_ld)
            grads = g + grads
        return g_x, grads

    def _inv(self, x, ctx=None, skip_last=0):
        """Inverse pass; ``skip_last`` leaves out that many trailing layers."""
        self._check(x)
        ld = np.zeros(x.shape[0])
        caches = []
        for layer in reversed(self.layers[:len(self.layers) - skip_last]):
            x, l, c = layer.inv(x, ctx)
            ld += l
            caches.append(c)
        return x, ld, caches

    def _inv_grad(self, caches, g_z, g_ld, skip_last=0):
        grads = []
        # caches are in inverse-application order (last layer first)
        for layer, c in zip(self.layers[:len(self.layers) - skip_last], reversed(caches)):
            g_z, g = layer.inv_grad(c, g_z, g_ld)
            grads = grads + g
        return g_z, grads

    def layer_specs(self):
        return [layer.spec() for layer in self.layers]


class FlowStack(_Chain):
    """The latent map T: z -> x with log|det dT/dz|."""

    def forward(self, z):
        zb, single = _batch(z)
        x, ld, _ = self._fwd(zb)
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite flow output")
        return (x[0], float(ld[0])) if single else (x, ld)

    def inverse(self, x):
        xb, single = _batch(x)
        z, ld, _ = self._inv(xb)
        if not np.all(np.isfinite(z)):
            raise NumericError("non-finite flow inverse")
        return (z[0], float(ld[0])) if single else (z, ld)


def stack_forward(stack, z):
    return stack.forward(z)


def stack_inverse(stack, x):
    return stack.inverse(x)


class DequantFlow(_Chain):
    """Conditional map eps -> u in (0,1)^d given integer theta; defines q(u | theta).

    The conditioner of every coupling sees ``2 theta / (K - 1) - 1`` appended
    to its pass-through inputs. The last layer is a Sigmoid.
    """

    def __init__(self, layers, d, K):
        super().__init__(layers, d)
        self.K = int(K)
        if not self.layers or not isinstance(self.layers[-1], Sigmoid):
            raise DimensionError("dequantization flow must end with a Sigmoid layer")

    def encode(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if self.K <= 1:
            return np.zeros_like(theta)
        return 2.0 * theta / (self.K - 1) - 1.0

    def sample(self, theta, eps):
        """u = T(eps; theta) and log q(u | theta) = log N(eps) - log|T'(eps)|."""
        eb, single = _batch(eps)
        tb, _ = _batch(theta)
        u, ld, _ = self._fwd(eb, self.encode(tb))
        log_q = std_normal_logpdf(eb) - ld
        return (u[0], float(log_q[0])) if single else (u, log_q)

    def log_q(self, theta, u):
        ub, single = _batch(u)
        tb, _ = _batch(theta)
        eps, ld_inv, _ = self._inv(ub, self.encode(tb))
        out = std_normal_logpdf(eps) + ld_inv
        return float(out[0]) if single else out


def dequant_sample(flow, theta, eps):
    return flow.sample(theta, eps)


def dequant_logq(flow, theta, u):
    return flow.log_q(theta, u)


def _alt_mask(d, parity):
    if d == 1:
        return np.zeros(1, dtype=bool)
    return (np.arange(d) % 2) == parity


def build_latent_flow(d, K, depth=8, hidden=(64, 64), rng=None, squash=True,
                      clamp=SCALE_CLAMP):
    """Alternating-mask affine couplings, reversal between pairs, optional box squash."""
    rng = np.random.default_rng(0) if rng is None else rng
    layers = []
    for i in range(depth):
        layers.append(AffineCoupling.create(_alt_mask(d, i % 2), rng, hidden, clamp=clamp))
        if i % 2 == 1 and i < depth - 1:
            layers.append(Reverse(d))
    if squash:
        layers.append(BoxSquash(d, K))
    return FlowStack(layers, d)


def build_dequant_flow(d, K, depth=4, hidden=(64, 64), rng=None, clamp=SCALE_CLAMP):
    rng = np.random.default_rng(1) if rng is None else rng
    layers = []
    for i in range(depth):
        layers.append(AffineCoupling.create(_alt_mask(d, i % 2), rng, hidden, n_ctx=d, clamp=clamp))
        if i % 2 == 1 and i < depth - 1:
            layers.append(Reverse(d))
    layers.append(Sigmoid(d))
    return DequantFlow(layers, d, K)


# -- rounding surjection -----------------------------------------------------------


def round_forward(x, K):
    """theta = floor(x) clamped into {0..K-1}; returns (theta, out_of_domain).

    ``out_of_domain`` is a per-row boolean for batched input.
    """
    xb, single = _batch(x)
    raw = np.floor(xb)
    theta = np.clip(raw, 0, K - 1)
    ood = np.any(raw != theta, axis=1)
    theta = theta.astype(np.int64)
    return (theta[0], bool(ood[0])) if single else (theta, ood)


def round_inverse(theta, u):
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0.0) or np.any(u >= 1.0):
        raise DomainError("u must lie in [0, 1)")
    return np.asarray(theta, dtype=np.float64) + u


# -- checkpoints -------------------------------------------------------------------
# magic "DQFL" | u32 version | u32 header_len | JSON header | MLP blocks (numcore format)
# in the order: latent-flow couplings, then dequant-flow couplings.

CKPT_MAGIC = b"DQFL"
CKPT_VERSION = 1


def _layers_from_spec(specs, nets):
    layers = []
    for s in specs:
        if s["type"] == "coupling":
            layers.append(AffineCoupling(np.array(s["mask"], dtype=bool), next(nets),
                                         clamp=s["clamp"], n_ctx=s["n_ctx"]))
        elif s["type"] == "reverse":
            layers.append(Reverse(s["d"]))
        elif s["type"] == "squash":
            layers.append(BoxSquash(s["d"], s["K"]))
        elif s["type"] == "sigmoid":
            layers.append(Sigmoid(s["d"], s["delta"]))
        else:
            raise FormatError(f"unknown layer type {s['type']!r}")
    return layers


def checkpoint_bytes(latent, dequant, meta=None):
    header = {
        "d": latent.d,
        "K": dequant.K,
        "latent": latent.layer_specs(),
        "dequant": dequant.layer_specs(),
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(hb)))
    buf.write(hb)
    for flow in (latent, dequant):
        for layer in flow.layers:
            if isinstance(layer, AffineCoupling):
                write_mlp(buf, layer.net)
    return buf.getvalue()


def save_checkpoint(path, latent, dequant, meta=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(latent, dequant, meta))


def load_checkpoint(path):
    """Returns (latent FlowStack, DequantFlow, header dict)."""
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    if buf.read(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a flow checkpoint")
    version, hlen = struct.unpack("<II", buf.read(8))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(buf.read(hlen))

    def nets():
        while True:
            yield read_mlp(buf)

    gen = nets()
    latent = FlowStack(_layers_from_spec(header["latent"], gen), header["d"])
    dequant = DequantFlow(_layers_from_spec(header["dequant"], gen), header["d"], header["K"])
    return latent, dequant, header
