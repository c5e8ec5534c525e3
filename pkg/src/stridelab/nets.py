"""Minimal differentiable layers with manual reverse-mode gradients.

Everything the policy, value, encoder, and reconstruction networks need:
dense and 1-D convolution layers, ELU, nearest upsampling, diagonal-Gaussian
action heads, Adam, and a little-endian binary checkpoint format.

Layers are batched: dense inputs are (B, n), conv inputs (B, C, L).
Training runs in float32; pass dtype=np.float64 for gradient-check tests.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

CHECKPOINT_MAGIC = b"GFNET1"

LOG_STD_MIN = -4.0
LOG_STD_MAX = 1.0


def elu(x):
    """ELU: x for x >= 0, exp(x) - 1 otherwise, elementwise."""
    x = np.asarray(x)
    return np.where(x >= 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    x = np.asarray(x)
    return np.where(x >= 0, np.ones_like(x), np.exp(np.minimum(x, 0.0)))


class Dense:
    def __init__(self, n_in, n_out, rng, dtype=np.float32, w_scale=None):
        if w_scale is None:
            w_scale = 1.0 / np.sqrt(n_in)
        self.W = (rng.standard_normal((n_in, n_out)) * w_scale).astype(dtype)
        self.b = np.zeros(n_out, dtype=dtype)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x):
        self._x = x
        return x @ self.W + self.b

    def backward(self, g):
        if self._x is None:
            raise RuntimeError("backward before forward")
        self.gW += self._x.T @ g
        self.gb += g.sum(axis=0)
        return g @ self.W.T

    def params(self):
        return [self.W, self.b]

    def grads(self):
        return [self.gW, self.gb]


class Elu:
    def __init__(self):
        self._x = None

    def forward(self, x):
        self._x = x
        return elu(x)

    def backward(self, g):
        if self._x is None:
            raise RuntimeError("backward before forward")
        return g * elu_grad(self._x)

    def params(self):
        return []

    def grads(self):
        return []


class Conv1d:
    """1-D convolution with replicate (edge) padding.

    Kernel size must be odd so the stride-1 output grid aligns with the
    input grid; replicate padding keeps strip boundaries free of phantom
    discontinuities.
    """

    def __init__(self, c_in, c_out, kernel, rng, stride=1, dtype=np.float32,
                 w_scale=None):
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if w_scale is None:
            w_scale = 1.0 / np.sqrt(c_in * kernel)
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        self.W = (rng.standard_normal((c_out, c_in, kernel)) * w_scale).astype(dtype)
        self.b = np.zeros(c_out, dtype=dtype)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._cols = None
        self._len_in = None

    def _window_index(self, length):
        # per output position, the padded-input indices of the receptive field
        pad = self.kernel // 2
        n_out = (length + self.stride - 1) // self.stride
        starts = np.arange(n_out) * self.stride
        idx = starts[:, None] + np.arange(self.kernel)[None, :]  # into padded signal
        return idx, pad, n_out

    def forward(self, x):
        if x.shape[1] != self.c_in:
            raise ValueError(f"expected {self.c_in} channels, got {x.shape[1]}")
        length = x.shape[2]
        idx, pad, n_out = self._window_index(length)
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)), mode="edge")
        cols = xp[:, :, idx]                       # (B, C, n_out, K)
        self._cols = cols
        self._len_in = length
        out = np.einsum("bcok,dck->bdo", cols, self.W, optimize=True)
        return out + self.b[None, :, None]

    def backward(self, g):
        if self._cols is None:
            raise RuntimeError("backward before forward")
        self.gW += np.einsum("bdo,bcok->dck", g, self._cols, optimize=True)
        self.gb += g.sum(axis=(0, 2))
        gcols = np.einsum("bdo,dck->bcok", g, self.W, optimize=True)
        length = self._len_in
        idx, pad, _ = self._window_index(length)
        gxp = np.zeros((g.shape[0], self.c_in, length + 2 * pad), dtype=g.dtype)
        np.add.at(gxp, (slice(None), slice(None), idx), gcols)
        gx = gxp[:, :, pad:pad + length].copy()
        # replicate padding routes edge-pad gradients back to the boundary cells
        gx[:, :, 0] += gxp[:, :, :pad].sum(axis=2)
        gx[:, :, -1] += gxp[:, :, pad + length:].sum(axis=2)
        return gx

    def params(self):
        return [self.W, self.b]

    def grads(self):
        return [self.gW, self.gb]


class Upsample1d:
    """Nearest-neighbour upsampling to a fixed target length."""

    def __init__(self, target_len):
        self.target_len = target_len
        self._src = None
        self._len_in = None

    def forward(self, x):
        length = x.shape[2]
        src = (np.arange(self.target_len) * length) // self.target_len
        self._src = src
        self._len_in = length
        return x[:, :, src]

    def backward(self, g):
        gx = np.zeros(g.shape[:2] + (self._len_in,), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), self._src), g)
        return gx

    def params(self):
        return []

    def grads(self):
        return []


class Mlp:
    """Fully connected stack: ELU on hidden layers, identity output."""

    def __init__(self, widths, rng, dtype=np.float32, out_scale=None):
        if len(widths) < 3:
            raise ValueError("need at least one hidden layer")
        if any(w <= 0 for w in widths):
            raise ValueError("layer widths must be positive")
        self.widths = list(widths)
        self.layers = []
        for i in range(len(widths) - 1):
            last = i == len(widths) - 2
            scale = out_scale if last else None
            self.layers.append(Dense(widths[i], widths[i + 1], rng, dtype=dtype,
                                     w_scale=scale))
            if not last:
                self.layers.append(Elu())

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers for g in layer.grads()]


class GaussianHead:
    """Diagonal Gaussian over actions with a state-independent learned log-std."""

    def __init__(self, dim, init_log_std=0.0, dtype=np.float32):
        self.log_std = np.full(dim, init_log_std, dtype=dtype)
        self.g_log_std = np.zeros_like(self.log_std)

    def _clamped(self):
        return np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def std(self):
        return np.exp(self._clamped())

    def sample(self, mean, rng):
        std = self.std()
        action = mean + rng.standard_normal(mean.shape).astype(mean.dtype) * std
        return action, self.log_prob(mean, action)

    def log_prob(self, mean, action):
        std = self.std()
        z = (action - mean) / std
        return -0.5 * np.sum(z * z, axis=-1) - np.sum(self._clamped()) \
            - 0.5 * mean.shape[-1] * np.log(2.0 * np.pi)

    def log_prob_backward(self, mean, action, g):
        """Gradients of sum(g * log_prob) w.r.t. mean; accumulates g_log_std."""
        clamped = self._clamped()
        std = np.exp(clamped)
        z = (action - mean) / std
        g_mean = g[:, None] * z / std
        active = ((self.log_std > LOG_STD_MIN) & (self.log_std < LOG_STD_MAX))
        d_log_std = g[:, None] * (z * z - 1.0)
        self.g_log_std += np.where(active, d_log_std.sum(axis=0), 0.0)
        return g_mean

    def entropy(self):
        return float(np.sum(self._clamped()) +
                     0.5 * len(self.log_std) * np.log(2.0 * np.pi * np.e))

    def entropy_backward(self, g):
        active = ((self.log_std > LOG_STD_MIN) & (self.log_std < LOG_STD_MAX))
        self.g_log_std += np.where(active, g, 0.0)

    def params(self):
        return [self.log_std]

    def grads(self):
        return [self.g_log_std]


def zero_grads(modules):
    for m in modules:
        for g in m.grads():
            g[...] = 0.0


class Adam:
    """Standard Adam with bias correction; rejects non-finite gradients."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.step_count = 0

    def step(self, grads):
        grads = list(grads)
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        for p, g in zip(self.params, grads):
            if p.shape != g.shape:
                raise ValueError("gradient shape mismatch")
        if not all(np.all(np.isfinite(g)) for g in grads):
            return False
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return True


def spec_hash(description: str) -> bytes:
    """16-byte architecture fingerprint stored in checkpoint headers."""
    return hashlib.sha256(description.encode()).digest()[:16]


def save_checkpoint(path, param_arrays, arch_description: str):
    """Binary checkpoint: magic, spec hash, parameter count, raw f32 block."""
    flat = [np.asarray(p, dtype="<f4").ravel() for p in param_arrays]
    count = int(sum(a.size for a in flat))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(spec_hash(arch_description))
        fh.write(struct.pack("<Q", count))
        for a in flat:
            fh.write(a.tobytes())


def load_checkpoint(path, param_arrays, arch_description: str):
    """Load raw f32 blocks back into the given arrays, in declaration order."""
    with open(path, "rb") as fh:
        magic = fh.read(6)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        stored_hash = fh.read(16)
        if stored_hash != spec_hash(arch_description):
            raise ValueError("checkpoint architecture hash mismatch")
        (count,) = struct.unpack("<Q", fh.read(8))
        expected = sum(int(np.asarray(p).size) for p in param_arrays)
        if count != expected:
            raise ValueError(f"checkpoint holds {count} params, expected {expected}")
        for p in param_arrays:
            raw = fh.read(4 * p.size)
            block = np.frombuffer(raw, dtype="<f4").reshape(p.shape)
            p[...] = block.astype(p.dtype)
