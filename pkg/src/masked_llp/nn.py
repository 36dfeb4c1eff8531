"""Tiny channels-last convolutional networks with hand-written backprop.

A :class:`Network` is a fixed topology (a list of layer descriptors) plus one
flat float64 parameter vector. ``forward`` returns the output and a tape;
``backward`` walks the tape in reverse and returns the gradient as a flat
vector aligned with ``params``. Inputs are ``(N, H, W, C)`` arrays.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"MLLPCKPT"


def conv(cin: int, cout: int, k: int = 3) -> dict:
    return {"type": "conv", "in": cin, "out": cout, "k": k}


def act(name: str) -> dict:
    return {"type": name}


def avgpool(k: int = 2) -> dict:
    return {"type": "avgpool", "k": k}


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    return _sigmoid(np.asarray(x, dtype=np.float64))


class Network:
    """Sequential stack of conv / activation / pooling layers."""

    def __init__(self, topology: list[dict], params: np.ndarray | None = None, seed: int = 0):
        self.topology = [dict(layer) for layer in topology]
        self._slices = []
        offset = 0
        for layer in self.topology:
            if layer["type"] == "conv":
                nw = layer["k"] * layer["k"] * layer["in"] * layer["out"]
                self._slices.append((offset, offset + nw, offset + nw + layer["out"]))
                offset += nw + layer["out"]
            elif layer["type"] in ("relu", "softplus", "sigmoid", "avgpool"):
                self._slices.append(None)
            else:
                raise ValueError(f"unknown layer type {layer['type']!r}")
        self.n_params = offset
        if params is None:
            params = self.init_params(seed)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        self.params = params

    @property
    def downsample(self) -> int:
        d = 1
        for layer in self.topology:
            if layer["type"] == "avgpool":
                d *= layer["k"]
        return d

    def init_params(self, seed: int) -> np.ndarray:
        """He-normal weights, zero biases, from a seeded generator."""
        rng = np.random.default_rng(seed)
        p = np.zeros(self.n_params)
        for layer, sl in zip(self.topology, self._slices):
            if sl is None:
                continue
            fan_in = layer["k"] * layer["k"] * layer["in"]
            p[sl[0] : sl[1]] = rng.normal(0.0, np.sqrt(2.0 / fan_in), sl[1] - sl[0])
        return p

    def _weights(self, params, i):
        layer = self.topology[i]
        a, b, c = self._slices[i]
        w = params[a:b].reshape(layer["k"], layer["k"], layer["in"], layer["out"])
        return w, params[b:c]

    def copy(self, params: np.ndarray | None = None) -> "Network":
        return Network(self.topology, self.params.copy() if params is None else params)

    def forward(self, x: np.ndarray, params: np.ndarray | None = None):
        """Run the stack on ``x`` of shape (N, H, W, C); returns (output, tape)."""
        params = self.params if params is None else params
        x = np.asarray(x, dtype=np.float64)
        tape = []
        for i, layer in enumerate(self.topology):
            t = layer["type"]
            if t == "conv":
                w, b = self._weights(params, i)
                k = layer["k"]
                pad = k // 2
                xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
                n, h, wd, _ = x.shape
                y = np.empty((n, h, wd, layer["out"]))
                y[...] = b
                for di in range(k):
                    for dj in range(k):
                        y += xp[:, di : di + h, dj : dj + wd, :] @ w[di, dj]
                tape.append(xp)
                x = y
            elif t == "relu":
                tape.append(x > 0)
                x = np.where(x > 0, x, 0.0)
            elif t == "softplus":
                tape.append(x)
                x = _softplus(x)
            elif t == "sigmoid":
                x = _sigmoid(x)
                tape.append(x)
            elif t == "avgpool":
                k = layer["k"]
                n, h, wd, c = x.shape
                if h % k or wd % k:
                    raise ValueError(f"avgpool({k}) needs dimensions divisible by {k}, got {h}x{wd}")
                tape.append(x.shape)
                x = x.reshape(n, h // k, k, wd // k, k, c).mean(axis=(2, 4))
        return x, tape

    def backward(self, tape, grad_out: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        params = self.params if params is None else params
        grad = np.zeros(self.n_params)
        g = np.asarray(grad_out, dtype=np.float64)
        for i in range(len(self.topology) - 1, -1, -1):
            layer = self.topology[i]
            t = layer["type"]
            saved = tape[i]
            if t == "conv":
                w, _ = self._weights(params, i)
                a, b, c = self._slices[i]
                k = layer["k"]
                pad = k // 2
                xp = saved
                n, h, wd, cout = g.shape
                gw = np.empty_like(w)
                g2 = g.reshape(-1, cout)
                for di in range(k):
                    for dj in range(k):
                        xs = xp[:, di : di + h, dj : dj + wd, :].reshape(-1, layer["in"])
                        gw[di, dj] = xs.T @ g2
                grad[a:b] = gw.ravel()
                grad[b:c] = g2.sum(axis=0)
                if i == 0:
                    break
                gxp = np.zeros(xp.shape)
                for di in range(k):
                    for dj in range(k):
                        gxp[:, di : di + h, dj : dj + wd, :] += g @ w[di, dj].T
                g = gxp[:, pad : pad + h, pad : pad + wd, :] if pad else gxp
            elif t == "relu":
                g = np.where(saved, g, 0.0)
            elif t == "softplus":
                g = g * _sigmoid(saved)
            elif t == "sigmoid":
                g = g * saved * (1.0 - saved)
            elif t == "avgpool":
                k = layer["k"]
                n, h, wd, c = saved
                g = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
        return grad

    def digest(self) -> str:
        return hashlib.sha256(self.params.astype("<f8").tobytes()).hexdigest()


# ---------------------------------------------------------------- optimizers


class Momentum:
    """Heavy-ball gradient descent: v <- mu*v - lr*g; p <- p + v."""

    def __init__(self, lr: float, momentum: float = 0.9, clip: float | None = None):
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.velocity = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        grad = _clip(grad, self.clip)
        if self.velocity is None:
            self.velocity = np.zeros_like(params)
        self.velocity = self.momentum * self.velocity - self.lr * grad
        return params + self.velocity


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, clip: float | None = None):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = self.v = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        grad = _clip(grad, self.clip)
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _clip(grad, max_norm):
    if max_norm is None:
        return grad
    norm = float(np.sqrt(np.dot(grad, grad)))
    return grad * (max_norm / norm) if norm > max_norm else grad


def make_optimizer(name: str, lr: float, momentum: float = 0.9, clip: float | None = None):
    if name == "momentum":
        return Momentum(lr, momentum, clip)
    if name == "adam":
        return Adam(lr, clip=clip)
    raise ValueError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, net: Network, **header) -> None:
    """Write magic, a length-prefixed JSON header, then little-endian float64 params."""
    doc = {"topology": net.topology, "n_params": net.n_params, **header}
    blob = json.dumps(doc, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(net.params.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[Network, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<Q", raw[pos : pos + 8])
    header = json.loads(raw[pos + 8 : pos + 8 + n])
    params = np.frombuffer(raw, dtype="<f8", offset=pos + 8 + n).astype(np.float64)
    if params.size != header["n_params"]:
        raise ValueError(f"{path}: parameter blob has {params.size} values, header says {header['n_params']}")
    return Network(header["topology"], params), header
