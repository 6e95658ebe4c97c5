"""Velocity-field MLP with hand-written reverse mode.

Input is ``[x, sin(w_k t), cos(w_k t)]``; hidden layers use SiLU; the output
layer is linear and starts at zero so a fresh model predicts v = 0.

A time-gated elementwise skip ``(emb(t) @ A + a0) * x`` is added to the MLP
output. The ideal field is dominated by a ``-x / (1 - t)`` term, which a
network narrower than the state cannot carry through its hidden layers.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class FlowError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    dim: int
    widths: tuple = (512, 512, 512, 512)
    n_freq: int = 16
    max_freq: float = 100.0
    skip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.dim < 1 or not self.widths or min(self.widths) < 1:
            raise FlowError("invalid architecture")
        if self.n_freq < 1:
            raise FlowError("n_freq must be >= 1")

    @property
    def layer_sizes(self) -> list[tuple[int, int]]:
        sizes = [self.dim + 2 * self.n_freq, *self.widths, self.dim]
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def frequencies(self) -> np.ndarray:
        return np.geomspace(1.0, self.max_freq, self.n_freq)


def time_embedding(t: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    ang = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


class FlowModel:
    """Parameters are kept as ``[W0, b0, W1, b1, ..., (A, a0)]`` with ``W`` of
    shape (fan_in, fan_out); ``A`` (2*n_freq, D) and ``a0`` (D,) exist only
    when the architecture has the gated skip."""

    def __init__(self, arch: Architecture, seed=0, dtype=np.float32):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params: list[np.ndarray] = []
        n_layers = len(arch.layer_sizes)
        for i, (fan_in, fan_out) in enumerate(arch.layer_sizes):
            if i == n_layers - 1:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.params.append(w.astype(self.dtype))
            self.params.append(np.zeros(fan_out, dtype=self.dtype))
        if arch.skip:
            self.params.append(np.zeros((2 * arch.n_freq, arch.dim), dtype=self.dtype))
            self.params.append(np.zeros(arch.dim, dtype=self.dtype))
        self.loss_trace: list[tuple[int, float]] = []

    @property
    def dim(self) -> int:
        return self.arch.dim

    @property
    def n_layers(self) -> int:
        return len(self.arch.layer_sizes)

    def copy(self) -> "FlowModel":
        new = copy.copy(self)
        new.params = [p.copy() for p in self.params]
        new.loss_trace = list(self.loss_trace)
        return new

    def astype(self, dtype) -> "FlowModel":
        new = self.copy()
        new.dtype = np.dtype(dtype)
        new.params = [p.astype(new.dtype) for p in self.params]
        return new

    # -- evaluation ------------------------------------------------------

    def _inputs(self, x, t):
        x = np.asarray(x)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        if x2.shape[1] != self.dim:
            raise FlowError(f"state has dimension {x2.shape[1]}, model expects {self.dim}")
        if not np.all(np.isfinite(x2)):
            raise FlowError("non-finite state passed to velocity field")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (len(x2),))
        if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
            raise FlowError("t must lie in [0, 1]")
        h = np.concatenate([x2, time_embedding(t, self.arch.frequencies)], axis=1).astype(self.dtype)
        return h, single

    def forward(self, x, t, keep: bool = False):
        h, single = self._inputs(x, t)
        cache = [h]
        n = self.n_layers
        for i in range(n):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ w + b
            if i < n - 1:
                h, s = _silu(z)
                if keep:
                    cache.append((z, s, h))
            else:
                h = z
        if self.arch.skip:
            x_in, emb = cache[0][:, :self.dim], cache[0][:, self.dim:]
            gate = emb @ self.params[-2] + self.params[-1]
            h = h + gate * x_in
        out = h[0] if single else h
        return (out, cache) if keep else out

    def velocity(self, x, t) -> np.ndarray:
        return self.forward(x, t)

    __call__ = velocity

    def backward(self, cache, grad_out: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients given d(loss)/d(output)."""
        grads: list[Optional[np.ndarray]] = [None] * len(self.params)
        g = np.atleast_2d(grad_out).astype(self.dtype)
        n = self.n_layers
        if self.arch.skip:
            x_in, emb = cache[0][:, :self.dim], cache[0][:, self.dim:]
            gx = g * x_in
            grads[-2] = emb.T @ gx
            grads[-1] = gx.sum(axis=0)
        for i in range(n - 1, -1, -1):
            h_in = cache[0] if i == 0 else cache[i][2]
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                z, s, _ = cache[i]
                g = (g @ self.params[2 * i].T) * (s * (1.0 + z * (1.0 - s)))
        return grads


def velocity_eval(model: FlowModel, x, t) -> np.ndarray:
    return model.velocity(x, t)


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: Optional[float] = None) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        lr = self.lr if lr is None else lr
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
