"""Small multilayer perceptrons with hand-written backprop, Adam and running
input normalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


class MLP:
    """ReLU hidden layers, linear output. Parameters live in ``self.W`` / ``self.b``."""

    def __init__(self, sizes, rng: np.random.Generator | None = None, out_scale: float = 0.01):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise InvalidInputError("an MLP needs at least input and output widths >= 1")
        self.sizes = sizes
        self.W: list[np.ndarray] = []
        self.b: list[np.ndarray] = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            # orthogonal-like init: QR of a gaussian, He-style gain
            a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
            q, r = np.linalg.qr(a)
            q = q * np.sign(np.diag(r))
            w = q if n_in >= n_out else q.T
            gain = np.sqrt(2.0) if i < len(sizes) - 2 else out_scale
            self.W.append(gain * w.reshape(n_in, n_out))
            self.b.append(np.zeros(n_out))

    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.W, self.b) for p in pair]

    def set_params(self, params) -> None:
        params = list(params)
        self.W = [np.array(p, dtype=float) for p in params[0::2]]
        self.b = [np.array(p, dtype=float) for p in params[1::2]]

    def zero_(self) -> "MLP":
        for w, b in zip(self.W, self.b):
            w[:] = 0.0
            b[:] = 0.0
        return self

    def copy(self) -> "MLP":
        out = MLP.__new__(MLP)
        out.sizes = list(self.sizes)
        out.W = [w.copy() for w in self.W]
        out.b = [b.copy() for b in self.b]
        return out

    def forward(self, x: np.ndarray):
        """Returns (output, cache)."""
        acts = [x]
        h = x
        last = len(self.W) - 1
        for i, (w, b) in enumerate(zip(self.W, self.b)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, acts, g_out: np.ndarray):
        """Gradients summed over the batch, plus the gradient on the input."""
        n = len(self.W)
        gW = [None] * n
        gb = [None] * n
        g = g_out
        for i in range(n - 1, -1, -1):
            if i < n - 1:
                g = g * (acts[i + 1] > 0.0)
            gW[i] = acts[i].T @ g
            gb[i] = g.sum(axis=0)
            g = g @ self.W[i].T
        return [p for pair in zip(gW, gb) for p in pair], g


@dataclass
class RunningNormalizer:
    """Per-feature running mean/variance (parallel Welford merge)."""

    size: int
    count: float = 0.0
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    eps: float = 1e-8
    clip: float = 10.0
    frozen: bool = False

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.size)
        if self.var is None:
            self.var = np.ones(self.size)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.var, self.eps))

    def update(self, x: np.ndarray) -> None:
        if self.frozen:
            return
        x = np.asarray(x, dtype=float).reshape(-1, self.size)
        n = x.shape[0]
        if n == 0:
            return
        m = x.mean(axis=0)
        v = x.var(axis=0)
        tot = self.count + n
        delta = m - self.mean
        new_mean = self.mean + delta * (n / tot)
        m2 = self.var * self.count + v * n + delta**2 * (self.count * n / tot)
        self.mean = new_mean
        self.var = np.maximum(m2 / tot, 0.0)
        self.count = tot

    def __call__(self, x):
        return np.clip((x - self.mean) / self.std, -self.clip, self.clip)

    def grad_scale(self, x) -> np.ndarray:
        """d normalized / d x (elementwise), zero where clipped."""
        z = (x - self.mean) / self.std
        return (np.abs(z) < self.clip) / self.std

    def state(self) -> dict:
        return {"count": np.array(self.count), "mean": self.mean.copy(), "var": self.var.copy()}

    def load(self, d) -> None:
        self.count = float(d["count"])
        self.mean = np.array(d["mean"], dtype=float)
        self.var = np.array(d["var"], dtype=float)

    def copy(self) -> "RunningNormalizer":
        return RunningNormalizer(self.size, self.count, self.mean.copy(), self.var.copy(), self.eps, self.clip,
                                 self.frozen)


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 max_grad_norm: float | None = None):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """In-place update of ``params``."""
        if self.max_grad_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.max_grad_norm:
                grads = [g * (self.max_grad_norm / norm) for g in grads]
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        d = {"t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            d[f"m{i}"] = m.copy()
            d[f"v{i}"] = v.copy()
        return d

    def load(self, d) -> None:
        self.t = int(d["t"])
        self.m = [np.array(d[f"m{i}"]) for i in range(len(self.m))]
        self.v = [np.array(d[f"v{i}"]) for i in range(len(self.v))]


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))
