"""Layers, weight initialization and the Adam optimizer.

Modules are plain classes exposing `params()` as a flat name->Var mapping;
`namespaced` joins those mappings under dotted prefixes so checkpoints and
optimizers can address every trainable array by a stable name.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (Var, add, avg_pool2, conv2d, div, matmul, parameter, relu,
                       spatial_mean, sqrt, square, sub, vmean)


def he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Linear:
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int):
        self.W = parameter(he_uniform(rng, n_in, (n_in, n_out)))
        self.b = parameter(np.zeros(n_out))

    def __call__(self, x: Var) -> Var:
        return matmul(x, self.W) + self.b

    def params(self) -> dict[str, Var]:
        return {"W": self.W, "b": self.b}


class Conv2d:
    """3x3 convolution, stride 1, pad 1 (shape preserving)."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3):
        self.W = parameter(he_uniform(rng, c_in * k * k, (c_out, c_in, k, k)))
        self.b = parameter(np.zeros(c_out))
        self.pad = k // 2

    def __call__(self, x: Var) -> Var:
        return conv2d(x, self.W, self.b, pad=self.pad)

    def params(self) -> dict[str, Var]:
        return {"W": self.W, "b": self.b}


class MLP:
    """Linear stack with ReLU between layers and a linear final layer.

    `dims` lists layer widths input-first, e.g. [128, 64, 3]. A two-entry
    dims gives a single linear map.
    """

    def __init__(self, rng: np.random.Generator, dims: list[int]):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        self.layers = [Linear(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def __call__(self, x: Var) -> Var:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x

    def params(self) -> dict[str, Var]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"fc{i}.{k}"] = v
        return out


class ConvTrunk:
    """Stack of conv -> ReLU -> 2x2 average pool blocks followed by global
    average pooling. Channel widths double per block."""

    def __init__(self, rng: np.random.Generator, in_channels: int, width: int, depth: int):
        self.blocks = []
        c = in_channels
        for i in range(depth):
            c_out = width * (2 ** i)
            self.blocks.append(Conv2d(rng, c, c_out))
            c = c_out
        self.out_channels = c
        self.depth = depth

    def __call__(self, x: Var) -> Var:
        for blk in self.blocks:
            x = avg_pool2(relu(blk(x)))
        return spatial_mean(x)

    def params(self) -> dict[str, Var]:
        out = {}
        for i, blk in enumerate(self.blocks):
            for k, v in blk.params().items():
                out[f"conv{i}.{k}"] = v
        return out


class ConvEncoder:
    """Conv trunk plus a linear projection head to the latent dimension.

    With `unit_norm` the head output is centered and scaled per sample
    (layer normalization without the affine part), so codes live at a fixed
    scale. Every consumer of the codes -- classifier head, prototype
    distances, the dependence penalty -- then works in the same units, and
    no loss term can cheat by inflating or shrinking the code magnitude.
    """

    def __init__(self, rng: np.random.Generator, in_channels: int, width: int,
                 depth: int, out_dim: int, trunk: ConvTrunk | None = None,
                 unit_norm: bool = False):
        self.trunk = trunk if trunk is not None else ConvTrunk(rng, in_channels, width, depth)
        self.head = Linear(rng, self.trunk.out_channels, out_dim)
        self.unit_norm = unit_norm

    def __call__(self, x: Var) -> Var:
        z = self.head(self.trunk(x))
        if not self.unit_norm:
            return z
        mu = vmean(z, axis=1, keepdims=True)
        cen = sub(z, mu)
        var = vmean(square(cen), axis=1, keepdims=True)
        return div(cen, sqrt(add(var, Var(1e-4))))

    def params(self) -> dict[str, Var]:
        out = {f"trunk.{k}": v for k, v in self.trunk.params().items()}
        out.update({f"head.{k}": v for k, v in self.head.params().items()})
        return out


def namespaced(**groups) -> dict[str, Var]:
    """Join each group's params() (or a raw Var) under dotted prefixes."""
    out: dict[str, Var] = {}
    for prefix, obj in groups.items():
        if obj is None:
            continue
        if isinstance(obj, Var):
            out[prefix] = obj
            continue
        for k, v in obj.params().items():
            out[f"{prefix}.{k}"] = v
    return out


def dedup_params(params: dict[str, Var]) -> dict[str, Var]:
    """Drop aliased entries (same underlying Var) keeping the first name."""
    seen: set[int] = set()
    out = {}
    for k, v in params.items():
        if id(v) in seen:
            continue
        seen.add(id(v))
        out[k] = v
    return out


class Adam:
    """Adam with optional coupled L2 weight decay (decay added to the gradient).

    Parameters with a `None` gradient are skipped entirely, so unused model
    parts are neither updated nor decayed. `step(lr=...)` lets a schedule
    supply the rate; lr=0 leaves parameter values bitwise unchanged.
    """

    def __init__(self, params: dict[str, Var], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        self.t += 1
        lr = self.lr if lr is None else lr
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    def load_state_dict(self, sd: dict) -> None:
        self.t = int(sd["t"])
        for k in self.m:
            self.m[k] = np.array(sd["m"][k], dtype=np.float64)
            self.v[k] = np.array(sd["v"][k], dtype=np.float64)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from base_lr to 0 over total_steps."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step / total_steps, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))
