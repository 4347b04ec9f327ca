"""First-order optimizers over named :class:`~advlm.autodiff.Tensor` parameters."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ConfigInvalid

KINDS = ("sgd", "sgd-momentum", "adam")


class Optimizer:
    """Base class. With ``maximize=True`` the optimizer ascends the gradient."""

    kind = "base"

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0, maximize: bool = False):
        self.params = dict(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.maximize = maximize
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _direction(self, p: Tensor) -> np.ndarray:
        g = -p.grad if self.maximize else p.grad
        if self.weight_decay:
            g = g + self.weight_decay * p.data
        return g

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is not None:
                self._update(name, p, self._direction(p))

    def _update(self, name: str, p: Tensor, g: np.ndarray) -> None:
        raise NotImplementedError

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        pass


class SGD(Optimizer):
    def __init__(self, params, lr, momentum: float = 0.0, weight_decay: float = 0.0, maximize: bool = False):
        super().__init__(params, lr, weight_decay, maximize)
        self.momentum = float(momentum)
        self.kind = "sgd-momentum" if momentum else "sgd"
        self.buf: dict[str, np.ndarray] = {}

    def _update(self, name, p, g):
        if self.momentum:
            buf = self.buf.get(name)
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.buf[name] = buf
            g = buf
        p.data -= self.lr * g

    def state_arrays(self):
        return {f"momentum.{k}": v for k, v in self.buf.items()}

    def load_state_arrays(self, arrays):
        self.buf = {k[len("momentum.") :]: v.astype(self.params[k[len("momentum.") :]].dtype) for k, v in arrays.items()}


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0, maximize=False):
        super().__init__(params, lr, weight_decay, maximize)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def _update(self, name, p, g):
        m = self.m.get(name)
        v = self.v.get(name)
        m = (1 - self.b1) * g if m is None else self.b1 * m + (1 - self.b1) * g
        v = (1 - self.b2) * g * g if v is None else self.b2 * v + (1 - self.b2) * g * g
        self.m[name], self.v[name] = m, v
        m_hat = m / (1 - self.b1**self.t)
        v_hat = v / (1 - self.b2**self.t)
        p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self):
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays):
        self.m, self.v = {}, {}
        for k, arr in arrays.items():
            kind, name = k.split(".", 1)
            getattr(self, kind)[name] = arr.astype(self.params[name].dtype)


def make_optimizer(
    kind: str,
    params: dict[str, Tensor],
    lr: float,
    *,
    momentum: float = 0.9,
    betas=(0.9, 0.999),
    weight_decay: float = 0.0,
    maximize: bool = False,
) -> Optimizer:
    if kind == "sgd":
        return SGD(params, lr, 0.0, weight_decay, maximize)
    if kind == "sgd-momentum":
        return SGD(params, lr, momentum, weight_decay, maximize)
    if kind == "adam":
        return Adam(params, lr, betas, weight_decay=weight_decay, maximize=maximize)
    raise ConfigInvalid(f"unknown optimizer {kind!r}; expected one of {KINDS}")


def global_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return float(np.sqrt(total))


def clip_gradients(params, threshold: float) -> float:
    """Scale all grads so their global L2 norm is at most ``threshold``.

    Returns the scale applied (1.0 when no clipping happened; grads are then
    left untouched).
    """
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    params = [p for p in params if p.grad is not None]
    norm = global_norm(params)
    if norm <= threshold:
        return 1.0
    factor = threshold / norm
    for p in params:
        p.grad = p.grad * p.grad.dtype.type(factor)
    return factor
