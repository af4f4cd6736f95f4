"""SGD, Adam, global-norm clipping and the per-epoch learning-rate decay."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .nn import Parameter


class Optimizer:
    def __init__(self, params: Sequence[Parameter], lr: float, decay: float = 1.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.base_lr = lr
        self.decay = decay
        self.epoch = 0

    @property
    def lr(self) -> float:
        # closed form rather than repeated multiplication: lr_k == lr_0 * decay**k exactly
        return self.base_lr * self.decay ** self.epoch

    def end_epoch(self) -> None:
        self.epoch += 1

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        raise NotImplementedError

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        pass


class SGD(Optimizer):
    def __init__(self, params, lr: float = 1e-2, momentum: float = 0.9, weight_decay: float = 0.0,
                 decay: float = 1.0):
        super().__init__(params, lr, decay)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        lr = self.lr
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            if self.momentum:
                v *= self.momentum
                v += g
                g = v
            p.data -= lr * g

    def state_arrays(self):
        return {f"velocity.{i}": v for i, v in enumerate(self.velocity)}

    def load_state_arrays(self, arrays):
        for i, v in enumerate(self.velocity):
            v[...] = arrays[f"velocity.{i}"]


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-4, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 decay: float = 1.0):
        super().__init__(params, lr, decay)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        lr = self.lr
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        arrays = {"t": np.array([self.t], dtype=np.int64)}
        arrays.update({f"m.{i}": m for i, m in enumerate(self.m)})
        arrays.update({f"v.{i}": v for i, v in enumerate(self.v)})
        return arrays

    def load_state_arrays(self, arrays):
        self.t = int(arrays["t"][0])
        for i in range(len(self.params)):
            self.m[i][...] = arrays[f"m.{i}"]
            self.v[i][...] = arrays[f"v.{i}"]


def global_grad_norm(params: Sequence[Parameter]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm
