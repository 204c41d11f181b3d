from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    pass


class Optimizer:
    """Base class; subclasses implement :meth:`_update` for one parameter."""

    def __init__(self, params: Iterable[Tensor]):
        self.params: list[Tensor] = list(params)
        if not self.params:
            raise ValueError("optimizer got an empty parameter list")
        self._index = {id(p): i for i, p in enumerate(self.params)}
        self.state: dict[int, dict] = {}
        self.lr_scale: dict[int, float] = {}

    def set_lr_scale(self, params: Iterable[Tensor], scale: float) -> None:
        """Multiply the learning rate of ``params`` by ``scale``; state stays shared."""
        if scale <= 0:
            raise ValueError(f"lr scale must be positive, got {scale}")
        for p in params:
            if id(p) not in self._index:
                raise KeyError(f"parameter {p.name or p.shape} is not registered with this optimizer")
            self.lr_scale[self._index[id(p)]] = float(scale)

    def _lr(self, p: Tensor) -> float:
        return self.lr * self.lr_scale.get(self._index[id(p)], 1.0)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, params: Sequence[Tensor] | None = None) -> None:
        """Update ``params`` (default: all registered) in place.

        Every updated parameter must carry a populated ``grad``.
        """
        targets = self.params if params is None else list(params)
        for p in targets:
            if id(p) not in self._index:
                raise KeyError(f"parameter {p.name or p.shape} is not registered with this optimizer")
            if p.grad is None:
                raise MissingGradError(f"parameter {p.name or p.shape} has no gradient")
        for p in targets:
            i = self._index[id(p)]
            self._update(p, self.state.setdefault(i, {}))

    def _update(self, p: Tensor, state: dict) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params, lr: float = 0.01):
        super().__init__(params)
        self.lr = lr

    def _update(self, p, state):
        p.data -= p.dtype.type(self._lr(p)) * p.grad.astype(p.dtype)


class Adam(Optimizer):
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        super().__init__(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps

    def _update(self, p, state):
        if not state:
            state["t"] = 0
            state["m"] = np.zeros_like(p.data)
            state["v"] = np.zeros_like(p.data)
        g = p.grad.astype(p.dtype)
        state["t"] += 1
        t = state["t"]
        m, v = state["m"], state["v"]
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        v += (1 - self.beta2) * g * g
        step = self._lr(p) * np.sqrt(1 - self.beta2**t) / (1 - self.beta1**t)
        p.data -= (p.dtype.type(step) * m / (np.sqrt(v) + p.dtype.type(self.eps))).astype(p.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat view of the moment buffers, for checkpointing or comparison."""
        out = {}
        for i, st in sorted(self.state.items()):
            out[f"{i}.m"] = st["m"]
            out[f"{i}.v"] = st["v"]
            out[f"{i}.t"] = np.array(st["t"])
        return out


def make_optimizer(name: str, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> Optimizer:
    if name == "adam":
        return Adam(params, lr=lr, betas=tuple(betas), eps=eps)
    if name == "sgd":
        return SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r} (expected 'adam' or 'sgd')")
