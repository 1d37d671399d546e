"""Adam and the plateau-halving learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: AdamState,
              lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Parameters whose gradient is None are skipped (their moments are kept).
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(
            {k: p.data for k, p in self.params.items()},
            {k: p.grad for k, p in self.params.items()},
            self.state, self.lr, self.betas, self.eps,
        )


class PlateauHalving:
    """Halve the learning rate when the validation score stops improving.

    Epochs up to and including ``start_epoch`` only track the best score.
    After that, every ``patience`` consecutive epochs without a strict
    improvement halve the rate and reset the counter.
    """

    def __init__(self, lr: float, patience: int = 2, start_epoch: int = 5, factor: float = 0.5):
        self.lr = lr
        self.patience = patience
        self.start_epoch = start_epoch
        self.factor = factor
        self.best: float | None = None
        self.bad_epochs = 0

    def step(self, epoch: int, score: float) -> float:
        improved = self.best is None or score > self.best
        if improved:
            self.best = score
        if epoch <= self.start_epoch:
            return self.lr
        if improved:
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr
