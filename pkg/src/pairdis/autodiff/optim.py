"""Adam with bias correction and decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class PoisonedGradientError(FloatingPointError):
    """A parameter gradient contained NaN/Inf; training must halt."""


class Adam:
    """Parameter groups of Tensors; each group may override lr / weight_decay.

    Decay is decoupled: p -= lr * wd * p is applied before the moment update,
    so it never enters the m/v statistics. Missing gradients are treated as
    zeros (the parameter still decays and its moments shrink toward zero).
    """

    def __init__(self, groups, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if groups and isinstance(groups[0], Tensor):
            groups = [{"params": list(groups)}]
        self.groups = []
        for g in groups:
            self.groups.append({
                "params": list(g["params"]),
                "lr": float(g.get("lr", lr)),
                "weight_decay": float(g.get("weight_decay", weight_decay)),
            })
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self._m = {}
        self._v = {}
        for g in self.groups:
            for p in g["params"]:
                self._m[id(p)] = np.zeros_like(p.data)
                self._v[id(p)] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for g in self.groups:
            lr, wd = g["lr"], g["weight_decay"]
            for p in g["params"]:
                grad = p.grad
                if grad is None:
                    grad = np.zeros_like(p.data)
                elif not np.all(np.isfinite(grad)):
                    raise PoisonedGradientError(
                        f"non-finite gradient for parameter {p.name or id(p)}")
                if wd:
                    p.data -= (lr * wd) * p.data
                m = self._m[id(p)]
                v = self._v[id(p)]
                m *= self.beta1
                m += (1.0 - self.beta1) * grad
                v *= self.beta2
                v += (1.0 - self.beta2) * (grad * grad)
                p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_summary(self) -> dict:
        return {"t": self.t, "groups": [
            {"lr": g["lr"], "weight_decay": g["weight_decay"], "n_params": len(g["params"])}
            for g in self.groups]}
