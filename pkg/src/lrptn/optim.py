"""RMSProp and Adam with the two gradient clipping policies and the
plateau learning-rate schedule.

Clipping happens on the full list of per-parameter gradients at once:
component mode clamps each entry, norm mode rescales the globally
concatenated gradient. Norm mode carries the NaN recovery path: a
non-finite gradient yields a skip signal and the caller leaves both the
parameters and the optimizer accumulators untouched for that update.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Var
from .errors import ConfigError, NonFiniteGradientError


@dataclass
class ComponentClip:
    limit: float = 1.0


@dataclass
class NormClip:
    """Global-norm rescaling with NaN detection and recovery."""

    limit: float = 1.0


@dataclass
class ClipResult:
    grads: list
    grad_norm: float  # global norm before any rescaling
    skip: bool = False


def clip(policy, grads: list) -> ClipResult:
    if policy is not None and policy.limit <= 0:
        raise ConfigError(f"clip limit must be positive, got {policy.limit}")
    finite = all(np.isfinite(g).all() for g in grads)
    if not finite:
        if isinstance(policy, NormClip):
            return ClipResult(grads=grads, grad_norm=float("nan"), skip=True)
        raise NonFiniteGradientError("non-finite gradient without a recovery policy")
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if policy is None:
        return ClipResult(grads=grads, grad_norm=norm)
    if isinstance(policy, ComponentClip):
        c = policy.limit
        return ClipResult(grads=[np.clip(g, -c, c) for g in grads], grad_norm=norm)
    if isinstance(policy, NormClip):
        if norm > policy.limit:
            scale = policy.limit / norm
            return ClipResult(grads=[g * scale for g in grads], grad_norm=norm)
        return ClipResult(grads=grads, grad_norm=norm)
    raise ConfigError(f"unknown clip policy {type(policy).__name__}")


class RmsProp:
    """theta -= lr * g / (sqrt(ms) + eps) with ms an EMA of g^2."""

    def __init__(self, params: list[Var], lr: float, rho: float = 0.9, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.ms = [np.zeros_like(p.value) for p in params]

    def step(self, grads: list) -> None:
        if len(grads) != len(self.params):
            raise ConfigError(f"{len(grads)} gradients for {len(self.params)} parameters")
        for p, g, ms in zip(self.params, grads, self.ms):
            ms *= self.rho
            ms += (1.0 - self.rho) * g * g
            p.value -= self.lr * g / (np.sqrt(ms) + self.eps)

    def state_dict(self) -> dict:
        return {"kind": "rmsprop", "lr": self.lr, "rho": self.rho, "eps": self.eps,
                "arrays": {"ms": self.ms}}

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.rho = state["rho"]
        self.eps = state["eps"]
        self.ms = [np.asarray(a, dtype=np.float64) for a in state["arrays"]["ms"]]


class Adam:
    """Bias-corrected Adam, standard hyperparameters."""

    def __init__(self, params: list[Var], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self, grads: list) -> None:
        if len(grads) != len(self.params):
            raise ConfigError(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"kind": "adam", "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "t": self.t, "arrays": {"m": self.m, "v": self.v}}

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.beta1 = state["beta1"]
        self.beta2 = state["beta2"]
        self.eps = state["eps"]
        self.t = state["t"]
        self.m = [np.asarray(a, dtype=np.float64) for a in state["arrays"]["m"]]
        self.v = [np.asarray(a, dtype=np.float64) for a in state["arrays"]["v"]]


@dataclass
class PlateauSchedule:
    """Halve the learning rate after `patience` consecutive epochs without a
    strictly better validation metric; the rate only ever decreases."""

    patience: int = 3
    factor: float = 0.5
    best: float = field(default=float("inf"))
    bad_epochs: int = 0

    def step(self, validation_metric: float, current_lr: float) -> float:
        if validation_metric < self.best:
            self.best = validation_metric
            self.bad_epochs = 0
            return current_lr
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.bad_epochs = 0
            return current_lr * self.factor
        return current_lr

    def state_dict(self) -> dict:
        return {"patience": self.patience, "factor": self.factor,
                "best": self.best, "bad_epochs": self.bad_epochs}

    def load_state_dict(self, state: dict) -> None:
        self.patience = state["patience"]
        self.factor = state["factor"]
        self.best = state["best"]
        self.bad_epochs = state["bad_epochs"]
