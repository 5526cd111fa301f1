"""SGD with momentum and weight decay, plateau learning-rate schedule,
staged fine-tuning groups, and the finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Param
from .tensor import ShapeError


class SGD:
    """v <- mu*v - lr*(g + wd*theta); theta <- theta + v.

    Weight decay applies uniformly to every learned parameter, the
    interpolation matrices included: they are ordinary weights here.
    """

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"lr must be > 0, got {lr}")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[int, np.ndarray] = {}

    def step(self, params: list[Param], lr_scale: float = 1.0) -> None:
        lr = self.lr * lr_scale
        for p in params:
            if p.grad.shape != p.data.shape:
                raise ShapeError(f"{p.name}: grad shape {p.grad.shape} != {p.data.shape}")
            v = self._velocity.get(id(p))
            if v is None:
                v = np.zeros_like(p.data)
                self._velocity[id(p)] = v
            v *= self.momentum
            v -= lr * (p.grad + self.weight_decay * p.data)
            p.data += v

    def zero_grad(self, params: list[Param]) -> None:
        for p in params:
            p.zero_grad()


class PlateauSchedule:
    """Divide the learning rate by a factor once the validation metric has
    not improved by more than `threshold` for `patience` consecutive
    evaluations.  The learning rate never increases."""

    def __init__(self, patience: int = 3, factor: float = 0.1, threshold: float = 1e-4):
        if not (0.0 < factor < 1.0):
            raise ValueError(f"factor must lie in (0, 1), got {factor}")
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.best: float | None = None
        self.bad_count = 0

    def update(self, val_metric: float, sgd: SGD) -> bool:
        """Record one validation reading; returns True if lr was reduced."""
        if not np.isfinite(val_metric):
            raise ValueError(f"validation metric must be finite, got {val_metric}")
        if self.best is None or val_metric > self.best + self.threshold:
            self.best = max(val_metric, self.best if self.best is not None else val_metric)
            self.bad_count = 0
            return False
        self.bad_count += 1
        if self.bad_count >= self.patience:
            sgd.lr *= self.factor
            self.bad_count = 0
            return True
        return False


@dataclass
class Stage:
    name: str
    groups: list[str]
    lr_scale: float
    iters: int


@dataclass
class FinetunePlan:
    """Freeze/unfreeze named parameter groups over training stages.

    A parameter belongs to the group given by the first component of its
    dotted name.  Frozen groups receive no optimizer step at all, so their
    parameters stay bit-identical through a stage.
    """

    stages: list[Stage]
    groups: dict[str, list[Param]] = field(default_factory=dict)

    def __post_init__(self):
        known = set(self.groups)
        for st in self.stages:
            for g in st.groups:
                if known and g not in known:
                    raise ValueError(f"unknown parameter group {g!r}; known: {sorted(known)}")

    @staticmethod
    def group_params(params: list[Param]) -> dict[str, list[Param]]:
        out: dict[str, list[Param]] = {}
        for p in params:
            out.setdefault(p.name.split(".", 1)[0], []).append(p)
        return out

    def stage_at(self, iteration: int) -> Stage:
        t = iteration
        for st in self.stages:
            if t < st.iters:
                return st
            t -= st.iters
        return self.stages[-1]

    def active_params(self, stage: Stage) -> list[Param]:
        out: list[Param] = []
        for g in stage.groups:
            if g not in self.groups:
                raise ValueError(f"unknown parameter group {g!r}")
            out.extend(self.groups[g])
        return out

    @property
    def total_iters(self) -> int:
        return sum(st.iters for st in self.stages)


# ---------------------------------------------------------------------------
# Finite-difference gradient verification


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())


def gradcheck(f, x: np.ndarray, analytic: np.ndarray, eps: float = 1e-6) -> float:
    """Max relative error between `analytic` and central differences of `f`.

    `f` maps the current contents of `x` to a scalar; `x` is perturbed in
    place one coordinate at a time and restored, so closures over `x` (for
    example layer parameters) are checked where they live.  Requires 64-bit
    storage; raises on non-finite function values.
    """
    if x.dtype != np.float64:
        raise TypeError(f"gradcheck requires float64 storage, got {x.dtype}")
    if analytic.shape != x.shape:
        raise ShapeError(f"analytic grad shape {analytic.shape} != input {x.shape}")
    numeric = np.empty_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + eps
        fp = f()
        x.flat[i] = orig - eps
        fm = f()
        x.flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("non-finite function value during gradcheck")
        numeric.flat[i] = (fp - fm) / (2.0 * eps)
    return rel_error(analytic, numeric)
