"""Adam with bias correction plus the two learning-rate schedules used in training."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError


@dataclass
class StepDecay:
    """Divide the rate by ``factor`` every ``period`` epochs."""
    period: int = 300
    factor: float = 2.0


@dataclass
class Plateau:
    """Divide the rate by ``factor`` after ``patience`` epochs without a new best loss."""
    patience: int = 75
    factor: float = 2.0


@dataclass
class OptimizerState:
    lr: float
    scheduler: StepDecay | Plateau | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    lr0: float | None = None
    best_loss: float = float("inf")
    bad_epochs: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.lr0 is None:
            self.lr0 = self.lr


def adam_step(opt: OptimizerState, params, grads, ascent=()) -> list:
    """Apply one Adam update in place and return ``params``.

    ``ascent`` holds indices of parameters that climb the loss instead of
    descending it (the loss-weight factors of the max-min objective).
    """
    if not opt.m:
        opt.m = [np.zeros_like(p.data) for p in params]
        opt.v = [np.zeros_like(p.data) for p in params]
    for i, g in enumerate(grads):
        if g is not None and not np.isfinite(g).all():
            name = getattr(params[i], "name", None) or f"#{i}"
            raise NumericError(f"non-finite gradient for parameter {name} at optimizer step {opt.step + 1}")
    opt.step += 1
    t = opt.step
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    ascent = set(ascent)
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if i in ascent:
            g = -g
        m, v = opt.m[i], opt.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return params


def scheduler_step(opt: OptimizerState, epoch: int, current_loss: float) -> OptimizerState:
    """Update ``opt.lr`` at the end of ``epoch`` (0-based) for the epochs that follow."""
    sch = opt.scheduler
    if isinstance(sch, StepDecay):
        opt.lr = opt.lr0 / sch.factor ** ((epoch + 1) // sch.period)
    elif isinstance(sch, Plateau):
        if current_loss < opt.best_loss:
            opt.best_loss = current_loss
            opt.bad_epochs = 0
        else:
            opt.bad_epochs += 1
            if opt.bad_epochs >= sch.patience:
                opt.lr /= sch.factor
                opt.bad_epochs = 0
    return opt
