"""Optimizers, identity-centred L2 decay and the step learning-rate schedule."""
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError

OPTIMIZERS = ("sgdm", "nesterov", "adam", "rmsprop")

FULL_SCALE_EPOCHS = 82
FULL_SCALE_DROPS = (42, 62)
DROP_FRACTIONS = (0.60, 0.76)


@dataclass
class OptConfig:
    kind: str = "sgdm"
    base_lr: float = 0.1
    momentum: float = 0.9
    l2: float = 1e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    decay_bn: bool = False  # apply L2 to BN gamma/beta and biases too
    center_decay: bool = True  # subtract the partial identity before decay

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.kind!r}")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.l2 < 0:
            raise ConfigError("l2 must be non-negative")


@dataclass
class OptState:
    buffers: dict = field(default_factory=dict)
    step: int = 0


def milestones(total_epochs=FULL_SCALE_EPOCHS):
    """Epochs after which the learning rate drops by 10x.

    The full-length run drops after epochs 42 and 62; shorter or longer runs
    drop at 60% and 76% of their length, rounded half up.
    """
    if total_epochs == FULL_SCALE_EPOCHS:
        return FULL_SCALE_DROPS
    return tuple(int(math.floor(f * total_epochs + 0.5)) for f in DROP_FRACTIONS)


def lr_at(epoch, base_lr, total_epochs=FULL_SCALE_EPOCHS):
    """Learning rate for a 1-indexed epoch ("after epoch 42" means epoch 43 on)."""
    if epoch < 0:
        raise ConfigError("epoch must be non-negative")
    first, second = milestones(total_epochs)
    if epoch <= first:
        return base_lr
    # divide rather than multiply by 0.1 so 0.05 -> 0.005 exactly as written
    if epoch <= second:
        return base_lr / 10
    return base_lr / 100


def decay_gradient(param, grad, l2, identity_mask=None):
    """``grad + l2 * (param - I)``, with ``I`` the partial identity if masked.

    ``identity_mask`` holds flat indices of the identity's ones (the sparse
    form kept by the model), so the correction costs O(n_r).
    """
    if grad.shape != param.shape:
        raise ShapeError(f"grad {grad.shape} and param {param.shape} differ")
    if l2 == 0:
        return grad
    out = grad + l2 * param
    if identity_mask is not None:
        idx = np.asarray(identity_mask)
        if idx.size and (idx.min() < 0 or idx.max() >= param.size):
            raise ShapeError("identity mask positions fall outside the parameter")
        out.reshape(-1)[idx] -= out.dtype.type(l2)
    return out


def _is_decay_exempt(name, param):
    return param.ndim == 1  # BN gamma/beta and biases


class Optimizer:
    """Applies one of the supported update rules to a parameter registry in place."""

    def __init__(self, config, masks=None):
        self.config = config
        self.masks = masks or {}
        self.state = OptState()

    def effective_grads(self, params, grads):
        cfg = self.config
        out = {}
        for name, p in params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name!r} at step {self.state.step}")
            if cfg.l2 and (cfg.decay_bn or not _is_decay_exempt(name, p)):
                mask = self.masks.get(name) if cfg.center_decay else None
                g = decay_gradient(p, g, cfg.l2, mask)
            out[name] = g
        return out

    def step(self, params, grads, lr=None):
        """Update ``params`` in place; each parameter's update depends only on itself."""
        if set(params) != set(grads):
            raise ShapeError("parameter and gradient registries have different names")
        cfg = self.config
        lr = cfg.base_lr if lr is None else lr
        eff = self.effective_grads(params, grads)
        self.state.step += 1
        t = self.state.step
        buf = self.state.buffers
        for name, p in params.items():
            g = eff[name]
            if cfg.kind in ("sgdm", "nesterov"):
                v = buf.get(name)
                if v is None:
                    v = buf[name] = np.zeros_like(p)
                v *= cfg.momentum
                v -= lr * g
                if cfg.kind == "sgdm":
                    p += v
                else:
                    p += cfg.momentum * v - lr * g
            elif cfg.kind == "adam":
                b1, b2 = cfg.betas
                m, s = buf.get(name, (None, None))
                if m is None:
                    m, s = np.zeros_like(p), np.zeros_like(p)
                    buf[name] = (m, s)
                m *= b1
                m += (1 - b1) * g
                s *= b2
                s += (1 - b2) * g * g
                mhat = m / (1 - b1**t)
                shat = s / (1 - b2**t)
                p -= (lr * mhat / (np.sqrt(shat) + cfg.adam_eps)).astype(p.dtype)
            else:
                s = buf.get(name)
                if s is None:
                    s = buf[name] = np.zeros_like(p)
                s *= cfg.rms_decay
                s += (1 - cfg.rms_decay) * g * g
                p -= (lr * g / (np.sqrt(s) + cfg.rms_eps)).astype(p.dtype)
        return params


def step(params, grads, state, config, lr, masks=None):
    """Functional wrapper: one optimizer update of ``params`` using ``state``."""
    opt = Optimizer(config, masks)
    opt.state = state
    opt.step(params, grads, lr)
    return params, state
