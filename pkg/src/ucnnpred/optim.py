"""Binary cross-entropy loss and the SGD / Adam update rules."""

from dataclasses import dataclass, field

import numpy as np

from .layers import ShapeError

P_CLAMP = 1e-12


def bce_loss(p, y):
    """Binary cross-entropy of probability ``p`` against label ``y``.

    Works elementwise on arrays. ``p`` is clamped to [1e-12, 1 - 1e-12].
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0.0) | (p > 1.0)) or np.any(np.isnan(p)):
        raise ValueError("probabilities must lie in [0, 1]")
    y = np.asarray(y, dtype=np.float64)
    p = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(loss) if loss.ndim == 0 else loss


def output_error(p, y):
    """d(bce)/d(pre-activation) for a sigmoid output: simply ``p - y``."""
    return np.asarray(p, dtype=np.float64) - np.asarray(y, dtype=np.float64)


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}; expected 'sgd' or 'adam'")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")


def _check(params, grads):
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameter tensors but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"parameter {i}: shape {p.shape} but gradient {g.shape}")


def sgd_step(state, params, grads, batch_size):
    _check(params, grads)
    state.t += 1
    lr = state.learning_rate
    return [p - lr * (g / batch_size) for p, g in zip(params, grads)]


def adam_step(state, params, grads, batch_size):
    _check(params, grads)
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ShapeError("optimizer moments do not match the parameter shapes")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = g / batch_size
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def step(state, params, grads, batch_size):
    if state.kind == "sgd":
        return sgd_step(state, params, grads, batch_size)
    return adam_step(state, params, grads, batch_size)
