"""Dense layers, activations and the Adam optimizer with analytic gradients.

All functions accept a single vector (1-D) or a batch of row vectors (2-D).
Arithmetic is float64 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, DimensionError, NumericError

# Added to the norm only when differentiating through l2 normalization.
NORM_GUARD = 1e-12


@dataclass
class LayerParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"inconsistent layer shapes: weight {self.weight.shape}, bias {self.bias.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "LayerParams":
        return LayerParams(self.weight.copy(), self.bias.copy())


def he_uniform(in_dim: int, out_dim: int, rng: np.random.Generator) -> LayerParams:
    """Uniform fan-in initialisation suited to ReLU layers; bias starts at zero."""
    bound = np.sqrt(6.0 / in_dim)
    weight = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    return LayerParams(weight, np.zeros(out_dim))


def linear_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise DimensionError(f"input has {x.shape[-1]} features, layer expects {params.in_dim}")
    return x @ params.weight.T + params.bias


def linear_backward(dout: np.ndarray, x: np.ndarray, params: LayerParams):
    """Return ``(d_weight, d_bias, d_input)`` for ``out = W x + b``.

    For batched input the parameter gradients are summed over rows.
    """
    dout2 = np.atleast_2d(dout)
    x2 = np.atleast_2d(x)
    d_weight = dout2.T @ x2
    d_bias = dout2.sum(axis=0)
    d_input = dout @ params.weight
    return d_weight, d_bias, d_input


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(dout: np.ndarray, pre: np.ndarray) -> np.ndarray:
    # subgradient 0 at exactly zero
    return dout * (pre > 0.0)


@dataclass
class DropoutMask:
    keep_prob: float = 0.5
    train: bool = False
    mask: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep probability must lie in (0, 1], got {self.keep_prob}")


def dropout_forward(x: np.ndarray, mask: DropoutMask, rng: np.random.Generator | None = None):
    """Inverted dropout. Eval mode and ``keep_prob == 1`` are the identity and
    draw nothing from ``rng``. The sampled mask is stored on ``mask``."""
    x = np.asarray(x, dtype=np.float64)
    if not mask.train or mask.keep_prob == 1.0:
        mask.mask = None
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask.mask = rng.random(x.shape) < mask.keep_prob
    return x * mask.mask / mask.keep_prob


def dropout_backward(dout: np.ndarray, mask: DropoutMask) -> np.ndarray:
    if mask.mask is None:
        return dout
    return dout * mask.mask / mask.keep_prob


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        bad = np.flatnonzero(norms.reshape(-1) == 0.0)
        raise DegenerateInputError(f"cannot normalize zero vector (rows {bad.tolist()})")
    return x / norms


def l2_normalize_backward(dout: np.ndarray, z: np.ndarray, guard: float = NORM_GUARD) -> np.ndarray:
    """Gradient through ``u = z / |z|``: ``(I - u u^T) dout / |z|``."""
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    safe = norms + guard
    u = z / safe
    radial = np.sum(u * dout, axis=-1, keepdims=True)
    return (dout - u * radial) / safe


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """Apply one bias-corrected Adam update to ``params`` in place.

    ``params`` and ``grads`` are name -> array mappings; parameters without a
    gradient entry are left alone. Returns ``params``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            idx = int(np.flatnonzero(~np.isfinite(np.ravel(g)))[0])
            raise NumericError(f"non-finite gradient for {name} at flat index {idx}", name, idx)
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {params[name].shape}")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        params[name] -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params
