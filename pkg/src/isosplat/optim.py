"""Adam over named parameter groups, sized for sharded rows."""

from __future__ import annotations

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


def adam_init(params: dict[str, np.ndarray]) -> dict[str, dict[str, np.ndarray]]:
    """Zeroed first/second-moment buffers matching each parameter array."""
    return {
        name: {"m": np.zeros_like(arr), "v": np.zeros_like(arr)}
        for name, arr in params.items()
    }


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict[str, dict[str, np.ndarray]],
    iteration: int,
    lrs: dict[str, float],
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> tuple[dict[str, np.ndarray], dict[str, dict[str, np.ndarray]]]:
    """One bias-corrected Adam update, in place, per parameter group.

    ``iteration`` is 1-based and global across shards so bias correction
    agrees everywhere. Purely elementwise, hence deterministic for any row
    slicing.
    """
    if iteration < 1:
        raise ValueError("iteration must be >= 1")
    bc1 = 1.0 - beta1 ** iteration
    bc2 = 1.0 - beta2 ** iteration
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        st = state[name]
        m = st["m"]
        v = st["v"]
        if m.shape != p.shape:
            raise ValueError(f"{name}: state shape {m.shape} != param shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p -= lrs[name] * mhat / (np.sqrt(vhat) + eps)
    return params, state


def position_lr(base_lr: float, iteration: int, total: int, final_mult: float = 0.01) -> float:
    """Exponential decay from base_lr to final_mult * base_lr over the run."""
    if total <= 0:
        return base_lr
    t = min(max(iteration, 0), total) / total
    return base_lr * (final_mult ** t)
