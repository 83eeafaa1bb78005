from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lastshot.errors import ShapeError


@dataclass
class SgdMomentumState:
    """Heavy-ball momentum: v <- m*v + g; p <- p - lr*v."""

    velocity: np.ndarray
    learning_rate: float
    momentum: float = 0.9

    @classmethod
    def zeros(cls, n: int, learning_rate: float, momentum: float = 0.9) -> "SgdMomentumState":
        if learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {learning_rate}")
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        return cls(np.zeros(n), float(learning_rate), float(momentum))


def sgd_momentum_step(state: SgdMomentumState, params, grad) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or params.shape != state.velocity.shape:
        raise ShapeError(
            f"length mismatch: params {params.shape}, grad {grad.shape}, "
            f"velocity {state.velocity.shape}"
        )
    state.velocity = state.momentum * state.velocity + grad
    return params - state.learning_rate * state.velocity
