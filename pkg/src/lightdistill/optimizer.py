"""Adam optimizer over the flat parameter vector."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataValidationError

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Moment estimates and hyperparameters for one parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = field(default=0)

    @classmethod
    def for_params(cls, psi: np.ndarray, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(m=np.zeros_like(psi), v=np.zeros_like(psi), lr=lr, **kw)


def step(state: AdamState, psi: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; returns the new parameter vector.

    A non-finite gradient skips the step (parameters and moments untouched)
    and is reported through the state's skipped counter and a log warning.
    """
    if grad.shape != psi.shape or state.m.shape != psi.shape:
        raise DataValidationError(
            f"adam.step: shape mismatch psi={psi.shape} grad={grad.shape} m={state.m.shape}"
        )
    if not np.isfinite(grad).all():
        state.skipped += 1
        log.warning("adam.step: non-finite gradient, step %d skipped", state.step_count + 1)
        return psi
    dt = psi.dtype.type
    state.step_count += 1
    t = state.step_count
    b1, b2 = dt(state.beta1), dt(state.beta2)
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = state.m / dt(1.0 - state.beta1**t)
    v_hat = state.v / dt(1.0 - state.beta2**t)
    return psi - dt(state.lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))


def cosine_lr(s: int, total: int, lr_max: float, lr_min: float) -> float:
    """Cosine decay from lr_max to lr_min over the run."""
    if total <= 1:
        return lr_max
    f = s / (total - 1)
    return lr_min + (lr_max - lr_min) * 0.5 * (1.0 + np.cos(np.pi * f))
