"""Parameter updates: adadelta, adam with a step schedule, gradient clipping."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor

__all__ = ["adadelta_update", "adam_update", "adam_lr", "clip_gradients",
           "zero_grads", "opt_state_arrays", "opt_state_from_arrays"]


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def clip_gradients(params: dict[str, Tensor], threshold: float = 10.0) -> None:
    """Clamp every gradient entry to [-threshold, threshold], in place."""
    if threshold <= 0:
        raise ContractError(f"clip threshold must be positive, got {threshold}")
    for p in params.values():
        if p.grad is not None:
            np.clip(p.grad, -threshold, threshold, out=p.grad)


def _check_grad(name: str, p: Tensor) -> np.ndarray | None:
    if p.grad is None:
        return None
    if p.grad.shape != p.data.shape:
        raise ShapeError(f"gradient shape {p.grad.shape} != parameter shape "
                         f"{p.data.shape} for {name!r}")
    return p.grad


def adadelta_update(params: dict[str, Tensor], state: dict, rho: float = 0.95,
                    eps: float = 1e-6) -> None:
    """Adaptive-learning-rate update with squared-grad and squared-step EMAs."""
    for name, p in params.items():
        g = _check_grad(name, p)
        if g is None:
            continue
        st = state.get(name)
        if st is None:
            st = state[name] = {"Eg": np.zeros_like(p.data), "Ex": np.zeros_like(p.data)}
        st["Eg"] = rho * st["Eg"] + (1.0 - rho) * g * g
        dx = -np.sqrt(st["Ex"] + eps) / np.sqrt(st["Eg"] + eps) * g
        st["Ex"] = rho * st["Ex"] + (1.0 - rho) * dx * dx
        p.data += dx


def adam_lr(base_lr: float, epoch: int, factor: float = 0.8, every: int = 15) -> float:
    """Stepped decay: multiply the rate by ``factor`` once per ``every`` epochs."""
    return base_lr * factor ** (epoch // every)


def adam_update(params: dict[str, Tensor], state: dict, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    state["step"] = t = state.get("step", 0) + 1
    for name, p in params.items():
        g = _check_grad(name, p)
        if g is None:
            continue
        st = state.get(name)
        if st is None:
            st = state[name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
        st["m"] = beta1 * st["m"] + (1.0 - beta1) * g
        st["v"] = beta2 * st["v"] + (1.0 - beta2) * g * g
        m_hat = st["m"] / (1.0 - beta1 ** t)
        v_hat = st["v"] / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def opt_state_arrays(state: dict) -> dict[str, np.ndarray]:
    """Flatten optimizer state into named arrays for checkpointing."""
    out: dict[str, np.ndarray] = {}
    for key, val in state.items():
        if isinstance(val, dict):
            for slot, arr in val.items():
                out[f"{key}/{slot}"] = arr
        else:
            out[key] = np.asarray(float(val))
    return out


def opt_state_from_arrays(arrays: dict[str, np.ndarray]) -> dict:
    state: dict = {}
    for key, arr in arrays.items():
        if "/" in key:
            name, slot = key.rsplit("/", 1)
            state.setdefault(name, {})[slot] = arr.copy()
        else:
            state[key] = int(arr) if float(arr).is_integer() else float(arr)
    return state
