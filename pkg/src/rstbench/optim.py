"""AdamW, Lion, and Sophia-style optimizer steps with shared state.

Update rules (per parameter tensor, lr possibly RMS-scaled per tensor):

    AdamW   m = b1*m + (1-b1)*g;  v = b2*v + (1-b2)*g^2
            theta -= lr*wd*theta + lr * mhat / (sqrt(vhat) + eps)
    Lion    u = sign(b1*m + (1-b1)*g);  theta -= lr*(u + wd*theta)
            m = b2*m + (1-b2)*g
    Sophia  m = b1*m + (1-b1)*g;  h refreshed every k steps from a sampled
            diagonal Gauss-Newton estimate, EMA'd with b2
            theta -= lr*wd*theta;  theta -= lr * clip(m / max(h, eps), rho)

The Sophia Hessian estimate samples pseudo-labels from the model's own
predictive distribution at each masked position and returns
n_masked * grad^2 of the cross-entropy against those labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import LayerPlan, ModelParams, mlm_logits


class NumericalInstabilityError(RuntimeError):
    """Non-finite gradients; carries the step index that would have run."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"non-finite gradient at step {step}{': ' + detail if detail else ''}")


@dataclass
class OptHyper:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-12
    weight_decay: float = 0.01
    rho: float = 0.01          # Sophia per-coordinate clip bound
    k: int = 10                # Sophia Hessian refresh interval
    rms_scaling: bool = False
    clip_norm: float | None = 0.5

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must be in (0, 1)")
        if self.eps <= 0 or self.rho <= 0 or self.k < 1 or self.weight_decay < 0:
            raise ValueError("invalid optimizer hyperparameters")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None")


@dataclass
class OptimizerState:
    """Per-parameter buffers keyed by parameter name.

    ``v`` holds the AdamW second moment or the Sophia Hessian-diagonal EMA,
    whichever the active optimizer uses; Lion touches only ``m``.
    """

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    last_hessian_refresh: int = 0

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        items = _named(params)
        return cls(m={n: np.zeros_like(p.data) for n, p in items},
                   v={n: np.zeros_like(p.data) for n, p in items})

    def copy(self) -> "OptimizerState":
        return OptimizerState(m=dict(self.m), v=dict(self.v), t=self.t,
                              last_hessian_refresh=self.last_hessian_refresh)


def _named(params) -> list[tuple[str, T.Tensor]]:
    if hasattr(params, "named_parameters"):
        return params.named_parameters()
    return list(params)


def _check_finite(grads: dict[str, np.ndarray], step: int) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalInstabilityError(step, name)


def rms_scale_lr(base_lr: float, param_tensor) -> float:
    """base_lr * max(RMS(tensor), 1e-3); the floor keeps dead tensors moving."""
    if base_lr <= 0:
        raise ValueError("base_lr must be positive")
    data = param_tensor.data if hasattr(param_tensor, "data") else np.asarray(param_tensor)
    rms = float(np.sqrt(np.mean(data * data))) if data.size else 0.0
    return base_lr * max(rms, 1e-3)


def _lr_for(hyper: OptHyper, lr: float, p: T.Tensor) -> float:
    # schedules hit lr == 0 exactly at their endpoints; nothing to scale there
    if not hyper.rms_scaling or lr == 0.0:
        return lr
    return rms_scale_lr(lr, p)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float | None):
    """Global-norm gradient clipping; returns (grads, pre-clip norm)."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm is not None and total > max_norm and total > 0:
        s = max_norm / total
        grads = {n: g * s for n, g in grads.items()}
    return grads, total


def adamw_step(state: OptimizerState, params, grads: dict[str, np.ndarray],
               hyper: OptHyper, lr: float):
    t = state.t + 1
    _check_finite(grads, t)
    bc1 = 1.0 - hyper.beta1 ** t
    bc2 = 1.0 - hyper.beta2 ** t
    for name, p in _named(params):
        g = grads[name]
        m = hyper.beta1 * state.m[name] + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * state.v[name] + (1.0 - hyper.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        lr_t = _lr_for(hyper, lr, p)
        update = (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
        p.data = p.data - lr_t * hyper.weight_decay * p.data - lr_t * update
    state.t = t
    return state, params


def lion_step(state: OptimizerState, params, grads: dict[str, np.ndarray],
              hyper: OptHyper, lr: float):
    t = state.t + 1
    _check_finite(grads, t)
    for name, p in _named(params):
        g = grads[name]
        u = np.sign(hyper.beta1 * state.m[name] + (1.0 - hyper.beta1) * g)  # sign(0) = 0
        lr_t = _lr_for(hyper, lr, p)
        p.data = p.data - lr_t * (u + hyper.weight_decay * p.data)
        state.m[name] = hyper.beta2 * state.m[name] + (1.0 - hyper.beta2) * g
    state.t = t
    return state, params


def hessian_refresh_due(t: int, k: int) -> bool:
    """Refresh on steps with t mod k == 1; k == 1 refreshes every step."""
    return True if k == 1 else t % k == 1


def sophia_step(state: OptimizerState, params, grads: dict[str, np.ndarray],
                hyper: OptHyper, lr: float,
                fresh_hessian: dict[str, np.ndarray] | None = None):
    t = state.t + 1
    due = hessian_refresh_due(t, hyper.k)
    if due and fresh_hessian is None:
        raise ValueError(f"sophia_step: step {t} needs a fresh Hessian estimate (k={hyper.k})")
    if not due and fresh_hessian is not None:
        raise ValueError(f"sophia_step: step {t} must not receive a Hessian estimate (k={hyper.k})")
    _check_finite(grads, t)
    for name, p in _named(params):
        g = grads[name]
        m = hyper.beta1 * state.m[name] + (1.0 - hyper.beta1) * g
        state.m[name] = m
        if due:
            state.v[name] = hyper.beta2 * state.v[name] + (1.0 - hyper.beta2) * fresh_hessian[name]
        h = state.v[name]
        lr_t = _lr_for(hyper, lr, p)
        p.data = p.data - lr_t * hyper.weight_decay * p.data
        p.data = p.data - lr_t * np.clip(m / np.maximum(h, hyper.eps), -hyper.rho, hyper.rho)
    if due:
        state.last_hessian_refresh = t
    state.t = t
    return state, params


def gnb_estimate(params: ModelParams, batch, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Diagonal Hessian estimate from gradients against sampled pseudo-labels.

    Forward to logits, sample labels from the model's own softmax at each
    masked position, take grad of the cross-entropy against those labels,
    and return n_masked * grad^2 per tensor (elementwise, >= 0).
    """
    mask = np.asarray(batch.mask, dtype=bool)
    n_masked = int(mask.sum())
    if n_masked == 0:
        raise ValueError("gnb_estimate: batch has no masked positions")

    tape = T.Tape()
    logits = mlm_logits(tape, params, batch.input_ids, LayerPlan.all_keep(params.n_layers))

    z = logits.data[mask]
    z = z - z.max(axis=-1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=-1, keepdims=True)
    cum = np.cumsum(probs, axis=-1)
    draws = rng.random(n_masked)
    sampled = (cum < draws[:, None]).sum(axis=-1)

    pseudo = np.asarray(batch.targets).copy()
    pseudo[mask] = sampled
    loss, _ = T.masked_cross_entropy(tape, logits, pseudo, mask)
    grads = T.backward(tape, loss, [p for _, p in params.named_parameters()])
    by_tid = {p.tid: name for name, p in params.named_parameters()}
    return {by_tid[tid]: n_masked * g * g for tid, g in grads.items()}
