"""AdamW with decoupled weight decay and a warmup + cosine-decay schedule."""

from __future__ import annotations

import numpy as np

from .tensor import NumericalError, Parameter


class AdamW:
    """Standard AdamW. Frozen parameters are skipped entirely, and weight
    decay touches only parameters flagged as decayable (weight matrices,
    never biases, layer-norm affines or gate biases)."""

    def __init__(self, params: list[Parameter], weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float) -> None:
        """Apply one update using the gradients currently on the parameters."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            if p.frozen:
                continue
            g = p.tensor.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"adamw_step: non-finite gradient for {p.name}")
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.tensor.data -= lr * update
            if self.weight_decay and p.decay:
                p.tensor.data -= lr * self.weight_decay * p.tensor.data

    def state_arrays(self) -> dict:
        out = {}
        for p in self.params:
            out[f"optim.m.{p.name}"] = self.m[p.name]
            out[f"optim.v.{p.name}"] = self.v[p.name]
        return out

    def load_state_arrays(self, arrays: dict, t: int) -> None:
        self.t = t
        for p in self.params:
            mk, vk = f"optim.m.{p.name}", f"optim.v.{p.name}"
            if mk in arrays:
                self.m[p.name] = np.array(arrays[mk], dtype=p.data.dtype)
            if vk in arrays:
                self.v[p.name] = np.array(arrays[vk], dtype=p.data.dtype)


def cosine_lr(step: int, lr_max: float, total_steps: int, warmup_steps: int) -> float:
    """Linear warmup to lr_max, then cosine decay to zero at total_steps."""
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return lr_max * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return lr_max * 0.5 * (1.0 + float(np.cos(np.pi * progress)))
