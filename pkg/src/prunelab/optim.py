"""AdamW with decoupled weight decay and a linear warmup/decay schedule.

The optimizer can carry a per-parameter binary mask; masked entries receive
no update of any kind (moments stay zero, decay is skipped), so weights that
start at exactly zero there stay exactly zero through any number of steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor


@dataclass
class OptimConfig:
    lr: float = 3e-5
    epochs: int = 20
    batch_size: int = 2
    warmup_frac: float = 0.1
    schedule: str = "linear"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 <= self.warmup_frac <= 1.0):
            raise ValueError(f"warmup_frac outside [0, 1]: {self.warmup_frac}")
        if self.schedule != "linear":
            raise ValueError(f"only the linear schedule is implemented, got {self.schedule!r}")


def lr_at(step: int, total_steps: int, base_lr: float,
          warmup_frac: float = 0.1) -> float:
    """Linear warmup to base_lr then linear decay to zero.

    `step` counts from 0 for the first update; the schedule reaches base_lr
    at the end of warmup and decays so the final step still has a nonzero
    rate (the rate hits zero one step past the last).
    """
    if total_steps <= 0:
        return base_lr
    warm = warmup_frac * total_steps
    s = step + 1.0
    if warm > 0 and s <= warm:
        return base_lr * (s / warm)
    if total_steps == warm:
        return base_lr
    return base_lr * (total_steps - s + 1.0) / (total_steps - warm)


class AdamW:
    """Decoupled-weight-decay Adam over a list of (Tensor, mask|None)."""

    def __init__(self, params, config: OptimConfig, total_steps: int):
        # params: iterable of (tensor, mask_ndarray_or_None)
        self.slots = []
        for t, mask in params:
            if not isinstance(t, Tensor):
                raise TypeError(f"expected Tensor, got {type(t)}")
            self.slots.append({
                "t": t,
                "mask": None if mask is None else np.asarray(mask, dtype=np.float64),
                "m": np.zeros_like(t.data),
                "v": np.zeros_like(t.data),
            })
        self.cfg = config
        self.total_steps = int(total_steps)
        self.step_count = 0

    def current_lr(self) -> float:
        return lr_at(self.step_count, self.total_steps, self.cfg.lr,
                     self.cfg.warmup_frac)

    def step(self) -> float:
        """One update from the gradients currently stored on the tensors."""
        lr = self.current_lr()
        c = self.cfg
        self.step_count += 1
        b1t = 1.0 - c.beta1 ** self.step_count
        b2t = 1.0 - c.beta2 ** self.step_count
        for s in self.slots:
            t = s["t"]
            if t.grad is None:
                continue
            g = t.grad
            if s["mask"] is not None:
                g = g * s["mask"]
            s["m"] = c.beta1 * s["m"] + (1.0 - c.beta1) * g
            s["v"] = c.beta2 * s["v"] + (1.0 - c.beta2) * (g * g)
            update = (s["m"] / b1t) / (np.sqrt(s["v"] / b2t) + c.eps)
            if c.weight_decay:
                update = update + c.weight_decay * t.data
            if s["mask"] is not None:
                update *= s["mask"]
            t.data -= lr * update
        return lr

    def zero_grad(self) -> None:
        for s in self.slots:
            s["t"].grad = None

    def snapshot(self) -> list[np.ndarray]:
        return [s["t"].data.copy() for s in self.slots]

    def restore(self, snap: list[np.ndarray]) -> None:
        for s, arr in zip(self.slots, snap):
            s["t"].data[...] = arr
