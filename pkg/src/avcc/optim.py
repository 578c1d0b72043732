"""Adam with the exponential learning-rate schedule and L2 weight decay.

Decay applies to matrix/kernel weights only (tensors of rank >= 2), i.e.
conv and linear weights but not biases or normalization scales.  Parameter
data is rebound, never mutated in place, so tensors captured by old tapes
stay valid.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def lr_schedule(base_lr: float, decay: float, epoch: int) -> float:
    """Learning rate for a 0-indexed epoch: base * decay**epoch."""
    return base_lr * decay**epoch


class Adam:
    def __init__(self, named_params, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=1e-4):
        self.named_params: list[tuple[str, Tensor]] = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros(t.shape, dtype=np.float64) for _, t in self.named_params]
        self.v = [np.zeros(t.shape, dtype=np.float64) for _, t in self.named_params]

    def zero_grad(self) -> None:
        for _, t in self.named_params:
            t.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        correct1 = 1.0 - self.beta1**self.step_count
        correct2 = 1.0 - self.beta2**self.step_count
        for i, (_, t) in enumerate(self.named_params):
            if t.grad is None:
                continue
            g = t.grad.astype(np.float64, copy=False)
            if self.weight_decay and t.data.ndim >= 2:
                g = g + self.weight_decay * t.data
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / correct1
            v_hat = self.v[i] / correct2
            update = lr * m_hat / (np.sqrt(v_hat) + self.eps)
            t.data = (t.data - update).astype(t.data.dtype)

    def state_arrays(self):
        """Moment buffers in parameter order, for checkpointing."""
        return self.m, self.v

    def load_state(self, step_count: int, m_list, v_list) -> None:
        self.step_count = step_count
        self.m = [np.asarray(m, dtype=np.float64) for m in m_list]
        self.v = [np.asarray(v, dtype=np.float64) for v in v_list]
