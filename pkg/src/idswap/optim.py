"""Momentum-free adaptive-moment optimizer with serializable state."""

from __future__ import annotations

import torch


class AdaptiveMoment:
    """p <- p - lr * g / (sqrt(v_hat) + eps), v an EMA of g^2 (bias-corrected).

    Equivalent to Adam with beta1 = 0. State is a flat dict of tensors so it
    round-trips through the checkpoint format.
    """

    def __init__(self, params: dict[str, torch.nn.Parameter], lr: float,
                 beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.params = dict(params)
        self.lr = lr
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.v = {name: torch.zeros_like(p, dtype=torch.float32) for name, p in self.params.items()}

    @torch.no_grad()
    def step(self) -> None:
        self.step_count += 1
        correction = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            v = self.v[name]
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            v_hat = v / correction
            p.add_(-self.lr * g / (v_hat.sqrt() + self.eps))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, torch.Tensor]:
        out = {f"{name}.v": v for name, v in self.v.items()}
        out["step_count"] = torch.tensor([float(self.step_count)])
        return out

    def load_state_arrays(self, arrays: dict[str, torch.Tensor]) -> None:
        if "step_count" in arrays:
            self.step_count = int(arrays["step_count"].item())
        for name in self.v:
            key = f"{name}.v"
            if key in arrays:
                self.v[name] = arrays[key].reshape(self.v[name].shape).clone()
