"""Variance-preserving cosine noise schedule and the multi-step count rule."""

import math

import torch


class DiffusionSchedule:
    """Cosine variance-preserving schedule: alpha(t)^2 + sigma(t)^2 = 1.

    w(t) = sigma(t)^2 is the distillation weighting.  The multi-step
    generator runs floor(t / steps_divisor) + 1 solver steps.
    """

    def __init__(self, total_steps: int = 1000, steps_divisor: int = 25, s: float = 0.008):
        self.total_steps = total_steps
        self.steps_divisor = steps_divisor
        t = torch.arange(total_steps, dtype=torch.float64)
        f = torch.cos((t / total_steps + s) / (1.0 + s) * math.pi / 2.0) ** 2
        alpha_bar = f / f[0]
        self.alpha = alpha_bar.sqrt().to(torch.float32)
        self.sigma = (1.0 - alpha_bar).clamp_min(0.0).sqrt().to(torch.float32)

    def sds_weight(self, t) -> torch.Tensor:
        return self.sigma[t] ** 2

    def add_noise(self, x0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
        """x_t = alpha(t) * x0 + sigma(t) * eps; t is an int or a [B] tensor."""
        if eps.shape != x0.shape:
            raise ValueError(f"noise shape {tuple(eps.shape)} != image shape {tuple(x0.shape)}")
        a, s = self.coeffs(t, x0)
        return a * x0 + s * eps

    def coeffs(self, t, like: torch.Tensor):
        """alpha/sigma broadcast against an image batch."""
        tt = torch.as_tensor(t, dtype=torch.int64)
        if tt.min() < 0 or tt.max() >= self.total_steps:
            raise ValueError(f"timestep out of range [0, {self.total_steps})")
        a = self.alpha[tt].to(like.dtype)
        s = self.sigma[tt].to(like.dtype)
        if tt.ndim == 1 and like.ndim > 1:  # per-sample over a batch
            shape = (tt.shape[0],) + (1,) * (like.ndim - 1)
            a = a.reshape(shape)
            s = s.reshape(shape)
        return a, s

    def multistep_steps(self, t: int) -> int:
        """Solver step count for the multi-step generator at timestep t."""
        if not (0 <= t < self.total_steps):
            raise ValueError(f"timestep {t} out of range [0, {self.total_steps})")
        return t // self.steps_divisor + 1
