"""Distillation losses: single-step score distillation on normal/depth
maps, multi-step distillation with a perceptual term for texture, the
stage-dependent timestep schedule, and the cached-target store.

The returned tensors are gradients with respect to rendered pixels; they
are detached from the score model (no gradient ever reaches its
parameters) and are injected into the render graph via apply_pixel_grad.
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .camera import ConditionBundle
from .sampler import guided_predict, multistep_generate
from .schedule import DiffusionSchedule
from .scoremodel import KIND_CHANNELS, ScoreModel

STAGES = ("geometry", "texture-coarse", "texture-fine")

# Geometry-stage annealing boundaries as fractions of the stage length
# (5000/15000 and 8000/15000 at full scale).
GEOM_BOUNDS_FRAC = (1.0 / 3.0, 8.0 / 15.0)
T_LO = 0.02


@dataclass(frozen=True)
class TimestepSchedule:
    """Piecewise-uniform timestep distribution per stage and iteration."""

    stage: str
    stage_length: int
    total_steps: int = 1000

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    def bounds(self, iteration: int) -> tuple[float, float]:
        """(lo, hi) fractions of T for the uniform draw at this iteration."""
        if self.stage == "texture-coarse":
            return (T_LO, 0.98)
        if self.stage == "texture-fine":
            return (T_LO, 0.5)
        b1 = self.stage_length * GEOM_BOUNDS_FRAC[0]
        b2 = self.stage_length * GEOM_BOUNDS_FRAC[1]
        if iteration < b1:
            return (T_LO, 0.8)
        if iteration >= b2:
            return (T_LO, 0.2)
        k = 0.2 + (0.8 - 0.2) * (b2 - iteration) / (b2 - b1)
        return (T_LO, k)

    def sample(self, iteration: int, generator: torch.Generator) -> int:
        lo, hi = self.bounds(iteration)
        u = lo + float(torch.rand((), generator=generator)) * (hi - lo)
        return min(int(u * self.total_steps), self.total_steps - 1)


def apply_pixel_grad(rendered: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """Scalar whose backward routes exactly `grad` into `rendered`."""
    return (rendered * grad.detach()).sum()


def _check_domain(model: ScoreModel, x: torch.Tensor):
    ch = KIND_CHANNELS[model.kind]
    if x.shape[0] != ch:
        raise ValueError(f"{model.kind} model expects {ch}-channel maps, got {x.shape[0]}")


def sds_grad(model: ScoreModel, rendered: torch.Tensor, cond: ConditionBundle, t: int,
             schedule: DiffusionSchedule, generator: torch.Generator,
             guidance_scale: float, condition_scale: float = 1.0,
             weight_scale: float = 1.0) -> torch.Tensor:
    """w(t) * (eps_hat - eps) for a rendered map in the model domain [C,H,W]."""
    _check_domain(model, rendered)
    with torch.no_grad():
        x0 = rendered.detach().unsqueeze(0)
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
        x_t = schedule.add_noise(x0, t, eps)
        eps_hat = guided_predict(model, x_t, cond, t, guidance_scale, condition_scale)
        w = float(schedule.sds_weight(t)) * weight_scale
        return (w * (eps_hat - eps)).squeeze(0)


class PerceptualExtractor(nn.Module):
    """Fixed random 4-stage conv stack; a frozen stand-in for pretrained features."""

    def __init__(self, seed: int = 0, channels=(16, 32, 64, 64)):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        convs = []
        c_in = 3
        for c_out in channels:
            w = torch.randn((c_out, c_in, 3, 3), generator=g) * (2.0 / (9 * c_in)) ** 0.5
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(w)
                conv.bias.zero_()
            convs.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.convs:
            h = torch.relu(conv(h))
            feats.append(h)
        return feats


@dataclass
class DUCache:
    """Per-camera-bucket store of multi-step targets, refreshed on a period."""

    refresh_period: int = 10
    _entries: dict = field(default_factory=dict)

    def fetch(self, bucket, iteration: int, compute_fn) -> torch.Tensor:
        entry = self._entries.get(bucket)
        if entry is None or iteration - entry[1] >= self.refresh_period:
            self._entries[bucket] = (compute_fn().detach(), iteration)
        return self._entries[bucket][0]

    def produced_at(self, bucket) -> int | None:
        e = self._entries.get(bucket)
        return None if e is None else e[1]


def multistep_sds_grad(model: ScoreModel, rendered: torch.Tensor, cond: ConditionBundle,
                       t: int, schedule: DiffusionSchedule, cache: DUCache,
                       extractor: PerceptualExtractor, lambda_p: float,
                       generator: torch.Generator, iteration: int, bucket,
                       guidance_scale: float = 7.5, condition_scale: float = 1.0,
                       weight_scale: float = 1.0) -> torch.Tensor:
    """Pixel + perceptual pull toward the cached multi-step target.

    grad = w(t) * (x0 - x0_hat) + lambda_p * d/dx0 [ 0.5 * sum_k ||V_k(x0) - V_k(x0_hat)||^2 ]

    with x0_hat treated as a constant (stop-gradient through the
    generator); x0_hat is served from the cache and recomputed via
    multistep_generate every refresh_period iterations.
    """
    if model.kind != "normal-aligned":
        raise ValueError("multi-step distillation requires the normal-aligned model")
    _check_domain(model, rendered)
    x0 = rendered.detach()

    def compute():
        eps = torch.randn((1, *x0.shape), generator=generator, dtype=x0.dtype)
        x_t = schedule.add_noise(x0.unsqueeze(0), t, eps)
        return multistep_generate(model, x_t, cond, t, schedule,
                                  guidance_scale, condition_scale).squeeze(0)

    x0_hat = cache.fetch(bucket, iteration, compute)
    w = float(schedule.sds_weight(t)) * weight_scale
    grad = w * (x0 - x0_hat)

    if lambda_p != 0.0:
        x = x0.clone().requires_grad_(True)
        with torch.no_grad():
            feats_hat = [f.detach() for f in extractor(x0_hat.unsqueeze(0))]
        feats = extractor(x.unsqueeze(0))
        ploss = sum(0.5 * ((a - b) ** 2).sum() for a, b in zip(feats, feats_hat))
        (pgrad,) = torch.autograd.grad(ploss, x)
        grad = grad + lambda_p * pgrad
    return grad.detach()


def progressive_sdf_loss(field, mask, snapshot, points: torch.Tensor) -> torch.Tensor:
    """Sum of squared SDF deviations from the frozen snapshot at probe points.

    Differentiable through the live field only; rejected when no snapshot
    has been captured yet.
    """
    if snapshot is None:
        raise RuntimeError("progressive SDF loss requires a captured snapshot")
    live, _ = field(points, mask)
    ref = snapshot.sdf(points)
    return ((live - ref) ** 2).sum()
