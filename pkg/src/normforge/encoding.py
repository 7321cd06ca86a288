"""Masked sinusoidal positional encoding with a coarse-to-fine schedule.

A 3D point is lifted to a fixed-width feature vector built from sin/cos
pairs at geometrically spaced frequencies (2^0*pi, 2^1*pi, ... per axis),
ordered low frequency to high frequency.  A binary mask with a growing
count of enabled leading dimensions suppresses the high-frequency tail
early in optimization and is widened on a fixed iteration schedule until
the full encoding is active.
"""

from dataclasses import dataclass

import torch

# Axis-aligned bounding box of the whole scene, in scene units.
BOX_MIN = -0.5
BOX_MAX = 0.5


@dataclass(frozen=True)
class MaskSchedule:
    """Iteration schedule for widening the frequency mask."""

    dims: int = 32
    start_active: int = 16
    step_every: int = 500
    step_size: int = 2
    full_at: int = 4000

    def __post_init__(self):
        if not (0 < self.start_active <= self.dims):
            raise ValueError(f"start_active must be in (0, {self.dims}]")
        if self.step_every <= 0 or self.step_size <= 0:
            raise ValueError("step_every and step_size must be positive")


@dataclass(frozen=True)
class FrequencyMask:
    """Binary low-to-high frequency mask over encoding dimensions."""

    dims: int
    active: int

    def __post_init__(self):
        if not (0 <= self.active <= self.dims):
            raise ValueError(f"active={self.active} outside [0, {self.dims}]")

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        m = torch.zeros(self.dims, dtype=dtype)
        m[: self.active] = 1.0
        return m


def mask_at(iteration: int, schedule: MaskSchedule = MaskSchedule()) -> FrequencyMask:
    """Mask for a given iteration: active grows step_size every step_every iters.

    active = min(dims, start_active + step_size * floor(iter / step_every)),
    and is the full width for every iteration >= full_at.
    """
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    active = schedule.start_active + schedule.step_size * (iteration // schedule.step_every)
    active = min(schedule.dims, active)
    if iteration >= schedule.full_at:
        active = schedule.dims
    return FrequencyMask(dims=schedule.dims, active=active)


def num_levels(dims: int) -> int:
    """Number of frequency levels needed to fill `dims` slots (6 per level)."""
    return -(-dims // 6)


def positional_encode(points: torch.Tensor, mask: FrequencyMask) -> torch.Tensor:
    """Encode points [..., 3] into [..., mask.dims] masked sinusoidal features.

    Layout per frequency level l (freq = 2^l * pi):
        [sin(f*x), cos(f*x), sin(f*y), cos(f*y), sin(f*z), cos(f*z)]
    truncated to mask.dims total slots.  Slots at positions >= mask.active
    are exactly zero; enabled slots equal the unmasked encoding.
    """
    if points.shape[-1] != 3:
        raise ValueError(f"expected [..., 3] points, got {tuple(points.shape)}")
    if not torch.isfinite(points).all():
        raise ValueError("non-finite input point")

    levels = num_levels(mask.dims)
    feats = []
    for level in range(levels):
        freq = (2.0**level) * torch.pi
        scaled = points * freq
        s, c = torch.sin(scaled), torch.cos(scaled)
        # interleave (sin x, cos x, sin y, cos y, sin z, cos z)
        block = torch.stack([s[..., 0], c[..., 0], s[..., 1], c[..., 1], s[..., 2], c[..., 2]], dim=-1)
        feats.append(block)
    enc = torch.cat(feats, dim=-1)[..., : mask.dims]
    m = mask.as_tensor(dtype=enc.dtype).to(enc.device)
    return enc * m
