"""Implicit geometry and texture fields over 3D points.

GeometryField maps a point to a signed distance (negative inside) and a
bounded per-vertex deformation used by the tetrahedral surface extractor.
TextureField maps a surface point to an RGB albedo in [0, 1].  Both are
small MLPs on the masked sinusoidal encoding.
"""

import copy

import torch
import torch.nn as nn

from .encoding import FrequencyMask, positional_encode


def _mlp(in_dim: int, hidden: int, depth: int, out_dim: int) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Linear(in_dim, hidden), nn.SiLU()]
    for _ in range(depth - 1):
        layers += [nn.Linear(hidden, hidden), nn.SiLU()]
    layers.append(nn.Linear(hidden, out_dim))
    return nn.Sequential(*layers)


class GeometryField(nn.Module):
    """Coordinate network producing (sdf, deform) per 3D point.

    The deformation is squashed through tanh and scaled by `deform_bound`,
    which the caller keeps strictly below half the current tet edge length
    so deformed lattice vertices can never cross.
    """

    def __init__(self, enc_dims: int = 32, hidden: int = 64, depth: int = 4,
                 deform_bound: float = 0.45 / 32.0):
        super().__init__()
        self.enc_dims = enc_dims
        self.deform_bound = float(deform_bound)
        self.net = _mlp(enc_dims, hidden, depth, 4)

    def forward(self, points: torch.Tensor, mask: FrequencyMask):
        enc = positional_encode(points, mask)
        out = self.net(enc)
        sdf = out[..., 0]
        deform = self.deform_bound * torch.tanh(out[..., 1:4])
        return sdf, deform


class TextureField(nn.Module):
    """Coordinate network producing rgb in [0,1]^3 per 3D point.

    Uses the full (unmasked) encoding; the final layer is zero-initialized
    so a fresh field is a constant 0.5 gray.
    """

    def __init__(self, enc_dims: int = 32, hidden: int = 64, depth: int = 3):
        super().__init__()
        self.enc_dims = enc_dims
        self._full_mask = FrequencyMask(dims=enc_dims, active=enc_dims)
        self.net = _mlp(enc_dims, hidden, depth, 3)
        last = self.net[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        enc = positional_encode(points, self._full_mask)
        return torch.sigmoid(self.net(enc))


class SDFSnapshot:
    """Frozen copy of a GeometryField's SDF, captured once per geometry run.

    Queries evaluate the frozen network (not a baked grid) so arbitrary
    points can be probed after capture.
    """

    def __init__(self, field: GeometryField, mask: FrequencyMask, iteration: int):
        frozen = copy.deepcopy(field)
        frozen.eval()
        for p in frozen.parameters():
            p.requires_grad_(False)
        self._field = frozen
        self._mask = mask
        self.iteration = iteration

    @torch.no_grad()
    def sdf(self, points: torch.Tensor) -> torch.Tensor:
        s, _ = self._field(points, self._mask)
        return s

    def state_dict(self):
        return {
            "field": self._field.state_dict(),
            "mask_active": self._mask.active,
            "mask_dims": self._mask.dims,
            "iteration": self.iteration,
        }


def snapshot_sdf(field: GeometryField, mask: FrequencyMask, iteration: int,
                 existing: SDFSnapshot | None = None) -> SDFSnapshot:
    """Capture the SDF snapshot; a second capture attempt is rejected."""
    if existing is not None:
        raise RuntimeError("SDF snapshot already captured for this run")
    return SDFSnapshot(field, mask, iteration)
