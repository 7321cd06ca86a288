"""Camera model, part-based camera sampling, and the condition bundle.

Cameras orbit a per-body-part target at a fixed distance, with azimuth
drawn uniformly inside one of four 90-degree sectors (centered on
0/90/180/270 degrees) and elevation uniform in [-10, 20] degrees.  The
sector index is the view token; the sampled part is the body token.
"""

import math
from dataclasses import dataclass

import torch

VIEW_TOKENS = ("front", "left", "back", "right")  # azimuth sectors 0/90/180/270
BODY_TOKENS = ("head", "upper", "lower", "full")

ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; rotation rows are (right, up, backward), world->camera."""

    rotation: torch.Tensor  # [3, 3]
    position: torch.Tensor  # [3]
    fov_deg: float
    image_size: int
    near: float
    far: float

    def __post_init__(self):
        check_orthonormal(self.rotation)

    @property
    def half_tan(self) -> float:
        return math.tan(math.radians(self.fov_deg) / 2.0)


def check_orthonormal(rot: torch.Tensor) -> None:
    eye = torch.eye(3, dtype=rot.dtype)
    err = (rot.T @ rot - eye).abs().max().item()
    if err > 1e-5:
        raise ValueError(f"rotation is not orthonormal (max |R^T R - I| = {err:.2e})")


def look_at(eye: torch.Tensor, target: torch.Tensor, fov_deg: float, image_size: int,
            near: float, far: float, dtype=torch.float32) -> Camera:
    """Camera at `eye` looking at `target`, world up = +y."""
    eye = eye.to(dtype)
    target = target.to(dtype)
    backward = eye - target
    backward = backward / torch.linalg.norm(backward)
    world_up = torch.tensor([0.0, 1.0, 0.0], dtype=dtype)
    right = torch.linalg.cross(world_up, backward)
    nr = torch.linalg.norm(right)
    if nr < 1e-8:
        raise ValueError("camera gaze is parallel to world up")
    right = right / nr
    up = torch.linalg.cross(backward, right)
    rot = torch.stack([right, up, backward], dim=0)
    return Camera(rotation=rot, position=eye, fov_deg=fov_deg,
                  image_size=image_size, near=near, far=far)


@dataclass(frozen=True)
class PartPreset:
    """Framing for one body part: orbit target, distance, field of view."""

    target: tuple[float, float, float]
    distance: float
    fov_deg: float

    @property
    def near(self) -> float:
        return max(0.02, self.distance - 0.6)

    @property
    def far(self) -> float:
        return self.distance + 0.8


# Declared config defaults; the corpus renderer and the rasterizer share them.
PART_PRESETS: dict[str, PartPreset] = {
    "head": PartPreset(target=(0.0, 0.33, 0.0), distance=0.55, fov_deg=30.0),
    "upper": PartPreset(target=(0.0, 0.14, 0.0), distance=0.85, fov_deg=45.0),
    "lower": PartPreset(target=(0.0, -0.24, 0.0), distance=0.85, fov_deg=45.0),
    "full": PartPreset(target=(0.0, 0.0, 0.0), distance=1.25, fov_deg=46.0),
}

ELEVATION_RANGE_DEG = (-10.0, 20.0)

# Part-sampling probability tables, in BODY_TOKENS order (head, upper, lower, full).
PART_PROBS = {
    ("head-only", 1): (1.0, 0.0, 0.0, 0.0),
    ("head-only", 2): (1.0, 0.0, 0.0, 0.0),
    ("upper-body", 1): (0.3, 0.7, 0.0, 0.0),
    ("upper-body", 2): (0.3, 0.7, 0.0, 0.0),
    ("full-body", 1): (0.1, 0.1, 0.1, 0.7),
    ("full-body", 2): (0.3, 0.3, 0.3, 0.1),
}

BODY_MODES = ("head-only", "upper-body", "full-body")


@dataclass
class ConditionBundle:
    """Discrete conditions for the score models, plus the optional normal map."""

    prompt: int
    view: str
    body: str
    normal_cond: torch.Tensor | None = None

    @property
    def view_id(self) -> int:
        return VIEW_TOKENS.index(self.view)

    @property
    def body_id(self) -> int:
        return BODY_TOKENS.index(self.body)


def camera_from_angles(part: str, azimuth_deg: float, elevation_deg: float,
                       image_size: int) -> Camera:
    preset = PART_PRESETS[part]
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    target = torch.tensor(preset.target)
    offset = preset.distance * torch.tensor(
        [math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)]
    )
    return look_at(target + offset, target, preset.fov_deg, image_size,
                   preset.near, preset.far)


def view_token_from_azimuth(azimuth_deg: float) -> str:
    bucket = int(((azimuth_deg + 45.0) % 360.0) // 90.0)
    return VIEW_TOKENS[bucket]


def view_token_from_camera(camera: Camera, part: str) -> str:
    """Recover the azimuth sector from camera position and the part preset."""
    target = torch.tensor(PART_PRESETS[part].target, dtype=camera.position.dtype)
    d = camera.position - target
    az = math.degrees(math.atan2(float(d[0]), float(d[2]))) % 360.0
    return view_token_from_azimuth(az)


def sample_camera(body_mode: str, phase: int, generator: torch.Generator,
                  image_size: int, prompt: int = 0) -> tuple[Camera, ConditionBundle]:
    """Draw a part per the probability table, then a camera in its preset orbit."""
    if body_mode not in BODY_MODES:
        raise ValueError(f"unknown body_mode {body_mode!r}")
    probs = torch.tensor(PART_PROBS[(body_mode, phase)])
    part_idx = int(torch.multinomial(probs, 1, generator=generator))
    part = BODY_TOKENS[part_idx]

    u = torch.rand(3, generator=generator)
    sector = int(u[0] * 4) % 4
    # uniform within the sector, with a hair of margin so the float32
    # camera->azimuth roundtrip can never cross a bucket boundary
    local = max(-44.995, min(44.995, (float(u[1]) - 0.5) * 90.0))
    azimuth = sector * 90.0 + local
    lo, hi = ELEVATION_RANGE_DEG
    elevation = lo + float(u[2]) * (hi - lo)

    cam = camera_from_angles(part, azimuth, elevation, image_size)
    cond = ConditionBundle(prompt=prompt, view=view_token_from_azimuth(azimuth), body=part)
    return cam, cond


def world_to_camera_normals(normal_map: torch.Tensor, rotation: torch.Tensor) -> torch.Tensor:
    """Rotate per-pixel world normals into camera space; lengths are preserved.

    Background pixels (zero normals) map to zero.
    """
    check_orthonormal(rotation)
    return normal_map @ rotation.T.to(normal_map.dtype)
