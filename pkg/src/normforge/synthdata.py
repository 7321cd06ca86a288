"""Procedural training corpus: parametric capsule humanoids rendered to
paired camera-space normal, depth, and color maps with prompt/view/body
labels.

Shapes are unions of analytic SDF primitives rendered by sphere tracing
the analytic field, so ground-truth normals come from exact gradients.
Color maps are flat per-part albedo under the shared headlight shading,
giving the aligned model a learnable geometry-to-shading correspondence.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .camera import BODY_TOKENS, Camera, camera_from_angles, view_token_from_azimuth
from .images import (load_color_png, load_depth_png, load_normal_png,
                     save_color_png, save_depth_png, save_normal_png)
from .raster import headlight_shading
from .seeding import make_generator, stream_seed
from .encoding import BOX_MAX, BOX_MIN

PART_NAMES = ("head", "torso", "legs")  # palette regions, not camera parts

VOCAB = (
    "sphere person",
    "capsule person",
    "tall person",
    "wide person",
    "big head person",
    "small person",
    "round person",
    "egg person",
)

# Fixed per-family albedo palettes (head, torso, legs).
PALETTES = {
    "sphere person": ((0.75, 0.3, 0.3),) * 3,
    "capsule person": ((0.85, 0.65, 0.5), (0.2, 0.4, 0.8), (0.25, 0.25, 0.3)),
    "tall person": ((0.85, 0.65, 0.5), (0.6, 0.2, 0.2), (0.15, 0.15, 0.2)),
    "wide person": ((0.85, 0.65, 0.5), (0.2, 0.6, 0.3), (0.3, 0.25, 0.2)),
    "big head person": ((0.9, 0.7, 0.55), (0.4, 0.3, 0.6), (0.2, 0.2, 0.25)),
    "small person": ((0.85, 0.65, 0.5), (0.7, 0.6, 0.2), (0.25, 0.3, 0.35)),
    "round person": ((0.85, 0.65, 0.5), (0.2, 0.5, 0.55), (0.3, 0.2, 0.3)),
    "egg person": ((0.8, 0.75, 0.6),) * 3,
}


@dataclass(frozen=True)
class Primitive:
    kind: str  # sphere | capsule | ellipsoid
    part: str  # one of PART_NAMES
    a: tuple[float, float, float]  # center / segment start
    b: tuple[float, float, float] | None  # segment end (capsule) or radii (ellipsoid)
    radius: float

    def sdf(self, p: torch.Tensor) -> torch.Tensor:
        a = torch.tensor(self.a, dtype=p.dtype)
        if self.kind == "sphere":
            return torch.linalg.norm(p - a, dim=-1) - self.radius
        if self.kind == "capsule":
            b = torch.tensor(self.b, dtype=p.dtype)
            ab = b - a
            t = ((p - a) @ ab / (ab @ ab)).clamp(0.0, 1.0)
            closest = a + t.unsqueeze(-1) * ab
            return torch.linalg.norm(p - closest, dim=-1) - self.radius
        if self.kind == "ellipsoid":
            r = torch.tensor(self.b, dtype=p.dtype)
            q = (p - a) / r
            k0 = torch.linalg.norm(q, dim=-1)
            k1 = torch.linalg.norm(q / r, dim=-1).clamp_min(1e-12)
            return k0 * (k0 - 1.0) / k1
        raise ValueError(f"unknown primitive kind {self.kind!r}")


@dataclass
class ShapeSpec:
    prompt: str
    parts: list[Primitive]
    palette: dict  # part name -> (r, g, b)

    def sdf(self, p: torch.Tensor) -> torch.Tensor:
        return torch.stack([prim.sdf(p) for prim in self.parts], dim=-1).min(dim=-1).values

    def part_ids(self, p: torch.Tensor) -> torch.Tensor:
        d = torch.stack([prim.sdf(p) for prim in self.parts], dim=-1)
        return d.argmin(dim=-1)

    def albedo(self, p: torch.Tensor) -> torch.Tensor:
        pal = torch.tensor([self.palette[prim.part] for prim in self.parts], dtype=p.dtype)
        return pal[self.part_ids(p)]

    def normal(self, p: torch.Tensor) -> torch.Tensor:
        q = p.detach().requires_grad_(True)
        s = self.sdf(q).sum()
        (g,) = torch.autograd.grad(s, q)
        return g / torch.linalg.norm(g, dim=-1, keepdim=True).clamp_min(1e-12)


def _u(g: torch.Generator, lo: float, hi: float) -> float:
    return lo + float(torch.rand((), generator=g)) * (hi - lo)


def make_shape(prompt: str, generator: torch.Generator) -> ShapeSpec:
    """Reproducible shape for a vocabulary token; unknown tokens are rejected."""
    if prompt not in VOCAB:
        raise ValueError(f"unknown prompt token {prompt!r}")
    g = generator
    palette = {name: PALETTES[prompt][i] for i, name in enumerate(PART_NAMES)}
    palette["arm"] = palette["torso"]

    if prompt == "sphere person":
        r = _u(g, 0.33, 0.37)
        parts = [Primitive("sphere", "torso", (0.0, 0.0, 0.0), None, r)]
        return ShapeSpec(prompt, parts, palette)
    if prompt == "egg person":
        rx = _u(g, 0.2, 0.24)
        ry = _u(g, 0.32, 0.38)
        parts = [Primitive("ellipsoid", "torso", (0.0, 0.0, 0.0), (rx, ry, rx), 0.0)]
        return ShapeSpec(prompt, parts, palette)

    # humanoid base proportions, modulated per family
    scale = 1.0
    head_r, torso_r, leg_r = 0.09, 0.13, 0.10
    head_y, torso_top, torso_bot, leg_bot = 0.33, 0.20, -0.06, -0.40
    torso_kind = "capsule"
    if prompt == "tall person":
        torso_top, torso_bot, leg_bot, head_y = 0.24, -0.02, -0.44, 0.37
        torso_r = 0.11
    elif prompt == "wide person":
        torso_r, leg_r = 0.17, 0.12
    elif prompt == "big head person":
        head_r, head_y = 0.14, 0.30
    elif prompt == "small person":
        scale = 0.75
    elif prompt == "round person":
        torso_kind = "ellipsoid"

    jit = lambda x, f=0.08: x * _u(g, 1.0 - f, 1.0 + f)
    head_r, torso_r, leg_r = jit(head_r), jit(torso_r), jit(leg_r)
    head_y = jit(head_y, 0.04)

    def s3(*v):
        return tuple(scale * x for x in v)

    # the head leans forward (+z) and one arm is raised on +x: humans have
    # faces and poses, capsule people need equivalent azimuthal asymmetry or
    # the four views would render identically
    head_z = 0.05 * scale
    parts = [Primitive("sphere", "head", (0.0, scale * head_y, head_z), None,
                       scale * head_r)]
    if torso_kind == "capsule":
        parts.append(Primitive("capsule", "torso", s3(0.0, torso_bot, 0.0), s3(0.0, torso_top, 0.0),
                               scale * torso_r))
    else:
        cy = (torso_top + torso_bot) / 2
        ry = (torso_top - torso_bot) / 2 + torso_r
        parts.append(Primitive("ellipsoid", "torso", s3(0.0, cy, 0.0),
                               s3(torso_r * 1.35, ry, torso_r * 1.35), 0.0))
    parts.append(Primitive("capsule", "legs", s3(0.0, leg_bot, 0.0), s3(0.0, torso_bot - 0.02, 0.0),
                           scale * leg_r))
    parts.append(Primitive("sphere", "head", (0.0, scale * head_y, head_z + scale * (head_r + 0.015)),
                           None, scale * 0.05))
    parts.append(Primitive("capsule", "arm", s3(torso_r - 0.02, torso_top - 0.05, 0.0),
                           s3(torso_r + 0.13, torso_top + 0.14, 0.0), scale * 0.05))
    return ShapeSpec(prompt, parts, palette)


def render_shape(spec: ShapeSpec, camera: Camera, max_steps: int = 64, eps: float = 2e-4):
    """Sphere-trace the analytic SDF; returns normal/depth/color/coverage maps.

    Uses the exact same camera-space conventions and headlight shading as
    the mesh rasterizer so both produce one training distribution.
    """
    size = camera.image_size
    dtype = torch.float32
    rot = camera.rotation
    pos = camera.position

    ii = torch.arange(size, dtype=dtype)
    py, px = torch.meshgrid(ii, ii, indexing="ij")
    ndc_x = (px + 0.5) / size * 2.0 - 1.0
    ndc_y = 1.0 - (py + 0.5) / size * 2.0
    d_cam = torch.stack([ndc_x * camera.half_tan, ndc_y * camera.half_tan,
                         -torch.ones_like(ndc_x)], dim=-1)
    d_cam = d_cam / torch.linalg.norm(d_cam, dim=-1, keepdim=True)
    dirs = (d_cam.reshape(-1, 3) @ rot)  # camera -> world (R is orthonormal)

    n_rays = dirs.shape[0]
    t = torch.full((n_rays,), camera.near, dtype=dtype)
    hit = torch.zeros(n_rays, dtype=torch.bool)
    active = torch.ones(n_rays, dtype=torch.bool)
    t_max = camera.far
    for _ in range(max_steps):
        if not active.any():
            break
        p = pos + t[active].unsqueeze(-1) * dirs[active]
        d = spec.sdf(p)
        newly_hit = d < eps
        idx = torch.nonzero(active, as_tuple=False).squeeze(-1)
        hit[idx[newly_hit]] = True
        t[active] = t[active] + d.clamp_min(0.0)
        still = ~newly_hit & (t[idx] < t_max)
        active[idx] = still
    # refine hit points once toward the zero level set
    pts = pos + t.unsqueeze(-1) * dirs

    normal = torch.zeros((n_rays, 3), dtype=dtype)
    depth = torch.zeros(n_rays, dtype=dtype)
    color = torch.zeros((n_rays, 3), dtype=dtype)
    if hit.any():
        ph = pts[hit]
        n_world = spec.normal(ph)
        n_cam = n_world @ rot.T
        z = -((ph - pos) @ rot.T)[:, 2]
        d_norm = ((camera.far - z) / (camera.far - camera.near)).clamp(0.0, 1.0)
        shade = headlight_shading(n_cam[:, 2])
        rgb = (spec.albedo(ph) * shade.unsqueeze(-1)).clamp(0.0, 1.0)
        normal[hit] = n_cam
        depth[hit] = d_norm
        color[hit] = rgb
    hw = (size, size)
    return (normal.reshape(*hw, 3), depth.reshape(*hw), color.reshape(*hw, 3),
            hit.reshape(*hw))


def generate_corpus(out_dir: str | Path, seed: int = 0, tokens=VOCAB, views_per_part: int = 8,
                    parts=BODY_TOKENS, image_size: int = 64, shapes_per_token: int = 1):
    """Write records (PNGs + JSONL index) for shapes x views x parts.

    The index is finalized by an atomic rename; a partial corpus has no
    index.jsonl and is treated as invalid by load_corpus.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    img_dir = out / "images"
    img_dir.mkdir(exist_ok=True)
    tmp_index = out / "index.jsonl.part"
    counts: dict = {}
    n = 0
    with open(tmp_index, "w") as idx:
        for token in tokens:
            pid = VOCAB.index(token)
            for si in range(shapes_per_token):
                g_shape = make_generator(stream_seed(seed, f"shape/{token}"), f"i{si}")
                spec = make_shape(token, g_shape)
                for part in parts:
                    for vi in range(views_per_part):
                        g_cam = make_generator(seed, f"cam/{token}/{si}/{part}/{vi}")
                        u = torch.rand(2, generator=g_cam)
                        azimuth = float(u[0]) * 360.0
                        elevation = -10.0 + float(u[1]) * 30.0
                        cam = camera_from_angles(part, azimuth, elevation, image_size)
                        normal, depth, color, _cov = render_shape(spec, cam)
                        stem = f"{pid:02d}_{si:02d}_{part}_{vi:03d}"
                        save_normal_png(img_dir / f"{stem}_normal.png", normal)
                        save_depth_png(img_dir / f"{stem}_depth.png", depth)
                        save_color_png(img_dir / f"{stem}_color.png", color)
                        rec = {
                            "prompt": token,
                            "prompt_id": pid,
                            "shape_index": si,
                            "view": view_token_from_azimuth(azimuth),
                            "body": part,
                            "azimuth_deg": azimuth,
                            "elevation_deg": elevation,
                            "normal": f"images/{stem}_normal.png",
                            "depth": f"images/{stem}_depth.png",
                            "color": f"images/{stem}_color.png",
                            "camera": {
                                "rotation": [[float(x) for x in row] for row in cam.rotation],
                                "position": [float(x) for x in cam.position],
                                "fov_deg": cam.fov_deg,
                                "image_size": cam.image_size,
                                "near": cam.near,
                                "far": cam.far,
                            },
                            "seed": stream_seed(seed, f"cam/{token}/{si}/{part}/{vi}"),
                        }
                        idx.write(json.dumps(rec, sort_keys=True) + "\n")
                        key = (token, view_token_from_azimuth(azimuth), part)
                        counts[key] = counts.get(key, 0) + 1
                        n += 1
    meta = {
        "format_version": 1,
        "seed": seed,
        "vocab": list(VOCAB),
        "tokens": list(tokens),
        "views_per_part": views_per_part,
        "parts": list(parts),
        "image_size": image_size,
        "shapes_per_token": shapes_per_token,
        "records": n,
    }
    with open(out / "meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    tmp_index.rename(out / "index.jsonl")
    return meta, counts


def load_corpus(corpus_dir: str | Path):
    """Read the finalized index; raises if the corpus was never finalized."""
    corpus = Path(corpus_dir)
    index = corpus / "index.jsonl"
    if not index.exists():
        raise FileNotFoundError(f"{index} missing: corpus incomplete or not generated")
    with open(corpus / "meta.json") as f:
        meta = json.load(f)
    records = [json.loads(line) for line in open(index)]
    return meta, records


def load_record_maps(corpus_dir: str | Path, record: dict) -> dict:
    corpus = Path(corpus_dir)
    return {
        "normal": load_normal_png(corpus / record["normal"]),
        "depth": load_depth_png(corpus / record["depth"]),
        "color": load_color_png(corpus / record["color"]),
    }


def make_bank(corpus_dir: str | Path, records: list, kind: str) -> dict:
    """Stack corpus records into training tensors for one model kind."""
    from .training import to_model_domain

    xs, ps, vs, bs, ncs = [], [], [], [], []
    from .camera import VIEW_TOKENS

    for rec in records:
        maps = load_record_maps(corpus_dir, rec)
        xs.append(to_model_domain(kind, maps))
        ps.append(rec["prompt_id"])
        vs.append(VIEW_TOKENS.index(rec["view"]))
        bs.append(BODY_TOKENS.index(rec["body"]))
        if kind == "normal-aligned":
            ncs.append(maps["normal"].permute(2, 0, 1))
    bank = {
        "x0": torch.stack(xs),
        "prompt": torch.tensor(ps, dtype=torch.int64),
        "view": torch.tensor(vs, dtype=torch.int64),
        "body": torch.tensor(bs, dtype=torch.int64),
    }
    if ncs:
        bank["normal_cond"] = torch.stack(ncs)
    return bank
