"""Orchestration of the two generation stages.

Geometry: progressive distillation of the SDF+deformation field through
normal and depth score models (coarse-to-fine encoding mask, mid-run SDF
snapshot anchoring, resolution doubling, annealed timesteps).

Texture: color-field distillation through the normal-aligned model,
single-step at first, then multi-step targets with a perceptual term and
the periodic target cache.
"""

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import torch

from .camera import sample_camera
from .encoding import MaskSchedule, mask_at
from .fields import GeometryField, SDFSnapshot, TextureField, snapshot_sdf
from .guidance import (DUCache, PerceptualExtractor, TimestepSchedule,
                       apply_pixel_grad, multistep_sds_grad, progressive_sdf_loss, sds_grad)
from .images import save_color_png, save_depth_png, save_normal_png
from .raster import rasterize
from .schedule import DiffusionSchedule
from .scoremodel import ScoreModel
from .seeding import make_generator
from .synthdata import VOCAB, Primitive, ShapeSpec
from .tetgrid import TetGrid, TriMesh, build_grid, marching_tets, resolution_at, sample_points
from .training import to_model_domain

CONFIG_SCHEMA_VERSION = 1
FIELD_CHECKPOINT_VERSION = 1


@dataclass
class ResolutionSchedule:
    base: int = 32
    period: int = 600
    max_doublings: int = 2


@dataclass
class RunConfig:
    """Everything a generation run depends on; JSON round-trips exactly."""

    schema_version: int = CONFIG_SCHEMA_VERSION
    prompt: str = "capsule person"
    body_mode: str = "full-body"
    template: str = "neutral"
    seed: int = 0
    out_dir: str = "runs/run0"
    image_size: int = 64

    # stage lengths (defaults are 1/5 of the full-scale 15K/10K)
    geometry_iters: int = 3000
    texture_iters: int = 2000
    texture_coarse_frac: float = 0.2
    camera_phase_switch_frac: float = 2.0 / 3.0

    # schedules
    total_timesteps: int = 1000
    mask: MaskSchedule = dc_field(default_factory=lambda: MaskSchedule(
        dims=32, start_active=16, step_every=100, step_size=2, full_at=800))
    resolution: ResolutionSchedule = dc_field(default_factory=ResolutionSchedule)
    snapshot_iter: int = 600

    # distillation
    guidance_scale_geometry: float = 50.0
    guidance_scale_texture: float = 7.5
    condition_scale: float = 1.0
    normal_sds_weight: float = 1.0
    depth_sds_weight: float = 1.0
    sdf_loss_weight: float = 1500.0
    sdf_points: int = 8192
    lambda_p: float = 1.0
    du_refresh: int = 10

    # optimization
    lr_geometry: float = 2e-5
    lr_texture: float = 1e-3
    grad_clip: float = 1.0
    weight_decay: float = 1e-4

    # field architecture
    field_hidden: int = 64
    field_depth: int = 4
    texture_hidden: int = 64
    texture_depth: int = 3
    deform_factor: float = 0.45

    # template fitting
    init_fit_steps: int = 1500
    init_fit_tol: float = 0.01
    init_fit_lr: float = 1e-3

    checkpoint_every: int = 500
    preview_every: int = 500

    def __post_init__(self):
        if isinstance(self.mask, dict):
            self.mask = MaskSchedule(**self.mask)
        if isinstance(self.resolution, dict):
            self.resolution = ResolutionSchedule(**self.resolution)
        self.validate()

    def validate(self):
        if self.prompt not in VOCAB:
            raise ValueError(f"unknown prompt token {self.prompt!r}")
        if not (0 < self.snapshot_iter < self.geometry_iters):
            raise ValueError("snapshot_iter must fall inside the geometry stage")
        if self.snapshot_iter >= self.mask.full_at:
            raise ValueError("snapshot must be captured before the mask is full")
        if self.mask.full_at > self.geometry_iters:
            raise ValueError("mask schedule must complete within the geometry stage")
        if not (0.0 < self.texture_coarse_frac < 1.0):
            raise ValueError("texture_coarse_frac must be in (0, 1)")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls(**json.loads(text))

    def run_id(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Apply dotted key=value overrides; unknown keys are rejected."""
        data = json.loads(self.to_json())
        for key, value in overrides.items():
            node = data
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise KeyError(f"unknown config key {key!r}")
                node = node[p]
            leaf = parts[-1]
            if leaf not in node:
                raise KeyError(f"unknown config key {key!r}")
            old = node[leaf]
            if isinstance(old, bool):
                value = value in ("1", "true", "True")
            elif isinstance(old, int):
                value = int(value)
            elif isinstance(old, float):
                value = float(value)
            node[leaf] = value
        return RunConfig(**data)


# ---------------------------------------------------------------------------
# Initialization templates

def sphere_template(radius: float = 0.35) -> ShapeSpec:
    return ShapeSpec("sphere person", [Primitive("sphere", "torso", (0.0, 0.0, 0.0), None, radius)],
                     {"head": (0.7,) * 3, "torso": (0.7,) * 3, "legs": (0.7,) * 3})


def neutral_template() -> ShapeSpec:
    """Three-capsule neutral person: head sphere, torso capsule, leg capsule."""
    gray = {"head": (0.7,) * 3, "torso": (0.7,) * 3, "legs": (0.7,) * 3}
    parts = [
        Primitive("sphere", "head", (0.0, 0.33, 0.0), None, 0.09),
        Primitive("capsule", "torso", (0.0, -0.06, 0.0), (0.0, 0.20, 0.0), 0.13),
        Primitive("capsule", "legs", (0.0, -0.40, 0.0), (0.0, -0.08, 0.0), 0.10),
    ]
    return ShapeSpec("capsule person", parts, gray)


def offset_capsule_template() -> ShapeSpec:
    gray = {"head": (0.7,) * 3, "torso": (0.7,) * 3, "legs": (0.7,) * 3}
    parts = [Primitive("capsule", "torso", (0.12, -0.16, 0.06), (0.12, 0.16, 0.06), 0.22)]
    return ShapeSpec("sphere person", parts, gray)


TEMPLATES = {
    "neutral": neutral_template,
    "sphere": sphere_template,
    "offset-capsule": offset_capsule_template,
}


class TemplateFitError(RuntimeError):
    def __init__(self, achieved: float, tol: float):
        super().__init__(f"template fit reached mean |error| {achieved:.4f} > tol {tol}")
        self.achieved = achieved


def init_from_template(template: ShapeSpec, config: RunConfig) -> GeometryField:
    """Regress a fresh field to the template SDF under the iteration-0 mask.

    Fails (with the achieved error attached) when the mean absolute SDF
    error over 10K probe points does not reach the configured tolerance.
    """
    g_init = make_generator(config.seed, "init/field")
    torch.manual_seed(int(g_init.initial_seed()) % (2**31))
    field = GeometryField(enc_dims=config.mask.dims, hidden=config.field_hidden,
                          depth=config.field_depth,
                          deform_bound=config.deform_factor / config.resolution.base)
    mask = mask_at(0, config.mask)
    g_pts = make_generator(config.seed, "init/points")
    opt = torch.optim.Adam(field.parameters(), lr=config.init_fit_lr)
    for step in range(config.init_fit_steps):
        pts = sample_points(2048, g_pts)
        near = pts[template.sdf(pts).abs() < 0.12]
        batch = torch.cat([pts[:1024], near], dim=0)
        target = template.sdf(batch)
        sdf, deform = field(batch, mask)
        loss = ((sdf - target) ** 2).mean() + 0.1 * (deform ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()

    g_probe = make_generator(config.seed, "init/probe")
    probes = sample_points(10_000, g_probe)
    with torch.no_grad():
        err = (field(probes, mask)[0] - template.sdf(probes)).abs().mean().item()
    if err > config.init_fit_tol:
        raise TemplateFitError(err, config.init_fit_tol)
    return field


# ---------------------------------------------------------------------------
# Mesh extraction with a narrow-band gradient pass

def extract_mesh(field: GeometryField, grid: TetGrid, mask, chunk: int = 65536):
    """Marching tets over the field: full no-grad sign pass, then a
    differentiable re-evaluation of only the vertices incident to
    sign-crossing tets.  Identical values to a full gradient pass."""
    with torch.no_grad():
        sdfs = []
        for i in range(0, grid.vertices.shape[0], chunk):
            s, _ = field(grid.vertices[i : i + chunk], mask)
            sdfs.append(s)
        sdf_all = torch.cat(sdfs)
        occ = (torch.where(sdf_all == 0, torch.full_like(sdf_all, 1e-8), sdf_all) < 0)
        occ_t = occ[grid.tets]
        n_in = occ_t.sum(dim=-1)
        crossing = (n_in > 0) & (n_in < 4)
        if not crossing.any():
            empty = grid.vertices.new_zeros((0, 3))
            return TriMesh(empty, torch.zeros((0, 3), dtype=torch.int64))
        band = torch.unique(grid.tets[crossing].to(torch.int64))

    sdf_band, deform_band = field(grid.vertices[band], mask)
    sdf = sdf_all.index_put((band,), sdf_band)
    deform = torch.zeros_like(grid.vertices).index_put((band,), deform_band)
    return marching_tets(grid, sdf, deform)


# ---------------------------------------------------------------------------
# Field checkpoints

def save_field_checkpoint(path, kind: str, net, config: RunConfig, iteration: int,
                          extra: dict | None = None):
    payload = {
        "format_version": FIELD_CHECKPOINT_VERSION,
        "kind": kind,
        "config": config.to_json(),
        "run_id": config.run_id(),
        "iteration": iteration,
        "state_dict": net.state_dict(),
    }
    if kind == "geometry":
        payload["deform_bound"] = net.deform_bound
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_field_checkpoint(path, expected_kind: str):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload["kind"] != expected_kind:
        raise ValueError(f"checkpoint kind {payload['kind']!r} != expected {expected_kind!r}")
    config = RunConfig.from_json(payload["config"])
    if expected_kind == "geometry":
        net = GeometryField(enc_dims=config.mask.dims, hidden=config.field_hidden,
                            depth=config.field_depth, deform_bound=payload["deform_bound"])
    else:
        net = TextureField(enc_dims=config.mask.dims, hidden=config.texture_hidden,
                           depth=config.texture_depth)
    net.load_state_dict(payload["state_dict"])
    return net, config, payload


# ---------------------------------------------------------------------------
# Stage loops

class NonFiniteLossError(RuntimeError):
    pass


def _sds_chain(model: ScoreModel, maps_dict: dict, kind: str, cond, t, dsched, gen,
               scale, weight, condition_scale=1.0):
    x = to_model_domain(kind, maps_dict)
    g = sds_grad(model, x, cond, t, dsched, gen, scale, condition_scale, weight)
    return apply_pixel_grad(x, g), float(torch.linalg.norm(g))


def run_geometry(config: RunConfig, models: dict, progress=None):
    """Distill geometry from the normal/depth models; returns field + mesh."""
    for role, kind in (("normal", "normal-adapted"), ("depth", "depth-adapted")):
        if role in models and models[role] is not None and models[role].kind != kind:
            raise ValueError(f"model for role {role!r} has kind {models[role].kind!r}")
    if models.get("normal") is None:
        raise ValueError("geometry stage requires a normal-adapted model")

    out = Path(config.out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "previews").mkdir(exist_ok=True)
    (out / "config.json").write_text(config.to_json())

    template = TEMPLATES[config.template]()
    field = init_from_template(template, config)
    dsched = DiffusionSchedule(config.total_timesteps)
    tsched = TimestepSchedule("geometry", config.geometry_iters, config.total_timesteps)
    prompt_id = VOCAB.index(config.prompt)

    g_cam = make_generator(config.seed, "geom/cam")
    g_t = make_generator(config.seed, "geom/t")
    # separate noise streams so disabling depth never shifts the normal draws
    g_noise_n = make_generator(config.seed, "geom/noise/normal")
    g_noise_d = make_generator(config.seed, "geom/noise/depth")
    g_pts = make_generator(config.seed, "geom/sdfpts")

    opt = torch.optim.AdamW(field.parameters(), lr=config.lr_geometry,
                            weight_decay=config.weight_decay)
    grids: dict[int, TetGrid] = {}
    snapshot: SDFSnapshot | None = None
    last_ckpt = None
    phase_switch = config.camera_phase_switch_frac * config.geometry_iters

    log_path = out / "geometry_loss.csv"
    with open(log_path, "w", newline="") as logf:
        log = csv.writer(logf)
        log.writerow(["iteration", "resolution", "mask_active", "t",
                      "normal_grad_norm", "depth_grad_norm", "sdf_loss"])
        for it in range(config.geometry_iters):
            res = resolution_at(it, config.resolution.base, config.resolution.period,
                                config.resolution.max_doublings)
            if res not in grids:
                grids[res] = build_grid(res)
            grid = grids[res]
            field.deform_bound = config.deform_factor * grid.edge_length
            mask = mask_at(it, config.mask)

            if it == config.snapshot_iter:
                snapshot = snapshot_sdf(field, mask, it, existing=snapshot)

            phase = 1 if it < phase_switch else 2
            cam, cond = sample_camera(config.body_mode, phase, g_cam,
                                      config.image_size, prompt_id)
            mesh = extract_mesh(field, grid, mask)
            maps = rasterize(mesh, None, cam)
            t = tsched.sample(it, g_t)

            loss, n_norm = _sds_chain(models["normal"], {"normal": maps.normal},
                                      "normal-adapted", cond, t, dsched, g_noise_n,
                                      config.guidance_scale_geometry, config.normal_sds_weight)
            d_norm = 0.0
            if models.get("depth") is not None and config.depth_sds_weight > 0:
                dl, d_norm = _sds_chain(models["depth"], {"depth": maps.depth},
                                        "depth-adapted", cond, t, dsched, g_noise_d,
                                        config.guidance_scale_geometry, config.depth_sds_weight)
                loss = loss + dl

            sdf_loss_val = 0.0
            if snapshot is not None:
                pts = sample_points(config.sdf_points, g_pts)
                sl = progressive_sdf_loss(field, mask, snapshot, pts)
                loss = loss + config.sdf_loss_weight * sl
                sdf_loss_val = float(sl)

            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss at iteration {it}; last checkpoint: {last_ckpt}")

            if loss.requires_grad:  # empty-mesh renders carry no geometry gradient
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(field.parameters(), config.grad_clip)
                opt.step()

            log.writerow([it, res, mask.active, t, n_norm, d_norm, sdf_loss_val])
            if (it + 1) % config.checkpoint_every == 0 or it + 1 == config.geometry_iters:
                last_ckpt = out / "checkpoints" / f"geometry_{it + 1:06d}.pt"
                save_field_checkpoint(last_ckpt, "geometry", field, config, it + 1)
            if (it + 1) % config.preview_every == 0:
                save_normal_png(out / "previews" / f"normal_{it + 1:06d}.png", maps.normal)
                save_depth_png(out / "previews" / f"depth_{it + 1:06d}.png", maps.depth)
            if progress is not None:
                progress(it, float(loss))

    final_res = resolution_at(config.geometry_iters - 1, config.resolution.base,
                              config.resolution.period, config.resolution.max_doublings)
    final_mask = mask_at(config.geometry_iters - 1, config.mask)
    if final_res not in grids:
        grids[final_res] = build_grid(final_res)
    with torch.no_grad():
        mesh = extract_mesh(field, grids[final_res], final_mask)
    ckpt = out / "checkpoints" / "geometry_final.pt"
    save_field_checkpoint(ckpt, "geometry", field, config, config.geometry_iters,
                          extra={"snapshot": snapshot.state_dict() if snapshot else None})
    return field, mesh, ckpt


def run_texture(config: RunConfig, aligned_model: ScoreModel, geometry: GeometryField,
                geometry_run_id: str | None = None, progress=None):
    """Distill the texture field against the frozen geometry."""
    if aligned_model.kind != "normal-aligned":
        raise ValueError(f"texture stage needs the normal-aligned model, got {aligned_model.kind!r}")

    out = Path(config.out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "previews").mkdir(exist_ok=True)

    for p in geometry.parameters():
        p.requires_grad_(False)

    final_res = resolution_at(config.geometry_iters - 1, config.resolution.base,
                              config.resolution.period, config.resolution.max_doublings)
    grid = build_grid(final_res)
    geometry.deform_bound = config.deform_factor * grid.edge_length
    mask = mask_at(config.geometry_iters - 1, config.mask)
    with torch.no_grad():
        mesh = extract_mesh(geometry, grid, mask).with_vertex_normals()
    if mesh.is_empty:
        raise ValueError("frozen geometry extracts an empty mesh; cannot texture")

    torch.manual_seed(make_generator(config.seed, "tex/field").initial_seed() % (2**31))
    texture = TextureField(enc_dims=config.mask.dims, hidden=config.texture_hidden,
                           depth=config.texture_depth)
    dsched = DiffusionSchedule(config.total_timesteps)
    coarse_end = int(config.texture_coarse_frac * config.texture_iters)
    ts_coarse = TimestepSchedule("texture-coarse", coarse_end, config.total_timesteps)
    ts_fine = TimestepSchedule("texture-fine", config.texture_iters - coarse_end,
                               config.total_timesteps)
    cache = DUCache(refresh_period=config.du_refresh)
    extractor = PerceptualExtractor(seed=config.seed)
    prompt_id = VOCAB.index(config.prompt)

    g_cam = make_generator(config.seed, "tex/cam")
    g_t = make_generator(config.seed, "tex/t")
    g_noise = make_generator(config.seed, "tex/noise")
    opt = torch.optim.AdamW(texture.parameters(), lr=config.lr_texture,
                            weight_decay=config.weight_decay)

    log_path = out / "texture_loss.csv"
    last_ckpt = None
    with open(log_path, "w", newline="") as logf:
        log = csv.writer(logf)
        log.writerow(["iteration", "phase", "t", "grad_norm"])
        for it in range(config.texture_iters):
            # texture always uses the phase-2 part probabilities
            cam, cond = sample_camera(config.body_mode, 2, g_cam, config.image_size, prompt_id)
            maps = rasterize(mesh, texture, cam)
            cond.normal_cond = maps.normal.detach().permute(2, 0, 1)
            x = to_model_domain("normal-aligned", {"color": maps.color})

            if it < coarse_end:
                t = ts_coarse.sample(it, g_t)
                g = sds_grad(aligned_model, x, cond, t, dsched, g_noise,
                             config.guidance_scale_texture, config.condition_scale)
                phase_name = "coarse"
            else:
                t = ts_fine.sample(it - coarse_end, g_t)
                bucket = (cond.body, cond.view)
                g = multistep_sds_grad(aligned_model, x, cond, t, dsched, cache, extractor,
                                       config.lambda_p, g_noise, it, bucket,
                                       config.guidance_scale_texture, config.condition_scale)
                phase_name = "fine"

            loss = apply_pixel_grad(x, g)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss at iteration {it}; last checkpoint: {last_ckpt}")
            if loss.requires_grad:  # uncovered views carry no texture gradient
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(texture.parameters(), config.grad_clip)
                opt.step()

            log.writerow([it, phase_name, t, float(torch.linalg.norm(g))])
            if (it + 1) % config.checkpoint_every == 0 or it + 1 == config.texture_iters:
                last_ckpt = out / "checkpoints" / f"texture_{it + 1:06d}.pt"
                save_field_checkpoint(last_ckpt, "texture", texture, config, it + 1,
                                      extra={"geometry_run_id": geometry_run_id or config.run_id()})
            if (it + 1) % config.preview_every == 0:
                save_color_png(out / "previews" / f"color_{it + 1:06d}.png", maps.color)
            if progress is not None:
                progress(it, float(loss))

    ckpt = out / "checkpoints" / "texture_final.pt"
    save_field_checkpoint(ckpt, "texture", texture, config, config.texture_iters,
                          extra={"geometry_run_id": geometry_run_id or config.run_id()})
    return texture, ckpt
