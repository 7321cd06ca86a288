"""Differentiable rasterization of normal, depth, and color maps.

Visibility is hard (no gradient through silhouette changes): a no-grad
z-buffer pass finds the winning triangle per pixel, then a second pass
recomputes barycentric weights and interpolates attributes differentiably
for covered pixels only.  Gradients therefore flow from pixel values into
vertex positions, vertex normals, and texture parameters, and are exactly
zero at background pixels.
"""

import math
from dataclasses import dataclass

import torch

from .camera import Camera
from .tetgrid import TriMesh

BG_NORMAL = 0.0
BG_DEPTH = 0.0
BG_COLOR = 0.0

# Headlight shading shared with the synthetic-corpus renderer: the lit
# color is albedo * (AMBIENT + (1 - AMBIENT) * max(0, n_cam_z)).
AMBIENT = 0.3

_TILE = 16
_MIN_DEPTH = 1e-4


@dataclass
class RenderedMaps:
    """Camera-space render targets; background carries the declared constants."""

    normal: torch.Tensor  # [H, W, 3] in [-1, 1]
    depth: torch.Tensor  # [H, W] in [0, 1], (far - z) / (far - near)
    color: torch.Tensor  # [H, W, 3] in [0, 1]
    coverage: torch.Tensor  # [H, W] bool


def headlight_shading(n_cam_z: torch.Tensor) -> torch.Tensor:
    return AMBIENT + (1.0 - AMBIENT) * n_cam_z.clamp(0.0, 1.0)


def _project(vertices: torch.Tensor, camera: Camera):
    """World -> (screen xy in pixels, positive view depth)."""
    rot = camera.rotation.to(vertices.dtype)
    pos = camera.position.to(vertices.dtype)
    v_cam = (vertices - pos) @ rot.T
    depth = -v_cam[:, 2]
    safe = depth.clamp_min(_MIN_DEPTH)
    size = camera.image_size
    ndc_x = v_cam[:, 0] / (safe * camera.half_tan)
    ndc_y = v_cam[:, 1] / (safe * camera.half_tan)
    px = (ndc_x * 0.5 + 0.5) * size - 0.5
    py = (0.5 - ndc_y * 0.5) * size - 0.5
    return torch.stack([px, py], dim=-1), depth


def _visibility_pass(xy: torch.Tensor, depth: torch.Tensor, faces: torch.Tensor, size: int):
    """Z-buffer winner per pixel; returns face id map ([-1] = background)."""
    device = xy.device
    best_zinv = torch.zeros((size, size), dtype=xy.dtype, device=device)
    best_face = torch.full((size, size), -1, dtype=torch.int64, device=device)

    fxy = xy[faces]  # [F, 3, 2]
    fz = depth[faces]  # [F, 3]
    # discard triangles touching the near-clip guard
    ok = (fz > _MIN_DEPTH).all(dim=-1)
    ax, bx, cx = fxy[:, 0, 0], fxy[:, 1, 0], fxy[:, 2, 0]
    ay, by, cy = fxy[:, 0, 1], fxy[:, 1, 1], fxy[:, 2, 1]
    denom = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    ok &= denom.abs() > 1e-12
    fids = torch.nonzero(ok, as_tuple=False).squeeze(-1)
    if fids.numel() == 0:
        return best_face

    fxy = fxy[fids]
    fzinv = 1.0 / fz[fids]
    denom = denom[fids]

    xmin = fxy[:, :, 0].min(dim=1).values.floor().clamp(0, size - 1).to(torch.int64)
    xmax = fxy[:, :, 0].max(dim=1).values.ceil().clamp(0, size - 1).to(torch.int64)
    ymin = fxy[:, :, 1].min(dim=1).values.floor().clamp(0, size - 1).to(torch.int64)
    ymax = fxy[:, :, 1].max(dim=1).values.ceil().clamp(0, size - 1).to(torch.int64)
    # cull triangles fully outside the frame
    inside_frame = (fxy[:, :, 0].max(dim=1).values >= 0) & (fxy[:, :, 0].min(dim=1).values <= size - 1) \
        & (fxy[:, :, 1].max(dim=1).values >= 0) & (fxy[:, :, 1].min(dim=1).values <= size - 1)

    ntiles = math.ceil(size / _TILE)
    for ty in range(ntiles):
        y0, y1 = ty * _TILE, min((ty + 1) * _TILE, size)
        for tx in range(ntiles):
            x0, x1 = tx * _TILE, min((tx + 1) * _TILE, size)
            sel = inside_frame & (xmax >= x0) & (xmin < x1) & (ymax >= y0) & (ymin < y1)
            tsel = torch.nonzero(sel, as_tuple=False).squeeze(-1)
            if tsel.numel() == 0:
                continue
            t_xy = fxy[tsel]  # [Tc, 3, 2]
            t_zinv = fzinv[tsel]
            t_denom = denom[tsel]

            ys = torch.arange(y0, y1, dtype=xy.dtype, device=device)
            xs = torch.arange(x0, x1, dtype=xy.dtype, device=device)
            pyg, pxg = torch.meshgrid(ys, xs, indexing="ij")
            px = pxg.reshape(-1)  # [P]
            py = pyg.reshape(-1)

            ax, ay = t_xy[:, 0, 0, None], t_xy[:, 0, 1, None]
            bx, by = t_xy[:, 1, 0, None], t_xy[:, 1, 1, None]
            cx, cy = t_xy[:, 2, 0, None], t_xy[:, 2, 1, None]
            # signed areas of sub-triangles; inside when all share denom's sign
            e0 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
            e1 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
            e2 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
            s = torch.sign(t_denom)[:, None]
            inside = (e0 * s >= 0) & (e1 * s >= 0) & (e2 * s >= 0)

            lam0 = e0 / t_denom[:, None]
            lam1 = e1 / t_denom[:, None]
            lam2 = 1.0 - lam0 - lam1
            zinv = lam0 * t_zinv[:, 0, None] + lam1 * t_zinv[:, 1, None] + lam2 * t_zinv[:, 2, None]
            zinv = torch.where(inside, zinv, torch.zeros_like(zinv))

            win_zinv, win_idx = zinv.max(dim=0)  # over triangles
            covered = win_zinv > 0
            tile_best = best_zinv[y0:y1, x0:x1].reshape(-1)
            improve = covered & (win_zinv > tile_best)
            tile_face = best_face[y0:y1, x0:x1].reshape(-1)
            tile_face[improve] = fids[tsel[win_idx[improve]]]
            tile_best[improve] = win_zinv[improve]
            best_face[y0:y1, x0:x1] = tile_face.reshape(y1 - y0, x1 - x0)
            best_zinv[y0:y1, x0:x1] = tile_best.reshape(y1 - y0, x1 - x0)
    return best_face


def rasterize(mesh: TriMesh, texture, camera: Camera) -> RenderedMaps:
    """Render camera-space normal/depth/color maps from a triangle mesh.

    `texture` is a callable mapping [N, 3] world points to [N, 3] rgb in
    [0, 1] (usually a TextureField), or None for shading-only gray.
    """
    size = camera.image_size
    dtype = mesh.vertices.dtype if not mesh.is_empty else torch.float32
    normal = torch.full((size, size, 3), BG_NORMAL, dtype=dtype)
    depth_map = torch.full((size, size), BG_DEPTH, dtype=dtype)
    color = torch.full((size, size, 3), BG_COLOR, dtype=dtype)
    coverage = torch.zeros((size, size), dtype=torch.bool)
    if mesh.is_empty or mesh.faces.shape[0] == 0:
        return RenderedMaps(normal, depth_map, color, coverage)

    if mesh.vertex_normals is None:
        mesh = mesh.with_vertex_normals()

    with torch.no_grad():
        xy, vdepth = _project(mesh.vertices, camera)
        face_id = _visibility_pass(xy, vdepth, mesh.faces, size)

    coverage = face_id >= 0
    if not coverage.any():
        return RenderedMaps(normal, depth_map, color, coverage)

    pix = torch.nonzero(coverage, as_tuple=False)  # [P, 2] (row, col)
    fidx = face_id[coverage]  # [P]
    tri = mesh.faces[fidx]  # [P, 3]

    v_world = mesh.vertices[tri]  # [P, 3, 3]
    n_vert = mesh.vertex_normals[tri]  # [P, 3, 3]

    xy_all, z_all = _project(mesh.vertices, camera)
    t_xy = xy_all[tri]  # [P, 3, 2]
    t_z = z_all[tri]  # [P, 3]

    px = pix[:, 1].to(dtype)
    py = pix[:, 0].to(dtype)
    ax, ay = t_xy[:, 0, 0], t_xy[:, 0, 1]
    bx, by = t_xy[:, 1, 0], t_xy[:, 1, 1]
    cx, cy = t_xy[:, 2, 0], t_xy[:, 2, 1]
    denom = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    e0 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
    e1 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
    lam0 = e0 / denom
    lam1 = e1 / denom
    lam2 = 1.0 - lam0 - lam1
    lam = torch.stack([lam0, lam1, lam2], dim=-1)  # [P, 3] screen-space

    # perspective-correct weights
    zinv = 1.0 / t_z.clamp_min(_MIN_DEPTH)
    zinv_pix = (lam * zinv).sum(dim=-1)
    w = lam * zinv / zinv_pix.unsqueeze(-1)  # [P, 3]

    pos3d = (w.unsqueeze(-1) * v_world).sum(dim=1)  # [P, 3]
    nrm = (w.unsqueeze(-1) * n_vert).sum(dim=1)
    nrm = nrm / torch.linalg.norm(nrm, dim=-1, keepdim=True).clamp_min(1e-12)
    n_cam = nrm @ camera.rotation.T.to(dtype)

    z_pix = 1.0 / zinv_pix
    d_norm = ((camera.far - z_pix) / (camera.far - camera.near)).clamp(0.0, 1.0)

    shade = headlight_shading(n_cam[:, 2])
    if texture is not None:
        albedo = texture(pos3d)
    else:
        albedo = torch.ones_like(pos3d)
    rgb = (albedo * shade.unsqueeze(-1)).clamp(0.0, 1.0)

    rows, cols = pix[:, 0], pix[:, 1]
    normal = normal.index_put((rows, cols), n_cam)
    depth_map = depth_map.index_put((rows, cols), d_norm)
    color = color.index_put((rows, cols), rgb)
    return RenderedMaps(normal, depth_map, color, coverage)
