"""OBJ/MTL export with per-vertex colors and a per-face texture atlas.

Each face owns one kxk cell of the atlas grid (no seam optimization);
texels map to barycentric coordinates of the face, clamped to the
simplex, and sample the texture field at the corresponding 3D point.
Vertex order and float formatting are deterministic so identical inputs
produce byte-identical files.
"""

import math
from pathlib import Path

import torch

from .camera import camera_from_angles
from .images import save_color_png, save_normal_png
from .raster import rasterize
from .tetgrid import TriMesh

ATLAS_CELL = 8  # texels per face cell


def bake_atlas(mesh: TriMesh, texture, cell: int = ATLAS_CELL):
    """Returns (atlas [S,S,3], uv [F,3,2] in OBJ convention, v origin bottom-left)."""
    f = mesh.faces.shape[0]
    n = max(1, math.ceil(math.sqrt(f)))
    size = n * cell
    margin = 0.5

    # shared texel->barycentric map for the canonical cell triangle
    ty, tx = torch.meshgrid(torch.arange(cell, dtype=torch.float32),
                            torch.arange(cell, dtype=torch.float32), indexing="ij")
    span = cell - 2.0 * margin
    u = ((tx + 0.5 - margin) / span).reshape(-1)
    v = ((ty + 0.5 - margin) / span).reshape(-1)
    w0 = (1.0 - u - v).clamp_min(0.0)
    w1 = u.clamp_min(0.0)
    w2 = v.clamp_min(0.0)
    s = (w0 + w1 + w2).clamp_min(1e-12)
    bary = torch.stack([w0 / s, w1 / s, w2 / s], dim=-1)  # [cell*cell, 3]

    verts = mesh.vertices[mesh.faces]  # [F, 3, 3]
    atlas = torch.zeros((size, size, 3))
    with torch.no_grad():
        chunk = max(1, 131072 // (cell * cell))
        for i0 in range(0, f, chunk):
            vb = verts[i0 : i0 + chunk]  # [Fc, 3, 3]
            pts = torch.einsum("kj,fjc->fkc", bary, vb)  # [Fc, cell*cell, 3]
            rgb = texture(pts.reshape(-1, 3)).reshape(-1, cell * cell, 3)
            for off in range(vb.shape[0]):
                fi = i0 + off
                cy, cx = divmod(fi, n)
                tile = rgb[off].reshape(cell, cell, 3)
                atlas[cy * cell : (cy + 1) * cell, cx * cell : (cx + 1) * cell] = tile

    # uv corners of each face's cell triangle (u right, v up; atlas row 0 = top)
    fi = torch.arange(f)
    cx = (fi % n).to(torch.float32) * cell
    cy = torch.div(fi, n, rounding_mode="floor").to(torch.float32) * cell
    c0 = torch.stack([cx + margin, cy + margin], dim=-1)
    c1 = torch.stack([cx + cell - margin, cy + margin], dim=-1)
    c2 = torch.stack([cx + margin, cy + cell - margin], dim=-1)
    uv_px = torch.stack([c0, c1, c2], dim=1)  # [F, 3, 2] in texel coords (x, y-down)
    uv = torch.stack([uv_px[..., 0] / size, 1.0 - uv_px[..., 1] / size], dim=-1)
    return atlas, uv


def write_obj(path: str | Path, mesh: TriMesh, uv: torch.Tensor | None = None,
              vertex_colors: torch.Tensor | None = None, mtl_name: str | None = None,
              texture_png: str | None = None) -> None:
    path = Path(path)
    lines = ["# normforge mesh export"]
    if mtl_name:
        lines.append(f"mtllib {mtl_name}")
        lines.append("usemtl baked")
    verts = mesh.vertices.detach()
    if vertex_colors is not None:
        for p, c in zip(verts.tolist(), vertex_colors.detach().tolist()):
            lines.append("v " + " ".join(f"{x:.8f}" for x in p) + " " + " ".join(f"{x:.6f}" for x in c))
    else:
        for p in verts.tolist():
            lines.append("v " + " ".join(f"{x:.8f}" for x in p))
    if mesh.vertex_normals is not None:
        for nrm in mesh.vertex_normals.detach().tolist():
            lines.append("vn " + " ".join(f"{x:.6f}" for x in nrm))
    if uv is not None:
        for corner in uv.reshape(-1, 2).tolist():
            lines.append(f"vt {corner[0]:.8f} {corner[1]:.8f}")
    has_n = mesh.vertex_normals is not None
    for i, face in enumerate(mesh.faces.tolist()):
        refs = []
        for k, vi in enumerate(face):
            vtx = vi + 1
            vt = 3 * i + k + 1 if uv is not None else ""
            vn = vtx if has_n else ""
            if uv is not None or has_n:
                refs.append(f"{vtx}/{vt}/{vn}" if has_n else f"{vtx}/{vt}")
            else:
                refs.append(str(vtx))
        lines.append("f " + " ".join(refs))
    path.write_text("\n".join(lines) + "\n")


def write_mtl(path: str | Path, texture_png: str) -> None:
    Path(path).write_text(
        "newmtl baked\nKa 1.0 1.0 1.0\nKd 1.0 1.0 1.0\n" f"map_Kd {texture_png}\n"
    )


def read_obj_counts(path: str | Path) -> tuple[int, int]:
    nv = nf = 0
    for line in open(path):
        if line.startswith("v "):
            nv += 1
        elif line.startswith("f "):
            nf += 1
    return nv, nf


def export_mesh(mesh: TriMesh, texture, out_prefix: str | Path):
    """Write <prefix>.obj + .mtl + .png; rejects an empty mesh."""
    if mesh.is_empty or mesh.faces.shape[0] == 0:
        raise ValueError("refusing to export an empty mesh")
    out = Path(out_prefix)
    out.parent.mkdir(parents=True, exist_ok=True)
    mesh = mesh.with_vertex_normals()
    with torch.no_grad():
        vcolors = texture(mesh.vertices) if texture is not None else None
    uv = None
    if texture is not None:
        atlas, uv = bake_atlas(mesh, texture)
        save_color_png(out.with_suffix(".png"), atlas)
        write_mtl(out.with_suffix(".mtl"), out.with_suffix(".png").name)
    write_obj(out.with_suffix(".obj"), mesh, uv=uv, vertex_colors=vcolors,
              mtl_name=out.with_suffix(".mtl").name if texture is not None else None)
    return out.with_suffix(".obj")


def turntable(mesh: TriMesh, texture, n_frames: int, out_dir: str | Path,
              image_size: int = 64, elevation_deg: float = 0.0):
    """Azimuth-swept color+normal frames around the full-body orbit."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh = mesh.with_vertex_normals()
    paths = []
    for k in range(n_frames):
        azimuth = 360.0 * k / n_frames
        cam = camera_from_angles("full", azimuth, elevation_deg, image_size)
        maps = rasterize(mesh, texture, cam)
        cp = out / f"frame_{k:04d}_color.png"
        np_ = out / f"frame_{k:04d}_normal.png"
        save_color_png(cp, maps.color)
        save_normal_png(np_, maps.normal)
        paths.append((cp, np_))
    return paths
