"""Tetrahedral lattice and differentiable marching-tetrahedra extraction.

The unit bounding box is split into cubes, each cube into six tetrahedra
sharing the main diagonal (Kuhn split).  Surface extraction places one
vertex per sign-changing tet edge at the linear zero crossing of the
deformed endpoints and emits 1-2 triangles per mixed-sign tet, wound so
face normals point from the inside region (sdf < 0) outward.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .encoding import BOX_MIN, BOX_MAX

ALLOWED_RESOLUTIONS = (1, 2, 4, 8, 16, 32, 64, 128)
MAX_RESOLUTION = 128

# Tet-local edges in fixed order; crossing vertices are indexed per edge.
TET_EDGES = torch.tensor([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]], dtype=torch.int64)

# Connectivity per occupancy case (bit i set when sdf_i < 0); edge-index
# triples wound outward for positively oriented tets, -1 padded.
TRI_TABLE = torch.tensor(
    [
        [-1, -1, -1, -1, -1, -1],
        [0, 1, 2, -1, -1, -1],
        [0, 4, 3, -1, -1, -1],
        [1, 2, 4, 1, 4, 3],
        [1, 3, 5, -1, -1, -1],
        [0, 5, 2, 0, 3, 5],
        [0, 4, 5, 0, 5, 1],
        [2, 4, 5, -1, -1, -1],
        [2, 5, 4, -1, -1, -1],
        [0, 1, 5, 0, 5, 4],
        [0, 5, 3, 0, 2, 5],
        [1, 5, 3, -1, -1, -1],
        [1, 3, 4, 1, 4, 2],
        [0, 3, 4, -1, -1, -1],
        [0, 2, 1, -1, -1, -1],
        [-1, -1, -1, -1, -1, -1],
    ],
    dtype=torch.int64,
)
NUM_TRI = torch.tensor([0, 1, 1, 2, 1, 2, 2, 1, 1, 2, 2, 1, 2, 1, 1, 0], dtype=torch.int64)


@dataclass
class TriMesh:
    """Triangle surface with optional per-vertex attributes."""

    vertices: torch.Tensor  # [V, 3]
    faces: torch.Tensor  # [F, 3] int64
    vertex_normals: torch.Tensor | None = None
    vertex_colors: torch.Tensor | None = None

    @property
    def is_empty(self) -> bool:
        return self.vertices.shape[0] == 0

    def face_normals(self, normalize: bool = True) -> torch.Tensor:
        v = self.vertices
        f = self.faces
        e1 = v[f[:, 1]] - v[f[:, 0]]
        e2 = v[f[:, 2]] - v[f[:, 0]]
        n = torch.cross(e1, e2, dim=-1)
        if normalize:
            n = n / torch.linalg.norm(n, dim=-1, keepdim=True).clamp_min(1e-20)
        return n

    def with_vertex_normals(self) -> "TriMesh":
        """Area-weighted vertex normals (differentiable w.r.t. vertices)."""
        if self.is_empty:
            return TriMesh(self.vertices, self.faces, self.vertices.clone())
        fn = self.face_normals(normalize=False)  # area-weighted
        vn = torch.zeros_like(self.vertices)
        for k in range(3):
            vn = vn.index_add(0, self.faces[:, k], fn)
        vn = vn / torch.linalg.norm(vn, dim=-1, keepdim=True).clamp_min(1e-20)
        return TriMesh(self.vertices, self.faces, vn, self.vertex_colors)


@dataclass
class TetGrid:
    """Uniform tetrahedral lattice over the bounding box."""

    resolution: int
    vertices: torch.Tensor  # [V, 3] float32
    tets: torch.Tensor  # [T, 4] int32
    interior: torch.Tensor = field(repr=False, default=None)  # [V] bool, off-boundary

    @property
    def edge_length(self) -> float:
        return (BOX_MAX - BOX_MIN) / self.resolution

    @property
    def cell_diagonal(self) -> float:
        return self.edge_length * float(np.sqrt(3.0))

    def deformed_vertices(self, deform: torch.Tensor) -> torch.Tensor:
        """Lattice positions plus deformation, pinned on the box boundary.

        Boundary vertices stay put so no extracted vertex can leave the box.
        """
        return self.vertices + deform * self.interior.unsqueeze(-1).to(deform.dtype)


def build_grid(resolution: int, dtype=torch.float32) -> TetGrid:
    """Deterministic Kuhn-split lattice; 6 * resolution^3 tets."""
    if resolution not in ALLOWED_RESOLUTIONS:
        raise ValueError(
            f"resolution {resolution} not allowed; must be a power of two <= {MAX_RESOLUTION}"
        )
    n = resolution
    axis = np.linspace(BOX_MIN, BOX_MAX, n + 1, dtype=np.float64)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    verts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    def vid(i, j, k):
        return (i * (n + 1) + j) * (n + 1) + k

    ii, jj, kk = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    base = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)

    # Six tets per cube: paths c000 -> c111 stepping one axis at a time.
    perms = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    tets = []
    for perm in perms:
        c0 = base
        c1 = base.copy()
        c1[:, perm[0]] += 1
        c2 = c1.copy()
        c2[:, perm[1]] += 1
        c3 = base + 1
        quad = [vid(c[:, 0], c[:, 1], c[:, 2]) for c in (c0, c1, c2, c3)]
        tet = np.stack(quad, axis=-1)
        # enforce positive signed volume by swapping the last two vertices
        p = verts[tet]
        vol = np.linalg.det(np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=1))
        flip = vol < 0
        tet[flip, 2], tet[flip, 3] = tet[flip, 3].copy(), tet[flip, 2].copy()
        tets.append(tet)
    tets = np.concatenate(tets, axis=0).astype(np.int32)

    idx = np.arange((n + 1) ** 3)
    k = idx % (n + 1)
    j = (idx // (n + 1)) % (n + 1)
    i = idx // ((n + 1) ** 2)
    interior = (i > 0) & (i < n) & (j > 0) & (j < n) & (k > 0) & (k < n)

    return TetGrid(
        resolution=n,
        vertices=torch.from_numpy(verts).to(dtype),
        tets=torch.from_numpy(tets),
        interior=torch.from_numpy(interior),
    )


def marching_tets(grid: TetGrid, sdf: torch.Tensor, deform: torch.Tensor) -> TriMesh:
    """Differentiable surface extraction from per-lattice-vertex sdf/deform.

    Output vertex positions carry gradients w.r.t. both sdf values and
    deformations.  All-positive or all-negative input yields an empty mesh.
    """
    if not torch.isfinite(sdf).all():
        raise ValueError("sdf contains non-finite values")
    pos = grid.deformed_vertices(deform)
    return _marching_tets_impl(pos, sdf, grid.tets)


def _marching_tets_impl(pos: torch.Tensor, sdf: torch.Tensor, tets: torch.Tensor) -> TriMesh:
    # Exact zeros are perturbed to keep the sign predicate unambiguous.
    sdf = torch.where(sdf == 0, torch.full_like(sdf, 1e-8), sdf)

    with torch.no_grad():
        occ = sdf < 0  # inside
        occ_t = occ[tets]
        n_in = occ_t.sum(dim=-1)
        valid = (n_in > 0) & (n_in < 4)
        if not valid.any():
            empty = pos.new_zeros((0, 3))
            return TriMesh(empty, torch.zeros((0, 3), dtype=torch.int64))
        vtets = tets[valid].to(torch.int64)  # [Tv, 4]

        case = (occ_t[valid].to(torch.int64) * torch.tensor([1, 2, 4, 8])).sum(dim=-1)

        edges = vtets[:, TET_EDGES].reshape(-1, 2)  # [Tv*6, 2]
        edges, _ = torch.sort(edges, dim=-1)
        # pack pairs into scalar keys: 1-D unique is far faster than dim=0
        nverts = pos.shape[0]
        keys = edges[:, 0] * nverts + edges[:, 1]
        uniq_keys, idx_map = torch.unique(keys, return_inverse=True)
        uniq_edges = torch.stack([uniq_keys // nverts, uniq_keys % nverts], dim=-1)
        crossing = occ[uniq_edges[:, 0]] != occ[uniq_edges[:, 1]]
        new_id = torch.full((uniq_edges.shape[0],), -1, dtype=torch.int64)
        new_id[crossing] = torch.arange(int(crossing.sum()), dtype=torch.int64)
        idx_map = new_id[idx_map].reshape(-1, 6)  # [Tv, 6] local edge -> vertex id
        interp = uniq_edges[crossing]  # [M, 2]

    # Linear zero crossing of each sign-changing edge (differentiable part).
    sa = sdf[interp[:, 0]].unsqueeze(-1)
    sb = sdf[interp[:, 1]].unsqueeze(-1)
    t = sa / (sa - sb)
    verts = pos[interp[:, 0]] + t * (pos[interp[:, 1]] - pos[interp[:, 0]])

    tri = TRI_TABLE.to(case.device)[case]  # [Tv, 6]
    ntri = NUM_TRI.to(case.device)[case]
    f1 = torch.gather(idx_map, 1, tri[:, :3].clamp_min(0))
    f2 = torch.gather(idx_map[ntri == 2], 1, tri[ntri == 2][:, 3:6])
    faces = torch.cat([f1, f2], dim=0)
    return TriMesh(verts, faces)


def resolution_at(iteration: int, base: int = 32, period: int = 1000, max_doublings: int = 2) -> int:
    """Resolution schedule: base * 2^min(max_doublings, floor(iter / period))."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return base * 2 ** min(max_doublings, iteration // period)


def sample_points(n: int, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """n uniform points in the bounding box, reproducible under the generator."""
    if n < 1:
        raise ValueError("n must be >= 1")
    u = torch.rand((n, 3), generator=generator, dtype=dtype)
    return BOX_MIN + u * (BOX_MAX - BOX_MIN)
