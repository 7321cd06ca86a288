"""Point-set distances used by the oracles and acceptance checks."""

import torch
from scipy.spatial import cKDTree


def sample_mesh_surface(mesh, n: int, generator: torch.Generator) -> torch.Tensor:
    """Area-weighted uniform samples on the mesh surface."""
    v = mesh.vertices.detach()
    f = mesh.faces
    tri = v[f]
    areas = torch.linalg.norm(
        torch.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0], dim=-1), dim=-1)
    idx = torch.multinomial(areas.clamp_min(1e-20), n, replacement=True, generator=generator)
    u = torch.rand((n, 2), generator=generator)
    su = u[:, 0].sqrt()
    b0 = 1.0 - su
    b1 = su * (1.0 - u[:, 1])
    b2 = su * u[:, 1]
    t = tri[idx]
    return b0.unsqueeze(-1) * t[:, 0] + b1.unsqueeze(-1) * t[:, 1] + b2.unsqueeze(-1) * t[:, 2]


def directed_nn(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    tree = cKDTree(b.detach().numpy())
    d, _ = tree.query(a.detach().numpy(), k=1)
    return torch.from_numpy(d)


def chamfer_distance(a: torch.Tensor, b: torch.Tensor) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    return 0.5 * (directed_nn(a, b).mean() + directed_nn(b, a).mean()).item()


def hausdorff_distance(a: torch.Tensor, b: torch.Tensor) -> float:
    return max(directed_nn(a, b).max().item(), directed_nn(b, a).max().item())


def sphere_points(center, radius: float, n: int, generator: torch.Generator) -> torch.Tensor:
    d = torch.randn((n, 3), generator=generator)
    d = d / torch.linalg.norm(d, dim=-1, keepdim=True).clamp_min(1e-12)
    return torch.as_tensor(center, dtype=torch.float32) + radius * d
