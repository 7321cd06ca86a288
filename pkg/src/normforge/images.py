"""PNG encoding of rendered maps.

Normals are packed as (n + 1) / 2 into 8-bit RGB, depth as 16-bit gray,
color as 8-bit RGB.  Decoding inverts the quantization; normal decoding
can optionally re-normalize covered pixels to unit length.
"""

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()


def save_normal_png(path: str | Path, normal: torch.Tensor) -> None:
    arr = (_to_numpy(normal) + 1.0) * 0.5
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)


def load_normal_png(path: str | Path, renormalize: bool = False) -> torch.Tensor:
    u8 = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    n = torch.from_numpy(u8 / 255.0 * 2.0 - 1.0)
    if renormalize:
        lens = torch.linalg.norm(n, dim=-1, keepdim=True)
        covered = lens.squeeze(-1) > 0.5
        n[covered] = n[covered] / lens[covered]
    return n


def save_depth_png(path: str | Path, depth: torch.Tensor) -> None:
    arr = np.clip(_to_numpy(depth), 0.0, 1.0)
    u16 = np.rint(arr * 65535.0).astype(np.uint16)
    Image.fromarray(u16, mode="I;16").save(path)


def load_depth_png(path: str | Path) -> torch.Tensor:
    arr = np.asarray(Image.open(path), dtype=np.float32)
    return torch.from_numpy(arr / 65535.0)


def save_color_png(path: str | Path, color: torch.Tensor) -> None:
    u8 = np.clip(np.rint(_to_numpy(color) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)


def load_color_png(path: str | Path) -> torch.Tensor:
    u8 = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return torch.from_numpy(u8 / 255.0)
