"""Conditional noise-prediction networks.

Three kinds share one residual conv encoder-decoder (2 down/up levels):

  normal-adapted  -- predicts noise on camera-space normal maps (3ch)
  depth-adapted   -- predicts noise on normalized depth maps (1ch)
  normal-aligned  -- predicts noise on color images (3ch) with an
                     additive conditioning branch consuming a normal map;
                     branch features enter through zero-initialized 1x1
                     convs so a zeroed branch reproduces the trunk exactly

The timestep embedding is summed with prompt/view/body token embeddings;
each embedding table carries one extra null row used as the unconditional
branch for classifier-free guidance.
"""

import math
from pathlib import Path

import torch
import torch.nn as nn

from .camera import BODY_TOKENS, VIEW_TOKENS

KINDS = ("normal-adapted", "depth-adapted", "normal-aligned")

KIND_CHANNELS = {"normal-adapted": 3, "depth-adapted": 1, "normal-aligned": 3}

CHECKPOINT_VERSION = 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float().unsqueeze(-1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    """Residual block with FiLM conditioning from the summed embedding."""

    def __init__(self, ch_in: int, ch_out: int, emb_dim: int):
        super().__init__()
        groups = min(8, ch_in)
        self.norm1 = nn.GroupNorm(groups, ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, 2 * ch_out)
        self.norm2 = nn.GroupNorm(min(8, ch_out), ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x, emb):
        h = self.conv1(self.act(self.norm1(x)))
        scale, shift = self.emb_proj(emb).unsqueeze(-1).unsqueeze(-1).chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(self.act(h))
        return h + self.skip(x)


class _Encoder(nn.Module):
    """Shared trunk-encoder topology, reused verbatim as the conditioning branch."""

    def __init__(self, ch_in: int, width: int, emb_dim: int):
        super().__init__()
        self.conv_in = nn.Conv2d(ch_in, width, 3, padding=1)
        self.block0 = ResBlock(width, width, emb_dim)
        self.down0 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.block1 = ResBlock(2 * width, 2 * width, emb_dim)
        self.down1 = nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1)
        self.mid = ResBlock(2 * width, 2 * width, emb_dim)

    def forward(self, x, emb):
        h0 = self.block0(self.conv_in(x), emb)
        h1 = self.block1(self.down0(h0), emb)
        h2 = self.mid(self.down1(h1), emb)
        return h0, h1, h2


class ScoreModel(nn.Module):
    def __init__(self, kind: str, vocab: tuple[str, ...], width: int = 32, emb_dim: int = 128):
        super().__init__()
        if kind not in KINDS:
            raise ValueError(f"unknown score-model kind {kind!r}")
        self.kind = kind
        self.vocab = tuple(vocab)
        self.width = width
        self.emb_dim = emb_dim
        ch = KIND_CHANNELS[kind]

        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        # +1 null row per table: the unconditional branch for CFG
        self.prompt_emb = nn.Embedding(len(self.vocab) + 1, emb_dim)
        self.view_emb = nn.Embedding(len(VIEW_TOKENS) + 1, emb_dim)
        self.body_emb = nn.Embedding(len(BODY_TOKENS) + 1, emb_dim)

        self.encoder = _Encoder(ch, width, emb_dim)
        self.up0 = nn.Conv2d(2 * width, 2 * width, 3, padding=1)
        self.dec1 = ResBlock(2 * width, 2 * width, emb_dim)
        self.up1 = nn.Conv2d(2 * width, width, 3, padding=1)
        self.dec0 = ResBlock(width, width, emb_dim)
        self.out_norm = nn.GroupNorm(min(8, width), width)
        self.out_conv = nn.Conv2d(width, ch, 3, padding=1)
        self.act = nn.SiLU()
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

        if kind == "normal-aligned":
            self.branch = _Encoder(3, width, emb_dim)
            self.fuse0 = nn.Conv2d(width, width, 1)
            self.fuse1 = nn.Conv2d(2 * width, 2 * width, 1)
            self.fuse2 = nn.Conv2d(2 * width, 2 * width, 1)
            for m in (self.fuse0, self.fuse1, self.fuse2):
                nn.init.zeros_(m.weight)
                nn.init.zeros_(m.bias)

    @property
    def null_ids(self) -> tuple[int, int, int]:
        return (len(self.vocab), len(VIEW_TOKENS), len(BODY_TOKENS))

    def embed(self, t, prompt_ids, view_ids, body_ids):
        emb = self.time_mlp(timestep_embedding(t, self.emb_dim))
        return emb + self.prompt_emb(prompt_ids) + self.view_emb(view_ids) + self.body_emb(body_ids)

    def forward(self, x, t, prompt_ids, view_ids, body_ids,
                normal_cond: torch.Tensor | None = None, condition_scale: float = 1.0):
        """Predict noise for x_t; shapes [B,C,H,W], token ids [B], t [B]."""
        if self.kind == "normal-aligned" and normal_cond is None:
            raise ValueError("normal-aligned model requires a normal_cond map")
        if self.kind != "normal-aligned" and normal_cond is not None:
            raise ValueError(f"{self.kind} model does not accept normal_cond")
        emb = self.embed(t, prompt_ids, view_ids, body_ids)

        h0, h1, h2 = self.encoder(x, emb)
        if self.kind == "normal-aligned":
            b0, b1, b2 = self.branch(normal_cond, emb)
            h0 = h0 + condition_scale * self.fuse0(b0)
            h1 = h1 + condition_scale * self.fuse1(b1)
            h2 = h2 + condition_scale * self.fuse2(b2)

        u1 = self.up0(nn.functional.interpolate(h2, scale_factor=2, mode="nearest")) + h1
        u1 = self.dec1(u1, emb)
        u0 = self.up1(nn.functional.interpolate(u1, scale_factor=2, mode="nearest")) + h0
        u0 = self.dec0(u0, emb)
        return self.out_conv(self.act(self.out_norm(u0)))


def save_checkpoint(model: ScoreModel, path: str | Path, schedule_total_steps: int,
                    iteration: int = 0, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "vocab": list(model.vocab),
        "width": model.width,
        "emb_dim": model.emb_dim,
        "schedule_total_steps": schedule_total_steps,
        "iteration": iteration,
        "state_dict": model.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path: str | Path, expected_kind: str | None = None):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    kind = payload["kind"]
    if expected_kind is not None and kind != expected_kind:
        raise ValueError(f"checkpoint kind {kind!r} does not match requested role {expected_kind!r}")
    model = ScoreModel(kind, tuple(payload["vocab"]), width=payload["width"], emb_dim=payload["emb_dim"])
    model.load_state_dict(payload["state_dict"])
    return model, payload
