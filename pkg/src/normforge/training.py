"""Denoising objective and the from-scratch training loop for score models."""

import csv
from dataclasses import dataclass
from pathlib import Path

import torch

from .schedule import DiffusionSchedule
from .scoremodel import ScoreModel
from .seeding import make_generator

COND_DROPOUT = 0.1  # probability of dropping all condition tokens (CFG branch)


def to_model_domain(kind: str, maps: dict) -> torch.Tensor:
    """Map stored images into the model's [-1, 1] domain, as [C, H, W]."""
    if kind == "normal-adapted":
        return maps["normal"].permute(2, 0, 1)
    if kind == "depth-adapted":
        return (maps["depth"] * 2.0 - 1.0).unsqueeze(0)
    if kind == "normal-aligned":
        return maps["color"].permute(2, 0, 1) * 2.0 - 1.0
    raise ValueError(f"unknown kind {kind!r}")


def denoise_loss(model: ScoreModel, x0: torch.Tensor, prompt_ids, view_ids, body_ids,
                 schedule: DiffusionSchedule, generator: torch.Generator,
                 normal_cond: torch.Tensor | None = None) -> torch.Tensor:
    """E || eps_model(x_t, cond, t) - eps ||^2, summed over entries, mean over batch."""
    b = x0.shape[0]
    t = torch.randint(0, schedule.total_steps, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = schedule.add_noise(x0, t, eps)
    pred = model(x_t, t, prompt_ids, view_ids, body_ids, normal_cond=normal_cond)
    return ((pred - eps) ** 2).flatten(1).sum(dim=1).mean()


@dataclass
class TrainResult:
    final_loss: float
    heldout_loss: float
    iteration: int
    losses: list


def train_score_model(model: ScoreModel, bank: dict, steps: int, schedule: DiffusionSchedule,
                      batch_size: int = 4, lr: float = 2e-4, seed: int = 0,
                      start_iteration: int = 0, heldout_frac: float = 0.1,
                      loss_csv: str | Path | None = None, log_every: int = 50) -> TrainResult:
    """Train on a tensor bank {x0 [N,C,H,W], prompt/view/body [N], normal_cond?}.

    Condition tokens of a sample are all replaced by the null ids with
    probability COND_DROPOUT so an unconditional branch exists for CFG.
    The held-out split is carved off the bank up front.
    """
    n = bank["x0"].shape[0]
    g_split = make_generator(seed, "train/split")
    perm = torch.randperm(n, generator=g_split)
    n_held = max(1, int(n * heldout_frac)) if n > 1 else 0
    held, train_idx = perm[:n_held], perm[n_held:]

    g_batch = make_generator(seed, f"train/batch/{start_iteration}")
    g_noise = make_generator(seed, f"train/noise/{start_iteration}")
    g_drop = make_generator(seed, f"train/drop/{start_iteration}")

    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=1e-4)
    null_p, null_v, null_b = model.null_ids
    losses = []
    model.train()
    for step in range(steps):
        sel = train_idx[torch.randint(0, len(train_idx), (batch_size,), generator=g_batch)]
        x0 = bank["x0"][sel]
        p = bank["prompt"][sel].clone()
        v = bank["view"][sel].clone()
        bt = bank["body"][sel].clone()
        drop = torch.rand(batch_size, generator=g_drop) < COND_DROPOUT
        p[drop], v[drop], bt[drop] = null_p, null_v, null_b
        nc = bank["normal_cond"][sel] if "normal_cond" in bank else None

        loss = denoise_loss(model, x0, p, v, bt, schedule, g_noise, normal_cond=nc)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            losses.append((start_iteration + step, float(loss.detach())))

    model.eval()
    heldout = float("nan")
    if n_held:
        g_eval = make_generator(seed, "train/eval")
        with torch.no_grad():
            hl = []
            for i in range(0, n_held, 16):
                sel = held[i : i + 16]
                nc = bank["normal_cond"][sel] if "normal_cond" in bank else None
                hl.append(denoise_loss(model, bank["x0"][sel], bank["prompt"][sel],
                                       bank["view"][sel], bank["body"][sel], schedule,
                                       g_eval, normal_cond=nc) * len(sel))
            heldout = float(sum(hl) / n_held)

    if loss_csv is not None:
        with open(loss_csv, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["iteration", "loss"])
            wr.writerows(losses)

    return TrainResult(final_loss=losses[-1][1] if losses else float("nan"),
                       heldout_loss=heldout,
                       iteration=start_iteration + steps,
                       losses=losses)
