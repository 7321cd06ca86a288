"""Deterministic RNG streams derived from a single run seed.

Every stochastic component (camera sampling, noise injection, corpus
generation, ...) owns a named stream so that ablations which skip one
consumer do not shift the draws of another.
"""

import zlib

import torch


def stream_seed(seed: int, name: str) -> int:
    """Mix a base seed with a stream name into a 63-bit seed."""
    h = zlib.crc32(name.encode("utf-8"))
    return (seed * 0x9E3779B1 + h) & 0x7FFF_FFFF_FFFF_FFFF


def make_generator(seed: int, name: str = "") -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(stream_seed(seed, name))
    return g
