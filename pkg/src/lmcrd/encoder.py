"""Dilated convolutional backbone plus a multi-head attention view network.

Each attention head is one "view": heads share no output projection, so the
view tensor keeps heads separate as ``(B, T, V, d)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_numpy_state, read_container, state_to_numpy, write_container

MAGIC = b"LMEN"


@dataclass
class EncoderConfig:
    input_channels: int = 5
    backbone_channels: int = 64
    backbone_depth: int = 6
    kernel_size: int = 3
    n_views: int = 2
    view_dim: int = 16
    mask_ratio: float = 0.25
    use_views: bool = True
    views_from_raw: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.input_channels < 1 or self.backbone_channels < 1 or self.backbone_depth < 0:
            raise ValueError("input_channels and backbone_channels must be >= 1, backbone_depth >= 0")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd for same padding")
        if self.use_views and (self.n_views < 2 or self.view_dim < 1):
            raise ValueError("view network needs n_views >= 2 and view_dim >= 1")
        if not 0 <= self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in [0, 1)")

    @property
    def receptive_radius(self) -> int:
        """Timesteps on either side of t that can influence h at t."""
        return (self.kernel_size - 1) // 2 * (2**self.backbone_depth - 1)

    @property
    def pooled_dim(self) -> int:
        return self.backbone_channels + (self.n_views * self.view_dim if self.use_views else 0)


class EncoderOutput(NamedTuple):
    h: torch.Tensor
    g: torch.Tensor | None


class DilatedBlock(nn.Module):
    def __init__(self, channels: int, kernel_size: int, dilation: int):
        super().__init__()
        self.conv = nn.Conv1d(
            channels, channels, kernel_size, dilation=dilation, padding=(kernel_size - 1) // 2 * dilation
        )

    def forward(self, x):
        return x + self.conv(F.gelu(x))


class Backbone(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        C = cfg.backbone_channels
        self.input_proj = nn.Conv1d(cfg.input_channels, C, 1)
        self.blocks = nn.ModuleList(DilatedBlock(C, cfg.kernel_size, 2**i) for i in range(cfg.backbone_depth))
        self.output_proj = nn.Conv1d(C, C, 1)

    def forward(self, x):
        z = self.input_proj(x.transpose(1, 2))
        for block in self.blocks:
            z = block(z)
        return self.output_proj(z).transpose(1, 2)


class MultiViewAttention(nn.Module):
    """Self-attention over time; head ``v`` owns rows ``v*d:(v+1)*d`` of each projection."""

    def __init__(self, in_dim: int, n_views: int, view_dim: int):
        super().__init__()
        self.n_views, self.view_dim = n_views, view_dim
        self.query = nn.Linear(in_dim, n_views * view_dim)
        self.key = nn.Linear(in_dim, n_views * view_dim)
        self.value = nn.Linear(in_dim, n_views * view_dim)

    def forward(self, h, return_attention: bool = False):
        B, T, _ = h.shape
        V, d = self.n_views, self.view_dim
        q = self.query(h).view(B, T, V, d).transpose(1, 2)
        k = self.key(h).view(B, T, V, d).transpose(1, 2)
        v = self.value(h).view(B, T, V, d).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        g = (attn @ v).transpose(1, 2)
        return (g, attn) if return_attention else g


class LMCRDEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.backbone = Backbone(cfg)
        if cfg.use_views:
            in_dim = cfg.input_channels if cfg.views_from_raw else cfg.backbone_channels
            self.views = MultiViewAttention(in_dim, cfg.n_views, cfg.view_dim)
        else:
            self.views = None

    def forward(self, x: torch.Tensor) -> EncoderOutput:
        if x.dim() == 2:
            x = x.unsqueeze(0)
        if x.shape[-1] != self.config.input_channels:
            raise ValueError(f"encoder expects {self.config.input_channels} channels, got {x.shape[-1]}")
        h = self.backbone(x)
        g = None
        if self.views is not None:
            g = self.views(x if self.config.views_from_raw else h)
        return EncoderOutput(h, g)

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        return pool_representation(self(x))


def build_encoder(cfg: EncoderConfig) -> LMCRDEncoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return LMCRDEncoder(cfg)


def backbone_forward(encoder: LMCRDEncoder, x) -> torch.Tensor:
    return encoder.backbone(_batch(x, encoder.config.input_channels))


def view_forward(encoder: LMCRDEncoder, h, return_attention: bool = False):
    if encoder.views is None:
        raise ValueError("encoder was built without a view network")
    return encoder.views(_batch(h, None), return_attention=return_attention)


def _batch(x, channels: int | None) -> torch.Tensor:
    t = x if isinstance(x, torch.Tensor) else torch.tensor(np.asarray(x), dtype=torch.float32)
    if t.dim() == 2:
        t = t.unsqueeze(0)
    if channels is not None and t.shape[-1] != channels:
        raise ValueError(f"expected {channels} channels, got {t.shape[-1]}")
    return t


def mask_length(T: int, ratio: float) -> int:
    return int(math.floor(ratio * T))


def mask_augment(x: np.ndarray, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Zero one contiguous span of ``floor(ratio * T)`` timesteps on all channels."""
    if not 0 <= ratio < 1:
        raise ValueError("mask ratio must lie in [0, 1)")
    out = np.array(x, dtype=np.float64, copy=True)
    T = out.shape[0]
    n = mask_length(T, ratio)
    if n:
        start = int(rng.integers(0, T - n + 1))
        out[start : start + n] = 0.0
    return out


def mask_batch(x: torch.Tensor, ratio: float, rng: np.random.Generator) -> torch.Tensor:
    """Independent contiguous masks for each sample of a ``(B, T, F)`` batch."""
    B, T = x.shape[:2]
    n = mask_length(T, ratio)
    keep = np.ones((B, T, 1))
    if n:
        for b, s in enumerate(rng.integers(0, T - n + 1, size=B)):
            keep[b, s : s + n] = 0.0
    return x * torch.as_tensor(keep, dtype=x.dtype)


def pool_representation(out: EncoderOutput) -> torch.Tensor:
    """Time-mean of h concatenated with the flattened time-mean of g."""
    h, g = out
    parts = [h.mean(dim=-2)]
    if g is not None:
        pooled_g = g.mean(dim=-3)
        parts.append(pooled_g.flatten(-2))
    return torch.cat(parts, dim=-1)


def save_encoder(encoder: LMCRDEncoder, path: str | Path, extra: dict | None = None) -> None:
    header = {"config": asdict(encoder.config), **(extra or {})}
    write_container(path, MAGIC, header, state_to_numpy(encoder))


def load_encoder(path: str | Path) -> tuple[LMCRDEncoder, dict]:
    header, params = read_container(path, MAGIC)
    encoder = LMCRDEncoder(EncoderConfig(**header["config"]))
    load_numpy_state(encoder, params)
    encoder.eval()
    return encoder, header
