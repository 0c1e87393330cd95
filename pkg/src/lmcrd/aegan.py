"""AE-GAN trained on external normal subjects; its reconstruction error becomes
an extra input channel for the target dataset."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import load_numpy_state, read_container, state_to_numpy, write_container
from .datamodel import HierarchicalDataset

log = logging.getLogger(__name__)

MAGIC = b"LMAE"
PROB_EPS = 1e-7
ERROR_CHANNEL = "recon_error"


@dataclass
class AeganConfig:
    latent_dim: int = 32
    hidden_channels: int = 32
    depth: int = 3
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0

    def validate(self, T: int, F: int) -> None:
        for k, v in asdict(self).items():
            if k != "seed" and v <= 0:
                raise ValueError(f"aegan.{k} must be positive")
        if self.latent_dim >= T * F:
            raise ValueError(f"latent_dim {self.latent_dim} must be < T*F = {T * F}")
        if T % (2**self.depth):
            raise ValueError(f"T={T} must be divisible by 2**depth = {2**self.depth}")


def _conv_stack(in_ch: int, hidden: int, depth: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    ch = in_ch
    for _ in range(depth):
        layers += [nn.Conv1d(ch, hidden, kernel_size=4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        ch = hidden
    return nn.Sequential(*layers)


class AeganModel(nn.Module):
    """Generator (conv encoder + transposed-conv decoder) and discriminator.

    Inputs are ``(B, T, F)``; convolutions run over time with channels first.
    """

    def __init__(self, T: int, F: int, config: AeganConfig):
        super().__init__()
        config.validate(T, F)
        self.T, self.F, self.config = T, F, config
        h, depth = config.hidden_channels, config.depth
        self.reduced = T // 2**depth

        self.enc_conv = _conv_stack(F, h, depth)
        self.enc_fc = nn.Linear(h * self.reduced, config.latent_dim)
        self.dec_fc = nn.Linear(config.latent_dim, h * self.reduced)
        dec: list[nn.Module] = []
        for k in range(depth):
            last = k == depth - 1
            dec.append(nn.ConvTranspose1d(h, F if last else h, kernel_size=4, stride=2, padding=1))
            if not last:
                dec.append(nn.LeakyReLU(0.2))
        self.dec_conv = nn.Sequential(*dec)
        self.dis_conv = _conv_stack(F, h, depth)
        self.dis_fc = nn.Linear(h * self.reduced, 1)
        self.steps = 0
        self.history: list[dict] = []

    @property
    def input_shape(self) -> tuple[int, int]:
        return (self.T, self.F)

    def _check(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 2:
            x = x.unsqueeze(0)
        if tuple(x.shape[1:]) != (self.T, self.F):
            raise ValueError(f"expected samples of shape {(self.T, self.F)}, got {tuple(x.shape[1:])}")
        return x

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        z = self.enc_conv(x.transpose(1, 2))
        return self.enc_fc(z.flatten(1))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        y = self.dec_fc(z).view(-1, self.config.hidden_channels, self.reduced)
        return self.dec_conv(y).transpose(1, 2)

    def generate(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(self._check(x)))

    def discriminate(self, x: torch.Tensor) -> torch.Tensor:
        z = self.dis_conv(self._check(x).transpose(1, 2))
        return torch.sigmoid(self.dis_fc(z.flatten(1))).squeeze(1)

    def generator_parameters(self):
        for m in (self.enc_conv, self.enc_fc, self.dec_fc, self.dec_conv):
            yield from m.parameters()

    def discriminator_parameters(self):
        for m in (self.dis_conv, self.dis_fc):
            yield from m.parameters()


def build_aegan(T: int, F: int, config: AeganConfig) -> AeganModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return AeganModel(T, F, config)


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.tensor(np.asarray(x, dtype=np.float64), dtype=dtype or torch.float64)


def _model_dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def generator_forward(model: AeganModel, x) -> np.ndarray:
    """Reconstruction of one ``T x F`` sample (or a batch)."""
    single = np.ndim(x) == 2
    model.eval()
    out = model.generate(_as_tensor(x, _model_dtype(model))).numpy()
    return out[0] if single else out


@torch.no_grad()
def discriminator_forward(model: AeganModel, x) -> np.ndarray | float:
    single = np.ndim(x) == 2
    model.eval()
    p = model.discriminate(_as_tensor(x, _model_dtype(model))).numpy()
    return float(p[0]) if single else p


def _bce(p: torch.Tensor, target: float) -> torch.Tensor:
    p = p.clamp(PROB_EPS, 1 - PROB_EPS)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


def discriminator_loss(real_probs, fake_probs) -> torch.Tensor:
    """Half the sum of BCE(real, 1) and BCE(fake, 0), batch-averaged."""
    real, fake = _as_tensor(real_probs), _as_tensor(fake_probs)
    if real.numel() == 0 or fake.numel() == 0:
        raise ValueError("discriminator loss needs a non-empty batch")
    return 0.5 * (_bce(real, 1.0) + _bce(fake, 0.0))


def generator_loss(fake_probs, x_hat, x, return_parts: bool = False):
    """BCE(fake, 1) plus the mean squared reconstruction error."""
    fake, x_hat, x = _as_tensor(fake_probs), _as_tensor(x_hat), _as_tensor(x)
    if x_hat.shape != x.shape:
        raise ValueError(f"reconstruction shape {tuple(x_hat.shape)} != input shape {tuple(x.shape)}")
    if fake.numel() == 0:
        raise ValueError("generator loss needs a non-empty batch")
    adv = _bce(fake, 1.0)
    recon = torch.mean((x_hat - x) ** 2)
    total = adv + recon
    return (total, adv, recon) if return_parts else total


def train_aegan(normals: HierarchicalDataset, config: AeganConfig) -> AeganModel:
    """Alternate one discriminator step and one generator step per batch."""
    if len(normals) == 0:
        raise ValueError("cannot train the AE-GAN on an empty dataset")
    bad = sorted({int(v) for v in normals.labels if v != 0})
    if bad:
        raise ValueError(f"AE-GAN trains on normal (label 0) samples only; found labels {bad}")
    model = build_aegan(normals.T, normals.F, config)
    opt_g = torch.optim.Adam(model.generator_parameters(), lr=config.learning_rate, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(model.discriminator_parameters(), lr=config.learning_rate, betas=(0.5, 0.999))
    data = torch.tensor(normals.values, dtype=torch.float32)
    rng = np.random.default_rng(config.seed)
    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), config.batch_size):
            x = data[order[start : start + config.batch_size]]

            opt_d.zero_grad()
            with torch.no_grad():
                x_fake = model.generate(x)
            p_real, p_fake = model.discriminate(x), model.discriminate(x_fake)
            loss_d = discriminator_loss(p_real, p_fake)
            loss_d.backward()
            opt_d.step()

            opt_g.zero_grad()
            x_hat = model.generate(x)
            loss_g, adv, recon = generator_loss(model.discriminate(x_hat), x_hat, x, return_parts=True)
            loss_g.backward()
            opt_g.step()

            model.steps += 1
            model.history.append({
                "step": model.steps, "epoch": epoch,
                "L_D": loss_d.item(), "L_G": loss_g.item(),
                "L_G_adv": adv.item(), "L_G_recon": recon.item(),
                "D_real": p_real.mean().item(), "D_fake": p_fake.mean().item(),
            })
        last = [h for h in model.history if h["epoch"] == epoch]
        log.info("aegan epoch %d: L_D=%.4f L_G_recon=%.4f", epoch,
                 np.mean([h["L_D"] for h in last]), np.mean([h["L_G_recon"] for h in last]))
    model.eval()
    return model


@torch.no_grad()
def reconstruction_error(model, x, batch_size: int = 256):
    """Scalar MSE and per-timestep channel-mean squared residual.

    For a single ``T x F`` sample returns ``(float, (T,) array)``; for a batch
    ``(B,)`` and ``(B, T)`` arrays.  ``model`` only needs ``generate``.
    """
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if hasattr(model, "eval"):
        model.eval()
    shape = getattr(model, "input_shape", None)
    if shape is not None and tuple(arr.shape[1:]) != tuple(shape):
        raise ValueError(f"expected samples of shape {tuple(shape)}, got {arr.shape[1:]}")
    per_t = np.empty(arr.shape[:2])
    dtype = _model_dtype(model) if isinstance(model, nn.Module) else torch.float64
    for s in range(0, len(arr), batch_size):
        chunk = torch.tensor(arr[s : s + batch_size], dtype=dtype)
        x_hat = model.generate(chunk).double().numpy()
        per_t[s : s + batch_size] = ((x_hat - arr[s : s + batch_size]) ** 2).mean(axis=2)
    scalar = per_t.mean(axis=1)
    if single:
        return float(scalar[0]), per_t[0]
    return scalar, per_t


def augment_features(x, err: float, per_step=None, mode: str = "scalar") -> np.ndarray:
    """Append the reconstruction error as channel F."""
    x = np.asarray(x, dtype=np.float64)
    if err < 0:
        raise ValueError(f"reconstruction error must be nonnegative, got {err}")
    if mode == "scalar":
        extra = np.full((x.shape[0], 1), float(err))
    elif mode in ("timestep", "per-timestep"):
        per_step = np.asarray(per_step, dtype=np.float64)
        if per_step.shape != (x.shape[0],):
            raise ValueError(f"per-timestep error has shape {per_step.shape}, expected ({x.shape[0]},)")
        if np.any(per_step < 0):
            raise ValueError("per-timestep reconstruction errors must be nonnegative")
        extra = per_step[:, None]
    else:
        raise ValueError(f"unknown augmentation mode {mode!r}")
    return np.concatenate([x, extra], axis=1)


def augment_dataset(dataset: HierarchicalDataset, model, mode: str = "scalar") -> HierarchicalDataset:
    """Feature-augment every sample of ``dataset`` (F -> F + 1 channels)."""
    if mode not in ("scalar", "timestep", "per-timestep"):
        raise ValueError(f"unknown augmentation mode {mode!r}")
    scalar, per_t = reconstruction_error(model, dataset.values)
    if mode == "scalar":
        extra = np.broadcast_to(scalar[:, None, None], (len(dataset), dataset.T, 1))
    else:
        extra = per_t[:, :, None]
    values = np.concatenate([dataset.values, extra], axis=2)
    return dataset.with_values(values, list(dataset.meta.channel_names) + [ERROR_CHANNEL])


def save_aegan(model: AeganModel, path: str | Path) -> None:
    header = {"config": asdict(model.config), "T": model.T, "F": model.F, "steps": model.steps}
    write_container(path, MAGIC, header, state_to_numpy(model))


def load_aegan(path: str | Path) -> AeganModel:
    header, params = read_container(path, MAGIC)
    model = AeganModel(header["T"], header["F"], AeganConfig(**header["config"]))
    load_numpy_state(model, params)
    model.steps = header.get("steps", 0)
    model.eval()
    return model
