"""Synthetic hierarchical datasets with a controllable class signal.

Each trial is one continuous signal that is cut into non-overlapping epochs:

    x[t, c] = sin(2 pi f t / T + a) + 0.5 sin(4 pi f t / T + b)
              + subject offset + trial drift + noise

with ``f = base_cycles + class_separation * label`` cycles per epoch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import DatasetMeta, HierarchicalDataset, segment_trial

# distinct seed streams keep target and external draws independent
_TARGET_STREAM = 0
_EXTERNAL_STREAM = 1


@dataclass
class SynthConfig:
    n_subjects: int = 20
    trials_per_subject: int = 2
    epochs_per_trial: int = 30
    T: int = 64
    F: int = 4
    class_separation: float = 2.0
    subject_jitter: float = 0.5
    noise_std: float = 0.3
    positive_fraction: float = 0.5
    base_cycles: float = 4.0
    sampling_rate_hz: float = 64.0
    external_shift: float = 0.1
    phase_diffusion: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_subjects", "trials_per_subject", "epochs_per_trial", "T", "F"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("class_separation", "subject_jitter", "noise_std", "phase_diffusion"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 < self.positive_fraction < 1:
            raise ValueError("positive_fraction must lie in (0, 1)")


def _trial_signal(rng, cfg: SynthConfig, label: int, offset: np.ndarray) -> np.ndarray:
    L = cfg.T * cfg.epochs_per_trial
    t = np.arange(L)[:, None]
    cycles = cfg.base_cycles + cfg.class_separation * label
    omega = 2 * np.pi * cycles / cfg.T
    phase1 = rng.uniform(0, 2 * np.pi, size=cfg.F)
    phase2 = rng.uniform(0, 2 * np.pi, size=cfg.F)
    drift = rng.normal(0.0, cfg.subject_jitter, size=cfg.F)
    # random-walk phase (std per step) so windows of one trial are not copies
    walk = np.cumsum(rng.normal(0.0, cfg.phase_diffusion, size=(L, cfg.F)), axis=0)
    x = np.sin(omega * t + phase1 + walk) + 0.5 * np.sin(2 * omega * t + phase2 + 2 * walk)
    x += offset + drift * (t / L)
    x += rng.normal(0.0, cfg.noise_std, size=x.shape)
    return x


def _generate(cfg: SynthConfig, stream: int, prefix: str, labels: np.ndarray, shift: float):
    rng = np.random.default_rng([cfg.seed, stream])
    values, subj, trials, epochs, labs = [], [], [], [], []
    for s in range(cfg.n_subjects):
        sid = f"{prefix}s{s:03d}"
        offset = rng.normal(0.0, cfg.subject_jitter, size=cfg.F) + shift
        for r in range(cfg.trials_per_subject):
            rid = f"{sid}-r{r}"
            x = _trial_signal(rng, cfg, int(labels[s]), offset)
            for k, w in enumerate(segment_trial(x, cfg.T, cfg.T)):
                values.append(w)
                subj.append(sid)
                trials.append(rid)
                epochs.append(k)
                labs.append(int(labels[s]))
    meta = DatasetMeta(cfg.sampling_rate_hz, tuple(f"c{c}" for c in range(cfg.F)), 2)
    return HierarchicalDataset(np.stack(values), subj, trials, epochs, labs, meta)


def generate_target(cfg: SynthConfig) -> HierarchicalDataset:
    """Target-center dataset; labels are per subject."""
    cfg.validate()
    n_pos = int(round(cfg.positive_fraction * cfg.n_subjects))
    n_pos = min(max(n_pos, 1), cfg.n_subjects - 1) if cfg.n_subjects > 1 else n_pos
    labels = np.zeros(cfg.n_subjects, dtype=np.int64)
    perm = np.random.default_rng([cfg.seed, _TARGET_STREAM, 99]).permutation(cfg.n_subjects)
    labels[perm[:n_pos]] = 1
    return _generate(cfg, _TARGET_STREAM, "", labels, 0.0)


def generate_external_normals(cfg: SynthConfig) -> HierarchicalDataset:
    """Normal-only subjects from another center.

    All channels carry an extra additive shift of
    ``external_shift * subject_jitter``; subject ids are prefixed ``ext-``.
    """
    cfg.validate()
    labels = np.zeros(cfg.n_subjects, dtype=np.int64)
    return _generate(cfg, _EXTERNAL_STREAM, "ext-", labels, cfg.external_shift * cfg.subject_jitter)


def spectral_peak_classifier(dataset: HierarchicalDataset, cfg: SynthConfig) -> np.ndarray:
    """Label each sample by its dominant FFT bin (no learning).

    Predicts 1 when the channel-averaged power peak is closer to the class-1
    frequency than to the class-0 frequency.
    """
    x = dataset.values - dataset.values.mean(axis=1, keepdims=True)
    power = (np.abs(np.fft.rfft(x, axis=1)) ** 2).mean(axis=2)
    peak = power[:, 1:].argmax(axis=1) + 1
    threshold = cfg.base_cycles + cfg.class_separation / 2
    return (peak > threshold).astype(np.int64)
