"""Three-stage training (AE-GAN, contrastive pretraining, fine-tuning),
evaluation protocols and ablation variants."""

from __future__ import annotations

import copy
import csv
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import aegan as ag
from .checkpoint import load_numpy_state, read_container, state_to_numpy, write_container
from .datamodel import (
    UNLABELED,
    HierarchicalDataset,
    ScalerState,
    SplitSpec,
    apply_standardize,
    fit_standardize,
    split_by_explicit_ids,
    split_by_subject,
    standardize_trials,
)
from .encoder import EncoderConfig, LMCRDEncoder, build_encoder, mask_batch, pool_representation
from .evaluation import METRICS, MetricRecord, RunReport, aggregate_runs, compute_metrics
from .losses import COMPONENTS, ContrastiveBatch, LossConfig, total_loss

log = logging.getLogger(__name__)

VARIANTS = ("LMCRD", "LMCRD-LMC", "LMCRD-RD", "LMCRD-0")
PROTOCOLS = (("pft", 1.0), ("fft", 1.0), ("fft", 0.1))
MODEL_MAGIC = b"LMFT"


class NonFiniteLossError(RuntimeError):
    pass


def uses_aegan(variant: str) -> bool:
    _check_variant(variant)
    return variant in ("LMCRD", "LMCRD-RD")


def uses_views(variant: str) -> bool:
    _check_variant(variant)
    return variant in ("LMCRD", "LMCRD-LMC")


def _check_variant(variant: str) -> None:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


@dataclass
class PipelineConfig:
    aegan: ag.AeganConfig = field(default_factory=ag.AeganConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    contrastive_epochs: int = 10
    finetune_epochs: int = 20
    batch_size: int = 16
    finetune_batch_size: int = 32
    contrastive_lr: float = 1e-3
    finetune_lr: float = 1e-4
    probe_lr: float = 1e-2
    grad_clip: float = 5.0
    label_fraction: float = 1.0
    seeds: list[int] = field(default_factory=lambda: [0])
    variant: str = "LMCRD"
    augment_mode: str = "scalar"
    standardize: bool = True
    trial_standardize: bool = True
    split_fractions: list[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])
    split_seed: int = 0
    val_subjects: list[str] = field(default_factory=list)
    test_subjects: list[str] = field(default_factory=list)

    def validate(self) -> None:
        _check_variant(self.variant)
        if self.batch_size < 4 or self.batch_size % 2:
            raise ValueError("batch_size must be even and >= 4")
        if not 0 < self.label_fraction <= 1:
            raise ValueError("label_fraction must lie in (0, 1]")
        if self.augment_mode not in ("scalar", "timestep"):
            raise ValueError("augment_mode must be 'scalar' or 'timestep'")
        self.loss.validate()


def make_split(dataset: HierarchicalDataset, cfg: PipelineConfig) -> SplitSpec:
    if cfg.val_subjects or cfg.test_subjects:
        split = split_by_explicit_ids(dataset, cfg.val_subjects, cfg.test_subjects)
    else:
        split = split_by_subject(dataset, tuple(cfg.split_fractions), cfg.split_seed)
    split.audit(dataset)
    return split


# --- batching -------------------------------------------------------------


def group_batch_sampler(dataset: HierarchicalDataset, M: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of batches, each made of ``M // 2`` trials x 2 samples.

    Trials are drawn with probability proportional to their remaining pairs so
    all trials drain together; a batch is re-drawn once if it would hold only
    one subject while others still have pairs.  Leftover pairs that cannot
    fill a batch of distinct trials are dropped.
    """
    if M < 4 or M % 2:
        raise ValueError("batch size must be even and >= 4")
    if len(dataset) < M:
        warnings.warn(f"dataset has {len(dataset)} samples, fewer than batch size {M}; single truncated batch")
        return [rng.permutation(len(dataset))]
    trials = list(dataset.by_trial)
    owner = {r: dataset.subject_ids[dataset.by_trial[r][0]] for r in trials}
    pairs: dict[str, list[tuple[int, int]]] = {}
    for r in trials:
        idx = rng.permutation(dataset.by_trial[r])
        pairs[r] = [(int(idx[k]), int(idx[k + 1])) for k in range(0, len(idx) - 1, 2)]
    k = M // 2
    batches = []
    while True:
        open_trials = [r for r in trials if pairs[r]]
        if len(open_trials) < k:
            break
        weights = np.array([len(pairs[r]) for r in open_trials], dtype=float)
        chosen = list(rng.choice(len(open_trials), size=k, replace=False, p=weights / weights.sum()))
        subjects = {owner[open_trials[c]] for c in chosen}
        if len(subjects) == 1:
            others = [c for c in range(len(open_trials)) if owner[open_trials[c]] not in subjects]
            if others:
                chosen[-1] = int(rng.choice(others))
        batch = []
        for c in chosen:
            batch.extend(pairs[open_trials[c]].pop())
        batches.append(np.asarray(batch))
    if not batches:
        # too few trials for distinct groups: fall back to plain chunks
        order = rng.permutation(len(dataset))
        batches = [order[s : s + M] for s in range(0, len(order) - M + 1, M)]
    return batches


# --- stage 2 --------------------------------------------------------------


@dataclass
class ContrastiveResult:
    encoder: LMCRDEncoder
    history: list[dict]
    flags: list[str]


def pretrain_contrastive(
    dataset: HierarchicalDataset, cfg: PipelineConfig, seed: int = 0, use_views: bool | None = None
) -> ContrastiveResult:
    """Self-supervised training of the encoder on an unlabeled dataset."""
    cfg.validate()
    use_views = uses_views(cfg.variant) if use_views is None else use_views
    data = dataset.without_labels()
    enc_cfg = copy.copy(cfg.encoder)
    enc_cfg.input_channels = data.F
    enc_cfg.use_views = use_views
    enc_cfg.seed = seed
    loss_cfg = copy.copy(cfg.loss)
    if not use_views:
        loss_cfg.lambda_v = 0.0
    encoder = build_encoder(enc_cfg)
    opt = torch.optim.Adam(encoder.parameters(), lr=cfg.contrastive_lr)
    rng = np.random.default_rng([seed, 2])
    values = torch.tensor(data.values, dtype=torch.float32)
    history: list[dict] = []
    flags: list[str] = []
    step = 0
    encoder.train()
    for epoch in range(cfg.contrastive_epochs):
        for idx in group_batch_sampler(data, cfg.batch_size, rng):
            x = values[idx]
            out1 = encoder(mask_batch(x, enc_cfg.mask_ratio, rng))
            out2 = encoder(mask_batch(x, enc_cfg.mask_ratio, rng))
            batch = ContrastiveBatch(
                out1.h, out2.h, out1.g, out2.g,
                data.subject_ids[idx].tolist(), data.trial_ids[idx].tolist(),
            )
            total, parts = total_loss(batch, loss_cfg, flags)
            for name in COMPONENTS:
                if name in parts and not torch.isfinite(parts[name]):
                    raise NonFiniteLossError(f"step {step}: component {name} is {parts[name].item()}")
            if not torch.isfinite(total):
                raise NonFiniteLossError(f"step {step}: total loss is {total.item()}")
            opt.zero_grad()
            total.backward()
            if cfg.grad_clip > 0:
                nn.utils.clip_grad_norm_(encoder.parameters(), cfg.grad_clip)
            opt.step()
            step += 1
            row = {"step": step, "epoch": epoch}
            row.update({k: v.item() for k, v in parts.items()})
            row["total"] = total.item()
            history.append(row)
        log.info("contrastive epoch %d: total=%.4f", epoch,
                 np.mean([h["total"] for h in history if h["epoch"] == epoch] or [np.nan]))
    encoder.eval()
    return ContrastiveResult(encoder, history, flags)


def write_loss_history(history: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", *COMPONENTS, "total"])
        for row in history:
            w.writerow([row["step"], *(row.get(c, "") for c in COMPONENTS), row["total"]])


# --- label subsetting ------------------------------------------------------


def subset_labels(dataset: HierarchicalDataset, fraction: float, seed: int = 0) -> HierarchicalDataset:
    """Per class, whole subjects in random order until ``round(fraction * n_class)``
    samples are reached; the last subject is truncated to hit the target."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1.0:
        return dataset
    rng = np.random.default_rng([seed, 3])
    chosen: list[int] = []
    for cls in sorted(set(int(v) for v in dataset.labels)):
        subjects = sorted({s for s, i in dataset.by_subject.items() if dataset.labels[i[0]] == cls})
        n_class = sum(len(dataset.by_subject[s]) for s in subjects)
        target = int(round(fraction * n_class))
        if target == 0:
            raise ValueError(f"fraction {fraction} leaves no samples of class {cls}")
        for s in (subjects[k] for k in rng.permutation(len(subjects))):
            idx = sorted(dataset.by_subject[s], key=lambda i: (dataset.trial_ids[i], dataset.epoch_index[i]))
            need = target - sum(1 for i in chosen if dataset.labels[i] == cls)
            if need <= 0:
                break
            chosen.extend(idx[:need])
    return dataset.subset(sorted(chosen))


# --- stage 3 --------------------------------------------------------------


class Classifier(nn.Module):
    """Linear map from standardized pooled representations to logits."""

    def __init__(self, in_dim: int, n_classes: int = 2):
        super().__init__()
        self.n_classes = n_classes
        self.register_buffer("feat_mean", torch.zeros(in_dim))
        self.register_buffer("feat_std", torch.ones(in_dim))
        self.linear = nn.Linear(in_dim, 1 if n_classes == 2 else n_classes)

    def set_normalization(self, feats: torch.Tensor) -> None:
        self.feat_mean.copy_(feats.mean(dim=0))
        self.feat_std.copy_(feats.std(dim=0, unbiased=False).clamp_min(1e-6))

    def forward(self, feats):
        return self.linear((feats - self.feat_mean) / self.feat_std)


class FinetunedModel(nn.Module):
    def __init__(self, encoder: LMCRDEncoder, classifier: Classifier, protocol: str, extra: dict | None = None):
        super().__init__()
        self.encoder = encoder
        self.classifier = classifier
        self.protocol = protocol
        self.frozen = protocol == "pft"
        self.extra = dict(extra or {})
        self.history: list[dict] = []

    def forward(self, x):
        return self.classifier(pool_representation(self.encoder(x)))


def _labels_or_raise(dataset: HierarchicalDataset, what: str) -> torch.Tensor:
    if len(dataset) == 0:
        raise ValueError(f"{what} set is empty")
    if np.any(dataset.labels == UNLABELED):
        raise ValueError(f"{what} set contains unlabeled samples")
    return torch.as_tensor(dataset.labels)


def _loss(logits: torch.Tensor, y: torch.Tensor, n_classes: int) -> torch.Tensor:
    if n_classes == 2:
        return F.binary_cross_entropy_with_logits(logits.squeeze(-1), y.float())
    return F.cross_entropy(logits, y)


def _positive_prob(logits: torch.Tensor, n_classes: int) -> np.ndarray:
    if n_classes == 2:
        return torch.sigmoid(logits.squeeze(-1)).detach().numpy()
    return torch.softmax(logits, -1).detach().numpy()


@torch.no_grad()
def _pooled_features(encoder: LMCRDEncoder, values: np.ndarray, chunk: int = 256) -> torch.Tensor:
    encoder.eval()
    x = torch.tensor(values, dtype=torch.float32)
    return torch.cat([encoder.pooled(x[s : s + chunk]) for s in range(0, len(x), chunk)])


def _fit(model, forward, train_inputs, y_train, val_inputs, y_val, params, cfg, seed, n_classes):
    """Minibatch training retaining the state with the lowest validation loss."""
    from .evaluation import auroc

    opt = torch.optim.Adam(params)
    rng = np.random.default_rng([seed, 4])
    best, best_loss = copy.deepcopy(model.state_dict()), float("inf")
    history = []
    for epoch in range(cfg.finetune_epochs):
        model.train()
        order = rng.permutation(len(y_train))
        losses = []
        for s in range(0, len(order), cfg.finetune_batch_size):
            b = order[s : s + cfg.finetune_batch_size]
            loss = _loss(forward(train_inputs[b]), y_train[b], n_classes)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        model.eval()
        with torch.no_grad():
            val_logits = forward(val_inputs)
            val_loss = _loss(val_logits, y_val, n_classes).item()
        val_auc = auroc(y_val.numpy(), _positive_prob(val_logits, n_classes)) if n_classes == 2 else None
        if val_loss < best_loss:
            best_loss = val_loss
            best = copy.deepcopy(model.state_dict())
        history.append({
            "epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss,
            "val_auroc": val_auc, "best_val_loss": best_loss,
        })
    model.load_state_dict(best)
    model.eval()
    return history


def _check_channels(encoder: LMCRDEncoder, dataset: HierarchicalDataset) -> None:
    if dataset.F != encoder.config.input_channels:
        raise ValueError(
            f"encoder expects {encoder.config.input_channels} channels, dataset has {dataset.F}"
        )


def partial_finetune(
    encoder: LMCRDEncoder, train: HierarchicalDataset, val: HierarchicalDataset,
    cfg: PipelineConfig, seed: int = 0, extra: dict | None = None,
) -> FinetunedModel:
    """Frozen encoder + logistic-regression head on pooled representations."""
    _check_channels(encoder, train)
    y_tr, y_va = _labels_or_raise(train, "training"), _labels_or_raise(val, "validation")
    n_classes = train.meta.n_classes
    encoder = copy.deepcopy(encoder)
    for p in encoder.parameters():
        p.requires_grad_(False)
    f_tr, f_va = _pooled_features(encoder, train.values), _pooled_features(encoder, val.values)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        clf = Classifier(f_tr.shape[1], n_classes)
    clf.set_normalization(f_tr)
    model = FinetunedModel(encoder, clf, "pft", extra)
    model.history = _fit(
        clf, clf, f_tr, y_tr, f_va, y_va,
        [{"params": clf.parameters(), "lr": cfg.probe_lr}], cfg, seed, n_classes,
    )
    return model


def full_finetune(
    encoder: LMCRDEncoder, train: HierarchicalDataset, val: HierarchicalDataset,
    cfg: PipelineConfig, fraction: float = 1.0, seed: int = 0, extra: dict | None = None,
) -> FinetunedModel:
    """All parameters trainable; the label fraction is applied first."""
    _check_channels(encoder, train)
    # feature statistics need no labels, so they come from the whole training split
    all_train = train
    train = subset_labels(train, fraction, seed)
    y_tr, y_va = _labels_or_raise(train, "training"), _labels_or_raise(val, "validation")
    n_classes = train.meta.n_classes
    encoder = copy.deepcopy(encoder)
    for p in encoder.parameters():
        p.requires_grad_(True)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        clf = Classifier(encoder.config.pooled_dim, n_classes)
    with torch.no_grad():
        clf.set_normalization(_pooled_features(encoder, all_train.values))
    model = FinetunedModel(encoder, clf, "fft", {**(extra or {}), "fraction": fraction})
    x_tr = torch.tensor(train.values, dtype=torch.float32)
    x_va = torch.tensor(val.values, dtype=torch.float32)
    model.history = _fit(
        model, model, x_tr, y_tr, x_va, y_va,
        [{"params": encoder.parameters(), "lr": cfg.finetune_lr},
         {"params": clf.parameters(), "lr": cfg.probe_lr}],
        cfg, seed, n_classes,
    )
    return model


@torch.no_grad()
def predict(model: FinetunedModel, x) -> np.ndarray:
    """Class-probability rows; binary models return ``[1 - p, p]``."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.shape[-1] != model.encoder.config.input_channels:
        raise ValueError(f"model expects {model.encoder.config.input_channels} channels, got {arr.shape[-1]}")
    model.eval()
    t = torch.tensor(arr, dtype=torch.float32)
    logits = torch.cat([model(t[s : s + 256]) for s in range(0, len(t), 256)]).double()
    if model.classifier.n_classes == 2:
        p = torch.sigmoid(logits.squeeze(-1))
        probs = torch.stack([1 - p, p], dim=-1).numpy()
    else:
        probs = torch.softmax(logits, -1).numpy()
    return probs[0] if single else probs


def evaluate_model(model: FinetunedModel, dataset: HierarchicalDataset, seed: int = 0) -> MetricRecord:
    y = _labels_or_raise(dataset, "evaluation").numpy()
    return compute_metrics(y, predict(model, dataset.values)[:, 1], seed=seed)


def save_finetuned(model: FinetunedModel, path: str | Path) -> None:
    header = {
        "encoder": asdict(model.encoder.config),
        "n_classes": model.classifier.n_classes,
        "protocol": model.protocol,
        **model.extra,
    }
    write_container(path, MODEL_MAGIC, header, state_to_numpy(model))


def load_finetuned(path: str | Path) -> FinetunedModel:
    header, params = read_container(path, MODEL_MAGIC)
    enc_cfg = EncoderConfig(**header["encoder"])
    encoder = LMCRDEncoder(enc_cfg)
    clf = Classifier(enc_cfg.pooled_dim, header["n_classes"])
    extra = {k: v for k, v in header.items() if k not in ("encoder", "n_classes", "protocol")}
    model = FinetunedModel(encoder, clf, header["protocol"], extra)
    load_numpy_state(model, params)
    model.eval()
    return model


# --- full runs ------------------------------------------------------------


@dataclass
class PreparedData:
    train: HierarchicalDataset
    val: HierarchicalDataset
    test: HierarchicalDataset
    split: SplitSpec
    scaler: ScalerState | None


def preprocess(dataset: HierarchicalDataset, cfg: PipelineConfig) -> HierarchicalDataset:
    """Per-trial standardization of the signal channels (not the error channel)."""
    if not cfg.trial_standardize:
        return dataset
    exclude = [c for c, name in enumerate(dataset.meta.channel_names) if name == ag.ERROR_CHANNEL]
    return standardize_trials(dataset, exclude)


def prepare_target(
    target: HierarchicalDataset, cfg: PipelineConfig, aegan_model=None, split: SplitSpec | None = None
) -> PreparedData:
    """Augment with reconstruction error (if a model is given), standardize
    with train statistics, and split by subject."""
    split = split or make_split(target, cfg)
    split.audit(target)
    data = preprocess(target, cfg)
    if aegan_model is not None:
        data = ag.augment_dataset(data, aegan_model, cfg.augment_mode)
    scaler = None
    if cfg.standardize:
        scaler = fit_standardize(data, split)
        data = apply_standardize(data, scaler)
    return PreparedData(
        data.select_subjects(split.train_subjects),
        data.select_subjects(split.val_subjects),
        data.select_subjects(split.test_subjects),
        split, scaler,
    )


@dataclass
class RunResult:
    variant: str
    seed: int
    records: dict[tuple[str, float], MetricRecord]
    pretrain: ContrastiveResult
    models: dict[tuple[str, float], FinetunedModel]
    data: PreparedData


def run_variant(
    target: HierarchicalDataset, external: HierarchicalDataset | None, cfg: PipelineConfig,
    seed: int, variant: str | None = None, protocols=PROTOCOLS, aegan_model=None,
) -> RunResult:
    variant = variant or cfg.variant
    cfg = copy.deepcopy(cfg)
    cfg.variant = variant
    cfg.validate()
    if uses_aegan(variant) and aegan_model is None:
        if external is None:
            raise ValueError(f"variant {variant} needs an external normal dataset")
        aegan_model = ag.train_aegan(preprocess(external, cfg), _seeded(cfg.aegan, seed))
    data = prepare_target(target, cfg, aegan_model if uses_aegan(variant) else None)
    for a, b in ((data.train, data.val), (data.train, data.test), (data.val, data.test)):
        if set(a.subjects) & set(b.subjects):
            raise AssertionError("subject leakage across splits")
    pre = pretrain_contrastive(data.train, cfg, seed)
    extra = {"variant": variant, "seed": seed}
    records, models = {}, {}
    for protocol, fraction in protocols:
        if protocol == "pft":
            model = partial_finetune(pre.encoder, data.train, data.val, cfg, seed, extra)
        else:
            model = full_finetune(pre.encoder, data.train, data.val, cfg, fraction, seed, extra)
        records[(protocol, fraction)] = evaluate_model(model, data.test, seed)
        models[(protocol, fraction)] = model
    return RunResult(variant, seed, records, pre, models, data)


def _seeded(cfg_obj, seed: int):
    out = copy.copy(cfg_obj)
    out.seed = seed
    return out


def protocol_label(protocol: str, fraction: float) -> str:
    return "PFT" if protocol == "pft" else f"FFT-{int(round(fraction * 100))}%"


def run_ablation(
    target: HierarchicalDataset, external: HierarchicalDataset, cfg: PipelineConfig,
    seeds: Sequence[int], variants: Sequence[str] = VARIANTS, protocols=PROTOCOLS,
) -> dict[tuple[str, str], RunReport]:
    """Mean/std table keyed by (variant, protocol label)."""
    if not seeds:
        raise ValueError("ablation needs at least one seed")
    per_cell: dict[tuple[str, str], list[MetricRecord]] = {}
    for seed in seeds:
        aegan_model = None
        if any(uses_aegan(v) for v in variants):
            aegan_model = ag.train_aegan(preprocess(external, cfg), _seeded(cfg.aegan, seed))
        for variant in variants:
            result = run_variant(target, external, cfg, seed, variant, protocols, aegan_model)
            for (protocol, fraction), rec in result.records.items():
                per_cell.setdefault((variant, protocol_label(protocol, fraction)), []).append(rec)
    return {key: aggregate_runs(recs) for key, recs in per_cell.items()}


def write_ablation_table(table: dict[tuple[str, str], RunReport], out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = out / "ablation.csv", out / "ablation.txt"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "protocol", "metric", "mean", "std", "n_seeds"])
        for (variant, proto), rep in table.items():
            for m in METRICS:
                w.writerow([variant, proto, m, rep.mean[m], rep.std[m], len(rep.records)])
    rows = [["variant", "protocol", *METRICS]]
    rows += [[v, p, *(rep.cell(m) for m in METRICS)] for (v, p), rep in table.items()]
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    txt_path.write_text("\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n")
    return csv_path, txt_path


def desk_config() -> PipelineConfig:
    """Small configuration that trains in well under a minute per stage on one CPU core."""
    return PipelineConfig(
        aegan=ag.AeganConfig(latent_dim=32, hidden_channels=32, depth=3, epochs=20, batch_size=32),
        encoder=EncoderConfig(backbone_channels=32, backbone_depth=4, view_dim=16, n_views=2),
        contrastive_epochs=5,
        finetune_epochs=15,
    )
