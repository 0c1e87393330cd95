"""``lmcrd`` command line entry point.

Exit codes: 0 success, 1 validation error (nothing written), 2 runtime
failure (partial outputs keep an ``.incomplete`` suffix).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import shutil
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import torch

from . import __version__
from . import aegan as ag
from .checkpoint import CheckpointError
from .config import ConfigError, apply_overrides, parse_config_file, suggest
from .datamodel import (
    DatasetLoadError,
    ScalerState,
    SplitSpec,
    apply_standardize,
    load_dataset,
    save_dataset,
    standardize_trials,
)
from .encoder import load_encoder, save_encoder
from .evaluation import (
    METRICS,
    metrics_document,
    project_views,
    render_view_plot,
    validate_metrics_document,
)
from .pipeline import (
    PipelineConfig,
    evaluate_model,
    full_finetune,
    load_finetuned,
    partial_finetune,
    prepare_target,
    preprocess,
    pretrain_contrastive,
    run_ablation,
    save_finetuned,
    subset_labels,
    write_ablation_table,
    write_loss_history,
)
from .synthgen import SynthConfig, generate_external_normals, generate_target

log = logging.getLogger("lmcrd")


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


_ALL_OPTIONS: set[str] = set()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        unknown = re.findall(r"(--?[\w-]+)", message) if "unrecognized" in message else []
        hint = "".join(suggest(tok, sorted(_ALL_OPTIONS)) for tok in unknown[:1])
        raise UsageError(f"{message}{hint}")

    def add_argument(self, *args, **kwargs):
        _ALL_OPTIONS.update(a for a in args if a.startswith("-"))
        return super().add_argument(*args, **kwargs)


# --- config resolution ----------------------------------------------------


def resolve_config(args) -> tuple[PipelineConfig, SynthConfig]:
    """defaults < LMCRD_SEED < config file < --set < dedicated flags."""
    cfg, synth = PipelineConfig(), SynthConfig()
    env_seed = os.environ.get("LMCRD_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"LMCRD_SEED must be an integer, got {env_seed!r}") from None
        _set_seed(cfg, synth, seed)
    overrides: dict[str, str] = {}
    if getattr(args, "config", None):
        overrides.update(parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    apply_overrides(cfg, overrides, {"synth": synth})
    if getattr(args, "seed", None) is not None:
        _set_seed(cfg, synth, args.seed)
    cfg.validate()
    return cfg, synth


def _set_seed(cfg: PipelineConfig, synth: SynthConfig, seed: int) -> None:
    cfg.seeds, synth.seed, cfg.aegan.seed = [seed], seed, seed


# --- output staging -------------------------------------------------------


class _Outputs:
    """Stage outputs under ``<path>.incomplete`` and publish them on success."""

    def __init__(self, force: bool):
        self.force = force
        self.staged: list[tuple[Path, Path]] = []

    def claim(self, path: str | Path) -> Path:
        final = Path(path)
        if final.exists() and not self.force:
            raise ValidationError(f"{final} exists; pass --force to overwrite")
        tmp = final.with_name(final.name + ".incomplete")
        _remove(tmp)
        tmp.parent.mkdir(parents=True, exist_ok=True)
        self.staged.append((tmp, final))
        return tmp

    def publish(self) -> None:
        for tmp, final in self.staged:
            _remove(final)
            tmp.rename(final)

    def discard(self) -> None:
        for tmp, _ in self.staged:
            _remove(tmp)


def _remove(path: Path) -> None:
    if path.is_dir():
        shutil.rmtree(path)
    elif path.exists():
        path.unlink()


# --- shared helpers -------------------------------------------------------


def _seed(cfg: PipelineConfig) -> int:
    return int(cfg.seeds[0]) if cfg.seeds else 0


def _header_extras(prepared, cfg, aegan_path, channel_names) -> dict:
    return {
        "variant": cfg.variant,
        "augment_mode": cfg.augment_mode,
        "aegan": str(aegan_path) if aegan_path else None,
        "split": prepared.split.to_dict(),
        "scaler": prepared.scaler.to_dict() if prepared.scaler else {"fitted": False},
        "channel_names": list(channel_names),
        "trial_standardize": cfg.trial_standardize,
    }


def _data_for_header(data_dir, header: dict, aegan_path=None):
    """Rebuild the standardized, split dataset a checkpoint was trained on."""
    dataset = load_dataset(data_dir)
    if header.get("trial_standardize", False):
        dataset = standardize_trials(
            dataset, [c for c, n in enumerate(dataset.meta.channel_names) if n == ag.ERROR_CHANNEL]
        )
    enc_channels = header["encoder"]["input_channels"] if "encoder" in header else header["config"]["input_channels"]
    if dataset.F + 1 == enc_channels:
        path = aegan_path or header.get("aegan")
        if not path:
            raise ValidationError("dataset lacks the reconstruction-error channel; pass --aegan-ckpt")
        dataset = ag.augment_dataset(dataset, ag.load_aegan(path), header.get("augment_mode", "scalar"))
    if dataset.F != enc_channels:
        raise ValidationError(f"checkpoint expects {enc_channels} channels, dataset has {dataset.F}")
    scaler = ScalerState.from_dict(header.get("scaler", {}))
    if scaler.fitted:
        dataset = apply_standardize(dataset, scaler)
    s = header["split"]
    split = SplitSpec(frozenset(s["train"]), frozenset(s["val"]), frozenset(s["test"]), s.get("seed", 0))
    split.audit(dataset)
    return dataset, split


# --- subcommands ----------------------------------------------------------


def cmd_synth(args, cfg, synth, out: _Outputs):
    dataset = generate_external_normals(synth) if args.kind == "external" else generate_target(synth)
    save_dataset(dataset, out.claim(args.out), fmt=args.format)
    log.info("wrote %d samples (%d subjects) to %s", len(dataset), len(dataset.subjects), args.out)


def cmd_pretrain_aegan(args, cfg, synth, out: _Outputs):
    external = load_dataset(args.external)
    model = ag.train_aegan(preprocess(external, cfg), cfg.aegan)
    ag.save_aegan(model, out.claim(args.out))


def cmd_augment(args, cfg, synth, out: _Outputs):
    dataset = load_dataset(args.target)
    model = ag.load_aegan(args.ckpt)
    save_dataset(ag.augment_dataset(preprocess(dataset, cfg), model, args.mode), out.claim(args.out))


def cmd_pretrain(args, cfg, synth, out: _Outputs):
    dataset = load_dataset(args.data)
    aegan_model = ag.load_aegan(args.aegan_ckpt) if args.aegan_ckpt else None
    prepared = prepare_target(dataset, cfg, aegan_model)
    seed = _seed(cfg)
    result = pretrain_contrastive(prepared.train, cfg, seed)
    names = list(prepared.train.meta.channel_names)
    extras = _header_extras(prepared, cfg, args.aegan_ckpt, names)
    extras["seed"] = seed
    save_encoder(result.encoder, out.claim(args.out), extras)
    write_loss_history(result.history, out.claim(str(args.out) + ".losses.csv"))


def cmd_finetune(args, cfg, synth, out: _Outputs):
    encoder, header = load_encoder(args.ckpt)
    dataset, split = _data_for_header(args.data, header, args.aegan_ckpt)
    train, val = dataset.select_subjects(split.train_subjects), dataset.select_subjects(split.val_subjects)
    seed = _seed(cfg)
    extra = {k: header[k] for k in ("variant", "augment_mode", "aegan", "split", "scaler", "trial_standardize") if k in header}
    extra["seed"] = seed
    if args.protocol == "pft":
        model = partial_finetune(encoder, subset_labels(train, args.fraction, seed), val, cfg, seed, extra)
        model.extra["fraction"] = args.fraction
    else:
        model = full_finetune(encoder, train, val, cfg, args.fraction, seed, extra)
    save_finetuned(model, out.claim(args.out))


def cmd_evaluate(args, cfg, synth, out: _Outputs):
    model = load_finetuned(args.model)
    header = {"encoder": asdict(model.encoder.config), **model.extra}
    dataset, split = _data_for_header(args.data, header, args.aegan_ckpt)
    subjects = {"train": split.train_subjects, "val": split.val_subjects, "test": split.test_subjects}
    record = evaluate_model(model, dataset.select_subjects(subjects[args.split]), model.extra.get("seed", 0))
    doc = metrics_document(record, model.protocol, model.extra.get("variant", "LMCRD"),
                           model.extra.get("fraction", 1.0))
    validate_metrics_document(doc)
    out.claim(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    flat = Path(args.out).with_suffix(".csv")
    values = [doc["protocol"], doc["variant"], doc["fraction"], doc["seed"], doc["n_samples"]]
    values += ["" if doc["metrics"][m] is None else doc["metrics"][m] for m in METRICS]
    out.claim(flat).write_text(
        ",".join(["protocol", "variant", "fraction", "seed", "n_samples", *METRICS]) + "\n"
        + ",".join(map(str, values)) + "\n"
    )


def cmd_ablate(args, cfg, synth, out: _Outputs):
    target, external = load_dataset(args.data), load_dataset(args.external)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    variants = args.variants.split(",") if args.variants else None
    kwargs = {"variants": variants} if variants else {}
    table = run_ablation(target, external, cfg, seeds, **kwargs)
    staged = out.claim(args.out)
    write_ablation_table(table, staged)
    report = {
        f"{variant}|{proto}": {"mean": rep.mean, "std": rep.std, "seeds": [r.seed for r in rep.records]}
        for (variant, proto), rep in table.items()
    }
    (staged / "ablation.json").write_text(json.dumps(report, indent=2) + "\n")
    print((staged / "ablation.txt").read_text(), end="")


def cmd_visualize(args, cfg, synth, out: _Outputs):
    encoder, header = load_encoder(args.ckpt)
    if encoder.views is None:
        raise ValidationError("checkpoint has no view network to visualize")
    dataset, split = _data_for_header(args.data, header, args.aegan_ckpt)
    if args.split != "all":
        dataset = dataset.select_subjects(getattr(split, f"{args.split}_subjects"))
    with torch.no_grad():
        g = encoder(torch.tensor(dataset.values, dtype=torch.float32)).g.mean(dim=1).numpy()
    N, V, d = g.shape
    points = g.reshape(N * V, d)
    coords = project_views(points, args.method, args.coords)
    colorings = {
        "view": [f"view{v + 1}" for _ in range(N) for v in range(V)],
        "subject": [str(s) for s in dataset.subject_ids for _ in range(V)],
        "label": [str(int(lab)) for lab in dataset.labels for _ in range(V)],
    }
    stem, suffix = Path(args.out).with_suffix(""), Path(args.out).suffix or ".png"
    staged = [out.claim(f"{stem}_{name}{suffix}") for name in colorings] + [out.claim(f"{stem}.csv")]
    with tempfile.TemporaryDirectory(dir=stem.parent) as tmp:
        written = render_view_plot(coords, colorings, Path(tmp) / f"{stem.name}{suffix}")
        for src, dst in zip(written, staged):
            src.rename(dst)


# --- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lmcrd", description="Reconstruction-error augmented multi-view contrastive learning.")
    p.add_argument("--version", action="version", version=f"lmcrd {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        return sp

    s = common(sub.add_parser("synth", help="generate a synthetic dataset directory"))
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=["target", "external"], default="target")
    s.add_argument("--format", choices=["lmts", "csv"], default="lmts")

    s = common(sub.add_parser("pretrain-aegan", help="train the AE-GAN on external normals"))
    s.add_argument("--external", required=True)
    s.add_argument("--out", required=True)

    s = common(sub.add_parser("augment", help="append the reconstruction-error channel"))
    s.add_argument("--target", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--mode", choices=["scalar", "timestep"], default="scalar")
    s.add_argument("--out", required=True)

    s = common(sub.add_parser("pretrain", help="contrastive pretraining of the encoder"))
    s.add_argument("--data", required=True)
    s.add_argument("--aegan-ckpt")
    s.add_argument("--out", required=True)

    s = common(sub.add_parser("finetune", help="partial or full fine-tuning"))
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--aegan-ckpt")
    s.add_argument("--protocol", choices=["pft", "fft"], required=True)
    s.add_argument("--fraction", type=float, default=1.0)
    s.add_argument("--out", required=True)

    s = common(sub.add_parser("evaluate", help="metrics of a fine-tuned model"))
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--aegan-ckpt")
    s.add_argument("--split", choices=["train", "val", "test"], default="test")
    s.add_argument("--out", required=True)

    s = common(sub.add_parser("ablate", help="all variants x protocols x seeds"))
    s.add_argument("--data", required=True)
    s.add_argument("--external", required=True)
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--variants")
    s.add_argument("--out", required=True)

    s = common(sub.add_parser("visualize", help="2-D projection of view representations"))
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--aegan-ckpt")
    s.add_argument("--split", choices=["train", "val", "test", "all"], default="all")
    s.add_argument("--method", choices=["pca", "external"], default="pca")
    s.add_argument("--coords")
    s.add_argument("--out", required=True)
    return p


COMMANDS = {
    "synth": cmd_synth,
    "pretrain-aegan": cmd_pretrain_aegan,
    "augment": cmd_augment,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "visualize": cmd_visualize,
}

_VALIDATION_ERRORS = (
    UsageError, ValidationError, ConfigError, DatasetLoadError, CheckpointError,
    FileNotFoundError, ValueError, KeyError,
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"lmcrd: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    out = _Outputs(force=args.force)
    try:
        cfg, synth = resolve_config(args)
        COMMANDS[args.command](args, cfg, synth, out)
    except _VALIDATION_ERRORS as exc:
        out.discard()
        print(f"lmcrd: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - mapped to exit code 2
        print(f"lmcrd: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    out.publish()
    return 0


if __name__ == "__main__":
    sys.exit(main())
