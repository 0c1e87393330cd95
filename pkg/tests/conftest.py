import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from lmcrd.datamodel import DatasetMeta, HierarchicalDataset  # noqa: E402
from lmcrd.synthgen import SynthConfig  # noqa: E402

torch.set_num_threads(1)


def make_dataset(n_subjects=4, trials=2, epochs=3, T=8, F=2, seed=0, labels=None, dtype=np.float64):
    rng = np.random.default_rng(seed)
    vals, subj, tri, ep, lab = [], [], [], [], []
    for s in range(n_subjects):
        y = (s % 2) if labels is None else labels[s]
        for r in range(trials):
            for e in range(epochs):
                vals.append(rng.normal(size=(T, F)).astype(dtype))
                subj.append(f"s{s}")
                tri.append(f"s{s}-r{r}")
                ep.append(e)
                lab.append(y)
    meta = DatasetMeta(100.0, tuple(f"c{c}" for c in range(F)), 2)
    return HierarchicalDataset(np.stack(vals), subj, tri, ep, lab, meta)


@pytest.fixture
def small_dataset():
    return make_dataset()


@pytest.fixture
def tiny_synth():
    return SynthConfig(n_subjects=6, trials_per_subject=2, epochs_per_trial=4, T=16, F=3, seed=1)


def tiny_pipeline_config():
    from lmcrd.aegan import AeganConfig
    from lmcrd.encoder import EncoderConfig
    from lmcrd.pipeline import PipelineConfig

    return PipelineConfig(
        aegan=AeganConfig(latent_dim=8, hidden_channels=8, depth=2, epochs=2, batch_size=32),
        encoder=EncoderConfig(backbone_channels=8, backbone_depth=2, n_views=2, view_dim=4),
        contrastive_epochs=2, finetune_epochs=3, batch_size=8,
    )


DESK_SEEDS = (0, 1, 2)


def _timed_run(target, external, cfg, seed, variant):
    import time

    from lmcrd.pipeline import run_variant

    start = time.process_time()
    result = run_variant(target, external, cfg, seed, variant)
    result.cpu_seconds = time.process_time() - start
    return result


@pytest.fixture(scope="session")
def desk_runs():
    """Full LMCRD pipeline at desk scale, one synthetic draw per seed."""
    from lmcrd.pipeline import desk_config
    from lmcrd.synthgen import generate_external_normals, generate_target

    runs = []
    for seed in DESK_SEEDS:
        synth = SynthConfig(seed=seed)
        cfg = desk_config()
        cfg.split_seed = seed
        runs.append(_timed_run(generate_target(synth), generate_external_normals(synth), cfg, seed, "LMCRD"))
    return runs


@pytest.fixture(scope="session")
def shifted_ablation_runs():
    """LMCRD vs LMCRD-0 with an external center shifted by a full subject jitter."""
    from lmcrd.pipeline import desk_config
    from lmcrd.synthgen import generate_external_normals, generate_target

    out = {"LMCRD": [], "LMCRD-0": []}
    for seed in DESK_SEEDS:
        synth = SynthConfig(seed=seed, external_shift=1.0)
        target, external = generate_target(synth), generate_external_normals(synth)
        for variant in out:
            cfg = desk_config()
            cfg.split_seed = seed
            out[variant].append(_timed_run(target, external, cfg, seed, variant))
    return out


# --- acceptance reporting ---

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record ``(number, passed, detail)`` for the end-of-run acceptance summary."""
    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'} - {detail}")
