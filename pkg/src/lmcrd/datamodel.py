"""Hierarchical medical time-series data model.

Samples are fixed-length windows (epochs) cut from trials, and trials belong
to subjects.  The on-disk layout is a directory with ``manifest.json`` and one
file per trial (``.csv`` or ``.lmts`` raw binary).
"""

from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UNLABELED = -1

LMTS_MAGIC = b"LMTS"
LMTS_VERSION = 1


class DatasetLoadError(Exception):
    """Base class for dataset directory problems."""


class ManifestMissingError(DatasetLoadError):
    pass


class ShapeMismatchError(DatasetLoadError):
    pass


class DuplicateKeyError(DatasetLoadError):
    pass


class ScalerStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeSeriesSample:
    values: np.ndarray
    subject_id: str
    trial_id: str
    epoch_index: int
    label: int | None = None


@dataclass(frozen=True)
class DatasetMeta:
    sampling_rate_hz: float
    channel_names: tuple[str, ...]
    n_classes: int

    def __post_init__(self):
        if not self.sampling_rate_hz > 0:
            raise ValueError("sampling_rate_hz must be positive")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")


class HierarchicalDataset:
    """Epoch-level samples indexed by subject and trial.

    Values are stored stacked as an ``(N, T, F)`` float64 array; labels use
    ``UNLABELED`` (-1) for missing labels.  Instances are treated as
    immutable: transformations return new datasets.
    """

    def __init__(
        self,
        values: np.ndarray,
        subject_ids: Sequence[str],
        trial_ids: Sequence[str],
        epoch_index: Sequence[int],
        labels: Sequence[int | None] | np.ndarray,
        meta: DatasetMeta,
        r_peaks: dict[str, list[int]] | None = None,
    ):
        values = np.array(values, dtype=np.float64)
        n = len(subject_ids)
        if values.ndim != 3:
            if n == 0:
                values = values.reshape(0, 0, len(meta.channel_names))
            else:
                raise ValueError(f"values must be (N, T, F), got shape {values.shape}")
        if not (len(trial_ids) == len(epoch_index) == len(labels) == n == values.shape[0]):
            raise ValueError("sample fields are not aligned")
        if n and (values.shape[1] == 0 or values.shape[2] == 0):
            raise ValueError("samples need T > 0 and F > 0")
        if n and values.shape[2] != len(meta.channel_names):
            raise ValueError(
                f"{values.shape[2]} channels but {len(meta.channel_names)} channel names"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("sample values must be finite")

        self.values = values
        self.values.flags.writeable = False
        self.subject_ids = np.asarray(subject_ids, dtype=object)
        self.trial_ids = np.asarray(trial_ids, dtype=object)
        self.epoch_index = np.asarray(epoch_index, dtype=np.int64)
        self.labels = np.asarray(
            [UNLABELED if lab is None else int(lab) for lab in labels], dtype=np.int64
        )
        self.meta = meta
        self.r_peaks = dict(r_peaks or {})

        self.by_subject: dict[str, list[int]] = {}
        self.by_trial: dict[str, list[int]] = {}
        trial_owner: dict[str, str] = {}
        seen: set[tuple[str, str, int]] = set()
        for i, (s, r, e) in enumerate(zip(self.subject_ids, self.trial_ids, self.epoch_index)):
            key = (s, r, int(e))
            if key in seen:
                raise DuplicateKeyError(f"duplicate sample key {key}")
            seen.add(key)
            if trial_owner.setdefault(r, s) != s:
                raise DuplicateKeyError(f"trial {r!r} appears under subjects {trial_owner[r]!r} and {s!r}")
            self.by_subject.setdefault(s, []).append(i)
            self.by_trial.setdefault(r, []).append(i)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> TimeSeriesSample:
        lab = int(self.labels[i])
        return TimeSeriesSample(
            values=self.values[i],
            subject_id=str(self.subject_ids[i]),
            trial_id=str(self.trial_ids[i]),
            epoch_index=int(self.epoch_index[i]),
            label=None if lab == UNLABELED else lab,
        )

    @property
    def samples(self) -> list[TimeSeriesSample]:
        return [self[i] for i in range(len(self))]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def F(self) -> int:
        return self.values.shape[2]

    @property
    def subjects(self) -> list[str]:
        return list(self.by_subject)

    @property
    def trials(self) -> list[str]:
        return list(self.by_trial)

    def subject_labels(self) -> dict[str, int]:
        return {s: int(self.labels[idx[0]]) for s, idx in self.by_subject.items()}

    def subset(self, indices: Iterable[int]) -> "HierarchicalDataset":
        idx = np.asarray(list(indices), dtype=np.int64)
        return HierarchicalDataset(
            self.values[idx] if len(idx) else np.zeros((0, self.T, self.F)),
            self.subject_ids[idx].tolist(),
            self.trial_ids[idx].tolist(),
            self.epoch_index[idx].tolist(),
            self.labels[idx],
            self.meta,
            {r: p for r, p in self.r_peaks.items() if r in set(self.trial_ids[idx])},
        )

    def select_subjects(self, subjects: Iterable[str]) -> "HierarchicalDataset":
        wanted = set(subjects)
        return self.subset(i for i, s in enumerate(self.subject_ids) if s in wanted)

    def with_values(
        self, values: np.ndarray, channel_names: Sequence[str] | None = None
    ) -> "HierarchicalDataset":
        meta = self.meta
        if channel_names is not None:
            meta = DatasetMeta(meta.sampling_rate_hz, tuple(channel_names), meta.n_classes)
        return HierarchicalDataset(
            values, self.subject_ids.tolist(), self.trial_ids.tolist(),
            self.epoch_index.tolist(), self.labels, meta, self.r_peaks,
        )

    def without_labels(self) -> "HierarchicalDataset":
        return HierarchicalDataset(
            self.values, self.subject_ids.tolist(), self.trial_ids.tolist(),
            self.epoch_index.tolist(), np.full(len(self), UNLABELED), self.meta, self.r_peaks,
        )

    def equals(self, other: "HierarchicalDataset") -> bool:
        return (
            self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
            and list(self.subject_ids) == list(other.subject_ids)
            and list(self.trial_ids) == list(other.trial_ids)
            and np.array_equal(self.epoch_index, other.epoch_index)
            and np.array_equal(self.labels, other.labels)
            and self.meta == other.meta
        )


# --- segmentation -----------------------------------------------------------


def segment_trial(trial_values: np.ndarray, window: int, stride: int) -> list[np.ndarray]:
    """Cut an ``L x F`` trial into windows; a short trailing remainder is dropped."""
    if window <= 0 or stride <= 0:
        raise ValueError(f"window and stride must be positive (got {window}, {stride})")
    x = np.asarray(trial_values)
    if x.ndim == 1:
        x = x[:, None]
    L = x.shape[0]
    if L < window:
        return []
    n = (L - window) // stride + 1
    return [x[k * stride : k * stride + window].copy() for k in range(n)]


def _iqr_filtered(intervals: np.ndarray) -> np.ndarray:
    q1, q3 = np.percentile(intervals, [25, 75])
    spread = 1.5 * (q3 - q1)
    keep = (intervals >= q1 - spread) & (intervals <= q3 + spread)
    return intervals[keep] if keep.any() else intervals


def heartbeat_length(r_peaks: Sequence[int]) -> int:
    """Median R-R interval after dropping 1.5 x IQR outliers."""
    peaks = np.asarray(r_peaks, dtype=np.int64)
    intervals = np.diff(peaks).astype(np.float64)
    return int(round(float(np.median(_iqr_filtered(intervals)))))


def heartbeat_segment(trial_values: np.ndarray, r_peaks: Sequence[int]) -> list[np.ndarray]:
    """One zero-padded segment per R-peak, centred on the peak.

    Each segment spans ``[peak - length // 2, peak - length // 2 + length)``
    so the peak sits at offset ``length // 2`` in every output.
    """
    x = np.asarray(trial_values, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    L, F = x.shape
    peaks = list(r_peaks)
    if len(peaks) < 2:
        raise ValueError("heartbeat segmentation needs at least 2 R-peaks")
    if any(p < 0 or p >= L for p in peaks):
        raise ValueError(f"R-peak indices must lie in [0, {L})")
    if any(b <= a for a, b in zip(peaks, peaks[1:])):
        raise ValueError("R-peak indices must be strictly increasing")
    length = heartbeat_length(peaks)
    half = length // 2
    out = []
    for p in peaks:
        seg = np.zeros((length, F))
        lo, hi = p - half, p - half + length
        src_lo, src_hi = max(lo, 0), min(hi, L)
        seg[src_lo - lo : src_hi - lo] = x[src_lo:src_hi]
        out.append(seg)
    return out


# --- standardization --------------------------------------------------------


@dataclass
class ScalerState:
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    fitted: bool = False
    zero_variance: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        if not self.fitted:
            return {"fitted": False}
        return {
            "fitted": True,
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "zero_variance": list(self.zero_variance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerState":
        if not d.get("fitted"):
            return cls()
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]), True, list(d.get("zero_variance", [])))


def fit_standardize(dataset: HierarchicalDataset, split: "SplitSpec | None" = None) -> ScalerState:
    """Per-channel mean/std over the train subjects (all samples if no split)."""
    data = dataset if split is None else dataset.select_subjects(split.train_subjects)
    if len(data) == 0:
        raise ValueError("cannot fit a scaler on an empty training set")
    flat = data.values.reshape(-1, data.F)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    zero = [int(c) for c in np.flatnonzero(std <= 1e-12)]
    if zero:
        warnings.warn(f"zero-variance channels {zero} standardized with deviation 1")
        std = std.copy()
        std[zero] = 1.0
    return ScalerState(mean, std, True, zero)


def apply_standardize(dataset: HierarchicalDataset, scaler: ScalerState) -> HierarchicalDataset:
    if not scaler.fitted:
        raise ScalerStateError("scaler has not been fitted")
    if len(scaler.mean) != dataset.F:
        raise ValueError(f"scaler has {len(scaler.mean)} channels, dataset has {dataset.F}")
    return dataset.with_values((dataset.values - scaler.mean) / scaler.std)


def standardize_trials(dataset: HierarchicalDataset, exclude: Iterable[int] = ()) -> HierarchicalDataset:
    """Z-score each channel of each trial over all of that trial's samples.

    Uses no labels and no other trial, so it is safe before splitting.
    Channels in ``exclude`` pass through unchanged; constant channels
    are centred only.
    """
    if len(dataset) == 0:
        return dataset
    values = dataset.values.copy()
    keep = [c for c in range(dataset.F) if c not in set(exclude)]
    for idx in dataset.by_trial.values():
        block = values[idx][:, :, keep]
        mean = block.mean(axis=(0, 1))
        std = block.std(axis=(0, 1))
        std[std <= 1e-12] = 1.0
        values[np.ix_(idx, range(dataset.T), keep)] = (block - mean) / std
    return dataset.with_values(values)


# --- subject-independent splits ---------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_subjects: frozenset[str]
    val_subjects: frozenset[str]
    test_subjects: frozenset[str]
    seed: int = 0

    def __post_init__(self):
        parts = (self.train_subjects, self.val_subjects, self.test_subjects)
        for a in range(3):
            for b in range(a + 1, 3):
                both = parts[a] & parts[b]
                if both:
                    raise ValueError(f"subjects {sorted(both)} appear in two splits")

    def audit(self, dataset: HierarchicalDataset) -> None:
        """Raise unless every dataset subject is in exactly one split."""
        assigned = self.train_subjects | self.val_subjects | self.test_subjects
        missing = set(dataset.subjects) - assigned
        if missing:
            raise ValueError(f"subjects not assigned to any split: {sorted(missing)}")
        self.__post_init__()

    def to_dict(self) -> dict:
        return {
            "train": sorted(self.train_subjects),
            "val": sorted(self.val_subjects),
            "test": sorted(self.test_subjects),
            "seed": self.seed,
        }


def split_by_subject(
    dataset: HierarchicalDataset, fractions: tuple[float, float, float] = (0.6, 0.2, 0.2), seed: int = 0
) -> SplitSpec:
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be positive and sum to 1, got {fractions}")
    subjects = sorted(dataset.subjects)
    n = len(subjects)
    if n < 3:
        raise ValueError("fractional subject split needs at least 3 subjects")
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    if n_val + n_test >= n:
        raise ValueError(f"split {fractions} leaves no training subjects out of {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [subjects[i] for i in order]
    val = frozenset(shuffled[:n_val])
    test = frozenset(shuffled[n_val : n_val + n_test])
    train = frozenset(shuffled[n_val + n_test :])
    return SplitSpec(train, val, test, seed)


def split_by_explicit_ids(
    dataset: HierarchicalDataset, val_ids: Iterable[str], test_ids: Iterable[str]
) -> SplitSpec:
    val, test = frozenset(map(str, val_ids)), frozenset(map(str, test_ids))
    unknown = (val | test) - set(dataset.subjects)
    if unknown:
        raise ValueError(f"subject ids not in dataset: {sorted(unknown)}")
    train = frozenset(dataset.subjects) - val - test
    return SplitSpec(train, val, test)


# --- on-disk format ---------------------------------------------------------


def write_lmts(path: Path, values: np.ndarray) -> None:
    arr = np.ascontiguousarray(values, dtype="<f4")
    L, F = arr.shape
    with open(path, "wb") as fh:
        fh.write(LMTS_MAGIC + bytes([LMTS_VERSION]) + struct.pack("<II", L, F))
        fh.write(arr.tobytes())


def read_lmts(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != LMTS_MAGIC:
        raise DatasetLoadError(f"{path}: bad magic {raw[:4]!r}")
    if raw[4] != LMTS_VERSION:
        raise DatasetLoadError(f"{path}: unsupported version {raw[4]}")
    L, F = struct.unpack("<II", raw[5:13])
    body = raw[13:]
    if len(body) != 4 * L * F:
        raise ShapeMismatchError(f"{path}: header says {L}x{F} but payload has {len(body) // 4} values")
    return np.frombuffer(body, dtype="<f4").reshape(L, F).astype(np.float64)


def write_csv(path: Path, values: np.ndarray) -> None:
    F = values.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"c{c}" for c in range(F)])
        for t, row in enumerate(values):
            w.writerow([t] + [repr(float(v)) for v in row])


def read_csv(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ShapeMismatchError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    width = len(header) - 1
    for k, row in enumerate(body):
        if len(row) != len(header):
            raise ShapeMismatchError(f"{path}: row {k + 1} has {len(row) - 1} channels, header has {width}")
    return np.array([[float(v) for v in row[1:]] for row in body], dtype=np.float64).reshape(len(body), width)


def _read_trial(path: Path) -> np.ndarray:
    if path.suffix == ".csv":
        return read_csv(path)
    if path.suffix == ".lmts":
        return read_lmts(path)
    raise DatasetLoadError(f"{path}: unknown trial file extension {path.suffix!r}")


def load_dataset(path: str | Path) -> HierarchicalDataset:
    """Load a dataset directory.

    Besides the required manifest keys, optional ``window``/``stride`` control
    windowing and ``segmentation: "heartbeat"`` switches to R-peak segments.
    Without ``window`` each trial becomes a single epoch.
    """
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise ManifestMissingError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    meta = DatasetMeta(
        float(manifest["sampling_rate_hz"]),
        tuple(manifest["channel_names"]),
        int(manifest["n_classes"]),
    )
    F = len(meta.channel_names)
    window = manifest.get("window")
    stride = manifest.get("stride", window)
    mode = manifest.get("segmentation", "window")

    values, subj, trials, epochs, labels = [], [], [], [], []
    r_peaks: dict[str, list[int]] = {}
    seen: dict[str, str] = {}
    for rec in manifest.get("trials", []):
        s, r = str(rec["subject_id"]), str(rec["trial_id"])
        if r in seen:
            raise DuplicateKeyError(f"trial {r!r} listed twice (subjects {seen[r]!r}, {s!r})")
        seen[r] = s
        file = root / rec["file"]
        x = _read_trial(file)
        if x.shape[1] != F:
            raise ShapeMismatchError(f"{file}: {x.shape[1]} channels but manifest declares F={F}")
        if mode == "heartbeat":
            peaks = rec.get("r_peaks")
            if peaks is None:
                raise DatasetLoadError(f"trial {r!r} has no r_peaks for heartbeat segmentation")
            pieces = heartbeat_segment(x, peaks)
            r_peaks[r] = list(peaks)
        elif window:
            pieces = segment_trial(x, int(window), int(stride))
        else:
            pieces = [x]
        for k, piece in enumerate(pieces):
            values.append(piece)
            subj.append(s)
            trials.append(r)
            epochs.append(k)
            labels.append(rec.get("label"))

    shapes = {v.shape for v in values}
    if len(shapes) > 1:
        raise ShapeMismatchError(f"epochs have differing shapes {sorted(shapes)}")
    arr = np.stack(values) if values else np.zeros((0, int(window or 0), F))
    return HierarchicalDataset(arr, subj, trials, epochs, labels, meta, r_peaks)


def save_dataset(dataset: HierarchicalDataset, path: str | Path, fmt: str = "lmts") -> None:
    """Write one file per trial with its epochs concatenated in epoch order.

    The manifest sets ``window = stride = T`` so loading reproduces the epochs.
    """
    if fmt not in ("lmts", "csv"):
        raise ValueError(f"unknown format {fmt!r}")
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "trials").mkdir(exist_ok=True)
    records = []
    for k, (trial, idx) in enumerate(dataset.by_trial.items()):
        idx = sorted(idx, key=lambda i: dataset.epoch_index[i])
        x = np.concatenate([dataset.values[i] for i in idx], axis=0)
        name = f"trials/{k:05d}.{fmt}"
        (write_lmts if fmt == "lmts" else write_csv)(root / name, x)
        lab = int(dataset.labels[idx[0]])
        records.append({
            "subject_id": str(dataset.subject_ids[idx[0]]),
            "trial_id": str(trial),
            "label": None if lab == UNLABELED else lab,
            "file": name,
        })
    manifest = {
        "sampling_rate_hz": dataset.meta.sampling_rate_hz,
        "channel_names": list(dataset.meta.channel_names),
        "n_classes": dataset.meta.n_classes,
        "window": dataset.T if len(dataset) else None,
        "stride": dataset.T if len(dataset) else None,
        "trials": records,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
