"""Classification metrics, multi-seed aggregation and view projections."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

METRICS = ("accuracy", "precision", "recall", "f1", "auroc", "auprc")

METRICS_SCHEMA = {
    "type": "object",
    "required": ["protocol", "variant", "fraction", "seed", "metrics", "n_samples"],
    "properties": {
        "protocol": {"type": "string", "enum": ["pft", "fft"]},
        "variant": {"type": "string", "enum": ["LMCRD", "LMCRD-LMC", "LMCRD-RD", "LMCRD-0"]},
        "fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "seed": {"type": "integer"},
        "n_samples": {"type": "integer", "minimum": 1},
        "metrics": {
            "type": "object",
            "required": list(METRICS),
            "properties": {
                m: {"type": ["number", "null"], "minimum": 0, "maximum": 1} for m in METRICS
            },
            "additionalProperties": False,
        },
    },
}


@dataclass
class MetricRecord:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auroc: float | None
    auprc: float | None
    n_samples: int
    seed: int = 0

    def metrics(self) -> dict[str, float | None]:
        return {m: getattr(self, m) for m in METRICS}


@dataclass
class RunReport:
    records: list[MetricRecord]
    mean: dict[str, float | None] = field(default_factory=dict)
    std: dict[str, float | None] = field(default_factory=dict)

    def cell(self, metric: str, scale: float = 100.0) -> str:
        if self.mean[metric] is None:
            return "n/a"
        return f"{scale * self.mean[metric]:.2f} ± {scale * self.std[metric]:.2f}"


def auroc(y_true, y_score) -> float | None:
    """Mann-Whitney rank-sum AUROC; tied scores get half credit."""
    y = np.asarray(y_true).astype(int)
    s = np.asarray(y_score, dtype=np.float64)
    n_pos, n_neg = int((y == 1).sum()), int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def auprc(y_true, y_score) -> float | None:
    """Average precision: sum over score thresholds of (R_k - R_{k-1}) * P_k."""
    y = np.asarray(y_true).astype(int)
    s = np.asarray(y_score, dtype=np.float64)
    n_pos = int((y == 1).sum())
    if n_pos == 0 or n_pos == len(y):
        return None
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each block of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s_sorted)), len(s) - 1]
    tp = np.cumsum(y_sorted)[ends]
    predicted = ends + 1
    precision = tp / predicted
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def confusion(y_true, y_pred, n_classes: int = 2) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(np.asarray(y_true).astype(int), np.asarray(y_pred).astype(int)):
        cm[t, p] += 1
    return cm


def macro_prf(cm: np.ndarray) -> tuple[float, float, float]:
    """Macro precision, recall, F1; a 0/0 ratio counts as 0."""
    tp = np.diag(cm).astype(float)
    pred = cm.sum(axis=0).astype(float)
    true = cm.sum(axis=1).astype(float)
    p = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    r = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    f = np.divide(2 * p * r, p + r, out=np.zeros_like(tp), where=(p + r) > 0)
    return float(p.mean()), float(r.mean()), float(f.mean())


def compute_metrics(y_true, y_prob, threshold: float = 0.5, seed: int = 0) -> MetricRecord:
    y = np.asarray(y_true).astype(int)
    p = np.asarray(y_prob, dtype=np.float64)
    if y.shape != p.shape or y.ndim != 1 or len(y) == 0:
        raise ValueError("y_true and y_prob must be equal-length non-empty vectors")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    pred = (p >= threshold).astype(int)
    cm = confusion(y, pred, 2)
    precision, recall, f1 = macro_prf(cm)
    return MetricRecord(
        accuracy=float((pred == y).mean()),
        precision=precision, recall=recall, f1=f1,
        auroc=auroc(y, p), auprc=auprc(y, p),
        n_samples=int(len(y)), seed=seed,
    )


def aggregate_runs(records: Sequence[MetricRecord]) -> RunReport:
    """Mean and population std per metric across seeds."""
    records = list(records)
    if not records:
        raise ValueError("cannot aggregate zero records")
    report = RunReport(records)
    for m in METRICS:
        vals = [getattr(r, m) for r in records]
        if any(v is None for v in vals):
            report.mean[m] = report.std[m] = None
            continue
        arr = np.asarray(vals, dtype=np.float64)
        report.mean[m] = float(math.fsum(arr) / len(arr))
        report.std[m] = float(np.sqrt(np.mean((arr - report.mean[m]) ** 2)))
    return report


def metrics_document(record: MetricRecord, protocol: str, variant: str, fraction: float) -> dict:
    return {
        "protocol": protocol,
        "variant": variant,
        "fraction": float(fraction),
        "seed": int(record.seed),
        "metrics": record.metrics(),
        "n_samples": int(record.n_samples),
    }


def validate_metrics_document(doc: dict) -> None:
    import jsonschema

    jsonschema.validate(doc, METRICS_SCHEMA)


# --- projections and plots --------------------------------------------------


def project_views(view_reps, method: str = "pca", coords_path: str | Path | None = None) -> np.ndarray:
    """2-D coordinates: top-2 principal components, or precomputed ones.

    PCA signs are fixed so each component's largest-magnitude loading is positive.
    """
    X = np.asarray(view_reps, dtype=np.float64)
    if method == "external":
        if coords_path is None:
            raise ValueError("external projection needs a coordinates file")
        coords = np.loadtxt(coords_path, delimiter=",", ndmin=2)
        if coords.shape != (len(X), 2):
            raise ValueError(f"{coords_path}: expected {len(X)}x2 coordinates, got {coords.shape}")
        return coords
    if method != "pca":
        raise ValueError(f"unknown projection method {method!r}")
    if X.ndim != 2 or X.shape[0] < 3:
        raise ValueError("PCA projection needs an N x D matrix with N >= 3")
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros((2 - comps.shape[0], X.shape[1]))])
    for k in range(2):
        lead = np.argmax(np.abs(comps[k]))
        if comps[k, lead] < 0:
            comps[k] = -comps[k]
    return Xc @ comps.T


def render_view_plot(coords, colorings: dict[str, Sequence], out_path: str | Path) -> list[Path]:
    """One scatter image per coloring plus ``<stem>.csv`` with coordinates and colors.

    The image format follows the suffix of ``out_path`` (``.png`` or ``.svg``).
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    coords = np.asarray(coords, dtype=np.float64)
    out = Path(out_path)
    suffix = out.suffix if out.suffix in (".png", ".svg") else ".png"
    stem = out.with_suffix("")
    for name, values in colorings.items():
        if len(values) != len(coords):
            raise ValueError(f"coloring {name!r} has {len(values)} entries for {len(coords)} points")
    written = []
    try:
        stem.parent.mkdir(parents=True, exist_ok=True)
        for name, values in colorings.items():
            fig, ax = plt.subplots(figsize=(4.5, 4))
            labels = np.asarray([str(v) for v in values])
            for lab in sorted(set(labels)):
                sel = labels == lab
                ax.scatter(coords[sel, 0], coords[sel, 1], s=6, label=lab)
            ax.set_title(f"views colored by {name}")
            if len(set(labels)) <= 12:
                ax.legend(fontsize=6, markerscale=2)
            path = Path(f"{stem}_{name}{suffix}")
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(path)
        csv_path = Path(f"{stem}.csv")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", *colorings])
            for k, (x, y) in enumerate(coords):
                w.writerow([repr(float(x)), repr(float(y)), *(colorings[c][k] for c in colorings)])
        written.append(csv_path)
    except OSError as exc:
        raise OSError(f"failed writing view plot under {stem}: {exc}") from exc
    return written


def read_view_csv(path: str | Path) -> tuple[np.ndarray, dict[str, list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    coords = np.array([[float(r[0]), float(r[1])] for r in body]).reshape(len(body), 2)
    colorings = {name: [r[2 + k] for r in body] for k, name in enumerate(header[2:])}
    return coords, colorings


def view_similarity_stats(g1_pooled, g2_pooled) -> dict[str, float]:
    """Mean across-view cosine (branch 1) vs mean within-view across-branch cosine.

    Inputs are ``(N, V, d)`` time-pooled view representations of two branches.
    """
    def unit(a):
        a = np.asarray(a, dtype=np.float64)
        return a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)

    a, b = unit(g1_pooled), unit(g2_pooled)
    V = a.shape[1]
    across = [np.mean(np.sum(a[:, v] * a[:, w], axis=-1)) for v in range(V) for w in range(V) if v < w]
    within = [np.mean(np.sum(a[:, v] * b[:, v], axis=-1)) for v in range(V)]
    return {"across_view": float(np.mean(across)), "within_view": float(np.mean(within))}
