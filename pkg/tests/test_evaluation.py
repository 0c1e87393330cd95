import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from lmcrd.evaluation import (
    METRICS,
    MetricRecord,
    aggregate_runs,
    auprc,
    auroc,
    compute_metrics,
    metrics_document,
    project_views,
    read_view_csv,
    render_view_plot,
    validate_metrics_document,
    view_similarity_stats,
)


def _rec(**kw):
    base = dict(accuracy=0.5, precision=0.5, recall=0.5, f1=0.5, auroc=0.5, auprc=0.5, n_samples=10)
    base.update(kw)
    return MetricRecord(**base)


def test_perfect_ranking():
    r = compute_metrics([1, 0, 1, 0], [0.9, 0.1, 0.8, 0.2])
    assert all(v == 1.0 for v in r.metrics().values())


def test_anti_ranking():
    assert auroc([1, 0, 1, 0], [0.1, 0.9, 0.2, 0.8]) == 0.0


def test_rank_sum_example():
    y, s = [1, 0, 1, 0, 0], [0.9, 0.8, 0.7, 0.3, 0.1]
    assert oracles.auroc_pairs(y, s) == 5 / 6
    assert auroc(y, s) == 5 / 6


def test_ties_half_credit():
    assert auroc([1, 0], [0.5, 0.5]) == 0.5
    assert auroc([1, 0, 1, 0], [0.5, 0.5, 0.7, 0.2]) == 0.875


def test_single_class_undefined():
    r = compute_metrics([1, 1, 1], [0.9, 0.4, 0.6])
    assert r.auroc is None and r.auprc is None
    assert r.accuracy == pytest.approx(2 / 3)
    doc = metrics_document(r, "pft", "LMCRD", 1.0)
    validate_metrics_document(doc)


def test_auprc_values():
    # step-wise average precision, computed by hand
    assert auprc([1, 0, 1, 0], [0.9, 0.8, 0.7, 0.1]) == pytest.approx(0.5 * 1 + 0.5 * (2 / 3))
    # tied block counts as one threshold
    assert auprc([1, 0], [0.5, 0.5]) == pytest.approx(0.5)


def test_auprc_matches_sklearn():
    sklearn_metrics = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 30))
        y = rng.integers(0, 2, size=n)
        if y.min() == y.max():
            continue
        s = np.round(rng.uniform(size=n), 1)
        assert auprc(y, s) == pytest.approx(sklearn_metrics.average_precision_score(y, s), abs=1e-12)
        assert auroc(y, s) == pytest.approx(sklearn_metrics.roc_auc_score(y, s), abs=1e-12)


def test_input_validation():
    with pytest.raises(ValueError):
        compute_metrics([], [])
    with pytest.raises(ValueError):
        compute_metrics([0, 1], [0.5, 1.5])
    with pytest.raises(ValueError):
        compute_metrics([0, 1, 1], [0.5, 0.5])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 10)), min_size=2, max_size=20), st.randoms())
def test_permutation_invariance(pairs, rnd):
    y = [a for a, _ in pairs]
    p = [b / 10 for _, b in pairs]
    base = compute_metrics(y, p).metrics()
    rnd.shuffle(pairs)
    again = compute_metrics([a for a, _ in pairs], [b / 10 for _, b in pairs]).metrics()
    for k in METRICS:
        if base[k] is None:
            assert again[k] is None
        else:
            assert again[k] == pytest.approx(base[k], abs=1e-12)
        assert base[k] is None or 0 <= base[k] <= 1


# --- aggregation ---

def test_aggregate_single_and_pair():
    one = aggregate_runs([_rec(accuracy=0.7)])
    assert one.mean["accuracy"] == 0.7 and one.std["accuracy"] == 0.0
    two = aggregate_runs([_rec(accuracy=0.8), _rec(accuracy=1.0)])
    assert two.mean["accuracy"] == pytest.approx(0.9) and two.std["accuracy"] == pytest.approx(0.1)
    assert two.cell("accuracy") == "90.00 ± 10.00"
    with pytest.raises(ValueError):
        aggregate_runs([])


def test_aggregate_order_and_bounds():
    rng = np.random.default_rng(1)
    recs = [_rec(accuracy=float(a)) for a in rng.uniform(size=5)]
    a, b = aggregate_runs(recs), aggregate_runs(recs[::-1])
    assert a.mean == b.mean and a.std == b.std
    vals = [r.accuracy for r in recs]
    assert min(vals) <= a.mean["accuracy"] <= max(vals)


def test_aggregate_undefined_propagates():
    rep = aggregate_runs([_rec(auroc=None), _rec()])
    assert rep.mean["auroc"] is None and rep.cell("auroc") == "n/a"


# --- metrics document ---

def test_metrics_document_schema(tmp_path):
    doc = metrics_document(compute_metrics([0, 1, 1], [0.2, 0.7, 0.4], seed=3), "fft", "LMCRD-RD", 0.1)
    validate_metrics_document(json.loads(json.dumps(doc)))
    bad = dict(doc, metrics={**doc["metrics"], "accuracy": 1.5})
    with pytest.raises(jsonschema.ValidationError):
        validate_metrics_document(bad)
    with pytest.raises(jsonschema.ValidationError):
        validate_metrics_document({k: v for k, v in doc.items() if k != "seed"})


# --- projections ---

def test_pca_identity_on_centered_2d():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(20, 2)) * [3.0, 1.0]
    X -= X.mean(axis=0)
    Y = project_views(X)
    d = lambda A: np.linalg.norm(A[:, None] - A[None], axis=-1)  # noqa: E731
    assert np.allclose(d(X), d(Y), atol=1e-10)


def test_pca_collinear():
    t = np.linspace(-1, 1, 9)[:, None]
    Y = project_views(t * np.array([[1.0, 2.0, -1.0]]))
    assert np.allclose(Y[:, 1], 0.0, atol=1e-10)


def test_pca_maximal_variance():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, 10)) @ rng.normal(size=(10, 10))
    Y = project_views(X)
    cov = np.cov(X - X.mean(axis=0), rowvar=False, bias=True)
    top2 = np.sort(np.linalg.eigvalsh(cov))[-2:].sum()
    assert Y.var(axis=0).sum() == pytest.approx(top2, rel=1e-9)
    for _ in range(20):
        q, _ = np.linalg.qr(rng.normal(size=(10, 2)))
        assert ((X - X.mean(axis=0)) @ q).var(axis=0).sum() <= top2 + 1e-9


def test_pca_sign_convention():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(12, 4))
    assert np.allclose(project_views(X), project_views(X.copy()))
    assert np.allclose(project_views(X), project_views(-X) * -1)


def test_pca_needs_three_points():
    with pytest.raises(ValueError):
        project_views(np.zeros((2, 4)))


def test_external_projection(tmp_path):
    coords = np.arange(8.0).reshape(4, 2)
    np.savetxt(tmp_path / "c.csv", coords, delimiter=",")
    assert np.array_equal(project_views(np.zeros((4, 3)), "external", tmp_path / "c.csv"), coords)
    with pytest.raises(ValueError):
        project_views(np.zeros((5, 3)), "external", tmp_path / "c.csv")


def test_render_fanout_and_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    coords = rng.normal(size=(30, 2))
    colorings = {"view": [i % 2 for i in range(30)], "subject": [f"s{i % 5}" for i in range(30)],
                 "label": [i % 3 % 2 for i in range(30)]}
    paths = render_view_plot(coords, colorings, tmp_path / "plot.svg")
    images = [p for p in paths if p.suffix == ".svg"]
    assert len(images) == 3 and all(p.exists() for p in images)
    back, cols = read_view_csv(tmp_path / "plot.csv")
    assert back.shape == (30, 2) and np.array_equal(back, coords)
    assert cols["subject"] == colorings["subject"]
    png = render_view_plot(coords, {"view": colorings["view"]}, tmp_path / "p.png")
    assert png[0].read_bytes()[:4] == b"\x89PNG"
    with pytest.raises(ValueError):
        render_view_plot(coords, {"view": [0, 1]}, tmp_path / "x.png")


def test_render_io_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        render_view_plot(np.zeros((3, 2)), {"v": [0, 1, 2]}, blocker / "sub" / "p.png")


def test_view_similarity_stats():
    a = np.zeros((4, 2, 3))
    a[:, 0, 0] = 1.0
    a[:, 1, 1] = 1.0
    stats = view_similarity_stats(a, a)
    assert stats == {"across_view": 0.0, "within_view": 1.0}
