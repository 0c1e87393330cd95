"""Direct-summation reference implementations used only by the tests.

Plain Python loops over float64 numpy arrays; nothing here is shared with the
vectorized code under test.
"""

import math

import numpy as np


def cos(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def sim(a, b, kind):
    return cos(a, b) if kind == "cosine" else float(np.dot(a, b))


def _grouped(reps_a, reps_b, ids, tau, kind, include_self_pos, standard):
    M = len(ids)
    total, anchors = 0.0, 0
    for i in range(M):
        pos = [j for j in range(M) if ids[j] == ids[i] and (include_self_pos or j != i)]
        neg = [j for j in range(M) if ids[j] != ids[i]]
        if not pos or not neg:
            continue
        anchors += 1
        neg_sum = sum(math.exp(sim(reps_a[i], reps_b[k], kind) / tau) for k in neg)
        for j in pos:
            num = math.exp(sim(reps_a[i], reps_b[j], kind) / tau)
            den = neg_sum + (num if standard else 0.0)
            total += math.log(num / den)
    return 0.0 if anchors == 0 else -total / anchors


def subject_loss(h1, subjects, tau=0.1, kind="cosine", standard=False):
    z = h1.mean(axis=1)
    return _grouped(z, z, subjects, tau, kind, False, standard)


def trial_loss(h1, trials, tau=0.1, kind="cosine", standard=False):
    z = h1.mean(axis=1)
    return _grouped(z, z, trials, tau, kind, False, standard)


def epoch_loss(h1, h2, standard=False):
    a, b = h1.mean(axis=1), h2.mean(axis=1)
    M = len(a)
    total = 0.0
    for i in range(M):
        num = math.exp(float(a[i] @ b[i]))
        den = 0.0
        for j in range(M):
            if j != i:
                den += math.exp(float(a[i] @ a[j])) + math.exp(float(a[i] @ b[j]))
        if standard:
            den += num
        total += math.log(num / den)
    return -total / M


def temporal_loss(h1, h2, standard=False):
    M, T, _ = h1.shape
    total = 0.0
    for t in range(T):
        for i in range(M):
            num = math.exp(float(h1[i, t] @ h2[i, t]))
            den = 0.0
            for tm in range(T):
                if tm != t:
                    den += math.exp(float(h1[i, t] @ h1[i, tm])) + math.exp(float(h1[i, t] @ h2[i, tm]))
            if standard:
                den += num
            total += math.log(num / den)
    return -total / (T * M)


def inter_view_loss(g1, g2, kind="cosine", standard=False):
    V = g1.shape[2]
    agg1 = [g1[:, :, v, :].mean(axis=(0, 1)) for v in range(V)]
    agg2 = [g2[:, :, v, :].mean(axis=(0, 1)) for v in range(V)]
    total = 0.0
    for v in range(V):
        num = math.exp(sim(agg1[v], agg2[v], kind))
        den = sum(math.exp(sim(agg1[v], agg2[w], kind)) for w in range(V) if w != v)
        if standard:
            den += num
        total += math.log(num / den)
    return -total / V


def intra_view_loss(g1, g2, subjects, tau=0.1, kind="cosine", standard=False):
    M, _, V, _ = g1.shape
    p1 = g1.mean(axis=1)
    p2 = g2.mean(axis=1)
    total, anchors = 0.0, 0
    for v in range(V):
        for i in range(M):
            pos = [j for j in range(M) if subjects[j] == subjects[i]]
            neg = [j for j in range(M) if subjects[j] != subjects[i]]
            if not neg:
                continue
            anchors += 1
            den = sum(math.exp(sim(p1[i, v], p2[k, v], kind) / tau) for k in neg)
            for j in pos:
                num = math.exp(sim(p1[i, v], p2[j, v], kind) / tau)
                total += math.log(num / (den + (num if standard else 0.0)))
    return 0.0 if anchors == 0 else -total / anchors


def auroc_pairs(y, s):
    """Fraction of correctly ordered (positive, negative) pairs, ties worth 1/2."""
    pos = [si for yi, si in zip(y, s) if yi == 1]
    neg = [si for yi, si in zip(y, s) if yi == 0]
    score = 0.0
    for p in pos:
        for n in neg:
            score += 1.0 if p > n else 0.5 if p == n else 0.0
    return score / (len(pos) * len(neg))


def macro_f1(y, pred):
    f1s = []
    for c in (0, 1):
        tp = sum(1 for a, b in zip(y, pred) if a == c and b == c)
        fp = sum(1 for a, b in zip(y, pred) if a != c and b == c)
        fn = sum(1 for a, b in zip(y, pred) if a == c and b != c)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * p * r / (p + r) if p + r else 0.0)
    return sum(f1s) / 2


def random_batch(rng, M=None, T=None, C=None, V=None, d=None):
    """Random branch tensors with a few subjects, each holding a few trials."""
    M = M or int(rng.integers(2, 9))
    T = T or int(rng.integers(2, 17))
    C = C or int(rng.integers(1, 9))
    V = V or int(rng.integers(2, 4))
    d = d or int(rng.integers(1, 9))
    n_subj = int(rng.integers(1, min(M, 4) + 1))
    subjects = [f"s{int(rng.integers(n_subj))}" for _ in range(M)]
    trials = [f"{s}-r{int(rng.integers(2))}" for s in subjects]
    h1 = rng.normal(size=(M, T, C)) * 0.7
    h2 = h1 + 0.3 * rng.normal(size=(M, T, C))
    g1 = rng.normal(size=(M, T, V, d))
    g2 = g1 + 0.5 * rng.normal(size=(M, T, V, d))
    return h1, h2, g1, g2, subjects, trials
