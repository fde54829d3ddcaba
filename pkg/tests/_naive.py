"""Straight-line reimplementations of the loss/center math used as
independent oracles. Everything here is plain Python loops over numpy
arrays, deliberately sharing no code with the package."""

import numpy as np


def mean_abs_diff(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    assert a.shape == b.shape
    total = 0.0
    for x, y in zip(a, b):
        total += abs(x - y)
    return total / len(a)


def recon_loss(purified_clean, clean, purified_adv, mode):
    anchor = purified_clean if mode == "ours" else clean
    return mean_abs_diff(purified_clean, clean) + mean_abs_diff(purified_adv, anchor)


def perceptual_loss(feats_pc, feats_c, feats_pa, mode):
    anchor = feats_pc if mode == "ours" else feats_c
    total = 0.0
    for a, b in zip(feats_pc, feats_c):
        total += mean_abs_diff(a, b)
    for a, b in zip(feats_pa, anchor):
        total += mean_abs_diff(a, b)
    return total


def mse_vs_label(scores, label):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    total = 0.0
    for s in scores:
        total += (s - label) ** 2
    return total / len(scores)


def lsgan_losses(scores_pc, scores_pa, mode, scores_c=None):
    if mode == "ours":
        gan_d = sum(mse_vs_label(s, 1.0) for s in scores_pc) + sum(mse_vs_label(s, 0.0) for s in scores_pa)
        gan_g = sum(mse_vs_label(s, 1.0) for s in scores_pa)
    else:
        gan_d = (sum(mse_vs_label(s, 1.0) for s in scores_c)
                 + sum(mse_vs_label(s, 0.0) for s in scores_pc)
                 + sum(mse_vs_label(s, 0.0) for s in scores_pa))
        gan_g = sum(mse_vs_label(s, 1.0) for s in scores_pc) + sum(mse_vs_label(s, 1.0) for s in scores_pa)
    return gan_d, gan_g


def feature_match_loss(taps_pc, taps_pa, mode, taps_c=None):
    if mode == "ours":
        return sum(mean_abs_diff(a, b) for a, b in zip(taps_pc, taps_pa))
    total = sum(mean_abs_diff(a, c) for a, c in zip(taps_pa, taps_c))
    total += sum(mean_abs_diff(b, c) for b, c in zip(taps_pc, taps_c))
    return total


def feature_recon_loss(feats_pc, feats_pa, feats_clean, mode):
    anchor = feats_clean if mode == "ours" else feats_pc
    return mean_abs_diff(feats_pc, feats_clean) + mean_abs_diff(feats_pa, anchor)


def cross_entropy(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    total = 0.0
    for row, label in zip(logits, labels):
        shifted = row - row.max()
        log_probs = shifted - np.log(np.exp(shifted).sum())
        total -= log_probs[int(label)]
    return total / len(labels)


def bucket_by_label(vectors, labels):
    buckets = {}
    for vec, label in zip(np.asarray(vectors, dtype=np.float64), labels):
        buckets.setdefault(int(label), []).append(vec)
    return buckets


def center_of(vectors):
    vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
    total = np.zeros_like(vectors[0])
    for v in vectors:
        total = total + v
    return total / len(vectors)


def class_losses(clean_centers, adv_buckets, adv_centers, margin, inter_mode):
    """clean_centers/adv_centers: dict k -> vector; adv_buckets: dict k -> list of vectors."""
    common = sorted(set(clean_centers) & set(adv_centers) & set(adv_buckets))
    align = sum(mean_abs_diff(clean_centers[k], adv_centers[k]) for k in common)
    intra = 0.0
    for k in common:
        rows = adv_buckets[k]
        total = 0.0
        for row in rows:
            total += mean_abs_diff(row, adv_centers[k])
        intra += total / len(rows)
    inter = 0.0
    for k in common:
        for i in common:
            if i == k:
                continue
            term = margin - mean_abs_diff(adv_centers[k], adv_centers[i])
            if inter_mode == "hinge":
                term = max(term, 0.0)
            inter += term
    return align, intra, inter


def total_loss(parts, weights):
    """parts: dict with the ten term names; weights: (l1, l2, l3, l4)."""
    l1, l2, l3, l4 = weights
    grouped = (parts["recon"] + parts["perceptual"] + parts["feature_match"]
               + parts["gan_g"] + parts["task"] + parts["feature_recon"])
    return l4 * grouped + l1 * parts["center_align"] + l2 * parts["inter_class"] + l3 * parts["intra_class"]


def two_tailed_t_p_value(a, b):
    """Reference paired t-test p-value via the regularised incomplete beta."""
    from mpmath import mp, betainc

    mp.dps = 50
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = a - b
    n = len(d)
    sd = d.std(ddof=1)
    if sd == 0:
        return 1.0 if d.mean() == 0 else 0.0
    t = d.mean() / (sd / np.sqrt(n))
    df = n - 1
    x = df / (df + t * t)
    return float(betainc(df / 2.0, 0.5, 0, x, regularized=True))
