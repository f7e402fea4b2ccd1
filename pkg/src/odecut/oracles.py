"""Brute-force reference evaluations in plain Python floats.

These deliberately share no code with the vectorised losses: every sum,
softmax and logarithm is spelled out with ``math`` over nested lists.
"""
from __future__ import annotations

import math
from typing import List, Sequence

Vec = Sequence[float]


def dot(a: Vec, b: Vec) -> float:
    return sum(x * y for x, y in zip(a, b))


def nce_location(query: Vec, pos: Vec, negs: Sequence[Vec], tau: float = 1.0) -> float:
    num = math.exp(dot(query, pos) / tau)
    den = num + sum(math.exp(dot(query, n) / tau) for n in negs)
    return -math.log(num / den)


def style_patchnce(fake: Sequence[Sequence[Sequence[Vec]]], pseudo: Sequence[Sequence[Sequence[Vec]]],
                   tau: float = 1.0) -> float:
    """fake/pseudo indexed [tap][batch][location] -> vector."""
    total = 0.0
    n_batch = len(fake[0])
    for tap_f, tap_p in zip(fake, pseudo):
        for img_f, img_p in zip(tap_f, tap_p):
            for i, q in enumerate(img_f):
                negs = [img_p[j] for j in range(len(img_p)) if j != i]
                total += nce_location(q, img_p[i], negs, tau)
    return total / n_batch


def hdce_query(query: Vec, pos: Vec, negs: Sequence[Vec], tau: float, hardness: float) -> float:
    n = len(negs)
    sims = [dot(pos, z) for z in negs]
    raw = [math.exp(hardness * s) for s in sims]
    z_sum = sum(raw)
    weights = [n * r / z_sum for r in raw]
    num = math.exp(dot(pos, query) / tau)
    den = num + sum(w * math.exp(s / tau) for w, s in zip(weights, sims))
    return -math.log(num / den)


def hdce(queries: Sequence[Vec], pos: Sequence[Vec], negs: Sequence[Sequence[Vec]], tau: float,
         hardness: float) -> float:
    vals = [hdce_query(q, p, n, tau, hardness) for q, p, n in zip(queries, pos, negs)]
    return sum(vals) / len(vals)


def softmax(xs: Vec) -> List[float]:
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def jsd(p: Vec, q: Vec) -> float:
    total = 0.0
    for pi, qi in zip(p, q):
        mi = 0.5 * (pi + qi)
        if pi > 0:
            total += 0.5 * pi * math.log(pi / mi)
        if qi > 0:
            total += 0.5 * qi * math.log(qi / mi)
    return total


def similarity_rows(patches: Sequence[Vec], tau: float) -> List[List[float]]:
    rows = []
    for i, a in enumerate(patches):
        rows.append(softmax([dot(a, b) / tau for j, b in enumerate(patches) if j != i]))
    return rows


def src(feat_x: Sequence[Sequence[Sequence[Vec]]], feat_gx: Sequence[Sequence[Sequence[Vec]]], tau: float) -> float:
    """Inputs indexed [tap][batch][location]; mean JSD over rows, averaged over taps."""
    per_tap = []
    for tap_x, tap_g in zip(feat_x, feat_gx):
        vals = []
        for img_x, img_g in zip(tap_x, tap_g):
            for p, q in zip(similarity_rows(img_x, tau), similarity_rows(img_g, tau)):
                vals.append(jsd(p, q))
        per_tap.append(sum(vals) / len(vals))
    return sum(per_tap) / len(per_tap)


def _sigmoid(x: float) -> float:
    return 1 / (1 + math.exp(-x)) if x >= 0 else math.exp(x) / (1 + math.exp(x))


def gan_terms(real_logits: Vec, fake_logits: Vec, mode: str):
    """(generator term, discriminator term) from flattened logit maps."""
    nr, nf = len(real_logits), len(fake_logits)
    if mode == "lsgan":
        d = sum((r - 1) ** 2 for r in real_logits) / nr + sum(f ** 2 for f in fake_logits) / nf
        g = sum((f - 1) ** 2 for f in fake_logits) / nf
    else:
        d = (-sum(math.log(_sigmoid(r)) for r in real_logits) / nr
             - sum(math.log(1 - _sigmoid(f)) for f in fake_logits) / nf)
        g = -sum(math.log(_sigmoid(f)) for f in fake_logits) / nf
    return g, d
