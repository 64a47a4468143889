"""Brute-force reference implementations shared by metric tests."""

import itertools

import numpy as np

from cyclevos.data import render_shape


def jaccard_oracle(pred, gt, obj):
    inter = union = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        inter += (p == obj) and (g == obj)
        union += (p == obj) or (g == obj)
    return 1.0 if union == 0 else inter / union


def boundary_oracle(mask):
    h, w = mask.shape
    out = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < h and 0 <= xx < w) or not mask[yy, xx]:
                    out.append((y, x))
                    break
    return out


def f_oracle(pred, gt, obj, r):
    bp, bg = boundary_oracle(pred == obj), boundary_oracle(gt == obj)
    if not bp and not bg:
        return 1.0
    if not bp or not bg:
        return 0.0

    def matched(a, b):
        return sum(any((y - v) ** 2 + (x - u) ** 2 <= r * r for v, u in b) for y, x in a)

    prec, rec = matched(bp, bg) / len(bp), matched(bg, bp) / len(bg)
    return 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)


def shape_fixtures():
    out = []
    for size in (5, 8, 12):
        c = (size - 1) / 2
        for kind, r, ang in itertools.product(("square", "disc", "bar", "triangle"), (1.5, size / 3), (0.0, 0.7)):
            out.append(render_shape(kind, (c, c), r, ang, size, size))
            out.append(render_shape(kind, (c - 1, c + 0.5), r, ang, size, size))
        out.append(np.zeros((size, size), bool))
        out.append(np.ones((size, size), bool))
    return out
