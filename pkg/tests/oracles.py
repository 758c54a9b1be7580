"""Independent reference implementations used to check the package.

Nothing here imports the matching code under test; each oracle takes the
slow, obvious route.
"""

from __future__ import annotations

import itertools

import numpy as np

from rxndp import font


def box_iou(a, b) -> float:
    """IoU from plain coordinate lists."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    inter = max(0.0, min(ax2, bx2) - max(ax1, bx1)) * max(0.0, min(ay2, by2) - max(ay1, by1))
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def edit_distance(a: str, b: str) -> int:
    """Full-matrix Levenshtein distance."""
    d = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    d[:, 0] = np.arange(len(a) + 1)
    d[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return int(d[-1, -1])


def text_verdict(gt: str, pred: str, threshold: float = 0.2) -> bool:
    return edit_distance(gt, pred) / max(len(gt), len(pred), 1) <= threshold


def _comp_ok(g, p, mode):
    if g.kind == "mol" or p.kind == "mol":
        return g.kind == p.kind == "mol" and box_iou(g.bbox.to_list(), p.bbox.to_list()) > 0.5
    if g.kind != p.kind:
        return False
    if mode == "hybrid" and g.content and p.content:
        return text_verdict(g.content, p.content)
    if g.bbox is not None and p.bbox is not None:
        return box_iou(g.bbox.to_list(), p.bbox.to_list()) > 0.5
    return bool(g.content and p.content) and text_verdict(g.content, p.content)


def _roles(rxn, mode):
    if mode == "soft":
        mols = [c for c in rxn.reactants + rxn.conditions if c.kind == "mol"]
        return [mols, [c for c in rxn.products if c.kind == "mol"]]
    keep = lambda cs: [c for c in cs if c.kind != "supplement"]
    return [keep(rxn.reactants), keep(rxn.conditions), keep(rxn.products)]


def reactions_match(gt, pred, mode) -> bool:
    """Try every permutation of the predicted components in each role."""
    for g_role, p_role in zip(_roles(gt, mode), _roles(pred, mode)):
        if len(g_role) != len(p_role):
            return False
        if not any(all(_comp_ok(g, p, mode) for g, p in zip(g_role, perm))
                   for perm in itertools.permutations(p_role)):
            return False
    return True


def brute_force_tp(gt, pred, mode) -> int:
    """Maximum number of matched reactions over all injective pairings."""
    ok = [[reactions_match(g, p, mode) for p in pred] for g in gt]
    n, m = len(gt), len(pred)
    best = 0
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            best = max(best, sum(ok[i][perm[i]] for i in range(n)))
    else:
        for perm in itertools.permutations(range(n), m):
            best = max(best, sum(ok[perm[j]][j] for j in range(m)))
    return best


def decode_label(mask: np.ndarray, scale: int) -> str:
    """Read the digits in a boolean mask holding exactly one label drawn with the bitmap font.

    Every digit glyph has ink in its top row, so the top edge is exact; the
    left edge is searched, and a decode only counts if re-rendering it
    reproduces the mask.
    """
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return ""
    top = ys.min()
    for dx in range(font.GLYPH_W):
        left = xs.min() - dx * scale
        if left < 0:
            break
        text = _decode_at(mask, top, left, scale)
        if not text:
            continue
        ref = font.text_mask(text, scale)
        canvas = np.zeros_like(mask)
        h, w = ref.shape
        if top + h > mask.shape[0] or left + w > mask.shape[1]:
            continue
        canvas[top:top + h, left:left + w] = ref
        if np.array_equal(canvas, mask):
            return text
    return ""


def _decode_at(mask, top, left, scale):
    h, w = font.GLYPH_H * scale, font.GLYPH_W * scale
    templates = {d: font.glyph(d) for d in "0123456789"}
    out = ""
    x = left
    while x + w <= mask.shape[1]:
        cell = mask[top:top + h, x:x + w]
        if cell.shape != (h, w) or not cell.any():
            break
        hit = [d for d, t in templates.items() if np.array_equal(t, cell[::scale, ::scale])]
        if len(hit) != 1:
            return ""
        out += hit[0]
        x += (font.GLYPH_W + 1) * scale
    return out
