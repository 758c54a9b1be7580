"""Synthetic reaction diagrams with exact ground truth.

Diagrams come in four layouts (single-line, multi-line, tree, cyclic). Each
molecule is a polygon glyph from a small hand-coded library; arrows, plus
signs, condition text and identifiers are drawn around them. Ground-truth
boxes are measured from the pixels actually drawn.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, ImageDraw

from . import font
from .corpus import dumps_corpus, with_indices
from .model import IDT, MOL, TXT, AnnotatedDiagram, BBox, Component, ReactionAnnotation, RxnError
from .render import encode_png, load_image

LAYOUT_ORDER = ("single-line", "multi-line", "tree", "cyclic")

VOCAB_VERSION = 1
CONDITION_VOCAB = (
    "NaH THF", "Pd/C, H2", "H2O, 25°C", "DMF, 80°C", "K2CO3, MeCN", "LiAlH4, Et2O",
    "Et3N, DCM", "TFA, DCM", "NaBH4, MeOH", "hv, 12 h", "reflux", "Cu(OAc)2",
    "BuLi, -78°C", "Pd(PPh3)4", "SOCl2", "mCPBA", "AcOH, 60°C", "KOH, EtOH",
    "DIBAL-H", "O3, Me2S", "TBAF, THF", "HCl (aq)", "Boc2O", "NBS, CCl4",
)
IDENTIFIER_VOCAB = ("1a", "1b", "2a", "2b", "3", "4", "5a", "5b", "6", "7c", "8", "9b", "10", "11a", "12", "13")

MARGIN = 40
GAP = 14
CLEAR = 6
TEXT_SCALE = 2
ARROW_MIN = 80
HEAD_LEN = 12
HEAD_HALF = 5
GLYPH_STROKE = 3
LINE_STROKE = 2
PLUS_SIZE = 14
MIN_GLYPH_SIDE = 32

DEFAULT_N = {"single-line": (1, 3), "multi-line": (2, 4), "tree": (2, 4), "cyclic": (3, 5)}
MIN_N = {"single-line": 1, "multi-line": 2, "tree": 2, "cyclic": 2}


class SynthError(RxnError):
    pass


class CanvasTooSmall(SynthError):
    pass


# glyph library: polylines in arbitrary units, y pointing down

def _ring(n, cx, cy, r, start_deg):
    pts = [(cx + r * math.cos(math.radians(start_deg + 360 * k / n)),
            cy + r * math.sin(math.radians(start_deg + 360 * k / n))) for k in range(n)]
    return pts + [pts[0]]


def _ring_on_edge(p, q, n, away):
    """Regular n-gon sharing edge p-q, on the side opposite ``away``."""
    mx, my = (p[0] + q[0]) / 2, (p[1] + q[1]) / 2
    dx, dy = q[0] - p[0], q[1] - p[1]
    s = math.hypot(dx, dy)
    nx, ny = -dy / s, dx / s
    if (away[0] - mx) * nx + (away[1] - my) * ny > 0:
        nx, ny = -nx, -ny
    apothem = s / (2 * math.tan(math.pi / n))
    cx, cy = mx + apothem * nx, my + apothem * ny
    a0 = math.atan2(p[1] - cy, p[0] - cx)
    aq = math.atan2(q[1] - cy, q[0] - cx)
    step = 2 * math.pi / n
    delta = (aq - a0 + math.pi) % (2 * math.pi) - math.pi
    sign = 1 if delta > 0 else -1
    r = math.hypot(p[0] - cx, p[1] - cy)
    pts = [(cx + r * math.cos(a0 + sign * step * k), cy + r * math.sin(a0 + sign * step * k)) for k in range(n)]
    return pts + [pts[0]]


def _build_library():
    hexa = _ring(6, 0, 0, 1, -90)
    lib = {}
    lib["cyclohexane"] = [hexa]
    inner = []
    for k in (0, 2, 4):
        a, b = hexa[k], hexa[k + 1]
        inner.append([(0.72 * a[0], 0.72 * a[1]), (0.72 * b[0], 0.72 * b[1])])
    lib["benzene"] = [hexa] + inner
    lib["cyclopentane"] = [_ring(5, 0, 0, 1, -90)]
    dx = math.sqrt(3)
    lib["naphthalene"] = [hexa, _ring(6, dx, 0, 1, -90)]
    lib["anthracene"] = [hexa, _ring(6, dx, 0, 1, -90), _ring(6, 2 * dx, 0, 1, -90)]
    lib["indane"] = [hexa, _ring_on_edge(hexa[0 + 1], hexa[2], 5, (0, 0))]
    lib["cyclohexanone"] = [hexa, [(0, -1), (0, -1.8)], [(0.2, -1.08), (0.2, -1.8)]]
    zig = [(i * 0.866, 0.0 if i % 2 == 0 else 0.5) for i in range(5)]
    lib["branched_chain"] = [zig, [zig[1], (zig[1][0], 1.5)]]
    lib["toluene"] = [hexa, [hexa[1], (hexa[1][0] + 0.866, hexa[1][1] + 0.5), (hexa[1][0] + 1.732, hexa[1][1])]]
    flat_a = _ring(6, 0, 0, 1, 0)
    flat_b = _ring(6, 3, 0, 1, 0)
    lib["biphenyl"] = [flat_a, flat_b, [(1, 0), (2, 0)]]
    square = [(0, 0), (1, 0), (1, 1), (0, 1), (0, 0)]
    lib["cyclobutane_tail"] = [square, [(1, 1), (1.7, 1.5), (2.4, 1.0)]]
    tri = _ring(3, 0, 0, 1, -90)
    lib["cyclopropane"] = [tri, [tri[1], (tri[1][0] + 0.8, tri[1][1] + 0.5)],
                           [tri[2], (tri[2][0] - 0.8, tri[2][1] + 0.5)]]

    normalized = {}
    for name, lines in lib.items():
        xs = [x for line in lines for x, _ in line]
        ys = [y for line in lines for _, y in line]
        x0, y0 = min(xs), min(ys)
        w, h = max(xs) - x0, max(ys) - y0
        normalized[name] = ([[((x - x0) / w, (y - y0) / h) for x, y in line] for line in lines], w / h)
    return normalized


GLYPHS = _build_library()
GLYPH_NAMES = tuple(sorted(GLYPHS))


def glyph_mask(shape: str, width: int, height: int) -> np.ndarray:
    """Boolean ink mask (height, width) of a library glyph."""
    lines, _ = GLYPHS[shape]
    img = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(img)
    m = GLYPH_STROKE // 2 + 1
    sx, sy = width - 1 - 2 * m, height - 1 - 2 * m
    for line in lines:
        pts = [(m + x * sx, m + y * sy) for x, y in line]
        draw.line(pts, fill=255, width=GLYPH_STROKE, joint="curve")
    return np.array(img) > 0


@dataclass(frozen=True)
class GlyphSpec:
    shape: str
    width: int
    height: int
    identifier: str | None = None


@dataclass(frozen=True)
class SpecReaction:
    reactants: tuple[int, ...]
    products: tuple[int, ...]
    conditions: tuple[str, ...] = ()


@dataclass(frozen=True)
class DiagramSpec:
    seed: int
    layout: str
    glyphs: tuple[GlyphSpec, ...]
    reactions: tuple[SpecReaction, ...]
    canvas: tuple[int, int] = (1024, 768)
    name: str = "synth"

    def __post_init__(self):
        if self.layout not in LAYOUT_ORDER:
            raise SynthError(f"unknown layout {self.layout!r}")
        used = {g for r in self.reactions for g in r.reactants + r.products}
        if not used <= set(range(len(self.glyphs))):
            raise SynthError("reaction references an unknown glyph id")
        if len(self.reactions) < MIN_N[self.layout]:
            raise SynthError(f"{self.layout} layout needs at least {MIN_N[self.layout]} reactions")


# geometry helpers

def _clip(p, q, rect):
    """Liang-Barsky: parameter interval of segment p->q inside rect, or None."""
    x0, y0, x1, y1 = rect
    dx, dy = q[0] - p[0], q[1] - p[1]
    t0, t1 = 0.0, 1.0
    for pk, qk in ((-dx, p[0] - x0), (dx, x1 - p[0]), (-dy, p[1] - y0), (dy, y1 - p[1])):
        if pk == 0:
            if qk < 0:
                return None
            continue
        t = qk / pk
        if pk < 0:
            t0 = max(t0, t)
        else:
            t1 = min(t1, t)
        if t0 > t1:
            return None
    return t0, t1


def _inflate(rect, d):
    return (rect[0] - d, rect[1] - d, rect[2] + d, rect[3] + d)


def _overlap(a, b):
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


@dataclass
class _Plan:
    width: int
    height: int
    mols: dict = field(default_factory=dict)        # glyph id -> (x, y, w, h)
    arrows: dict = field(default_factory=dict)      # reaction index -> ((x0, y0), (x1, y1))
    pluses: list = field(default_factory=list)      # (cx, cy)
    conditions: dict = field(default_factory=dict)  # reaction index -> [(text, x, y)]
    identifiers: dict = field(default_factory=dict) # glyph id -> (text, x, y)

    def rects(self):
        for x, y, w, h in self.mols.values():
            yield (x, y, x + w, y + h)
        for cx, cy in self.pluses:
            yield (cx - PLUS_SIZE // 2, cy - PLUS_SIZE // 2, cx + PLUS_SIZE // 2 + 1, cy + PLUS_SIZE // 2 + 1)
        for items in self.conditions.values():
            for text, x, y in items:
                w, h = font.text_size(text, TEXT_SCALE)
                yield (x, y, x + w, y + h)
        for text, x, y in self.identifiers.values():
            w, h = font.text_size(text, TEXT_SCALE)
            yield (x, y, x + w, y + h)

    def fits(self, rect) -> bool:
        if rect[0] < 4 or rect[1] < 4 or rect[2] > self.width - 4 or rect[3] > self.height - 4:
            return False
        grown = _inflate(rect, CLEAR)
        if any(_overlap(grown, r) for r in self.rects()):
            return False
        seg_zone = _inflate(rect, CLEAR + HEAD_HALF + 2)
        return not any(_clip(p, q, seg_zone) for p, q in self.arrows.values())

    def place_text(self, candidates, text):
        w, h = font.text_size(text, TEXT_SCALE)
        for cx, cy in candidates:
            x, y = round(cx - w / 2), round(cy - h / 2)
            if self.fits((x, y, x + w, y + h)):
                return x, y
        return None


def _text_dims(text):
    return font.text_size(text, TEXT_SCALE)


def _plan_row(plan, spec, rxn_indices, tokens, x, cy):
    """Place a horizontal row of tokens starting at x, centered on cy."""
    for tok in tokens:
        if tok[0] == "mol":
            g = spec.glyphs[tok[1]]
            plan.mols[tok[1]] = (x, round(cy - g.height / 2), g.width, g.height)
            x += g.width
        elif tok[0] == "plus":
            x += GAP
            plan.pluses.append((x + PLUS_SIZE // 2, cy))
            x += PLUS_SIZE + GAP
        else:
            ridx, length = tok[1], tok[2]
            x += GAP
            plan.arrows[ridx] = ((x, cy), (x + length, cy))
            x += length + GAP
    return x


def _arrow_len(rxn):
    widest = max((_text_dims(t)[0] for t in rxn.conditions), default=0)
    return max(ARROW_MIN, widest + 16)


def _row_width(spec, tokens):
    total = 0
    for tok in tokens:
        if tok[0] == "mol":
            total += spec.glyphs[tok[1]].width
        elif tok[0] == "plus":
            total += PLUS_SIZE + 2 * GAP
        else:
            total += tok[2] + 2 * GAP
    return total


def _joined(ids):
    out = []
    for k, gid in enumerate(ids):
        if k:
            out.append(("plus",))
        out.append(("mol", gid))
    return out


def _plan_single_line(spec, rng, plan):
    rxns = spec.reactions
    tokens = _joined(rxns[0].reactants)
    for i, rxn in enumerate(rxns):
        tokens.append(("arrow", i, _arrow_len(rxn)))
        tokens += _joined(rxn.products if i == len(rxns) - 1 else rxn.products[:1])
    width = _row_width(spec, tokens)
    slack = plan.width - 2 * MARGIN - width
    if slack < 0:
        raise CanvasTooSmall(f"row needs {width}px, canvas offers {plan.width - 2 * MARGIN}px")
    max_h = max(spec.glyphs[t[1]].height for t in tokens if t[0] == "mol")
    lo = MARGIN + max(max_h // 2, 40)
    hi = plan.height - MARGIN - max_h // 2 - 30
    cy = rng.randint(lo, max(lo, hi))
    _plan_row(plan, spec, range(len(rxns)), tokens, MARGIN + rng.randint(0, slack), cy)


def _plan_multi_line(spec, rng, plan):
    rows = []
    for i, rxn in enumerate(spec.reactions):
        tokens = _joined(rxn.reactants) + [("arrow", i, _arrow_len(rxn))] + _joined(rxn.products)
        width = _row_width(spec, tokens)
        if width > plan.width - 2 * MARGIN:
            raise CanvasTooSmall(f"row {i} needs {width}px")
        h = max(spec.glyphs[t[1]].height for t in tokens if t[0] == "mol")
        ident = any(spec.glyphs[t[1]].identifier for t in tokens if t[0] == "mol")
        rows.append((tokens, width, h, ident))
    all_h = [spec.glyphs[g].height for r in spec.reactions for g in r.reactants + r.products]
    min_pitch = math.floor(1.5 * max(all_h)) + 2
    pitches = []
    for (_, _, h0, id0), (_, _, h1, _) in zip(rows, rows[1:]):
        pitches.append(max(min_pitch, (h0 + h1) // 2 + 44 + (26 if id0 else 0)))
    top_extra = rows[0][2] // 2
    bottom_extra = rows[-1][2] // 2 + (26 if rows[-1][3] else 0)
    needed = sum(pitches) + top_extra + bottom_extra
    slack = plan.height - 2 * MARGIN - needed
    if slack < 0:
        raise CanvasTooSmall(f"{len(rows)} rows need {needed}px of height")
    cy = MARGIN + rng.randint(0, slack) + top_extra
    for k, (tokens, width, _, _) in enumerate(rows):
        x = MARGIN + rng.randint(0, plan.width - 2 * MARGIN - width)
        _plan_row(plan, spec, [k], tokens, x, cy)
        if k < len(pitches):
            cy += pitches[k]


def _plan_tree(spec, rng, plan):
    root = spec.reactions[0].reactants[0]
    prods = [r.products[0] for r in spec.reactions]
    rg = spec.glyphs[root]
    pitch = [spec.glyphs[p].height + 36 + (26 if spec.glyphs[p].identifier else 0) for p in prods]
    column_h = sum(pitch) - 36
    if column_h > plan.height - 2 * MARGIN:
        raise CanvasTooSmall(f"{len(prods)} branches need {column_h}px of height")
    max_pw = max(spec.glyphs[p].width for p in prods)
    col_x = plan.width - MARGIN - max_pw - rng.randint(0, 60)
    root_x = MARGIN + rng.randint(0, 60)
    if col_x - (root_x + rg.width) < 260:
        raise CanvasTooSmall("not enough horizontal room for the branch arrows")
    root_cy = plan.height // 2 + rng.randint(-30, 30)
    plan.mols[root] = (root_x, root_cy - rg.height // 2, rg.width, rg.height)
    y = (plan.height - column_h) // 2
    for j, p in enumerate(prods):
        g = spec.glyphs[p]
        plan.mols[p] = (col_x, y, g.width, g.height)
        y += pitch[j]
    k = len(prods)
    sep = 10
    for j, p in enumerate(prods):
        px, py, pw, ph = plan.mols[p]
        start = (root_x + rg.width + GAP, root_cy + round((j - (k - 1) / 2) * sep))
        end = (px - GAP, py + ph // 2)
        plan.arrows[j] = (start, end)


def _plan_cyclic(spec, rng, plan):
    mols = [r.reactants[0] for r in spec.reactions]
    n = len(mols)
    max_w = max(spec.glyphs[m].width for m in mols)
    max_h = max(spec.glyphs[m].height for m in mols)
    scale = rng.uniform(0.85, 1.0)
    rx = ((plan.width - 2 * MARGIN - max_w) / 2 - 10) * scale
    ry = ((plan.height - 2 * MARGIN - max_h) / 2 - 34) * scale
    if rx < 80 or ry < 60:
        raise CanvasTooSmall("canvas too small for a cycle")
    cx, cy = plan.width / 2, plan.height / 2
    rot = rng.uniform(-0.2, 0.2)
    for i, m in enumerate(mols):
        a = -math.pi / 2 + 2 * math.pi * i / n + rot
        g = spec.glyphs[m]
        plan.mols[m] = (round(cx + rx * math.cos(a) - g.width / 2), round(cy + ry * math.sin(a) - g.height / 2),
                        g.width, g.height)
    rects = {m: (x, y, x + w, y + h) for m, (x, y, w, h) in plan.mols.items()}
    ms = list(rects)
    for i in range(len(ms)):
        for j in range(i + 1, len(ms)):
            if _overlap(_inflate(rects[ms[i]], 30), rects[ms[j]]):
                raise CanvasTooSmall("cycle members overlap")
    for i, rxn in enumerate(spec.reactions):
        a, b = rxn.reactants[0], rxn.products[0]
        pa = ((rects[a][0] + rects[a][2]) / 2, (rects[a][1] + rects[a][3]) / 2)
        pb = ((rects[b][0] + rects[b][2]) / 2, (rects[b][1] + rects[b][3]) / 2)
        if n == 2:
            dx, dy = pb[0] - pa[0], pb[1] - pa[1]
            d = math.hypot(dx, dy)
            ox, oy = -dy / d * 18, dx / d * 18
            pa, pb = (pa[0] + ox, pa[1] + oy), (pb[0] + ox, pb[1] + oy)
        ta = _clip(pa, pb, _inflate(rects[a], GAP))
        tb = _clip(pa, pb, _inflate(rects[b], GAP))
        if ta is None or tb is None or tb[0] - ta[1] <= 0:
            raise CanvasTooSmall("cycle arrow collapsed")
        t0, t1 = ta[1], tb[0]
        start = (round(pa[0] + (pb[0] - pa[0]) * t0), round(pa[1] + (pb[1] - pa[1]) * t0))
        end = (round(pa[0] + (pb[0] - pa[0]) * t1), round(pa[1] + (pb[1] - pa[1]) * t1))
        if math.dist(start, end) < 50:
            raise CanvasTooSmall("cycle arrow too short")
        for m, r in rects.items():
            if m not in (a, b) and _clip(start, end, _inflate(r, GAP)):
                raise CanvasTooSmall("cycle arrow crosses a molecule")
        plan.arrows[i] = (start, end)


def _place_labels(spec, plan):
    for gid, g in enumerate(spec.glyphs):
        if not g.identifier or gid not in plan.mols:
            continue
        x, y, w, h = plan.mols[gid]
        tw, th = _text_dims(g.identifier)
        cands = [(x + w / 2, y + h + 10 + th / 2), (x + w / 2, y - 10 - th / 2)]
        spot = plan.place_text(cands, g.identifier)
        if spot is not None:
            plan.identifiers[gid] = (g.identifier, *spot)
    for i, rxn in enumerate(spec.reactions):
        if not rxn.conditions or i not in plan.arrows:
            continue
        (x0, y0), (x1, y1) = plan.arrows[i]
        d = math.hypot(x1 - x0, y1 - y0)
        nx, ny = -(y1 - y0) / d, (x1 - x0) / d
        if ny > 0 or (ny == 0 and nx > 0):
            nx, ny = -nx, -ny  # prefer the side above the arrow
        placed = []
        for text in rxn.conditions:
            tw, th = _text_dims(text)
            cands = []
            for t in (0.5, 0.6, 0.4, 0.7, 0.3):
                px, py = x0 + (x1 - x0) * t, y0 + (y1 - y0) * t
                for side in (1, -1):
                    for off in (8, 16, 26, 38, 52):
                        reach = off + abs(nx) * tw / 2 + abs(ny) * th / 2 + HEAD_HALF
                        cands.append((px + side * nx * reach, py + side * ny * reach))
            spot = plan.place_text(cands, text)
            if spot is not None:
                placed.append((text, *spot))
                plan.conditions[i] = list(placed)


def plan_layout(spec: DiagramSpec) -> _Plan:
    w, h = spec.canvas
    rng = random.Random(f"plan:{spec.seed}:{spec.layout}:{spec.name}")
    plan = _Plan(w, h)
    {"single-line": _plan_single_line, "multi-line": _plan_multi_line,
     "tree": _plan_tree, "cyclic": _plan_cyclic}[spec.layout](spec, rng, plan)
    _place_labels(spec, plan)
    return plan


def _pick_glyph(rng, min_size, max_size, max_width, identifier=None):
    shape = rng.choice(GLYPH_NAMES)
    _, aspect = GLYPHS[shape]
    h = rng.randint(min_size, max_size)
    w = round(h * aspect)
    if w > max_width:
        h = round(h * max_width / w)
        w = max_width
    w, h = max(w, MIN_GLYPH_SIDE), max(h, MIN_GLYPH_SIDE)
    return GlyphSpec(shape, w, h, identifier)


def _topology(layout, n, rng, extra_rate):
    """Return (glyph count, reactions as (reactants, products)) for a layout."""
    if layout == "single-line":
        main = list(range(n + 1))
        nxt = n + 1
        rxns = []
        for i in range(n):
            reactants, products = [main[i]], [main[i + 1]]
            if i == 0 and rng.random() < extra_rate:
                reactants.insert(0, nxt)
                nxt += 1
            if i == n - 1 and rng.random() < extra_rate:
                products.append(nxt)
                nxt += 1
            rxns.append((reactants, products))
        return nxt, rxns
    if layout == "multi-line":
        nxt, rxns = 0, []
        for _ in range(n):
            r = list(range(nxt, nxt + 1 + (rng.random() < extra_rate)))
            nxt += len(r)
            p = list(range(nxt, nxt + 1 + (rng.random() < extra_rate / 2)))
            nxt += len(p)
            rxns.append((r, p))
        return nxt, rxns
    if layout == "tree":
        return n + 1, [([0], [j + 1]) for j in range(n)]
    return n, [([i], [(i + 1) % n]) for i in range(n)]


def generate_spec(seed: int, layout: str, n_reactions: int | None = None, *,
                  canvas: tuple[int, int] = (1024, 768), min_size: int = 44, max_size: int = 90,
                  max_width: int = 150, identifier_rate: float = 0.35, condition_rate: float = 0.9,
                  extra_rate: float = 0.3, name: str | None = None, attempts: int = 60) -> DiagramSpec:
    """Draw a random diagram spec that realizes ``layout``; deterministic in ``seed``."""
    if layout not in LAYOUT_ORDER:
        raise SynthError(f"unknown layout {layout!r}")
    if n_reactions is not None and n_reactions < MIN_N[layout]:
        raise SynthError(f"{layout} layout needs at least {MIN_N[layout]} reactions, got {n_reactions}")
    rng = random.Random(f"spec:{seed}:{layout}:{n_reactions}")
    name = name or f"synth_{layout}_{seed}"
    last_error = None
    for attempt in range(attempts):
        if n_reactions is not None:
            n = n_reactions
        else:
            lo, hi = DEFAULT_N[layout]
            n = rng.randint(lo, max(lo, hi - attempt // 10))
        n_glyphs, topo = _topology(layout, n, rng, extra_rate)
        idents = rng.sample(IDENTIFIER_VOCAB, k=len(IDENTIFIER_VOCAB))
        glyphs = tuple(
            _pick_glyph(rng, min_size, max_size, max_width,
                        idents[g % len(idents)] if rng.random() < identifier_rate else None)
            for g in range(n_glyphs))
        reactions = tuple(
            SpecReaction(tuple(r), tuple(p),
                         (rng.choice(CONDITION_VOCAB),) if rng.random() < condition_rate else ())
            for r, p in topo)
        spec = DiagramSpec(seed, layout, glyphs, reactions, canvas, name)
        try:
            plan_layout(spec)
        except CanvasTooSmall as exc:
            last_error = exc
            continue
        return spec
    raise SynthError(f"could not realize a {layout} diagram with the given parameters: {last_error}")


def _tight(mask: np.ndarray, x: int, y: int):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return x + cols[0], y + rows[0], x + cols[-1] + 1, y + rows[-1] + 1


def _stamp(arr, mask, x, y):
    h, w = mask.shape
    arr[y:y + h, x:x + w][mask] = 0


def render_spec(spec: DiagramSpec) -> tuple[AnnotatedDiagram, bytes]:
    """Draw the diagram; return its ground truth and PNG bytes."""
    plan = plan_layout(spec)
    W, H = spec.canvas
    arr = np.full((H, W), 255, dtype=np.uint8)

    mol_box = {}
    for gid, (x, y, w, h) in plan.mols.items():
        g = spec.glyphs[gid]
        mask = glyph_mask(g.shape, w, h)
        _stamp(arr, mask, x, y)
        mol_box[gid] = BBox.from_pixels(*_tight(mask, x, y), W, H)

    text_box = {}
    for ridx, items in plan.conditions.items():
        for text, x, y in items:
            mask = font.text_mask(text, TEXT_SCALE)
            _stamp(arr, mask, x, y)
            text_box[(ridx, text)] = BBox.from_pixels(*_tight(mask, x, y), W, H)
    ident_box = {}
    for gid, (text, x, y) in plan.identifiers.items():
        mask = font.text_mask(text, TEXT_SCALE)
        _stamp(arr, mask, x, y)
        ident_box[gid] = BBox.from_pixels(*_tight(mask, x, y), W, H)

    img = Image.fromarray(arr, "L")
    draw = ImageDraw.Draw(img)
    for (x0, y0), (x1, y1) in plan.arrows.values():
        d = math.hypot(x1 - x0, y1 - y0)
        ux, uy = (x1 - x0) / d, (y1 - y0) / d
        bx, by = x1 - ux * HEAD_LEN, y1 - uy * HEAD_LEN
        draw.line([(x0, y0), (bx, by)], fill=0, width=LINE_STROKE)
        draw.polygon([(x1, y1), (bx - uy * HEAD_HALF, by + ux * HEAD_HALF),
                      (bx + uy * HEAD_HALF, by - ux * HEAD_HALF)], fill=0)
    half = PLUS_SIZE // 2
    for cx, cy in plan.pluses:
        draw.line([(cx - half, cy), (cx + half, cy)], fill=0, width=LINE_STROKE)
        draw.line([(cx, cy - half), (cx, cy + half)], fill=0, width=LINE_STROKE)

    def role(ids):
        comps = []
        for gid in ids:
            comps.append(Component(MOL, bbox=mol_box[gid]))
            if gid in ident_box:
                comps.append(Component(IDT, content=plan.identifiers[gid][0], bbox=ident_box[gid]))
        return tuple(comps)

    reactions = []
    for i, rxn in enumerate(spec.reactions):
        conds = tuple(Component(TXT, content=text, bbox=text_box[(i, text)])
                      for text, _, _ in plan.conditions.get(i, []))
        reactions.append(ReactionAnnotation(role(rxn.reactants), conds, role(rxn.products)))

    diagram = AnnotatedDiagram(f"images/{spec.name}.png", W, H,
                               tuple(mol_box[g] for g in sorted(mol_box)), tuple(reactions), spec.layout)
    return with_indices(diagram), encode_png(img)


def diagram_seed(seed: int, layout: str, ordinal: int) -> int:
    digest = hashlib.sha256(f"{seed}:{layout}:{ordinal}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def iter_corpus(seed: int, per_layout_count: int, layouts: Sequence[str] = LAYOUT_ORDER,
                **spec_params) -> Iterator[tuple[AnnotatedDiagram, bytes]]:
    """Yield (diagram, png) pairs of a balanced corpus without touching the disk."""
    if per_layout_count < 1:
        raise SynthError("per_layout_count must be >= 1")
    for layout in layouts:
        for k in range(per_layout_count):
            spec = generate_spec(diagram_seed(seed, layout, k), layout,
                                 name=f"synth_s{seed}_{layout}_{k:04d}", **spec_params)
            yield render_spec(spec)


@dataclass(frozen=True)
class GeneratedCorpus:
    diagrams: tuple[AnnotatedDiagram, ...]
    corpus_path: Path
    digest: str


def generate_corpus(seed: int, per_layout_count: int, out_dir, **spec_params) -> GeneratedCorpus:
    """Write images/*.png, corpus.json and manifest.json under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    diagrams, manifest = [], {}
    for diagram, png in iter_corpus(seed, per_layout_count, **spec_params):
        (out / diagram.image).write_bytes(png)
        manifest[diagram.image] = hashlib.sha256(png).hexdigest()
        diagrams.append(diagram)
    corpus_text = dumps_corpus(diagrams)
    corpus_path = out / "corpus.json"
    corpus_path.write_text(corpus_text, encoding="utf-8")
    manifest["corpus.json"] = hashlib.sha256(corpus_text.encode("utf-8")).hexdigest()
    manifest_text = json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    (out / "manifest.json").write_text(manifest_text, encoding="utf-8")
    return GeneratedCorpus(tuple(diagrams), corpus_path, hashlib.sha256(manifest_text.encode()).hexdigest())


def salt_and_pepper(image, rate: float, seed: int = 0) -> bytes:
    """Flip a fraction ``rate`` of pixels to pure black or white; returns PNG bytes."""
    arr = np.array(load_image(image).convert("L"))
    rng = np.random.default_rng(seed)
    hit = rng.random(arr.shape) < rate
    arr[hit] = np.where(rng.random(int(hit.sum())) < 0.5, 0, 255).astype(np.uint8)
    return encode_png(Image.fromarray(arr, "L"))
