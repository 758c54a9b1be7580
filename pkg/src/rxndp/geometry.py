"""IoU, text matching, reaction-instance matching and corpus metrics."""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .model import (
    BBox, Component, MatchReport, ReactionAnnotation, AnnotatedDiagram, SUPPLEMENT,
    normalize_text, ratios,
)

SOFT = "soft"
HARD = "hard"
HYBRID = "hybrid"
MODES = (SOFT, HARD, HYBRID)


@dataclass(frozen=True)
class MatchMode:
    mode: str = SOFT
    iou_threshold: float = 0.5
    edit_ratio_threshold: float = 0.2

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown match mode {self.mode!r}")
        for t in (self.iou_threshold, self.edit_ratio_threshold):
            if not 0 < t <= 1:
                raise ValueError(f"thresholds must lie in (0, 1], got {t}")


def as_mode(mode: MatchMode | str) -> MatchMode:
    return mode if isinstance(mode, MatchMode) else MatchMode(mode)


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...] = ()
    unmatched_gt: tuple[int, ...] = ()
    unmatched_pred: tuple[int, ...] = ()


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def edit_ratio(gt: str, pred: str) -> float:
    return levenshtein(gt, pred) / max(len(gt), len(pred), 1)


def text_match(gt: str, pred: str, threshold: float = 0.2) -> bool:
    return edit_ratio(normalize_text(gt), normalize_text(pred)) <= threshold


def max_bipartite_matching(n_left: int, n_right: int, adjacent: Callable[[int, int], bool]) -> list[tuple[int, int]]:
    """Maximum-cardinality matching by augmenting paths (Kuhn).

    Vertices are visited in ascending order, so the result is deterministic.
    """
    adj = [[j for j in range(n_right) if adjacent(i, j)] for i in range(n_left)]
    match_right = [-1] * n_right

    def augment(u, seen):
        for v in adj[u]:
            if seen[v]:
                continue
            seen[v] = True
            if match_right[v] == -1 or augment(match_right[v], seen):
                match_right[v] = u
                return True
        return False

    for u in range(n_left):
        if adj[u]:
            augment(u, [False] * n_right)
    return sorted((u, v) for v, u in enumerate(match_right) if u != -1)


def _component_matches(g: Component, p: Component, mode: MatchMode) -> bool:
    if g.is_mol or p.is_mol:
        if not (g.is_mol and p.is_mol) or g.bbox is None or p.bbox is None:
            return False
        return iou(g.bbox, p.bbox) > mode.iou_threshold
    if g.kind != p.kind:
        return False
    by_box = g.bbox is not None and p.bbox is not None
    by_text = bool(g.content) and bool(p.content)
    if mode.mode == HYBRID and by_text:
        return text_match(g.content, p.content, mode.edit_ratio_threshold)
    if by_box:
        return iou(g.bbox, p.bbox) > mode.iou_threshold
    if by_text:
        return text_match(g.content, p.content, mode.edit_ratio_threshold)
    return False


def _roles_for(rxn: ReactionAnnotation, mode: MatchMode) -> list[list[Component]]:
    if mode.mode == SOFT:
        mols = lambda cs: [c for c in cs if c.is_mol]
        return [mols(rxn.reactants) + mols(rxn.conditions), mols(rxn.products)]
    keep = lambda cs: [c for c in cs if c.kind != SUPPLEMENT]
    return [keep(rxn.reactants), keep(rxn.conditions), keep(rxn.products)]


def reaction_matches(gt: ReactionAnnotation, pred: ReactionAnnotation, mode: MatchMode | str = SOFT) -> bool:
    mode = as_mode(mode)
    for g_role, p_role in zip(_roles_for(gt, mode), _roles_for(pred, mode)):
        if len(g_role) != len(p_role):
            return False
        pairs = max_bipartite_matching(
            len(g_role), len(p_role), lambda i, j: _component_matches(g_role[i], p_role[j], mode))
        if len(pairs) != len(g_role):
            return False
    return True


def evaluate(gt: Sequence[ReactionAnnotation], pred: Sequence[ReactionAnnotation],
             mode: MatchMode | str = SOFT) -> tuple[Assignment, int, int, int]:
    mode = as_mode(mode)
    edges = {(i, j) for i in range(len(gt)) for j in range(len(pred))
             if reaction_matches(gt[i], pred[j], mode)}
    pairs = max_bipartite_matching(len(gt), len(pred), lambda i, j: (i, j) in edges)
    matched_gt = {i for i, _ in pairs}
    matched_pred = {j for _, j in pairs}
    assignment = Assignment(
        tuple(pairs),
        tuple(i for i in range(len(gt)) if i not in matched_gt),
        tuple(j for j in range(len(pred)) if j not in matched_pred),
    )
    return assignment, len(pairs), len(assignment.unmatched_pred), len(assignment.unmatched_gt)


@dataclass(frozen=True)
class DiagramCounts:
    tp: int
    fp: int
    fn: int
    layout: str = "unknown"


def aggregate(counts: Iterable[DiagramCounts | tuple], mode: MatchMode | str = SOFT,
              macro: bool = False) -> MatchReport:
    """Micro-aggregate per-diagram counts (or macro-average per-diagram P/R/F1)."""
    mode_name = as_mode(mode).mode
    items = [c if isinstance(c, DiagramCounts) else DiagramCounts(*c) for c in counts]
    tp = sum(c.tp for c in items)
    fp = sum(c.fp for c in items)
    fn = sum(c.fn for c in items)
    per_layout: dict[str, tuple[int, int, int]] = {}
    for c in items:
        t, f, n = per_layout.get(c.layout, (0, 0, 0))
        per_layout[c.layout] = (t + c.tp, f + c.fp, n + c.fn)
    report = MatchReport.from_counts(mode_name, tp, fp, fn, per_layout)
    if macro and items:
        scores = [ratios(c.tp, c.fp, c.fn) for c in items]
        p, r, f1 = (statistics.fmean(s[k] for s in scores) for k in range(3))
        report = MatchReport(mode_name, tp, fp, fn, p, r, f1, per_layout)
    return report


def detector_counts(gt: Sequence[BBox], pred: Sequence[BBox], iou_threshold: float = 0.5) -> tuple[int, int, int]:
    """(matched, n_pred, n_gt) under a maximum bipartite matching on IoU > threshold."""
    pairs = max_bipartite_matching(len(gt), len(pred), lambda i, j: iou(gt[i], pred[j]) > iou_threshold)
    return len(pairs), len(pred), len(gt)


def detector_pr(gt: Sequence[BBox], pred: Sequence[BBox], iou_threshold: float = 0.5) -> tuple[float, float]:
    matched, n_pred, n_gt = detector_counts(gt, pred, iou_threshold)
    return (matched / n_pred if n_pred else 1.0, matched / n_gt if n_gt else 1.0)


def _has_cycle(graph: dict) -> bool:
    state: dict = {}
    for start in graph:
        if start in state:
            continue
        stack = [(start, iter(graph[start]))]
        state[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
            elif state.get(nxt) == 1:
                return True
            elif nxt not in state:
                state[nxt] = 1
                stack.append((nxt, iter(graph.get(nxt, ()))))
    return False


def classify_layout(diagram: AnnotatedDiagram, band_factor: float = 1.5) -> str:
    """Assign one of single-line / multi-line / tree / cyclic (unknown without reactions).

    The graph has molecule nodes and reaction nodes: reactant -> reaction -> product.
    Molecules coincide when their boxes are identical.
    """
    if not diagram.reactions:
        return "unknown"
    graph: dict = {}
    indeg: dict = {}
    centers = []
    for i, rxn in enumerate(diagram.reactions):
        rnode = ("r", i)
        graph.setdefault(rnode, [])
        for comp in rxn.reactants:
            if comp.is_mol and comp.bbox is not None:
                graph.setdefault(("m", comp.bbox.key()), []).append(rnode)
        for comp in rxn.products:
            if comp.is_mol and comp.bbox is not None:
                m = ("m", comp.bbox.key())
                graph[rnode].append(m)
                graph.setdefault(m, [])
                indeg[m] = indeg.get(m, 0) + 1
        for comp in rxn.components():
            if comp.is_mol and comp.bbox is not None:
                centers.append(comp.bbox)
    if not centers:
        return "unknown"
    if _has_cycle(graph):
        return "cyclic"
    for node, succ in graph.items():
        if node[0] == "m" and (len(succ) >= 2 or indeg.get(node, 0) >= 2):
            return "tree"
    heights = [b.height for b in (diagram.molecules or centers)]
    band = band_factor * statistics.median(heights)
    ys = [b.center[1] for b in centers]
    return "single-line" if max(ys) - min(ys) <= band else "multi-line"
