"""Markdown, CSV and SVG summaries of match reports.

Scores are stored as full-precision ratios and only rounded here, to one
decimal on a 0-100 scale.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

from .model import LAYOUTS, MatchReport, ratios

FORMATS = ("markdown", "csv", "svg")
_MODE_ORDER = ("soft", "hard", "hybrid")
_COLORS = ("#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1", "#ff9da7")


def pct(value: float) -> str:
    return f"{100 * value:.1f}"


def _runs(reports) -> dict[str, list[MatchReport]]:
    if isinstance(reports, MatchReport):
        return {"": [reports]}
    if isinstance(reports, Mapping):
        return {str(k): list(v) if not isinstance(v, MatchReport) else [v] for k, v in reports.items()}
    return {"": list(reports)}


def _sorted(reports: Sequence[MatchReport]) -> list[MatchReport]:
    return sorted(reports, key=lambda r: (_MODE_ORDER.index(r.mode) if r.mode in _MODE_ORDER else 9, r.mode))


def render_csv(reports) -> str:
    runs = _runs(reports)
    labelled = any(runs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow((["run"] if labelled else []) + ["mode", "precision", "recall", "f1"])
    for run, reps in runs.items():
        for r in _sorted(reps):
            w.writerow(([run] if labelled else []) + [r.mode, pct(r.precision), pct(r.recall), pct(r.f1)])
    return buf.getvalue()


def render_layout_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "mode", "layout", "tp", "fp", "fn", "precision", "recall", "f1"])
    for run, reps in _runs(reports).items():
        for r in _sorted(reps):
            for layout in _layouts([r]):
                tp, fp, fn = r.per_layout[layout]
                p, rc, f = ratios(tp, fp, fn)
                w.writerow([run, r.mode, layout, tp, fp, fn, pct(p), pct(rc), pct(f)])
    return buf.getvalue()


def render_markdown(reports) -> str:
    runs = _runs(reports)
    modes = [m for m in _MODE_ORDER if any(r.mode == m for reps in runs.values() for r in reps)]
    head = ["Run"] + [f"{m.capitalize()} {x}" for m in modes for x in ("P", "R", "F1")]
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join(["---"] + [":---:"] * (len(head) - 1)) + "|"]
    for run, reps in runs.items():
        by_mode = {r.mode: r for r in reps}
        cells = [run or "-"]
        for m in modes:
            r = by_mode.get(m)
            cells += [pct(r.precision), pct(r.recall), pct(r.f1)] if r else ["", "", ""]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _layouts(reports: Sequence[MatchReport]) -> list[str]:
    present = {k for r in reports for k in r.per_layout}
    return [l for l in LAYOUTS if l in present] + sorted(present - set(LAYOUTS))


def render_svg(reports, width: int = 720, height: int = 360) -> str:
    """Grouped bar chart of F1 per layout; one group per layout, one bar per (run, mode)."""
    runs = _runs(reports)
    series = [(run, r) for run, reps in runs.items() for r in _sorted(reps)]
    layouts = _layouts([r for _, r in series])
    left, right, top, bottom = 50, 20, 30, 60
    plot_w, plot_h = width - left - right, height - top - bottom
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{left}" y="18" font-size="13">F1 by layout (%)</text>']
    for tick in range(0, 101, 25):
        y = top + plot_h * (1 - tick / 100)
        out.append(f'<line x1="{left}" y1="{y:.1f}" x2="{width - right}" y2="{y:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{tick}</text>')
    n = max(len(layouts), 1)
    group_w = plot_w / n
    bar_w = group_w * 0.8 / max(len(series), 1)
    for g, layout in enumerate(layouts):
        x0 = left + g * group_w + group_w * 0.1
        out.append(f'<g class="layout-group" data-layout="{escape(layout)}">')
        for s, (run, r) in enumerate(series):
            tp, fp, fn = r.per_layout.get(layout, (0, 0, 0))
            f1 = ratios(tp, fp, fn)[2]
            h = plot_h * f1
            label = escape(f"{run} {r.mode}".strip())
            out.append(f'<rect x="{x0 + s * bar_w:.1f}" y="{top + plot_h - h:.1f}" width="{bar_w * 0.9:.1f}" '
                       f'height="{h:.1f}" fill="{_COLORS[s % len(_COLORS)]}"><title>{label}: {pct(f1)}</title></rect>')
        out.append(f'<text x="{x0 + group_w * 0.4:.1f}" y="{top + plot_h + 16}" text-anchor="middle">'
                   f'{escape(layout)}</text>')
        out.append("</g>")
    for s, (run, r) in enumerate(series):
        x = left + s * 130
        out.append(f'<rect x="{x}" y="{height - 22}" width="10" height="10" fill="{_COLORS[s % len(_COLORS)]}"/>')
        out.append(f'<text x="{x + 14}" y="{height - 13}">{escape(f"{run} {r.mode}".strip())}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(reports, out_dir, formats: Sequence[str] = FORMATS, stem: str = "report") -> list[Path]:
    """Write the requested formats; identical inputs give identical bytes."""
    if not _runs(reports) or not any(_runs(reports).values()):
        raise ValueError("need at least one MatchReport")
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise ValueError(f"unknown report formats {sorted(unknown)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "markdown" in formats:
        written.append(_write(out / f"{stem}.md", render_markdown(reports)))
    if "csv" in formats:
        written.append(_write(out / f"{stem}.csv", render_csv(reports)))
        written.append(_write(out / f"{stem}_per_layout.csv", render_layout_csv(reports)))
    if "svg" in formats:
        written.append(_write(out / f"{stem}_layouts.svg", render_svg(reports)))
    return written


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8", newline="\n")
    return path
