"""Acceptance suite: one test per criterion.

Each test is marked with its criterion number; conftest prints a PASS/FAIL
line per criterion at the end of the run.
"""

import io
import json
import random
import time

import numpy as np
import pytest
from PIL import Image

from oracles import brute_force_tp, decode_label, edit_distance, text_verdict
from rxndp.backend import OracleBackend
from rxndp.detector import GroundTruthDetector, detect_blobs, evaluate_detector
from rxndp.geometry import DiagramCounts, aggregate, classify_layout, evaluate, levenshtein, reaction_matches, text_match
from rxndp.harness import run_ablation, run_vqa
from rxndp.model import BBox, Component, ReactionAnnotation, TXT, IDT
from rxndp.parsing import ParseError, parse_output
from rxndp.prompts import PromptKind, build_prompt, template_hash
from rxndp.render import VisualPromptStyle, pixel_rect, render_visual_prompt

PINNED_TEMPLATE_SHA256 = {
    "bros": "d540a59050699b9ede0377c9f11022f5bfe2017f39ea3deb6cc47511f00d4204",
    "bivp": "4c2ba6b1b5b7aeb18d9ec556de5046184e3924f6d90bc094eff2f37a90a7cd4b",
    "vqa_reaction_count": "ff567b05fd5be4b04a406dfd4ffa4917625950cd5ea960e6980b36f7ca00633f",
    "vqa_structure_count": "91c4ffb887e7bb16fd140a3f757f38ec5932d43ce5247578fc13c3680aead46c",
    "vqa_cyclic": "963f13a9694a66d307ddcb22fe81964ed2a9587655edf27d44a4edd995727b8b",
    "vqa_tree": "a02e151ceaa3476f93e313bd596cd145e98f6a2859fce79956f4b01887ab7ef6",
    "ocr": "a3d99d8d29fa56ce3579dd54b2b4932ae6a4ab1dfca14f8b86ff9f72f7bbdc49",
}

# criterion 1 ---------------------------------------------------------------

_POOL = [BBox(0.05 + 0.15 * i, 0.1 + 0.12 * (i % 3), 0.17 + 0.15 * i, 0.3 + 0.12 * (i % 3)) for i in range(6)]
_WORDS = ["NaH THF", "Pd/C, H2", "H2O, 25°C", "DMF, 80°C", "1a", "2b", "reflux"]


def _nudge(box: BBox, rng: random.Random) -> BBox:
    """A copy that overlaps the original strongly (small shift) or weakly (large shift)."""
    shift = rng.choice([0.0, 0.01, 0.02, 0.07, 0.1]) * rng.choice([-1, 1])
    x1 = min(max(box.x1 + shift, 0.0), 1 - box.width)
    return BBox(x1, box.y1, x1 + box.width, box.y2)


def _random_component(rng):
    if rng.random() < 0.65:
        return Component.mol(rng.choice(_POOL))
    kind = rng.choice([TXT, IDT])
    box = rng.choice(_POOL) if rng.random() < 0.3 else None
    return Component(kind, bbox=box, content=rng.choice(_WORDS))


def _random_reaction(rng):
    n = rng.randint(1, 6)
    comps = [_random_component(rng) for _ in range(n)]
    roles = {"reactants": [], "conditions": [], "products": []}
    for c in comps:
        roles[rng.choice(["reactants", "reactants", "conditions", "products", "products"])].append(c)
    if not roles["reactants"] and not roles["products"]:
        roles["products"].append(Component.mol(rng.choice(_POOL)))
    return ReactionAnnotation(**roles).deduplicated()[0]


def _perturb(rxn, rng):
    roles = {}
    for role in ("reactants", "conditions", "products"):
        comps = []
        for c in rxn.role(role):
            if c.is_mol and rng.random() < 0.5:
                c = Component.mol(_nudge(c.bbox, rng))
            elif not c.is_mol and rng.random() < 0.3:
                text = c.content
                pos = rng.randrange(len(text))
                c = Component(c.kind, bbox=c.bbox, content=text[:pos] + "x" + text[pos + 1:])
            comps.append(c)
        rng.shuffle(comps)
        roles[role] = comps
    if rng.random() < 0.2 and roles["conditions"]:
        roles["reactants"].append(roles["conditions"].pop())
    return ReactionAnnotation(**roles)


def random_instance(rng):
    gt = [_random_reaction(rng) for _ in range(rng.randint(0, 4))]
    pred = [_perturb(r, rng) for r in gt if rng.random() < 0.8]
    pred += [_random_reaction(rng) for _ in range(rng.randint(0, 2))]
    rng.shuffle(pred)
    return gt, pred[:4]


@pytest.mark.criterion(1)
def test_c1_matching_optimality():
    rng = random.Random(1)
    start = time.perf_counter()
    modes = ("soft", "hard", "hybrid")
    positive = 0
    for k in range(1000):
        gt, pred = random_instance(rng)
        mode = modes[k % 3]
        assignment, tp, fp, fn = evaluate(gt, pred, mode)
        assert tp == brute_force_tp(gt, pred, mode), (k, mode)
        assert tp + fn == len(gt) and tp + fp == len(pred)
        positive += tp > 0
    elapsed = time.perf_counter() - start
    assert positive > 200  # instances actually exercise matching
    assert elapsed < 60, f"took {elapsed:.1f}s"


# criterion 2 ---------------------------------------------------------------

@pytest.mark.criterion(2)
def test_c2_ideal_pipeline_ceiling(corpus400):
    diagrams, images = corpus400
    assert len(diagrams) == 400
    start = time.perf_counter()
    result = run_ablation(diagrams, images, "gt-boxes", GroundTruthDetector(), OracleBackend(diagrams))
    elapsed = time.perf_counter() - start
    soft, hybrid = result.reports["soft"], result.reports["hybrid"]
    assert f"{100 * soft.f1:.1f}" == "100.0" and soft.f1 == 1.0
    assert f"{100 * hybrid.f1:.1f}" == "100.0" and hybrid.f1 == 1.0
    assert soft.tp == sum(len(d.reactions) for d in diagrams)
    assert elapsed < 120, f"took {elapsed:.1f}s"


# criterion 3 ---------------------------------------------------------------

def _jitter_reaction(rxn: ReactionAnnotation) -> ReactionAnnotation:
    roles = {}
    for role in ("reactants", "conditions", "products"):
        comps = []
        for c in rxn.role(role):
            if c.is_mol:
                b = c.bbox
                dx = 0.6 * b.width
                x1 = b.x1 + dx if b.x2 + dx <= 1 else b.x1 - dx
                c = Component.mol(BBox(x1, b.y1, x1 + b.width, b.y2))
            comps.append(c)
        roles[role] = comps
    return ReactionAnnotation(**roles)


@pytest.mark.criterion(3)
def test_c3_metric_sensitivity(corpus400):
    diagrams = corpus400[0][::8]  # 50 diagrams spread over all layouts
    slots = [(i, j) for i, d in enumerate(diagrams) for j in range(len(d.reactions))]
    fractions = (0.0, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0)
    for seed in range(50):
        order = slots[:]
        random.Random(seed).shuffle(order)
        f1s = []
        for frac in fractions:
            chosen = set(order[:int(round(frac * len(order)))])
            counts = []
            for i, d in enumerate(diagrams):
                pred = [_jitter_reaction(r) if (i, j) in chosen else r for j, r in enumerate(d.reactions)]
                _, tp, fp, fn = evaluate(d.reactions, pred, "soft")
                counts.append(DiagramCounts(tp, fp, fn, d.layout))
            report = aggregate(counts, "soft")
            # every jittered reaction becomes exactly one FP and one FN
            assert report.fp == report.fn == len(chosen)
            f1s.append(report.f1)
        assert all(a > b for a, b in zip(f1s, f1s[1:])), (seed, f1s)


# criterion 4 ---------------------------------------------------------------

_ALPHA = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789,()/°-+"


def _edit(s: str, k: int, rng: random.Random) -> str:
    for _ in range(k):
        op = rng.choice("ids") if s else "i"
        pos = rng.randrange(len(s) + (op == "i"))
        if op == "i":
            s = s[:pos] + rng.choice(_ALPHA) + s[pos:]
        elif op == "d":
            s = s[:pos] + s[pos + 1:]
        else:
            s = s[:pos] + rng.choice(_ALPHA) + s[pos + 1:]
    return s


@pytest.mark.criterion(4)
def test_c4_text_matching_conformance():
    assert text_match("NaH THF", "NaH THF")
    assert text_match("Pd/C, H2", "Pd/C H2")
    assert not text_match("H2O, 25°C", "DMF, 80°C")
    rng = random.Random(4)
    for _ in range(500):
        s = "".join(rng.choice(_ALPHA) for _ in range(rng.randint(1, 24)))
        t = _edit(s, rng.randint(0, len(s) // 5), rng)
        assert levenshtein(s, t) == edit_distance(s, t)
        assert text_match(s, t) == text_verdict(s, t), (s, t)


# criterion 5 ---------------------------------------------------------------

@pytest.mark.criterion(5)
def test_c5_detector_bar(corpus400):
    diagrams, images = corpus400
    start = time.perf_counter()
    detections = {d.id: detect_blobs(images[d]) for d in diagrams}
    elapsed = time.perf_counter() - start
    p, r = evaluate_detector(diagrams, detections)
    print(f"blob detector P={p:.4f} R={r:.4f} in {elapsed:.1f}s")
    assert p >= 0.95 and r >= 0.95
    assert elapsed < 60, f"took {elapsed:.1f}s"


# criterion 6 ---------------------------------------------------------------

def _outer(box, w, h, style):
    left, top, right, bottom = pixel_rect(box, w, h)
    d = style.padding_px + style.stroke_width_px
    return left - d, top - d, right + d, bottom + d


@pytest.mark.criterion(6)
def test_c6_renderer_locality_and_roundtrip(corpus400):
    diagrams, images = corpus400
    style = VisualPromptStyle()
    s = style.glyph_scale
    sample = random.Random(6).sample(diagrams, 100)
    for d in sample:
        src = np.array(Image.open(io.BytesIO(images[d])).convert("RGB"))
        png, index_map = render_visual_prompt(images[d], d.molecules, style)
        out = np.array(Image.open(io.BytesIO(png)).convert("RGB"))
        h, w = src.shape[:2]

        # locality: changes only inside boxes dilated by stroke, padding and label extent
        max_label_w = (len(str(len(index_map))) * 6 - 1) * s + 2 * s
        reach = style.label_height + max_label_w
        allowed = np.zeros((h, w), dtype=bool)
        for box in index_map.values():
            x0, y0, x1, y1 = _outer(box, w, h, style)
            allowed[max(y0 - reach, 0):max(y1 + reach, 0), max(x0 - reach, 0):max(x1 + reach, 0)] = True
        changed = np.any(out != src, axis=2)
        assert not (changed & ~allowed).any(), d.id

        # round trip: each label decodes to its own index
        assert sorted(index_map) == list(range(1, len(d.molecules) + 1))
        bands = {}
        for i, box in index_map.items():
            x0, y0, x1, y1 = _outer(box, w, h, style)
            band = np.zeros((h, w), dtype=bool)
            band[max(y0, 0):max(y1, 0), max(x0, 0):max(x1, 0)] = True
            sw = style.stroke_width_px
            band[max(y0 + sw, 0):max(y1 - sw, 0), max(x0 + sw, 0):max(x1 - sw, 0)] = False
            bands[i] = band
        for i, box in index_map.items():
            color = np.array(style.palette[(i - 1) % len(style.palette)])
            x0, y0, x1, y1 = _outer(box, w, h, style)
            region = np.zeros((h, w), dtype=bool)
            region[max(y0 - style.label_height, 0):max(y1, 0), max(x0, 0):min(x1, w)] = True
            ink = np.all(out == color, axis=2) & region
            for j, band in bands.items():
                if (j - 1) % len(style.palette) == (i - 1) % len(style.palette):
                    ink &= ~band
            assert decode_label(ink, s) == str(i), (d.id, i)


# criterion 7 ---------------------------------------------------------------

BROS_EXAMPLE = """[{
  "reactants": [{"category": "structure", "bbox": [0.1, 0.2, 0.3, 0.4]}],
  "conditions": [{"category": "text", "bbox": [0.32, 0.21, 0.4, 0.25]}],
  "products": [{"category": "structure", "bbox": [0.45, 0.2, 0.6, 0.4]}]
}]"""

BIVP_EXAMPLE = """[
  {
    "reactants": [{"type": "mol", "index": 1}, {"type": "txt", "content": "NaCl"}],
    "conditions": [{"type": "mol", "index": 3}, {"type": "txt", "content": "H2O, 25°C"}],
    "products": [{"type": "mol", "index": 2}, {"type": "idt", "content": "1a"}]
  }
]"""

_TOKENS = ['[', ']', '{', '}', ',', ':', '"', 'null', 'true', '-1', '0', '1e309', 'NaN', '"index"', '"bbox"',
           '"type"', '"mol"', '"category"', '```json', '\n', '\\', '\u0000', '[[[[[[[[', '9' * 400, '{"a":']


def _mutate(text: str, rng: random.Random) -> str:
    for _ in range(rng.randint(1, 6)):
        op = rng.randrange(7)
        pos = rng.randrange(len(text) + 1)
        if op == 0 and text:
            text = text[:pos] + text[pos + 1:]
        elif op == 1:
            text = text[:pos] + chr(rng.randrange(32, 0x2FF)) + text[pos:]
        elif op == 2:
            text = text[:pos] + rng.choice(_TOKENS) + text[pos:]
        elif op == 3:
            end = min(len(text), pos + rng.randint(1, 20))
            text = text[:pos] + text[pos:end] * rng.randint(2, 3) + text[end:]
        elif op == 4:
            text = text[:pos]
        elif op == 5:
            text = text.replace(rng.choice(['0.1', '1', '"mol"', '"structure"', '[', ':']), rng.choice(_TOKENS), 1)
        else:
            text = "[" * rng.randint(1, 3000) + text
    return text


@pytest.mark.criterion(7)
def test_c7_parser_robustness():
    rng = random.Random(7)
    seeds = [(BROS_EXAMPLE, "BROS"), (BIVP_EXAMPLE, "BIVP"), ("[]", "BIVP"),
             ("Sure! ```json\n" + BIVP_EXAMPLE + "\n``` hope it helps", "BIVP")]
    parsed = errors = 0
    for k in range(10_000):
        base, strategy = seeds[k % len(seeds)]
        raw = _mutate(base, rng)
        if k % 10 == 0:
            raw = raw.encode("utf-8", errors="replace")
        try:
            out = parse_output(raw, strategy)
        except ParseError as exc:
            assert exc.kind in ("no_json", "schema", "bbox", "index", "parse")
            errors += 1
        else:
            assert out.strategy == strategy
            parsed += 1
    assert parsed + errors == 10_000
    assert parsed > 500 and errors > 500


# criterion 8 ---------------------------------------------------------------

@pytest.mark.criterion(8)
def test_c8_layout_agreement(corpus400):
    diagrams, _ = corpus400
    disagree = [(d.id, d.layout, classify_layout(d)) for d in diagrams if classify_layout(d) != d.layout]
    assert not disagree
    assert {d.layout for d in diagrams} == {"single-line", "multi-line", "tree", "cyclic"}


# criterion 9 ---------------------------------------------------------------

@pytest.mark.criterion(9)
def test_c9_condition_merge_rule():
    a, b, c = BBox(0.0, 0.0, 0.2, 0.2), BBox(0.3, 0.0, 0.5, 0.2), BBox(0.7, 0.0, 0.9, 0.2)
    gt = ReactionAnnotation([Component.mol(a)], [Component.mol(b), Component.text("Pd/C, H2")], [Component.mol(c)])
    pred = ReactionAnnotation([Component.mol(a), Component.mol(b)], [Component.text("Pd/C, H2")], [Component.mol(c)])
    assert reaction_matches(gt, pred, "soft")
    assert not reaction_matches(gt, pred, "hard")
    assert evaluate([gt], [pred], "soft")[1:] == (1, 0, 0)
    assert evaluate([gt], [pred], "hard")[1:] == (0, 1, 1)


# criterion 10 --------------------------------------------------------------

@pytest.mark.criterion(10)
def test_c10_vqa_machinery(corpus400):
    diagrams, images = corpus400
    score, items = run_vqa(diagrams, images, OracleBackend(diagrams))
    assert score.accuracy == {"reaction_count": 100.0, "structure_count": 100.0, "cyclic": 100.0, "tree": 100.0}
    assert score.mean == 100.0
    assert len(items) == 4 * len(diagrams)
    for kind in PromptKind:
        assert template_hash(kind) == PINNED_TEMPLATE_SHA256[kind.value], kind
    assert "reaction_count" in build_prompt("vqa_reaction_count")
    assert "return an empty list []" in build_prompt("bivp")
    assert "[GRAPHICAL_STRUCTURE]" in build_prompt("ocr")
    assert json.loads(items[0]["raw"])
