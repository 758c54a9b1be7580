"""End-to-end runs: detect, render, prompt, parse, resolve and evaluate."""

from __future__ import annotations

import hashlib
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .backend import Backend, BackendError, CompletionRequest, NoiseConfig, OracleBackend
from .corpus import reactions_from_dicts
from .detector import Detector, DetectorError
from .geometry import HARD, HYBRID, SOFT, DiagramCounts, aggregate, evaluate
from .model import BBox, BIVP, BROS, AnnotatedDiagram, MatchReport, RxnError
from .parsing import DanglingIndexError, ParseError, parse_output, resolve_bivp
from .prompts import GRAPHICAL_TOKEN, VQA_KINDS, VQA_KEYS, PromptKind, build_prompt, parse_vqa_reply, score_vqa, VQAScore, vqa_ground_truth
from .render import RenderError, VisualPromptStyle, assign_indices, encode_png, load_image, pixel_rect, render_visual_prompt

ABLATION_MODES = ("full", "gt-boxes", "gt-extraction")
BOX_SOURCES = ("detected", "gt")


def effective_mode(strategy: str, mode: str) -> str:
    """Hybrid matching on BROS output is hard matching."""
    return HARD if strategy.upper() == BROS and mode == HYBRID else mode


@dataclass(frozen=True)
class RunConfig:
    strategy: str
    detector: str
    backend: str
    boxes: str = "detected"
    style: str = ""

    def __post_init__(self):
        if self.strategy not in (BROS, BIVP):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.boxes not in BOX_SOURCES:
            raise ValueError(f"boxes must be one of {BOX_SOURCES}")

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "detector": self.detector, "backend": self.backend,
                "boxes": self.boxes, "style": self.style}

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class PredictionStore:
    """Append-only NDJSON file of prediction records; the last record per key wins."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: dict[tuple[str, str], dict] = {}
        self._lock = threading.Lock()
        if self.path and self.path.is_file():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self.records[(rec["image_id"], rec["config_hash"])] = rec

    def get(self, image_id: str, config_hash: str):
        return self.records.get((image_id, config_hash))

    def put(self, rec: dict) -> None:
        with self._lock:
            self.records[(rec["image_id"], rec["config_hash"])] = rec
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _process(diagram: AnnotatedDiagram, image: bytes, cfg: RunConfig, detector: Detector, backend: Backend,
             style: VisualPromptStyle) -> dict:
    rec = {"image_id": diagram.id, "config_hash": cfg.hash(), "config": cfg.to_dict(), "started": _now(),
           "status": "ok", "error_kind": None, "error": None, "raw": None, "boxes": [], "index_map": {},
           "reactions": [], "warnings": [], "dropped_empty": 0, "dropped_duplicates": 0}
    try:
        boxes = list(diagram.molecules) if cfg.boxes == "gt" else detector.detect(diagram, image)
        rec["boxes"] = [b.to_list() for b in boxes]
        if cfg.strategy == BIVP:
            shown, index_map = render_visual_prompt(image, boxes, style)
        else:
            shown, index_map = image, assign_indices(boxes)
        rec["index_map"] = {str(i): b.to_list() for i, b in index_map.items()}
        request = CompletionRequest(build_prompt(PromptKind.BIVP if cfg.strategy == BIVP else PromptKind.BROS),
                                    shown, backend_id=cfg.backend,
                                    metadata={"image_id": diagram.id, "index_map": index_map})
        raw = backend.complete(request)
        rec["raw"] = raw
        parsed = parse_output(raw, cfg.strategy)
        rec["dropped_empty"], rec["dropped_duplicates"] = parsed.dropped_empty, parsed.dropped_duplicates
        if cfg.strategy == BIVP:
            try:
                reactions = resolve_bivp(parsed, index_map)
            except DanglingIndexError as exc:
                rec["warnings"].append(f"dangling_index:{exc.index}")
                reactions = resolve_bivp(parsed, index_map, strict=False)
        else:
            reactions = parsed.reactions
        rec["reactions"] = [r.to_dict() for r in reactions]
    except ParseError as exc:
        rec.update(status="parse_error", error_kind=exc.kind, error=str(exc))
    except BackendError as exc:
        rec.update(status="backend_error", error_kind=exc.kind, error=str(exc))
    except (RenderError, DetectorError) as exc:
        rec.update(status="input_error", error_kind=type(exc).__name__, error=str(exc))
    except (RxnError, OSError, ValueError) as exc:
        rec.update(status="error", error_kind=type(exc).__name__, error=str(exc))
    rec["finished"] = _now()
    return rec


def run_pipeline(corpus: Sequence[AnnotatedDiagram], images, strategy: str, detector: Detector, backend: Backend,
                 boxes: str = "detected", store: PredictionStore | None = None, workers: int = 1,
                 style: VisualPromptStyle = VisualPromptStyle()) -> list[dict]:
    """Predict every diagram; returns records in corpus order.

    ``images[diagram]`` must give the encoded image. Records already in
    ``store`` for the same configuration are reused unless they failed at
    the backend, so interrupted runs resume where they stopped.
    """
    strategy = strategy.upper()
    cfg = RunConfig(strategy, detector.name, backend.backend_id, boxes, style.digest())
    store = store if store is not None else PredictionStore()
    h = cfg.hash()

    def one(diagram):
        done = store.get(diagram.id, h)
        if done is not None and done["status"] != "backend_error":
            return done
        try:
            image = images[diagram]
        except (OSError, KeyError) as exc:
            rec = {"image_id": diagram.id, "config_hash": h, "config": cfg.to_dict(), "status": "input_error",
                   "error_kind": type(exc).__name__, "error": str(exc), "reactions": [], "raw": None}
        else:
            rec = _process(diagram, image, cfg, detector, backend, style)
        store.put(rec)
        return rec

    if workers <= 1:
        return [one(d) for d in corpus]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, corpus))


def record_counts(corpus: Sequence[AnnotatedDiagram], records: Sequence[dict], mode: str) -> list[DiagramCounts]:
    by_id = {r["image_id"]: r for r in records}
    out = []
    for d in corpus:
        rec = by_id.get(d.id)
        pred = reactions_from_dicts(rec["reactions"]) if rec else ()
        strategy = rec["config"]["strategy"] if rec else BIVP
        _, tp, fp, fn = evaluate(d.reactions, pred, effective_mode(strategy, mode))
        out.append(DiagramCounts(tp, fp, fn, d.layout))
    return out


def evaluate_records(corpus: Sequence[AnnotatedDiagram], records: Sequence[dict], mode: str = SOFT,
                     macro: bool = False) -> MatchReport:
    """Score stored predictions; a failed diagram contributes all its reactions as FN."""
    report = aggregate(record_counts(corpus, records, mode), mode, macro=macro)
    return report


def failure_counts(records: Sequence[dict]) -> dict[str, int]:
    out: dict[str, int] = {}
    for r in records:
        if r["status"] != "ok":
            key = f"{r['status']}:{r['error_kind']}"
            out[key] = out.get(key, 0) + 1
    return dict(sorted(out.items()))


@dataclass
class AblationResult:
    mode: str
    records: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)  # soft / hybrid -> MatchReport


def run_ablation(corpus: Sequence[AnnotatedDiagram], images, mode: str, detector: Detector, backend: Backend,
                 strategy: str = BIVP, workers: int = 1, store: PredictionStore | None = None,
                 style: VisualPromptStyle = VisualPromptStyle()) -> AblationResult:
    """full: detector + backend; gt-boxes: GT boxes + backend; gt-extraction: detector + GT reactions."""
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
    boxes = "gt" if mode == "gt-boxes" else "detected"
    if mode == "gt-extraction":
        backend = OracleBackend(corpus, NoiseConfig(), missing="drop", backend_id="gt-extraction")
    records = run_pipeline(corpus, images, strategy, detector, backend, boxes, store, workers, style)
    reports = {m: evaluate_records(corpus, records, m) for m in (SOFT, HYBRID)}
    return AblationResult(mode, records, reports)


def run_vqa(corpus: Sequence[AnnotatedDiagram], images, backend: Backend,
            workers: int = 1) -> tuple[VQAScore, list[dict]]:
    """Ask the four VQA questions about every diagram."""

    def one(diagram):
        truth = vqa_ground_truth(diagram)
        items = []
        try:
            image = images[diagram]
        except (OSError, KeyError) as exc:
            image, err = None, f"{type(exc).__name__}: {exc}"
        for kind in VQA_KINDS:
            key = VQA_KEYS[kind]
            item = {"image_id": diagram.id, "question": key, "truth": truth[key], "pred": None, "error": None}
            if image is None:
                item["error"] = err
            else:
                try:
                    raw = backend.complete(CompletionRequest(build_prompt(kind), image,
                                                             metadata={"image_id": diagram.id}))
                    item["raw"] = raw
                    item["pred"] = parse_vqa_reply(kind, raw)
                except BackendError as exc:
                    item["error"] = f"{exc.kind}: {exc}"
            items.append(item)
        return items

    if workers <= 1:
        batches = [one(d) for d in corpus]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(one, corpus))
    items = [i for b in batches for i in b]
    return score_vqa((i["question"], i["pred"], i["truth"]) for i in items), items


def ocr_regions(diagram: AnnotatedDiagram, image) -> list[tuple[BBox, str | None]]:
    """Every annotated region with its known text (None for molecules)."""
    regions, seen = [], set()
    for box in diagram.molecules:
        regions.append((box, None))
        seen.add(box.key())
    for rxn in diagram.reactions:
        for comp in rxn.components():
            if not comp.is_mol and comp.bbox is not None and comp.bbox.key() not in seen:
                seen.add(comp.bbox.key())
                regions.append((comp.bbox, comp.content))
    return regions


def run_ocr(diagram: AnnotatedDiagram, image, backend: Backend) -> list[dict]:
    """Crop each annotated region and ask the OCR prompt for its text or the graphical token."""
    img = load_image(image).convert("RGB")
    out = []
    for box, truth in ocr_regions(diagram, img):
        left, top, right, bottom = pixel_rect(box, *img.size)
        crop = encode_png(img.crop((left, top, right, bottom)))
        meta = {"image_id": diagram.id, "ocr_truth": truth}
        item = {"bbox": box.to_list(), "truth": truth or GRAPHICAL_TOKEN, "reply": None, "error": None}
        try:
            item["reply"] = backend.complete(CompletionRequest(build_prompt(PromptKind.OCR), crop, metadata=meta)).strip()
        except BackendError as exc:
            item["error"] = f"{exc.kind}: {exc}"
        out.append(item)
    return out


class MemoryImages:
    """Images held in memory, keyed by diagram id."""

    def __init__(self, data: Mapping[str, bytes] | None = None):
        self.data = dict(data or {})

    def add(self, diagram: AnnotatedDiagram, png: bytes) -> None:
        self.data[diagram.id] = png

    def __getitem__(self, diagram: AnnotatedDiagram) -> bytes:
        return self.data[diagram.id]
