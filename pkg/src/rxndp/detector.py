"""Molecule detection: a connected-component blob detector plus file, HTTP and oracle adapters."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .geometry import detector_counts
from .model import AnnotatedDiagram, BBox, BBoxError, RxnError, SchemaError, ratios
from .render import assign_indices, load_image


class DetectorError(RxnError):
    pass


@dataclass(frozen=True)
class BlobParams:
    threshold: int = 128        # pixels darker than this are ink
    min_area: int = 30          # components with fewer pixels are noise
    merge_gap: int = 3          # rectangles closer than this many px are merged
    min_side: int = 20          # merged blobs with a shorter side are text or symbols
    max_aspect: float = 6.0     # merged blobs more elongated than this are rules or text lines
    max_elongation: float = 6.0 # raw components whose principal axes differ more are arrows

    def __post_init__(self):
        if not 0 < self.threshold <= 255:
            raise ValueError("threshold must be in 1..255")
        if self.min_area < 1 or self.merge_gap < 0 or self.min_side < 1:
            raise ValueError("min_area and min_side must be >= 1, merge_gap >= 0")
        if self.max_aspect < 1 or self.max_elongation < 1:
            raise ValueError("max_aspect and max_elongation must be >= 1")


def _elongation(ys: np.ndarray, xs: np.ndarray) -> float:
    """Ratio of principal-axis spreads; 1/12 per axis accounts for the pixel extent."""
    if len(xs) < 2:
        return 1.0
    cov = np.cov(np.vstack([xs, ys]).astype(float), bias=True)
    lo, hi = np.linalg.eigvalsh(cov)
    return float(np.sqrt((hi + 1 / 12) / (max(lo, 0.0) + 1 / 12)))


def _merge(rects: list[list[int]], gap: int) -> list[list[int]]:
    """Union rectangles (x0, y0, x1, y1, inclusive) that overlap or lie within ``gap`` px."""
    rects = [list(r) for r in rects]
    changed = True
    while changed:
        changed = False
        out: list[list[int]] = []
        for r in rects:
            merged = True
            while merged:
                merged = False
                for k, o in enumerate(out):
                    if (r[0] <= o[2] + gap + 1 and o[0] <= r[2] + gap + 1
                            and r[1] <= o[3] + gap + 1 and o[1] <= r[3] + gap + 1):
                        r = [min(r[0], o[0]), min(r[1], o[1]), max(r[2], o[2]), max(r[3], o[3])]
                        del out[k]
                        merged = changed = True
                        break
            out.append(r)
        rects = out
    return rects


def detect_blobs(image, params: BlobParams = BlobParams()) -> list[BBox]:
    """Find molecule-like ink blobs; boxes are normalized and in reading order."""
    img = load_image(image).convert("L")
    width, height = img.size
    ink = np.asarray(img) < params.threshold
    labels, n = ndimage.label(ink, structure=np.ones((3, 3), dtype=int))
    rects = []
    for lab, sl in enumerate(ndimage.find_objects(labels), 1):
        if sl is None:
            continue
        ys, xs = np.nonzero(labels[sl] == lab)
        if len(xs) < params.min_area:
            continue
        if _elongation(ys, xs) > params.max_elongation:
            continue
        rects.append([sl[1].start, sl[0].start, sl[1].stop - 1, sl[0].stop - 1])

    boxes = set()
    for x0, y0, x1, y1 in _merge(rects, params.merge_gap):
        w, h = x1 - x0 + 1, y1 - y0 + 1
        if min(w, h) < params.min_side or max(w, h) / min(w, h) > params.max_aspect:
            continue
        boxes.add(BBox.from_pixels(x0, y0, x1 + 1, y1 + 1, width, height))
    return list(assign_indices(sorted(boxes)).values())


def _boxes(value, where: str) -> list[BBox]:
    if not isinstance(value, list):
        raise SchemaError(f"{where}: expected a list of boxes")
    out = []
    for k, b in enumerate(value):
        try:
            out.append(BBox.from_list(b))
        except BBoxError as exc:
            raise SchemaError(f"{where}[{k}]: {exc}") from None
    return out


def load_detections(path) -> dict[str, list[BBox]]:
    """Read {image_id: [[x1, y1, x2, y2], ...]}."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise SchemaError(f"{path}: detections must be a JSON object keyed by image id")
    return {str(k): _boxes(v, str(k)) for k, v in data.items()}


def save_detections(detections: Mapping[str, Sequence[BBox]], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {k: [b.to_list() for b in v] for k, v in sorted(detections.items())}
    path.write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")
    return path


def evaluate_detector(corpus: Sequence[AnnotatedDiagram],
                      detections: Mapping[str, Sequence[BBox]], iou_threshold: float = 0.5) -> tuple[float, float]:
    """Micro precision and recall over the corpus; a missing entry counts as no detections."""
    matched = n_pred = n_gt = 0
    for d in corpus:
        m, p, g = detector_counts(d.molecules, detections.get(d.id, []), iou_threshold)
        matched += m
        n_pred += p
        n_gt += g
    p, r, _ = ratios(matched, n_pred - matched, n_gt - matched)
    return p, r


class Detector(Protocol):
    name: str

    def detect(self, diagram: AnnotatedDiagram, image: bytes) -> list[BBox]: ...


class BlobDetector:
    def __init__(self, params: BlobParams = BlobParams()):
        self.params = params
        self.name = "blob:" + json.dumps(asdict(params), sort_keys=True)

    def detect(self, diagram, image):
        return detect_blobs(image, self.params)


class GroundTruthDetector:
    """Returns the annotated molecule boxes (ablation baseline)."""

    name = "gt"

    def detect(self, diagram, image):
        return list(diagram.molecules)


class FileDetector:
    def __init__(self, path):
        self.path = Path(path)
        self.detections = load_detections(path)
        self.name = f"file:{self.path.name}"

    def detect(self, diagram, image):
        return list(self.detections.get(diagram.id, []))


class HttpDetector:
    """POSTs the PNG to a detection service that answers with a JSON list of boxes."""

    def __init__(self, url: str, client=None, timeout: float = 30.0):
        import httpx

        self.url = url
        self.client = client or httpx.Client(timeout=timeout)
        self.name = f"http:{url}"

    def detect(self, diagram, image):
        resp = self.client.post(self.url, content=image, headers={"Content-Type": "image/png"})
        if resp.status_code != 200:
            raise DetectorError(f"detector service answered HTTP {resp.status_code}")
        try:
            payload = resp.json()
        except ValueError:
            raise DetectorError("detector service returned non-JSON") from None
        if isinstance(payload, dict):
            payload = payload.get("boxes", payload.get(diagram.id))
        return _boxes(payload, diagram.id)


def make_detector(spec: str, params: BlobParams = BlobParams()) -> Detector:
    """Build a detector from 'blob', 'gt', 'file:PATH' or an http(s) URL."""
    if spec == "blob":
        return BlobDetector(params)
    if spec == "gt":
        return GroundTruthDetector()
    if spec.startswith("file:"):
        return FileDetector(spec[5:])
    if spec.startswith(("http://", "https://")):
        return HttpDetector(spec)
    if spec.startswith("http:") and not spec.startswith("http://"):
        return HttpDetector(spec[5:])
    raise ValueError(f"unknown detector {spec!r}; use blob, gt, file:PATH or a URL")
