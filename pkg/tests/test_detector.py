import io
import json

import httpx
import numpy as np
import pytest
from PIL import Image

from rxndp.detector import (
    BlobDetector, BlobParams, DetectorError, FileDetector, GroundTruthDetector, HttpDetector, detect_blobs,
    evaluate_detector, load_detections, make_detector, save_detections,
)
from rxndp.geometry import iou
from rxndp.model import BBox, SchemaError
from rxndp.render import RenderError
from rxndp.synthgen import generate_spec, render_spec, salt_and_pepper


def blank(w=200, h=100):
    buf = io.BytesIO()
    Image.new("L", (w, h), 255).save(buf, format="PNG")
    return buf.getvalue()


def test_blank_image():
    assert detect_blobs(blank()) == []


def test_undecodable():
    with pytest.raises(RenderError):
        detect_blobs(b"\x89PNG broken")


def test_filled_square_and_thin_line():
    arr = np.full((200, 300), 255, np.uint8)
    arr[50:110, 40:100] = 0      # a 60 px square: kept
    arr[150:152, 20:280] = 0     # a long thin rule: dropped
    arr[10:14, 200:205] = 0      # a speck: dropped
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    boxes = detect_blobs(buf.getvalue())
    assert boxes == [BBox.from_pixels(40, 50, 100, 110, 300, 200)]


def test_synth_diagram_glyph_boxes():
    diagram, png = render_spec(generate_spec(11, "multi-line"))
    boxes = detect_blobs(png)
    assert len(boxes) == len(diagram.molecules)
    for gt in diagram.molecules:
        assert max(iou(gt, b) for b in boxes) > 0.5


def test_noisy_diagrams(corpus400):
    diagrams, images = corpus400
    sample = diagrams[::40]
    dets = {d.id: detect_blobs(salt_and_pepper(images[d], 0.01, seed=i)) for i, d in enumerate(sample)}
    p, r = evaluate_detector(sample, dets)
    assert p >= 0.9 and r >= 0.9


def test_deterministic_and_valid(corpus4):
    diagrams, images = corpus4
    for d in diagrams:
        a = detect_blobs(images[d])
        assert a == detect_blobs(images[d])
        assert len({b.key() for b in a}) == len(a)


def test_load_detections(tmp_path):
    path = tmp_path / "det.json"
    path.write_text(json.dumps({"d1": [[0, 0, .1, .1]]}))
    assert load_detections(path) == {"d1": [BBox(0, 0, .1, .1)]}
    path.write_text(json.dumps({"d1": [[0.5, 0, 0.4, .1]]}))
    with pytest.raises(SchemaError, match="d1"):
        load_detections(path)
    path.write_text("[1, 2]")
    with pytest.raises(SchemaError):
        load_detections(path)


def test_detections_roundtrip(tmp_path, corpus4):
    diagrams, images = corpus4
    dets = {d.id: detect_blobs(images[d]) for d in diagrams}
    assert load_detections(save_detections(dets, tmp_path / "d.json")) == dets


def test_gt_as_detections(corpus400):
    diagrams, _ = corpus400
    assert evaluate_detector(diagrams, {d.id: list(d.molecules) for d in diagrams}) == (1.0, 1.0)
    # missing entries count as empty
    p, r = evaluate_detector(diagrams[:2], {})
    assert (p, r) == (1.0, 0.0)


def test_make_detector(tmp_path):
    assert isinstance(make_detector("blob"), BlobDetector)
    assert isinstance(make_detector("gt"), GroundTruthDetector)
    path = save_detections({"x": [BBox(0, 0, .5, .5)]}, tmp_path / "d.json")
    assert isinstance(make_detector(f"file:{path}"), FileDetector)
    assert isinstance(make_detector("http://localhost:9/detect"), HttpDetector)
    with pytest.raises(ValueError):
        make_detector("yolo")
    assert make_detector("blob", BlobParams(min_area=10)).name != make_detector("blob").name


def test_http_detector(corpus4):
    diagrams, images = corpus4
    d = diagrams[0]

    def handler(request):
        assert request.headers["content-type"] == "image/png"
        return httpx.Response(200, json={"boxes": [b.to_list() for b in d.molecules]})

    det = HttpDetector("http://det.test/", client=httpx.Client(transport=httpx.MockTransport(handler)))
    assert det.detect(d, images[d]) == list(d.molecules)

    failing = HttpDetector("http://det.test/", client=httpx.Client(
        transport=httpx.MockTransport(lambda r: httpx.Response(500))))
    with pytest.raises(DetectorError, match="500"):
        failing.detect(d, images[d])
