"""Command-line entry point: ``rxndp <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backend import BackendConfigError, HttpConfig, NoiseConfig, make_backend
from .corpus import FORMATS, DirectoryImages, load_corpus
from .detector import BlobParams, evaluate_detector, make_detector, save_detections
from .geometry import MODES
from .harness import (
    ABLATION_MODES, PredictionStore, evaluate_records, failure_counts, run_ablation, run_ocr, run_pipeline,
    run_vqa,
)
from .model import BBox, MatchReport, SchemaError
from .parsing import ParseError, parse_output, resolve_bivp
from .prompts import PromptKind, build_prompt
from .render import RenderError, VisualPromptStyle, render_visual_prompt
from .report import FORMATS as REPORT_FORMATS, emit_report, render_markdown

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_CORPUS = 0, 1, 2, 3

log = logging.getLogger("rxndp")


class ConfigError(Exception):
    pass


class CorpusError(Exception):
    pass


def _corpus(args):
    try:
        corpus = load_corpus(args.corpus, args.format)
    except (FileNotFoundError, SchemaError) as exc:
        raise CorpusError(str(exc)) from None
    root = Path(args.images_root) if args.images_root else Path(args.corpus).parent
    return corpus, DirectoryImages(root)


def _style(args) -> VisualPromptStyle:
    if not getattr(args, "style", None):
        return VisualPromptStyle()
    try:
        return VisualPromptStyle.from_file(args.style)
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad style file {args.style}: {exc}") from None


def _detector(args):
    params = BlobParams(threshold=args.threshold, min_area=args.min_area, merge_gap=args.merge_gap)
    try:
        return make_detector(args.detector, params)
    except (ValueError, OSError, SchemaError) as exc:
        raise ConfigError(str(exc)) from None


def _backend(args, corpus):
    noise = NoiseConfig(args.drop_rate, args.swap_rate, args.corrupt_rate, args.typo_rate, args.seed)
    http = HttpConfig.from_file(args.http_config) if args.http_config else None
    return make_backend(args.backend, corpus, noise, http)


def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _reports_doc(runs: dict) -> dict:
    return {"runs": {k: [r.to_dict() for r in v] for k, v in runs.items()}}


def cmd_generate(args):
    from .synthgen import generate_corpus

    result = generate_corpus(args.seed, args.per_layout, args.out)
    print(f"wrote {len(result.diagrams)} diagrams to {result.corpus_path} (manifest {result.digest[:16]})")
    return EXIT_OK


def cmd_detect(args):
    corpus, images = _corpus(args)
    det = _detector(args)
    detections = {d.id: det.detect(d, images[d]) for d in corpus}
    out = Path(args.out)
    save_detections(detections, out / "detections.json" if out.suffix != ".json" else out)
    p, r = evaluate_detector(corpus, detections)
    print(f"detector {det.name}: P {p:.3f} R {r:.3f} at IoU 0.5 over {len(corpus)} diagrams")
    return EXIT_OK


def cmd_annotate(args):
    corpus, images = _corpus(args)
    det, style = _detector(args), _style(args)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    maps = {}
    for d in corpus:
        image = images[d]
        boxes = list(d.molecules) if args.boxes == "gt" else det.detect(d, image)
        png, index_map = render_visual_prompt(image, boxes, style)
        (out / "images" / f"{d.id}.png").write_bytes(png)
        maps[d.id] = {str(i): b.to_list() for i, b in index_map.items()}
    _write_json(out / "index_maps.json", maps)
    print(f"annotated {len(corpus)} images into {out / 'images'}")
    return EXIT_OK


def cmd_parse(args):
    raw = Path(args.input).read_text(encoding="utf-8") if args.input != "-" else sys.stdin.read()
    try:
        parsed = parse_output(raw, args.strategy)
        reactions = parsed.reactions
        if args.index_map:
            data = json.loads(Path(args.index_map).read_text(encoding="utf-8"))
            reactions = resolve_bivp(parsed, {int(k): BBox.from_list(v) for k, v in data.items()})
    except ParseError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}))
        return EXIT_FAIL
    print(json.dumps({"strategy": parsed.strategy, "reactions": [r.to_dict() for r in reactions],
                      "dropped_empty": parsed.dropped_empty, "dropped_duplicates": parsed.dropped_duplicates},
                     indent=1, ensure_ascii=False))
    return EXIT_OK


def _print_reports(runs):
    print(render_markdown(runs), end="")


def cmd_evaluate(args):
    corpus, images = _corpus(args)
    out = Path(args.out)
    store_path = Path(args.predictions) if args.predictions else out / "predictions.ndjson"
    store = PredictionStore(store_path)
    if args.predictions and args.rescore:
        records = list(store.records.values())
    else:
        records = run_pipeline(corpus, images, args.strategy, _detector(args), _backend(args, corpus),
                               args.boxes, store, args.workers, _style(args))
    modes = args.mode or ["soft", "hybrid"]
    run = f"{args.strategy.upper()}"
    runs = {run: [evaluate_records(corpus, records, m, macro=args.macro) for m in modes]}
    _write_json(out / "reports.json", _reports_doc(runs))
    failures = failure_counts(records)
    if failures:
        print(f"failures: {failures}")
    _print_reports(runs)
    return EXIT_OK


def cmd_ablate(args):
    corpus, images = _corpus(args)
    out = Path(args.out)
    store = PredictionStore(out / "predictions.ndjson")
    det, backend = _detector(args), _backend(args, corpus)
    runs = {}
    for mode in args.mode or list(ABLATION_MODES):
        res = run_ablation(corpus, images, mode, det, backend, args.strategy.upper(), args.workers, store, _style(args))
        runs[mode] = [res.reports["soft"], res.reports["hybrid"]]
    _write_json(out / "reports.json", _reports_doc(runs))
    _print_reports(runs)
    return EXIT_OK


def cmd_vqa(args):
    corpus, images = _corpus(args)
    score, items = run_vqa(corpus, images, _backend(args, corpus), args.workers)
    _write_json(Path(args.out) / "vqa.json", {"score": score.to_dict(), "items": items})
    for key, acc in score.accuracy.items():
        print(f"{key:16s} {acc:6.1f}  (undecodable {score.undecodable[key]})")
    print(f"{'mean':16s} {score.mean:6.1f}")
    return EXIT_OK


def cmd_ocr(args):
    corpus, images = _corpus(args)
    backend = _backend(args, corpus)
    results = {d.id: run_ocr(d, images[d], backend) for d in corpus}
    _write_json(Path(args.out) / "ocr.json", results)
    n = sum(len(v) for v in results.values())
    agree = sum(1 for v in results.values() for i in v if i["reply"] == i["truth"])
    print(f"ocr: {agree}/{n} regions agree with annotation")
    return EXIT_OK


def cmd_report(args):
    try:
        doc = json.loads(Path(args.reports).read_text(encoding="utf-8"))
        runs = {k: [MatchReport.from_dict(r) for r in v] for k, v in doc["runs"].items()}
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot read reports file {args.reports}: {exc}") from None
    for path in emit_report(runs, args.out, args.report_format or REPORT_FORMATS):
        print(path)
    return EXIT_OK


def cmd_prompt(args):
    sys.stdout.write(build_prompt(args.kind))
    return EXIT_OK


def _add_corpus(p):
    p.add_argument("--corpus", required=True, help="corpus JSON file")
    p.add_argument("--format", choices=FORMATS, default="rxncaption")
    p.add_argument("--images-root", help="directory image paths are relative to (default: corpus dir)")
    p.add_argument("--workers", type=int, default=1)


def _add_detector(p):
    p.add_argument("--detector", default="blob", help="blob | gt | file:PATH | http(s) URL")
    p.add_argument("--threshold", type=int, default=128)
    p.add_argument("--min-area", type=int, default=30)
    p.add_argument("--merge-gap", type=int, default=3)


def _add_backend(p):
    p.add_argument("--backend", default="oracle", help="oracle | replay:PATH | http")
    p.add_argument("--http-config", help="JSON with url/model/api_style (no credentials)")
    p.add_argument("--seed", type=int, default=0, help="oracle noise seed")
    for name in ("drop", "swap", "corrupt", "typo"):
        p.add_argument(f"--{name}-rate", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rxndp", description="Reaction diagram parsing evaluation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic corpus")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--per-layout", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("detect", help="run a molecule detector over a corpus")
    _add_corpus(p)
    _add_detector(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("annotate", help="draw numbered molecule boxes (visual prompts)")
    _add_corpus(p)
    _add_detector(p)
    p.add_argument("--boxes", choices=("detected", "gt"), default="detected")
    p.add_argument("--style", help="JSON style file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("parse", help="decode one model reply")
    p.add_argument("--strategy", type=str.upper, choices=("BROS", "BIVP"), required=True)
    p.add_argument("--input", required=True, help="reply file or - for stdin")
    p.add_argument("--index-map", help="JSON {index: bbox} to resolve BIVP indices")
    p.set_defaults(func=cmd_parse)

    for name, func, helptext in (("evaluate", cmd_evaluate, "run the pipeline and score it"),
                                 ("ablate", cmd_ablate, "ideal-stage ablations")):
        p = sub.add_parser(name, help=helptext)
        _add_corpus(p)
        _add_detector(p)
        _add_backend(p)
        p.add_argument("--strategy", type=str.upper, choices=("BROS", "BIVP"), default="BIVP")
        p.add_argument("--style", help="JSON style file")
        p.add_argument("--out", required=True)
        if name == "evaluate":
            p.add_argument("--mode", action="append", choices=MODES)
            p.add_argument("--boxes", choices=("detected", "gt"), default="detected")
            p.add_argument("--predictions", help="existing predictions store (NDJSON)")
            p.add_argument("--rescore", action="store_true", help="only score --predictions, do not run")
            p.add_argument("--macro", action="store_true", help="average per diagram instead of micro counts")
        else:
            p.add_argument("--mode", action="append", choices=ABLATION_MODES)
        p.set_defaults(func=func)

    p = sub.add_parser("vqa", help="visual question answering accuracy")
    _add_corpus(p)
    _add_backend(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vqa)

    p = sub.add_parser("ocr", help="OCR each annotated region")
    _add_corpus(p)
    _add_backend(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ocr)

    p = sub.add_parser("report", help="render reports.json as markdown/csv/svg")
    p.add_argument("--reports", required=True)
    p.add_argument("--format", dest="report_format", action="append", choices=REPORT_FORMATS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("prompt", help="prompt templates")
    psub = p.add_subparsers(dest="prompt_command", required=True)
    show = psub.add_parser("show", help="print a template verbatim")
    show.add_argument("kind", choices=[k.value for k in PromptKind])
    show.set_defaults(func=cmd_prompt)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CorpusError as exc:
        print(f"rxndp: corpus error: {exc}", file=sys.stderr)
        return EXIT_CORPUS
    except (ConfigError, BackendConfigError, ValueError) as exc:
        print(f"rxndp: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RenderError, OSError) as exc:
        print(f"rxndp: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
