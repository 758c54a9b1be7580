"""Reading and writing corpus files (rxncaption and rxnscribe record formats)."""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Sequence

from .model import (
    IDT, KINDS, LAYOUTS, MOL, ROLES, SUPPLEMENT, TXT, AnnotatedDiagram, BBox, BBoxError, Component,
    ReactionAnnotation, SchemaError,
)
from .render import assign_indices

RXNCAPTION = "rxncaption"
RXNSCRIBE = "rxnscribe"
FORMATS = (RXNCAPTION, RXNSCRIBE)

_SCRIBE_CATEGORIES = {"structure": MOL, "text": TXT, "identifier": IDT, "supplement": SUPPLEMENT,
                      "[Mol]": MOL, "[Txt]": TXT, "[Idt]": IDT, "[Sup]": SUPPLEMENT}


def _bbox(value, where: str) -> BBox:
    try:
        return BBox.from_list(value)
    except BBoxError as exc:
        raise BBoxError(f"{where}: {exc}") from None


def _text(value, where: str):
    if value is None:
        return None
    if isinstance(value, list) and all(isinstance(v, str) for v in value):
        return " ".join(value)
    if not isinstance(value, str):
        raise SchemaError(f"{where}: text content must be a string")
    return value


def _component(obj, fmt: str, where: str) -> Component:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: component must be an object")
    if fmt == RXNCAPTION:
        kind = obj.get("kind")
        if kind not in KINDS:
            raise SchemaError(f"{where}.kind: expected one of {KINDS}, got {kind!r}")
    else:
        cat = obj.get("category")
        if cat not in _SCRIBE_CATEGORIES:
            raise SchemaError(f"{where}.category: unknown category {cat!r}")
        kind = _SCRIBE_CATEGORIES[cat]
    bbox = _bbox(obj["bbox"], f"{where}.bbox") if obj.get("bbox") is not None else None
    index = obj.get("index")
    if kind == MOL and bbox is None:
        raise SchemaError(f"{where}.bbox: molecule components need a bbox in a corpus")
    content = _text(obj.get("content", obj.get("text")), f"{where}.content")
    try:
        return Component(kind, bbox=bbox, index=index if kind == MOL else None,
                         content=content if kind != MOL else None)
    except SchemaError as exc:
        raise SchemaError(f"{where}: {exc}") from None


def with_indices(diagram: AnnotatedDiagram, where: str = "diagram") -> AnnotatedDiagram:
    """Give every molecule component its reading-order index unless the record supplies them.

    Supplied indices must be consistent: one box per index, one index per box,
    all within 1..len(molecules).
    """
    comps = list(diagram.mol_components())
    given = [c.index for c in comps if c.index is not None]
    if given:
        if len(given) != len(comps):
            raise SchemaError(f"{where}: molecule indices must be given for all molecules or none")
        by_index, by_box = {}, {}
        for c in comps:
            if not 1 <= c.index <= len(diagram.molecules):
                raise SchemaError(f"{where}: molecule index {c.index} outside 1..{len(diagram.molecules)}")
            if by_index.setdefault(c.index, c.bbox.key()) != c.bbox.key():
                raise SchemaError(f"{where}: index {c.index} used for two different boxes")
            if by_box.setdefault(c.bbox.key(), c.index) != c.index:
                raise SchemaError(f"{where}: one box carries two indices")
        return diagram
    index_of = {box.key(): i for i, box in assign_indices(diagram.molecules).items()}
    reactions = []
    for rxn in diagram.reactions:
        roles = {}
        for role in ROLES:
            roles[role] = tuple(
                Component(MOL, bbox=c.bbox, index=index_of[c.bbox.key()]) if c.is_mol else c
                for c in rxn.role(role))
        reactions.append(ReactionAnnotation(**roles))
    return replace(diagram, reactions=tuple(reactions))


def validate_diagram(diagram: AnnotatedDiagram, where: str = "diagram") -> None:
    known = {b.key() for b in diagram.molecules}
    for j, rxn in enumerate(diagram.reactions):
        try:
            rxn.validate()
        except SchemaError as exc:
            raise SchemaError(f"{where}: reactions[{j}]: {exc}") from None
        for comp in rxn.components():
            if comp.is_mol and comp.bbox.key() not in known:
                raise SchemaError(f"{where}: reactions[{j}] uses a molecule box {comp.bbox.to_list()} "
                                  f"missing from 'molecules'")


def diagram_from_record(rec, fmt: str = RXNCAPTION, ordinal: int = 0) -> AnnotatedDiagram:
    where = f"record {ordinal}"
    if fmt not in FORMATS:
        raise ValueError(f"unknown corpus format {fmt!r}")
    if not isinstance(rec, dict):
        raise SchemaError(f"{where}: must be an object")
    for key in ("image", "width", "height"):
        if key not in rec:
            raise SchemaError(f"{where}: missing field '{key}'")
    if not isinstance(rec["image"], str):
        raise SchemaError(f"{where}.image: must be a string path")
    layout = rec.get("layout") or "unknown"
    if layout not in LAYOUTS:
        raise SchemaError(f"{where}.layout: unknown layout {layout!r}")
    raw_rxns = rec.get("reactions", [])
    if not isinstance(raw_rxns, list):
        raise SchemaError(f"{where}.reactions: must be a list")
    reactions = []
    for j, rxn in enumerate(raw_rxns):
        if not isinstance(rxn, dict):
            raise SchemaError(f"{where}.reactions[{j}]: must be an object")
        roles = {}
        for role in ROLES:
            items = rxn.get(role, [])
            if not isinstance(items, list):
                raise SchemaError(f"{where}.reactions[{j}].{role}: must be a list")
            roles[role] = tuple(_component(o, fmt, f"{where}.reactions[{j}].{role}[{k}]")
                                for k, o in enumerate(items))
        reactions.append(ReactionAnnotation(**roles))

    if "molecules" in rec:
        if not isinstance(rec["molecules"], list):
            raise SchemaError(f"{where}.molecules: must be a list")
        molecules = [_bbox(b, f"{where}.molecules[{k}]") for k, b in enumerate(rec["molecules"])]
    elif fmt == RXNSCRIBE:
        molecules, seen = [], set()
        for rxn in reactions:
            for comp in rxn.components():
                if comp.is_mol and comp.bbox.key() not in seen:
                    seen.add(comp.bbox.key())
                    molecules.append(comp.bbox)
    else:
        raise SchemaError(f"{where}: missing field 'molecules'")

    try:
        diagram = AnnotatedDiagram(rec["image"], rec["width"], rec["height"], tuple(molecules),
                                   tuple(reactions), layout)
    except SchemaError as exc:
        raise SchemaError(f"{where}: {exc}") from None
    validate_diagram(diagram, where)
    return with_indices(diagram, where)


def load_corpus(path, fmt: str = RXNCAPTION) -> list[AnnotatedDiagram]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, list):
        raise SchemaError(f"{path}: corpus must be a JSON array of diagram records")
    return [diagram_from_record(rec, fmt, i) for i, rec in enumerate(data)]


def dumps_corpus(diagrams: Iterable[AnnotatedDiagram]) -> str:
    return json.dumps([d.to_dict() for d in diagrams], indent=1, ensure_ascii=False) + "\n"


def save_corpus(diagrams: Sequence[AnnotatedDiagram], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_corpus(diagrams), encoding="utf-8")
    return path


def reactions_from_dicts(items) -> tuple[ReactionAnnotation, ...]:
    """Inverse of ``ReactionAnnotation.to_dict`` without ground-truth validation."""
    out = []
    for rxn in items:
        roles = {role: tuple(_prediction_component(c) for c in rxn.get(role, [])) for role in ROLES}
        out.append(ReactionAnnotation(**roles))
    return tuple(out)


def _prediction_component(d) -> Component:
    bbox = BBox.from_list(d["bbox"]) if d.get("bbox") is not None else None
    return Component(d["kind"], bbox=bbox, index=d.get("index"), content=d.get("content"))


class DirectoryImages:
    """Read diagram images relative to a corpus directory."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, diagram: AnnotatedDiagram) -> Path:
        p = Path(diagram.image)
        return p if p.is_absolute() else self.root / p

    def __getitem__(self, diagram: AnnotatedDiagram) -> bytes:
        return self.path(diagram).read_bytes()
