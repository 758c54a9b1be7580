"""Decoding model replies for the BROS and BIVP output schemas."""

from __future__ import annotations

import json
import re
from typing import Mapping

from .model import (
    BIVP, BROS, IDT, MOL, ROLES, SUPPLEMENT, TXT, BBox, BBoxError, Component, ParsedOutput,
    ReactionAnnotation, RxnError, SchemaError,
)

BROS_CATEGORIES = {"structure": MOL, "text": TXT, "identifier": IDT, "supplement": SUPPLEMENT}
BIVP_TYPES = (MOL, TXT, IDT)

_FENCE = re.compile(r"```[A-Za-z0-9_+-]*")
_TRAILING_COMMA = re.compile(r",\s*([\]}])")
_decoder = json.JSONDecoder()


class ParseError(RxnError, ValueError):
    kind = "parse"


class NoJSONError(ParseError):
    kind = "no_json"


class PayloadSchemaError(ParseError, SchemaError):
    kind = "schema"


class BBoxRangeError(PayloadSchemaError):
    kind = "bbox"


class BadIndexError(PayloadSchemaError):
    kind = "index"


class DanglingIndexError(ParseError):
    kind = "dangling_index"

    def __init__(self, index: int):
        super().__init__(f"molecule index {index} is not in the index map")
        self.index = index


MAX_DECODE_ATTEMPTS = 256


def _decode_at(text: str, pos: int):
    """Decode the JSON value starting at ``pos``; retry once with trailing commas removed."""
    try:
        return _decoder.raw_decode(text, pos)[0]
    except (ValueError, RecursionError):
        pass
    try:
        return _decoder.raw_decode(_TRAILING_COMMA.sub(r"\1", text[pos:]))[0]
    except (ValueError, RecursionError):
        return None


def _candidates(text: str):
    # Only the first and last bracket of a run like "[[[[" are tried, and the
    # number of attempts is capped, so pathological replies stay linear-ish.
    pos = text.find("[")
    attempts = 0
    while pos != -1 and attempts < MAX_DECODE_ATTEMPTS:
        if 0 < pos < len(text) - 1 and text[pos - 1] == "[" and text[pos + 1] == "[":
            pos = text.find("[", pos + 1)
            continue
        attempts += 1
        value = _decode_at(text, pos)
        if isinstance(value, list):
            yield value
        pos = text.find("[", pos + 1)


def extract_json_array(raw) -> list:
    """Return the first JSON array embedded in ``raw``.

    Markdown fences and surrounding prose are ignored. An array of objects (or
    an empty array) is preferred over arrays of scalars that appear earlier,
    e.g. citation brackets in prose.
    """
    if isinstance(raw, (bytes, bytearray)):
        raw = bytes(raw).decode("utf-8", errors="replace")
    if not isinstance(raw, str):
        raise NoJSONError(f"expected text, got {type(raw).__name__}")
    fallback = None
    for value in _candidates(_FENCE.sub("", raw)):
        if all(isinstance(v, dict) for v in value):
            return value
        if fallback is None:
            fallback = value
    if fallback is not None:
        return fallback
    raise NoJSONError("no JSON array found in model output")


def _role_items(rxn, where: str):
    if not isinstance(rxn, dict):
        raise PayloadSchemaError(f"{where}: reaction must be an object, got {type(rxn).__name__}")
    for role in ROLES:
        items = rxn.get(role, [])
        if items is None:
            items = []
        if not isinstance(items, list):
            raise PayloadSchemaError(f"{where}.{role}: expected a list")
        yield role, items


def _bbox(value, where: str) -> BBox:
    try:
        return BBox.from_list(value)
    except BBoxError as exc:
        raise BBoxRangeError(f"{where}: {exc}") from None


def _content(value, where: str):
    if isinstance(value, list) and all(isinstance(v, str) for v in value):
        value = " ".join(value)
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        value = str(value)
    if not isinstance(value, str):
        raise PayloadSchemaError(f"{where}: content must be a string")
    return value


def _finish(strategy: str, raw, reactions: list[ReactionAnnotation]) -> ParsedOutput:
    kept, dropped, dups = [], 0, 0
    for rxn in reactions:
        if rxn.is_empty:
            dropped += 1
            continue
        rxn, n = rxn.deduplicated()
        dups += n
        kept.append(rxn)
    text = raw if isinstance(raw, str) else bytes(raw).decode("utf-8", errors="replace")
    return ParsedOutput(strategy, text, tuple(kept), dropped, dups)


def _bros_component(obj, where: str) -> Component:
    if not isinstance(obj, dict):
        raise PayloadSchemaError(f"{where}: object expected")
    if "category" not in obj or "bbox" not in obj:
        raise PayloadSchemaError(f"{where}: missing 'category' or 'bbox'")
    category = obj["category"]
    if not isinstance(category, str) or category.strip().lower() not in BROS_CATEGORIES:
        raise PayloadSchemaError(f"{where}: unknown category {category!r}")
    kind = BROS_CATEGORIES[category.strip().lower()]
    bbox = _bbox(obj["bbox"], where)
    if kind == MOL:
        return Component(MOL, bbox=bbox)
    content = obj.get("content", obj.get("text"))
    content = _content(content, where) if content is not None else None
    return Component(kind, bbox=bbox, content=content or None)


def parse_bros_output(raw) -> ParsedOutput:
    """Decode a BROS reply: components carry a category and an inline box."""
    reactions = []
    for i, rxn in enumerate(extract_json_array(raw)):
        roles = {}
        for role, items in _role_items(rxn, f"reaction[{i}]"):
            roles[role] = [_bros_component(o, f"reaction[{i}].{role}[{k}]") for k, o in enumerate(items)]
        reactions.append(ReactionAnnotation(**roles))
    return _finish(BROS, raw, reactions)


def _as_index(value, where: str) -> int:
    if isinstance(value, bool):
        raise PayloadSchemaError(f"{where}: index must be an integer")
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    elif isinstance(value, str) and re.fullmatch(r"\s*-?\d{1,9}\s*", value):
        value = int(value)
    if not isinstance(value, int):
        raise PayloadSchemaError(f"{where}: index must be an integer, got {value!r}")
    if value < 1:
        raise BadIndexError(f"{where}: index must be positive, got {value}")
    return value


def _bivp_component(obj, where: str) -> Component:
    if not isinstance(obj, dict):
        raise PayloadSchemaError(f"{where}: object expected")
    kind = obj.get("type")
    if not isinstance(kind, str) or kind.strip().lower() not in BIVP_TYPES:
        raise PayloadSchemaError(f"{where}: type must be one of mol/txt/idt, got {kind!r}")
    kind = kind.strip().lower()
    if kind == MOL:
        if "index" not in obj:
            raise PayloadSchemaError(f"{where}: mol component requires 'index'")
        return Component(MOL, index=_as_index(obj["index"], where))
    if "content" not in obj:
        raise PayloadSchemaError(f"{where}: {kind} component requires 'content'")
    content = _content(obj["content"], where)
    if not content.strip():
        raise PayloadSchemaError(f"{where}: {kind} component has empty content")
    return Component(kind, content=content)


def parse_bivp_output(raw) -> ParsedOutput:
    """Decode a BIVP reply: molecules are referenced by their drawn index."""
    reactions = []
    for i, rxn in enumerate(extract_json_array(raw)):
        roles = {}
        for role, items in _role_items(rxn, f"reaction[{i}]"):
            roles[role] = [_bivp_component(o, f"reaction[{i}].{role}[{k}]") for k, o in enumerate(items)]
        reactions.append(ReactionAnnotation(**roles))
    return _finish(BIVP, raw, reactions)


def parse_output(raw, strategy: str) -> ParsedOutput:
    strategy = strategy.upper()
    if strategy == BROS:
        return parse_bros_output(raw)
    if strategy == BIVP:
        return parse_bivp_output(raw)
    raise ValueError(f"unknown strategy {strategy!r}")


def resolve_bivp(output: ParsedOutput, index_map: Mapping[int, BBox],
                 strict: bool = True) -> tuple[ReactionAnnotation, ...]:
    """Replace molecule indices by the boxes they were drawn for.

    With ``strict=False`` a dangling index leaves its component unresolved
    (it can then match nothing) instead of raising.
    """
    if output.strategy != BIVP:
        raise ValueError("resolve_bivp needs a BIVP output")
    resolved = []
    for rxn in output.reactions:
        roles = {}
        for role in ROLES:
            comps = []
            for comp in rxn.role(role):
                if comp.is_mol and comp.index is not None and comp.bbox is None:
                    box = index_map.get(comp.index)
                    if box is None:
                        if strict:
                            raise DanglingIndexError(comp.index)
                    else:
                        comp = Component(MOL, bbox=box, index=comp.index)
                comps.append(comp)
            roles[role] = tuple(comps)
        resolved.append(ReactionAnnotation(**roles))
    return tuple(resolved)
