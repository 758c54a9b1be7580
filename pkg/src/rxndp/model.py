"""Core data model: boxes, components, reactions, diagrams and match reports.

All types are frozen dataclasses and safe to share between threads.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import PurePath
from typing import Iterable, Mapping

MOL = "mol"
TXT = "txt"
IDT = "idt"
SUPPLEMENT = "supplement"
KINDS = (MOL, TXT, IDT, SUPPLEMENT)
TEXT_KINDS = (TXT, IDT, SUPPLEMENT)

ROLES = ("reactants", "conditions", "products")

LAYOUTS = ("single-line", "multi-line", "tree", "cyclic", "unknown")

BROS = "BROS"
BIVP = "BIVP"

_WS = re.compile(r"\s+")


class RxnError(Exception):
    """Base class for every error raised by the toolkit."""


class SchemaError(RxnError, ValueError):
    """A record or payload does not follow the documented schema."""


class BBoxError(SchemaError):
    """Box coordinates violate 0 <= x1 < x2 <= 1, 0 <= y1 < y2 <= 1."""


def normalize_text(text: str) -> str:
    """Trim and collapse whitespace runs; case is preserved."""
    return _WS.sub(" ", text).strip()


def _is_number(v) -> bool:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        return False
    try:
        return math.isfinite(v)
    except OverflowError:  # ints beyond float range
        return False


@dataclass(frozen=True, order=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(_is_number(v) for v in coords):
            raise BBoxError(f"bbox coordinates must be finite numbers, got {list(coords)}")
        if not (0 <= self.x1 < self.x2 <= 1 and 0 <= self.y1 < self.y2 <= 1):
            raise BBoxError(f"bbox out of range or degenerate: {list(coords)}")

    @classmethod
    def from_list(cls, values) -> "BBox":
        if not isinstance(values, (list, tuple)) or len(values) != 4:
            raise BBoxError(f"bbox must be a list of four numbers, got {values!r}")
        if not all(_is_number(v) for v in values):
            raise BBoxError(f"bbox coordinates must be finite numbers, got {values!r}")
        return cls(*(float(v) for v in values))

    @classmethod
    def from_pixels(cls, left, top, right, bottom, width, height) -> "BBox":
        """Half-open pixel rectangle [left, right) x [top, bottom) to a normalized box."""
        return cls(left / width, top / height, right / width, bottom / height)

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    def key(self, ndigits: int = 9) -> tuple[float, ...]:
        """Hashable identity used where boxes must coincide exactly (IoU = 1)."""
        return tuple(round(v, ndigits) for v in self.to_list())


@dataclass(frozen=True)
class Component:
    """A reaction participant.

    Molecules carry a ``bbox`` and/or an ``index`` (the number drawn on the
    pre-annotated image). Text kinds carry ``content``; a ``bbox`` may also be
    present when the source knows where the text sits.
    """

    kind: str
    bbox: BBox | None = None
    index: int | None = None
    content: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown component kind {self.kind!r}")
        if self.index is not None:
            if isinstance(self.index, bool) or not isinstance(self.index, int) or self.index < 1:
                raise SchemaError(f"molecule index must be a positive integer, got {self.index!r}")
        if self.content is not None:
            object.__setattr__(self, "content", normalize_text(self.content))
        if self.kind == MOL:
            if self.bbox is None and self.index is None:
                raise SchemaError("mol component needs a bbox or an index")
        else:
            if self.index is not None:
                raise SchemaError(f"{self.kind} component cannot carry an index")
            if not self.content and self.bbox is None:
                raise SchemaError(f"{self.kind} component needs non-empty content or a bbox")

    @classmethod
    def mol(cls, bbox: BBox | None = None, index: int | None = None) -> "Component":
        return cls(MOL, bbox=bbox, index=index)

    @classmethod
    def text(cls, content: str, kind: str = TXT, bbox: BBox | None = None) -> "Component":
        return cls(kind, bbox=bbox, content=content)

    @property
    def is_mol(self) -> bool:
        return self.kind == MOL

    def identity(self):
        """Key used for duplicate detection inside one role."""
        if self.kind == MOL:
            return (MOL, self.bbox.key() if self.bbox is not None else None, self.index)
        if self.content:
            return (self.kind, self.content)
        return (self.kind, self.bbox.key())

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.bbox is not None:
            d["bbox"] = self.bbox.to_list()
        if self.index is not None:
            d["index"] = self.index
        if self.content is not None:
            d["content"] = self.content
        return d


@dataclass(frozen=True)
class ReactionAnnotation:
    reactants: tuple[Component, ...] = ()
    conditions: tuple[Component, ...] = ()
    products: tuple[Component, ...] = ()

    def __post_init__(self):
        for role in ROLES:
            object.__setattr__(self, role, tuple(getattr(self, role)))

    def role(self, name: str) -> tuple[Component, ...]:
        return getattr(self, name)

    def components(self) -> Iterable[Component]:
        for role in ROLES:
            yield from self.role(role)

    @property
    def is_empty(self) -> bool:
        return not self.reactants and not self.products

    def validate(self) -> None:
        """Raise SchemaError unless the ground-truth invariants hold."""
        if self.is_empty:
            raise SchemaError("reaction has neither reactants nor products")
        for role in ROLES:
            seen = set()
            for comp in self.role(role):
                ident = comp.identity()
                if ident in seen:
                    raise SchemaError(f"duplicate component in {role}: {comp.to_dict()}")
                seen.add(ident)

    def deduplicated(self) -> tuple["ReactionAnnotation", int]:
        """Copy with repeated components removed per role, plus the number removed."""
        removed = 0
        roles = {}
        for role in ROLES:
            kept, seen = [], set()
            for comp in self.role(role):
                ident = comp.identity()
                if ident in seen:
                    removed += 1
                    continue
                seen.add(ident)
                kept.append(comp)
            roles[role] = tuple(kept)
        return ReactionAnnotation(**roles), removed

    def to_dict(self) -> dict:
        return {role: [c.to_dict() for c in self.role(role)] for role in ROLES}


@dataclass(frozen=True)
class AnnotatedDiagram:
    """One diagram image with its molecule boxes and ground-truth reactions."""

    image: str
    width: int
    height: int
    molecules: tuple[BBox, ...] = ()
    reactions: tuple[ReactionAnnotation, ...] = ()
    layout: str = "unknown"

    def __post_init__(self):
        object.__setattr__(self, "molecules", tuple(self.molecules))
        object.__setattr__(self, "reactions", tuple(self.reactions))
        if self.layout not in LAYOUTS:
            raise SchemaError(f"unknown layout {self.layout!r}")
        for name in ("width", "height"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
                raise SchemaError(f"{name} must be a positive integer, got {v!r}")

    @property
    def id(self) -> str:
        return PurePath(self.image).stem

    def mol_components(self) -> Iterable[Component]:
        for rxn in self.reactions:
            for comp in rxn.components():
                if comp.is_mol:
                    yield comp

    def to_dict(self) -> dict:
        return {
            "image": self.image,
            "width": self.width,
            "height": self.height,
            "layout": self.layout,
            "molecules": [b.to_list() for b in self.molecules],
            "reactions": [r.to_dict() for r in self.reactions],
        }


@dataclass(frozen=True)
class ParsedOutput:
    """A raw model reply and the reactions decoded from it."""

    strategy: str
    raw: str
    reactions: tuple[ReactionAnnotation, ...] = ()
    dropped_empty: int = 0
    dropped_duplicates: int = 0

    def __post_init__(self):
        object.__setattr__(self, "reactions", tuple(self.reactions))
        if self.strategy not in (BROS, BIVP):
            raise SchemaError(f"unknown strategy {self.strategy!r}")


def ratios(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall, F1; empty denominators score 1, F1 is 0 when p + r = 0."""
    p = tp / (tp + fp) if tp + fp else 1.0
    r = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


@dataclass(frozen=True)
class MatchReport:
    mode: str
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    per_layout: Mapping[str, tuple[int, int, int]] = field(default_factory=dict)

    @classmethod
    def from_counts(cls, mode: str, tp: int, fp: int, fn: int, per_layout=None) -> "MatchReport":
        p, r, f1 = ratios(tp, fp, fn)
        return cls(mode, tp, fp, fn, p, r, f1, dict(per_layout or {}))

    def layout_scores(self) -> dict[str, tuple[float, float, float]]:
        return {k: ratios(*v) for k, v in self.per_layout.items()}

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "per_layout": {k: list(v) for k, v in sorted(self.per_layout.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MatchReport":
        return cls(
            d["mode"], int(d["tp"]), int(d["fp"]), int(d["fn"]),
            float(d["precision"]), float(d["recall"]), float(d["f1"]),
            {k: tuple(int(x) for x in v) for k, v in d.get("per_layout", {}).items()},
        )
