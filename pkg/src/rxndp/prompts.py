"""Prompt templates and VQA ground truth and scoring."""

from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Iterable

from .model import AnnotatedDiagram

IMAGE_SLOT = "<image>"
GRAPHICAL_TOKEN = "[GRAPHICAL_STRUCTURE]"


class PromptKind(str, enum.Enum):
    BROS = "bros"
    BIVP = "bivp"
    VQA_REACTION_COUNT = "vqa_reaction_count"
    VQA_STRUCTURE_COUNT = "vqa_structure_count"
    VQA_CYCLIC = "vqa_cyclic"
    VQA_TREE = "vqa_tree"
    OCR = "ocr"

    @classmethod
    def parse(cls, value: "PromptKind | str") -> "PromptKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", "_"))
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown prompt kind {value!r}; expected one of {names}") from None


VQA_KINDS = (PromptKind.VQA_REACTION_COUNT, PromptKind.VQA_STRUCTURE_COUNT,
             PromptKind.VQA_CYCLIC, PromptKind.VQA_TREE)
VQA_KEYS = {
    PromptKind.VQA_REACTION_COUNT: "reaction_count",
    PromptKind.VQA_STRUCTURE_COUNT: "structure_count",
    PromptKind.VQA_CYCLIC: "cyclic",
    PromptKind.VQA_TREE: "tree",
}


@lru_cache(maxsize=None)
def build_prompt(kind: PromptKind | str) -> str:
    """The verbatim template text; ``<image>`` marks where the image is attached."""
    kind = PromptKind.parse(kind)
    return resources.files("rxndp").joinpath("templates", f"{kind.value}.txt").read_text(encoding="utf-8")


def template_hash(kind: PromptKind | str) -> str:
    return hashlib.sha256(build_prompt(kind).encode("utf-8")).hexdigest()


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def identify(prompt: str) -> PromptKind | None:
    """Which template ``prompt`` is, or None for free-form prompts."""
    for kind in PromptKind:
        if build_prompt(kind) == prompt:
            return kind
    return None


def vqa_ground_truth(diagram: AnnotatedDiagram) -> dict:
    return {
        "reaction_count": len(diagram.reactions),
        "structure_count": len(diagram.molecules),
        "cyclic": diagram.layout == "cyclic",
        "tree": diagram.layout == "tree",
    }


_OBJECT = re.compile(r"\{[^{}]*\}")


def parse_vqa_reply(kind: PromptKind | str, raw: str):
    """Decode the answer for one VQA question; None when the reply is unusable."""
    key = VQA_KEYS[PromptKind.parse(kind)]
    if not isinstance(raw, str):
        return None
    for chunk in _OBJECT.findall(raw):
        try:
            obj = json.loads(chunk)
        except ValueError:
            continue
        if not isinstance(obj, dict) or key not in obj:
            continue
        value = obj[key]
        if key in ("cyclic", "tree"):
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.strip().lower() in ("true", "false"):
                return value.strip().lower() == "true"
            return None
        if isinstance(value, bool):
            return None
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str) and value.strip().isdigit():
            return int(value)
        return None
    return None


@dataclass(frozen=True)
class VQAScore:
    accuracy: dict = field(default_factory=dict)   # key -> percent
    counts: dict = field(default_factory=dict)     # key -> (correct, total)
    undecodable: dict = field(default_factory=dict)
    mean: float = 0.0

    def to_dict(self) -> dict:
        return {"accuracy": dict(self.accuracy), "mean": self.mean,
                "counts": {k: list(v) for k, v in self.counts.items()},
                "undecodable": dict(self.undecodable)}


def score_vqa(answers: Iterable[tuple[str, object, object]]) -> VQAScore:
    """Exact-match accuracy per question from (key, predicted, truth) triples.

    A predicted value of None is an undecodable reply: it counts as wrong and
    is also tallied on its own. The mean is the unweighted average over the
    question kinds that occur.
    """
    correct: dict[str, int] = {}
    total: dict[str, int] = {}
    bad: dict[str, int] = {}
    for key, pred, truth in answers:
        if isinstance(key, PromptKind):
            key = VQA_KEYS[key]
        total[key] = total.get(key, 0) + 1
        bad.setdefault(key, 0)
        correct.setdefault(key, 0)
        if pred is None:
            bad[key] += 1
        elif type(pred) is type(truth) and pred == truth:
            correct[key] += 1
    order = [k for k in VQA_KEYS.values() if k in total] + sorted(set(total) - set(VQA_KEYS.values()))
    acc = {k: 100.0 * correct[k] / total[k] for k in order}
    mean = sum(acc.values()) / len(acc) if acc else 0.0
    return VQAScore(acc, {k: (correct[k], total[k]) for k in order}, {k: bad[k] for k in order}, mean)
