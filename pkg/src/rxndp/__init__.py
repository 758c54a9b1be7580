"""Tools for evaluating reaction-diagram parsing by multimodal models."""

from .model import (
    BIVP, BROS, AnnotatedDiagram, BBox, BBoxError, Component, MatchReport, ParsedOutput,
    ReactionAnnotation, RxnError, SchemaError,
)

__version__ = "0.1.0"

__all__ = [
    "BIVP", "BROS", "AnnotatedDiagram", "BBox", "BBoxError", "Component", "MatchReport",
    "ParsedOutput", "ReactionAnnotation", "RxnError", "SchemaError", "__version__",
]
