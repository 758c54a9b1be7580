"""Completion backends: deterministic oracle, transcript replay and HTTP chat clients."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

from .geometry import iou
from .model import BIVP, BROS, IDT, MOL, ROLES, SUPPLEMENT, TXT, AnnotatedDiagram, BBox, RxnError
from .prompts import GRAPHICAL_TOKEN, IMAGE_SLOT, VQA_KEYS, PromptKind, identify, prompt_hash, vqa_ground_truth

log = logging.getLogger(__name__)

ENV_KEY = "RXNDP_API_KEY"
ENV_URL = "RXNDP_API_URL"


class BackendError(RxnError):
    kind = "backend"


class BackendConfigError(BackendError):
    kind = "config"


class AuthError(BackendError):
    kind = "auth"


class RateLimitError(BackendError):
    kind = "rate_limit"


class BackendTimeout(BackendError):
    kind = "timeout"


class ReplayMiss(BackendError):
    kind = "replay_miss"


class OracleError(BackendError):
    kind = "oracle"


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    image: bytes = b""
    media_type: str = "image/png"
    max_tokens: int = 4096
    deterministic: bool = True
    backend_id: str = ""
    metadata: Mapping = field(default_factory=dict)  # image_id, index_map, ... for test doubles

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if identify(self.prompt) is not None and not self.image:
            raise ValueError("an image is required for template prompts")

    @property
    def kind(self) -> PromptKind | None:
        return identify(self.prompt)


class Backend(Protocol):
    backend_id: str

    def complete(self, request: CompletionRequest) -> str: ...


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class NoiseConfig:
    drop_reaction_rate: float = 0.0
    role_swap_rate: float = 0.0
    index_corrupt_rate: float = 0.0
    text_typo_rate: float = 0.0
    seed: int = 0
    typo_min_length: int = 0  # strings shorter than this are never given a typo

    def __post_init__(self):
        for name in ("drop_reaction_rate", "role_swap_rate", "index_corrupt_rate", "text_typo_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @property
    def is_zero(self) -> bool:
        return not (self.drop_reaction_rate or self.role_swap_rate or self.index_corrupt_rate or self.text_typo_rate)


_TYPO_ALPHABET = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"


def _typo(text: str, rng: random.Random) -> str:
    pos = rng.randrange(len(text))
    choices = [c for c in _TYPO_ALPHABET if c != text[pos] and not (c.isspace())]
    return text[:pos] + rng.choice(choices) + text[pos + 1:]


def _index_of(box: BBox, index_map: Mapping[int, BBox]):
    """Index whose box coincides with ``box``, else the best one with IoU > 0.5."""
    key = box.key()
    for i, b in index_map.items():
        if b.key() == key:
            return i
    best, best_iou = None, 0.5
    for i, b in sorted(index_map.items()):
        v = iou(box, b)
        if v > best_iou:
            best, best_iou = i, v
    return best


def oracle_reply(diagram: AnnotatedDiagram, strategy: str, index_map: Mapping[int, BBox] | None = None,
                 noise: NoiseConfig = NoiseConfig(), missing: str = "error") -> str:
    """Schema-exact reply for the ground truth, degraded by seeded noise.

    ``missing`` decides what happens to a reaction whose molecule has no box
    in ``index_map`` (BIVP only): "error" raises, "drop" omits the reaction.
    """
    strategy = strategy.upper()
    if strategy not in (BROS, BIVP):
        raise ValueError(f"unknown strategy {strategy!r}")
    if missing not in ("error", "drop"):
        raise ValueError("missing must be 'error' or 'drop'")
    index_map = dict(index_map or {})
    rng = random.Random(f"oracle:{noise.seed}:{diagram.id}:{strategy}")

    reactions = []
    for rxn in diagram.reactions:
        out, ok = {}, True
        for role in ROLES:
            items = []
            for comp in rxn.role(role):
                if strategy == BIVP:
                    if comp.is_mol:
                        idx = _index_of(comp.bbox, index_map)
                        if idx is None:
                            if missing == "error":
                                raise OracleError(f"{diagram.id}: molecule {comp.bbox.to_list()} has no index")
                            ok = False
                            break
                        items.append({"type": MOL, "index": idx})
                    elif comp.kind in (TXT, IDT) and comp.content:
                        items.append({"type": comp.kind, "content": comp.content})
                else:
                    if comp.bbox is None:
                        continue
                    category = {MOL: "structure", TXT: "text", IDT: "identifier", SUPPLEMENT: "supplement"}[comp.kind]
                    item = {"category": category, "bbox": comp.bbox.to_list()}
                    if comp.content:
                        item["content"] = comp.content
                    items.append(item)
            out[role] = items
            if not ok:
                break
        if ok:
            reactions.append(out)

    # noise: drop, swap, corrupt, typo
    reactions = [r for r in reactions if not rng.random() < noise.drop_reaction_rate]
    for r in reactions:
        if rng.random() < noise.role_swap_rate:
            r["reactants"], r["products"] = r["products"], r["reactants"]
    if noise.index_corrupt_rate:
        pool_idx = sorted(index_map)
        pool_box = [b.to_list() for b in diagram.molecules]
        for r in reactions:
            for role in ROLES:
                for item in r[role]:
                    if rng.random() >= noise.index_corrupt_rate:
                        continue
                    if item.get("type") == MOL and len(pool_idx) > 1:
                        item["index"] = rng.choice([i for i in pool_idx if i != item["index"]])
                    elif item.get("category") == "structure" and len(pool_box) > 1:
                        item["bbox"] = rng.choice([b for b in pool_box if b != item["bbox"]])
    if noise.text_typo_rate:
        for r in reactions:
            for role in ROLES:
                for item in r[role]:
                    text = item.get("content")
                    if text and len(text) >= max(1, noise.typo_min_length) and rng.random() < noise.text_typo_rate:
                        item["content"] = _typo(text, rng)
    return json.dumps(reactions, ensure_ascii=False)


class OracleBackend:
    """Answers every template prompt from ground truth.

    RxnDP prompts need ``metadata['image_id']`` (and ``index_map`` for BIVP);
    OCR prompts answer ``metadata['ocr_truth']`` or the graphical token.
    """

    def __init__(self, corpus: Sequence[AnnotatedDiagram] | Mapping[str, AnnotatedDiagram],
                 noise: NoiseConfig = NoiseConfig(), missing: str = "error", backend_id: str = "oracle"):
        self.diagrams = dict(corpus) if isinstance(corpus, Mapping) else {d.id: d for d in corpus}
        self.noise = noise
        self.missing = missing
        self.backend_id = backend_id if noise.is_zero else f"{backend_id}:{sha256(repr(noise).encode())[:8]}"

    def _diagram(self, request):
        image_id = request.metadata.get("image_id")
        if image_id not in self.diagrams:
            raise OracleError(f"oracle has no diagram {image_id!r}")
        return self.diagrams[image_id]

    def complete(self, request: CompletionRequest) -> str:
        kind = request.kind
        if kind is None:
            raise OracleError("oracle only answers template prompts")
        if kind == PromptKind.OCR:
            return request.metadata.get("ocr_truth") or GRAPHICAL_TOKEN
        diagram = self._diagram(request)
        if kind in VQA_KEYS:
            key = VQA_KEYS[kind]
            return json.dumps({key: vqa_ground_truth(diagram)[key]})
        strategy = BIVP if kind == PromptKind.BIVP else BROS
        return oracle_reply(diagram, strategy, request.metadata.get("index_map"), self.noise, self.missing)


class ReplayBackend:
    """Serves replies recorded in a transcript keyed by (image hash, prompt hash)."""

    def __init__(self, transcript, backend_id: str | None = None):
        if isinstance(transcript, (str, Path)):
            path = Path(transcript)
            if not path.is_file():
                raise BackendConfigError(f"transcript not found: {path}")
            try:
                entries = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise BackendConfigError(f"{path}: transcript is not valid JSON ({exc})") from None
            backend_id = backend_id or f"replay:{path.name}"
        else:
            entries = transcript
        if not isinstance(entries, list):
            raise BackendConfigError("transcript must be a JSON array")
        self.replies = {}
        for k, e in enumerate(entries):
            if not isinstance(e, dict) or not {"image_hash", "prompt_hash", "reply"} <= set(e):
                raise BackendConfigError(f"transcript entry {k} needs image_hash, prompt_hash and reply")
            self.replies[(e["image_hash"], e["prompt_hash"])] = e["reply"]
        self.backend_id = backend_id or "replay"

    def complete(self, request: CompletionRequest) -> str:
        key = (sha256(request.image), prompt_hash(request.prompt))
        if key not in self.replies:
            raise ReplayMiss(f"no recorded reply for image {key[0][:12]} / prompt {key[1][:12]}")
        return self.replies[key]


class TranscriptRecorder:
    """Wraps a backend and records every reply for later replay."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.backend_id = inner.backend_id
        self.entries: list[dict] = []
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> str:
        reply = self.inner.complete(request)
        entry = {"image_hash": sha256(request.image), "prompt_hash": prompt_hash(request.prompt), "reply": reply}
        with self._lock:
            self.entries.append(entry)
        return reply

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with self._lock:
            entries = sorted(self.entries, key=lambda e: (e["image_hash"], e["prompt_hash"]))
        path.write_text(json.dumps(entries, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
        return path


class TokenBucket:
    """Blocking token bucket: ``rate`` tokens per second, at most ``burst`` stored."""

    def __init__(self, rate: float, burst: int = 1, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if rate <= 0 or burst < 1:
            raise ValueError("rate must be positive and burst >= 1")
        self.rate, self.burst = rate, burst
        self.clock, self.sleep = clock, sleep
        self.tokens = float(burst)
        self.stamp = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self.clock()
                self.tokens = min(self.burst, self.tokens + (now - self.stamp) * self.rate)
                self.stamp = now
                if self.tokens >= 1:
                    self.tokens -= 1
                    return
                wait = (1 - self.tokens) / self.rate
            self.sleep(wait)


@dataclass(frozen=True)
class HttpConfig:
    url: str | None = None            # falls back to RXNDP_API_URL
    model: str = ""
    api_style: str = "openai"         # openai | gemini
    timeout: float = 120.0
    max_retries: int = 5
    backoff_base: float = 1.0
    backoff_max: float = 30.0
    max_in_flight: int = 4
    rate_per_sec: float = 2.0
    burst: int = 4

    def __post_init__(self):
        if self.api_style not in ("openai", "gemini"):
            raise BackendConfigError(f"unknown api_style {self.api_style!r}")
        if self.max_retries < 0 or self.max_in_flight < 1:
            raise BackendConfigError("max_retries must be >= 0 and max_in_flight >= 1")

    @classmethod
    def from_file(cls, path) -> "HttpConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        leaked = {k for k in data if "key" in k.lower() or "token" in k.lower() or "secret" in k.lower()}
        if leaked:
            raise BackendConfigError(f"credentials are read from ${ENV_KEY} only; remove {sorted(leaked)} from the config")
        return cls(**data)


def _split_prompt(prompt: str) -> tuple[str, str]:
    before, slot, after = prompt.partition(IMAGE_SLOT)
    return (before, after) if slot else (prompt, "")


def openai_payload(cfg: HttpConfig, req: CompletionRequest) -> dict:
    before, after = _split_prompt(req.prompt)
    data_url = f"data:{req.media_type};base64,{base64.b64encode(req.image).decode()}"
    content = []
    if before.strip():
        content.append({"type": "text", "text": before})
    if req.image:
        content.append({"type": "image_url", "image_url": {"url": data_url}})
    if after.strip():
        content.append({"type": "text", "text": after})
    body = {"model": cfg.model, "messages": [{"role": "user", "content": content}], "max_tokens": req.max_tokens}
    if req.deterministic:
        body["temperature"] = 0
    return body


def gemini_payload(cfg: HttpConfig, req: CompletionRequest) -> dict:
    before, after = _split_prompt(req.prompt)
    parts = []
    if before.strip():
        parts.append({"text": before})
    if req.image:
        parts.append({"inline_data": {"mime_type": req.media_type, "data": base64.b64encode(req.image).decode()}})
    if after.strip():
        parts.append({"text": after})
    gen = {"maxOutputTokens": req.max_tokens}
    if req.deterministic:
        gen["temperature"] = 0
    return {"contents": [{"role": "user", "parts": parts}], "generationConfig": gen}


def _reply_text(style: str, data) -> str:
    try:
        if style == "openai":
            content = data["choices"][0]["message"]["content"]
            if isinstance(content, list):
                content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
            return content
        parts = data["candidates"][0]["content"]["parts"]
        return "".join(p.get("text", "") for p in parts)
    except (KeyError, IndexError, TypeError):
        raise BackendError("unexpected response shape from the completion endpoint") from None


class HttpBackend:
    """Chat-with-one-image client for OpenAI-compatible and Gemini endpoints."""

    def __init__(self, config: HttpConfig = HttpConfig(), transport=None,
                 sleep: Callable[[float], None] = time.sleep, clock: Callable[[], float] = time.monotonic):
        import httpx

        self.config = config
        self.url = config.url or os.environ.get(ENV_URL)
        if not self.url:
            raise BackendConfigError(f"no endpoint: set ${ENV_URL} or give a url")
        self._key = os.environ.get(ENV_KEY)
        if not self._key:
            raise BackendConfigError(f"no credential: set ${ENV_KEY}")
        self.backend_id = f"http:{config.api_style}:{config.model}"
        self.sleep = sleep
        self.client = httpx.Client(timeout=config.timeout, transport=transport)
        self.in_flight = threading.BoundedSemaphore(config.max_in_flight)
        self.limiter = TokenBucket(config.rate_per_sec, config.burst, clock=clock, sleep=sleep)
        self._httpx = httpx

    def __repr__(self):
        return f"HttpBackend(url={self.url!r}, style={self.config.api_style!r}, model={self.config.model!r})"

    def _headers(self) -> dict:
        if self.config.api_style == "gemini":
            return {"x-goog-api-key": self._key}
        return {"Authorization": f"Bearer {self._key}"}

    def _backoff(self, attempt: int, retry_after=None) -> float:
        if retry_after is not None:
            try:
                return min(float(retry_after), self.config.backoff_max)
            except ValueError:
                pass
        return min(self.config.backoff_base * 2 ** attempt, self.config.backoff_max)

    def complete(self, request: CompletionRequest) -> str:
        build = gemini_payload if self.config.api_style == "gemini" else openai_payload
        body = build(self.config, request)
        last: BackendError | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self.sleep(self._backoff(attempt - 1, getattr(last, "retry_after", None)))
            self.limiter.acquire()
            with self.in_flight:
                try:
                    resp = self.client.post(self.url, json=body, headers=self._headers())
                except self._httpx.TimeoutException:
                    last = BackendTimeout(f"request timed out after {self.config.timeout}s")
                    continue
                except self._httpx.TransportError as exc:
                    last = BackendError(f"transport error: {type(exc).__name__}")
                    continue
            status = resp.status_code
            if status in (401, 403):
                raise AuthError(f"endpoint rejected the credential (HTTP {status})")
            if status == 429:
                last = RateLimitError("rate limited (HTTP 429)")
                last.retry_after = resp.headers.get("retry-after")
                log.info("rate limited, attempt %d", attempt + 1)
                continue
            if status >= 500:
                last = BackendError(f"server error (HTTP {status})")
                continue
            if status != 200:
                raise BackendError(f"endpoint answered HTTP {status}")
            try:
                return _reply_text(self.config.api_style, resp.json())
            except ValueError:
                raise BackendError("endpoint returned non-JSON") from None
        assert last is not None
        raise last


def make_backend(spec: str, corpus: Sequence[AnnotatedDiagram] = (), noise: NoiseConfig = NoiseConfig(),
                 http_config: HttpConfig | None = None) -> Backend:
    """'oracle', 'replay:PATH' or 'http'."""
    if spec == "oracle":
        return OracleBackend(corpus, noise)
    if spec.startswith("replay:"):
        return ReplayBackend(spec[len("replay:"):])
    if spec == "http":
        return HttpBackend(http_config or HttpConfig())
    raise BackendConfigError(f"unknown backend {spec!r}; use oracle, replay:PATH or http")
