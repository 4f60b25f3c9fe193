"""Clients that answer (question, image) pairs: HTTP endpoints and mocks.

The HTTP client speaks the common chat-completions JSON schema with the
image inlined as a base64 PNG data URI and temperature pinned to 0.
Deterministic mock clients make the whole pipeline testable offline; the
luminance-sensitive mock simulates a model that fails when a watermark
darkens regions it relies on.
"""

from __future__ import annotations

import base64
import os
import threading
import time
from dataclasses import dataclass, field

import numpy as np
import requests

from .corpus import DocumentImage, EvalDataset, VqaItem, load_image
from .watermark import encode_png

OPTION_LETTERS = ("A", "B", "C", "D")

# Bump when build_prompt changes; reply caches are keyed on it.
PROMPT_TEMPLATE_VERSION = "v1"

RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})
BACKOFF_BASE = 0.5
BACKOFF_CAP = 30.0


class AuthenticationError(RuntimeError):
    """Endpoint rejected credentials; the run must abort immediately."""


class TransportError(RuntimeError):
    """Request failed after all retries; the item is reported unanswered."""


@dataclass(frozen=True)
class ModelEndpoint:
    """How to reach one model behind an HTTP chat-completions API.

    ``api_key_env`` names an environment variable; the key itself never
    appears in config files or logs.
    """

    base_url: str
    model_name: str
    api_key_env: str = ""
    timeout: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


@dataclass(frozen=True)
class ModelReply:
    """Verbatim model output for one item under one condition."""

    item_id: str
    raw_text: str
    latency: float
    attempt_count: int
    condition_id: str
    unanswered: bool = False


def build_prompt(item: VqaItem) -> str:
    """Deterministic question template: question, options, answer instruction."""
    lines = [item.question.strip(), ""]
    for letter in OPTION_LETTERS:
        lines.append(f"{letter}. {item.options[letter]}")
    plural = "letters" if item.category == "ChartM" else "letter"
    lines.append("")
    lines.append(f"Answer with the option {plural} only.")
    return "\n".join(lines)


def image_data_uri(image: DocumentImage) -> str:
    encoded = base64.b64encode(encode_png(image)).decode("ascii")
    return f"data:image/png;base64,{encoded}"


def chat_request_body(
    endpoint: ModelEndpoint, item: VqaItem, image: DocumentImage
) -> dict:
    return {
        "model": endpoint.model_name,
        "temperature": 0,
        "messages": [
            {
                "role": "user",
                "content": [
                    {"type": "text", "text": build_prompt(item)},
                    {
                        "type": "image_url",
                        "image_url": {"url": image_data_uri(image)},
                    },
                ],
            }
        ],
    }


class RateLimiter:
    """Shared minimum-interval limiter, safe across worker threads."""

    def __init__(self, max_per_second: float | None = None):
        self._interval = 1.0 / max_per_second if max_per_second else 0.0
        self._lock = threading.Lock()
        self._next_at = 0.0

    def acquire(self) -> None:
        if self._interval <= 0:
            return
        with self._lock:
            now = time.monotonic()
            wait = self._next_at - now
            self._next_at = max(self._next_at, now) + self._interval
        if wait > 0:
            time.sleep(wait)


def query(
    endpoint: ModelEndpoint,
    item: VqaItem,
    image: DocumentImage,
    condition_id: str = "clean",
    session: requests.Session | None = None,
    rate_limiter: RateLimiter | None = None,
    sleep=time.sleep,
) -> ModelReply:
    """POST one question-image pair and return the verbatim reply text.

    Retries 429 and 5xx responses and connection failures with exponential
    backoff up to max_retries. Raises AuthenticationError on 401/403 and
    TransportError once retries are exhausted.
    """
    http = session or requests
    url = endpoint.base_url.rstrip("/") + "/chat/completions"
    headers = {"Content-Type": "application/json"}
    if endpoint.api_key_env:
        key = os.environ.get(endpoint.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
    body = chat_request_body(endpoint, item, image)

    start = time.monotonic()
    attempts = 0
    last_error: str = "no attempts made"
    while attempts <= endpoint.max_retries:
        attempts += 1
        try:
            resp = http.post(
                url, json=body, headers=headers, timeout=endpoint.timeout
            )
        except requests.RequestException as exc:
            last_error = f"connection error: {exc}"
        else:
            if resp.status_code in (401, 403):
                raise AuthenticationError(
                    f"endpoint rejected credentials (HTTP {resp.status_code})"
                )
            if resp.status_code == 200:
                payload = resp.json()
                text = payload["choices"][0]["message"]["content"]
                return ModelReply(
                    item_id=item.id,
                    raw_text=text,
                    latency=time.monotonic() - start,
                    attempt_count=attempts,
                    condition_id=condition_id,
                )
            last_error = f"HTTP {resp.status_code}"
            if resp.status_code not in RETRYABLE_STATUS:
                break
        if attempts <= endpoint.max_retries:
            if rate_limiter:
                rate_limiter.acquire()
            sleep(min(BACKOFF_BASE * 2 ** (attempts - 1), BACKOFF_CAP))
    raise TransportError(
        f"item {item.id}: {last_error} after {attempts} attempt(s)"
    )


def region_luminance(
    image: DocumentImage, region: tuple[float, float, float, float]
) -> float:
    """Mean Rec.601 luma inside an (x, y, w, h) pixel rectangle."""
    x, y, w, h = region
    x0, y0 = max(int(round(x)), 0), max(int(round(y)), 0)
    x1 = min(int(round(x + w)), image.width)
    y1 = min(int(round(y + h)), image.height)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"region {region} lies outside the image")
    patch = image.pixels[y0:y1, x0:x1].astype(np.float64)
    luma = 0.299 * patch[..., 0] + 0.587 * patch[..., 1] + 0.114 * patch[..., 2]
    return float(luma.mean())


def _correct_reply(item: VqaItem) -> str:
    return ", ".join(sorted(item.answer))


def _wrong_reply(item: VqaItem) -> str:
    for letter in OPTION_LETTERS:
        if letter not in item.answer:
            return letter
    raise ValueError(f"item {item.id} has no wrong option")


@dataclass(frozen=True)
class AlwaysCorrect:
    """Answers every question with the exact ground-truth letter set."""

    def answer(self, item: VqaItem, image: DocumentImage) -> str:
        return _correct_reply(item)


@dataclass(frozen=True)
class AlwaysWrong:
    """Answers every question with a letter outside the ground truth."""

    def answer(self, item: VqaItem, image: DocumentImage) -> str:
        return _wrong_reply(item)


@dataclass(frozen=True)
class FlipIfDarkened:
    """Answers wrong iff any watched region's luminance moved beyond a threshold.

    Baselines are per-item mean luminances of the clean images, captured
    up front, so behavior is independent of query order.
    """

    regions: tuple[tuple[float, float, float, float], ...]
    threshold: float
    baselines: dict[str, tuple[float, ...]] = field(default_factory=dict)

    @classmethod
    def from_dataset(
        cls,
        dataset: EvalDataset,
        regions: list[tuple[float, float, float, float]],
        threshold: float,
    ) -> "FlipIfDarkened":
        baselines = {}
        for item in dataset.items:
            image = load_image(dataset.resolve_image(item))
            baselines[item.id] = tuple(
                region_luminance(image, r) for r in regions
            )
        return cls(tuple(tuple(r) for r in regions), threshold, baselines)

    def answer(self, item: VqaItem, image: DocumentImage) -> str:
        base = self.baselines[item.id]
        for region, clean in zip(self.regions, base):
            if abs(region_luminance(image, region) - clean) > self.threshold:
                return _wrong_reply(item)
        return _correct_reply(item)


def mock_oracle(item: VqaItem, image: DocumentImage, behavior) -> str:
    """Deterministic stand-in for a model: delegate to a behavior rule."""
    return behavior.answer(item, image)


class MockClient:
    """Drop-in stand-in for the HTTP client, with a query log for tests."""

    def __init__(self, behavior):
        self.behavior = behavior
        self.calls: list[tuple[str, str]] = []
        self._lock = threading.Lock()
        self.model_name = f"mock-{type(behavior).__name__}"

    @property
    def max_in_flight(self) -> int:
        return 4

    def query_item(
        self, item: VqaItem, image: DocumentImage, condition_id: str
    ) -> ModelReply:
        with self._lock:
            self.calls.append((item.id, condition_id))
        return ModelReply(
            item_id=item.id,
            raw_text=mock_oracle(item, image, self.behavior),
            latency=0.0,
            attempt_count=1,
            condition_id=condition_id,
        )


class HttpClient:
    """Thin wrapper binding an endpoint, session, and shared rate limiter."""

    def __init__(
        self,
        endpoint: ModelEndpoint,
        rate_limiter: RateLimiter | None = None,
    ):
        self.endpoint = endpoint
        self.model_name = endpoint.model_name
        self.rate_limiter = rate_limiter
        self._session = requests.Session()

    @property
    def max_in_flight(self) -> int:
        return self.endpoint.max_in_flight

    def query_item(
        self, item: VqaItem, image: DocumentImage, condition_id: str
    ) -> ModelReply:
        if self.rate_limiter:
            self.rate_limiter.acquire()
        return query(
            self.endpoint,
            item,
            image,
            condition_id,
            session=self._session,
            rate_limiter=self.rate_limiter,
        )
