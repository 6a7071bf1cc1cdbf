"""Model backends: a live chat-completions client and a replay store.

Both expose the same surface: ``model_id``, ``transcribe(image_ref,
bundle)``, and ``complete(bundle)``. The replay backend is content
addressed; transcriptions key on the image bytes and completions on the
full bundle text, so editing a template breaks fixtures loudly instead
of silently answering a different prompt.
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path
from typing import Protocol

import httpx

from .core import GRID_TENTHS_DEFAULT, GradePipeError, Score, score_from_tenths
from .prompting import PromptBundle, ResponseContract

__all__ = [
    "TransportError",
    "MissingFixture",
    "MalformedOutput",
    "ScoreOutOfRange",
    "ExhaustedRetries",
    "Backend",
    "BackendCallLog",
    "CallLog",
    "ReplayBackend",
    "HttpBackend",
    "parse_scored_feedback",
    "complete_with_retry",
    "transcribe_with_retry",
    "bundle_key",
    "image_key",
    "record_completion",
    "record_transcription",
]

ENV_API_BASE = "GRADEPIPE_API_BASE"
ENV_API_KEY = "GRADEPIPE_API_KEY"

# Model families whose endpoints reject a temperature parameter.
_NO_TEMPERATURE_PREFIXES = ("o1", "o3", "o4")


class TransportError(GradePipeError):
    """Network/HTTP failure or unusable response envelope. Retryable."""


class MissingFixture(TransportError):
    """The replay store has no recorded response for this key."""


class MalformedOutput(GradePipeError):
    """No parseable JSON document, missing fields, or an off-domain score. Retryable."""


class ScoreOutOfRange(GradePipeError):
    """Parsed score below zero or above the question max. Not retryable."""


class ExhaustedRetries(GradePipeError):
    """All attempts failed; ``last_error`` holds the final outcome."""

    def __init__(self, message: str, last_error: Exception):
        super().__init__(message)
        self.last_error = last_error


class Backend(Protocol):
    model_id: str

    def transcribe(self, image_ref: str, bundle: PromptBundle) -> str: ...

    def complete(self, bundle: PromptBundle) -> str: ...


# ── call accounting ──────────────────────────────────────────────────────────


@dataclass(frozen=True)
class BackendCallLog:
    """One attempt against a backend."""

    bundle_digest: str
    model_id: str
    attempt: int
    outcome: str  # ok | transport_error | malformed_output | score_out_of_range


class CallLog:
    """Append-only, thread-safe attempt log."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.entries: list[BackendCallLog] = []

    def record(self, bundle_digest: str, model_id: str, attempt: int, outcome: str) -> None:
        entry = BackendCallLog(bundle_digest, model_id, attempt, outcome)
        with self._lock:
            self.entries.append(entry)


# ── replay fixture store ─────────────────────────────────────────────────────


def bundle_key(bundle: PromptBundle) -> str:
    return hashlib.sha256(bundle.cache_text().encode("utf-8")).hexdigest()


def image_key(image_bytes: bytes) -> str:
    return hashlib.sha256(image_bytes).hexdigest()


def record_completion(root: Path, bundle: PromptBundle, text: str) -> Path:
    path = Path(root) / "completions" / f"{bundle_key(bundle)}.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def record_transcription(root: Path, image_bytes: bytes, text: str) -> Path:
    path = Path(root) / "transcriptions" / f"{image_key(image_bytes)}.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


class ReplayBackend:
    """Deterministic backend reading canned responses from a fixture dir."""

    def __init__(self, root: Path | str, model_id: str | None = None):
        self.root = Path(root)
        if model_id is None:
            meta = self.root / "meta.json"
            if meta.exists():
                model_id = json.loads(meta.read_text(encoding="utf-8")).get("model_id")
        self.model_id = model_id or "replay"

    def _read(self, subdir: str, key: str) -> str:
        path = self.root / subdir / f"{key}.txt"
        if not path.exists():
            raise MissingFixture(f"no recorded response at {path}")
        return path.read_text(encoding="utf-8")

    def transcribe(self, image_ref: str, bundle: PromptBundle) -> str:
        return self._read("transcriptions", image_key(Path(image_ref).read_bytes()))

    def complete(self, bundle: PromptBundle) -> str:
        return self._read("completions", bundle_key(bundle))


# ── live chat-completions client ─────────────────────────────────────────────


class HttpBackend:
    """Minimal chat-completions client.

    Base URL and key default to GRADEPIPE_API_BASE / GRADEPIPE_API_KEY.
    Temperature is sent only for models that accept one.
    """

    def __init__(
        self,
        model_id: str,
        base_url: str | None = None,
        api_key: str | None = None,
        supports_temperature: bool | None = None,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.model_id = model_id
        self.base_url = (base_url or os.environ.get(ENV_API_BASE, "")).rstrip("/")
        self.api_key = api_key or os.environ.get(ENV_API_KEY, "")
        if not self.base_url:
            raise TransportError(f"no API base url; set {ENV_API_BASE} or pass base_url")
        if supports_temperature is None:
            supports_temperature = not model_id.startswith(_NO_TEMPERATURE_PREFIXES)
        self.supports_temperature = supports_temperature
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def _messages(self, bundle: PromptBundle, user_content) -> list[dict]:
        messages: list[dict] = []
        if bundle.system_message:
            messages.append({"role": "system", "content": bundle.system_message})
        messages.append({"role": "user", "content": user_content})
        return messages

    def _post(self, payload: dict) -> str:
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            response = self._client.post(
                f"{self.base_url}/chat/completions", json=payload, headers=headers
            )
            response.raise_for_status()
            body = response.json()
            return body["choices"][0]["message"]["content"]
        except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
            raise TransportError(f"chat completion failed: {exc}") from exc

    def _payload(self, bundle: PromptBundle, user_content) -> dict:
        payload = {"model": self.model_id, "messages": self._messages(bundle, user_content)}
        if bundle.temperature is not None and self.supports_temperature:
            payload["temperature"] = bundle.temperature
        return payload

    def complete(self, bundle: PromptBundle) -> str:
        return self._post(self._payload(bundle, bundle.user_message))

    def transcribe(self, image_ref: str, bundle: PromptBundle) -> str:
        try:
            raw = Path(image_ref).read_bytes()
        except OSError as exc:
            raise TransportError(f"cannot read image {image_ref}: {exc}") from exc
        encoded = base64.b64encode(raw).decode("ascii")
        user_content = [
            {"type": "text", "text": bundle.user_message},
            {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{encoded}"}},
        ]
        return self._post(self._payload(bundle, user_content))


# ── scored-feedback parsing ──────────────────────────────────────────────────


def _first_json_object(text: str) -> dict:
    decoder = json.JSONDecoder()
    for start, char in enumerate(text):
        if char != "{":
            continue
        try:
            doc, _ = decoder.raw_decode(text, start)
        except ValueError:
            continue
        if isinstance(doc, dict):
            return doc
        # A well-formed non-object (unlikely from "{") does not count.
    raise MalformedOutput("no JSON object found in model output")


def _score_tenths(raw) -> int:
    """Score domain: at most one fractional digit. Sign is range's problem."""
    if isinstance(raw, bool):
        raise MalformedOutput(f"score is a boolean: {raw!r}")
    if isinstance(raw, int):
        return raw * 10
    if isinstance(raw, float):
        dec = Decimal(str(raw))
    elif isinstance(raw, str):
        try:
            dec = Decimal(raw.strip())
        except ArithmeticError as exc:
            raise MalformedOutput(f"score is not numeric: {raw!r}") from exc
    else:
        raise MalformedOutput(f"score has unusable type: {raw!r}")
    scaled = dec * 10
    if scaled != scaled.to_integral_value():
        raise MalformedOutput(f"score {raw!r} has more than one fractional digit")
    return int(scaled)


def parse_scored_feedback(
    text: str,
    max_points_tenths: int,
    grid_tenths: int = GRID_TENTHS_DEFAULT,
) -> tuple[Score, str]:
    """Extract (score, feedback) from model output.

    Scans for the first well-formed JSON object, so prose wrappers
    around the payload still parse. Raises MalformedOutput for missing
    structure and ScoreOutOfRange for a score outside [0, max].
    """
    doc = _first_json_object(text)
    if "score" not in doc or "feedback" not in doc:
        raise MalformedOutput(f"JSON object lacks score/feedback keys: {sorted(doc)}")
    feedback = doc["feedback"]
    if not isinstance(feedback, str):
        raise MalformedOutput("feedback is not a string")
    tenths = _score_tenths(doc["score"])
    if tenths < 0 or tenths > max_points_tenths:
        raise ScoreOutOfRange(
            f"score {tenths} tenths outside [0, {max_points_tenths}]"
        )
    return score_from_tenths(tenths, grid_tenths), feedback


# ── retry wrappers ───────────────────────────────────────────────────────────


def complete_with_retry(
    backend: Backend,
    bundle: PromptBundle,
    max_retries: int = 2,
    max_points_tenths: int | None = None,
    grid_tenths: int = GRID_TENTHS_DEFAULT,
    call_log: CallLog | None = None,
) -> str:
    """Call ``backend.complete`` retrying transient failures.

    TransportError and MalformedOutput retry up to max_retries times;
    ScoreOutOfRange never retries (the model read the scale and still
    overshot; asking again just resamples). One log entry per attempt.
    """
    digest = bundle_key(bundle)
    last_error: Exception | None = None
    for attempt in range(1, max_retries + 2):
        try:
            text = backend.complete(bundle)
        except TransportError as exc:
            last_error = exc
            if call_log:
                call_log.record(digest, backend.model_id, attempt, "transport_error")
            continue
        if bundle.contract is ResponseContract.SCORED_FEEDBACK and max_points_tenths is not None:
            try:
                parse_scored_feedback(text, max_points_tenths, grid_tenths)
            except ScoreOutOfRange:
                if call_log:
                    call_log.record(digest, backend.model_id, attempt, "score_out_of_range")
                raise
            except MalformedOutput as exc:
                last_error = exc
                if call_log:
                    call_log.record(digest, backend.model_id, attempt, "malformed_output")
                continue
        if call_log:
            call_log.record(digest, backend.model_id, attempt, "ok")
        return text
    assert last_error is not None
    raise ExhaustedRetries(
        f"gave up after {max_retries + 1} attempts: {last_error}", last_error
    )


def transcribe_with_retry(
    backend: Backend,
    image_ref: str,
    bundle: PromptBundle,
    max_retries: int = 2,
    call_log: CallLog | None = None,
) -> str:
    """Same retry discipline for transcription calls (transport only)."""
    try:
        digest = image_key(Path(image_ref).read_bytes())
    except OSError as exc:
        raise TransportError(f"cannot read image {image_ref}: {exc}") from exc
    last_error: Exception | None = None
    for attempt in range(1, max_retries + 2):
        try:
            text = backend.transcribe(image_ref, bundle)
        except TransportError as exc:
            last_error = exc
            if call_log:
                call_log.record(digest, backend.model_id, attempt, "transport_error")
            continue
        if call_log:
            call_log.record(digest, backend.model_id, attempt, "ok")
        return text
    assert last_error is not None
    raise ExhaustedRetries(
        f"gave up after {max_retries + 1} attempts: {last_error}", last_error
    )
