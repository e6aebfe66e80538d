"""Uniform access to instruction-following language models.

Three backends sit behind one ``Gateway``: an HTTP chat-completion adapter,
a hook for in-process local models, and a deterministic stub used for all
offline tests.
"""

from __future__ import annotations

import enum
import hashlib
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

ENV_API_KEY = "LONGVIEW_LLM_API_KEY"
ENV_URL = "LONGVIEW_LLM_URL"

SECTION_SYSTEM = "### System"
SECTION_INPUT = "### Input"
SECTION_OUTPUT = "### Output"


class GatewayError(RuntimeError):
    def __init__(self, message: str, backend_id: str = "", attempts: int = 0):
        super().__init__(message)
        self.backend_id = backend_id
        self.attempts = attempts


class ProtocolError(GatewayError):
    """The backend answered, but not in the shape we expect."""


class TransportError(Exception):
    """Retryable failure talking to a backend."""


class FinishReason(str, enum.Enum):
    STOP = "STOP"
    LENGTH = "LENGTH"
    ERROR = "ERROR"


class BackendKind(str, enum.Enum):
    HTTP_CHAT = "http_chat"
    LOCAL = "local"
    STUB = "stub"


@dataclass(frozen=True)
class PromptRequest:
    user_content: str
    system_instruction: str = ""
    max_new_tokens: int = 256
    temperature: float = 0.0
    seed: int | None = None
    few_shot_blocks: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        object.__setattr__(self, "few_shot_blocks",
                           tuple((str(a), str(b)) for a, b in self.few_shot_blocks))


@dataclass(frozen=True)
class LlmResponse:
    text: str
    finish_reason: FinishReason
    latency_ms: int
    backend_id: str

    def __post_init__(self):
        if not self.text and self.finish_reason is not FinishReason.ERROR:
            object.__setattr__(self, "finish_reason", FinishReason.ERROR)


@dataclass(frozen=True)
class BackendConfig:
    kind: BackendKind = BackendKind.STUB
    model_name: str = "stub"
    endpoint_url: str | None = None
    timeout_s: float = 60.0
    max_retries: int = 2
    response_path: str = "choices.0.message.content"
    finish_path: str = "choices.0.finish_reason"
    max_concurrency: int = 4
    backoff_s: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", BackendKind(self.kind))
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if (self.kind is BackendKind.HTTP_CHAT) != (self.endpoint_url is not None):
            raise ValueError("endpoint_url is required for http_chat backends and only for them")

    @property
    def backend_id(self) -> str:
        return f"{self.kind.value}:{self.model_name}"


# --- prompt rendering -------------------------------------------------------

def _escape(text: str) -> str:
    lines = text.split("\n")
    return "\n".join("\\" + ln if ln.startswith(("###", "\\")) else ln for ln in lines)


def _unescape(text: str) -> str:
    return "\n".join(ln[1:] if ln.startswith("\\") else ln for ln in text.split("\n"))


def render_prompt(request: PromptRequest) -> str:
    """Serialize a request as plain text: system, exemplars, then the query.

    Content lines that could be mistaken for section headers are escaped
    with a leading backslash, so :func:`parse_prompt` inverts this exactly.
    """
    parts = []
    if request.system_instruction:
        parts += [SECTION_SYSTEM, _escape(request.system_instruction)]
    for inp, out in request.few_shot_blocks:
        parts += [SECTION_INPUT, _escape(inp), SECTION_OUTPUT, _escape(out)]
    parts += [SECTION_INPUT, _escape(request.user_content), SECTION_OUTPUT]
    return "\n".join(parts) + "\n"


def parse_prompt(rendered: str) -> tuple[str, list[tuple[str, str]], str]:
    """Inverse of :func:`render_prompt`: (system, few-shot blocks, user content)."""
    lines = rendered.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    sections: list[tuple[str, list[str]]] = []
    for ln in lines:
        if ln in (SECTION_SYSTEM, SECTION_INPUT, SECTION_OUTPUT):
            sections.append((ln, []))
        elif not sections:
            raise ValueError("rendered prompt does not start with a section header")
        else:
            sections[-1][1].append(ln)
    system = ""
    if sections and sections[0][0] == SECTION_SYSTEM:
        system = _unescape("\n".join(sections.pop(0)[1]))
    if len(sections) < 2 or sections[-1] != (SECTION_OUTPUT, []) or len(sections) % 2:
        raise ValueError("malformed rendered prompt")
    bodies = [_unescape("\n".join(body)) for _, body in sections[:-1]]
    heads = [h for h, _ in sections[:-1]]
    expected = [SECTION_INPUT, SECTION_OUTPUT] * ((len(heads) - 1) // 2) + [SECTION_INPUT]
    if heads != expected:
        raise ValueError("malformed rendered prompt")
    blocks = list(zip(bodies[0:-1:2], bodies[1:-1:2]))
    return system, blocks, bodies[-1]


def chat_messages(request: PromptRequest) -> list[dict]:
    msgs = []
    if request.system_instruction:
        msgs.append({"role": "system", "content": request.system_instruction})
    for inp, out in request.few_shot_blocks:
        msgs.append({"role": "user", "content": inp})
        msgs.append({"role": "assistant", "content": out})
    msgs.append({"role": "user", "content": request.user_content})
    return msgs


# --- backends ---------------------------------------------------------------

_STUB_WORDS = (
    "the", "person", "describes", "a", "steady", "pattern", "of", "mood", "change",
    "with", "days", "shaped", "by", "school", "family", "friends", "sleep", "worry",
    "hope", "and", "tension", "over", "time", "their", "week", "feels", "calm",
    "heavy", "lighter", "uncertain", "support", "distance", "routine", "effort",
)


def digest_sentence(rendered: str, seed: int | None, n_words: int = 12) -> str:
    h = hashlib.sha256(f"{seed}\x00{rendered}".encode()).digest()
    words = [_STUB_WORDS[b % len(_STUB_WORDS)] for b in h[:n_words]]
    return " ".join(words).capitalize() + "."


Responder = Callable[[PromptRequest], "str | None"]


class StubBackend:
    """Deterministic offline backend.

    If ``user_content`` equals the input of a few-shot block, that block's
    output is returned.  Otherwise a sentence derived from a digest of the
    rendered prompt and seed.  An optional ``responder`` gets first say;
    returning ``None`` falls through to the default rule.
    """

    def __init__(self, responder: Responder | None = None):
        self.responder = responder

    def generate(self, request: PromptRequest, rendered: str, config: BackendConfig) -> tuple[str, FinishReason]:
        text = self.responder(request) if self.responder else None
        if text is None:
            text = next((out for inp, out in request.few_shot_blocks
                         if inp == request.user_content), None)
        if text is None:
            text = digest_sentence(rendered, request.seed)
        words = text.split(" ")
        if len(words) > request.max_new_tokens:
            return " ".join(words[:request.max_new_tokens]), FinishReason.LENGTH
        return text, FinishReason.STOP


_LOCAL_MODELS: dict[str, Callable[[PromptRequest, str], str]] = {}


def register_local_model(name: str, fn: Callable[[PromptRequest, str], str]) -> None:
    """Make an in-process model callable as ``BackendKind.LOCAL`` with ``model_name=name``."""
    _LOCAL_MODELS[name] = fn


class LocalBackend:
    def generate(self, request, rendered, config):
        try:
            fn = _LOCAL_MODELS[config.model_name]
        except KeyError:
            raise GatewayError(f"no local model registered as {config.model_name!r}",
                               config.backend_id) from None
        return fn(request, rendered), FinishReason.STOP


def _lookup(payload, path: str):
    cur = payload
    for part in path.split("."):
        if isinstance(cur, list):
            cur = cur[int(part)]
        else:
            cur = cur[part]
    return cur


class HttpChatBackend:
    """Speaks an OpenAI-style chat-completions JSON protocol."""

    def generate(self, request, rendered, config):
        import httpx

        key = os.environ.get(ENV_API_KEY)
        if not key:
            raise GatewayError(f"{ENV_API_KEY} is not set", config.backend_id)
        url = os.environ.get(ENV_URL) or config.endpoint_url
        body = {
            "model": config.model_name,
            "messages": chat_messages(request),
            "max_tokens": request.max_new_tokens,
            "temperature": request.temperature,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        try:
            resp = httpx.post(url, json=body, timeout=config.timeout_s,
                              headers={"Authorization": f"Bearer {key}"})
            resp.raise_for_status()
        except httpx.HTTPStatusError as exc:
            if exc.response.status_code >= 500 or exc.response.status_code == 429:
                raise TransportError(str(exc)) from exc
            raise GatewayError(str(exc), config.backend_id) from exc
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        try:
            payload = resp.json()
            text = _lookup(payload, config.response_path)
            finish = str(_lookup(payload, config.finish_path) or "stop")
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"unexpected response payload: {exc!r}", config.backend_id) from exc
        if not isinstance(text, str):
            raise ProtocolError("response content is not a string", config.backend_id)
        return text, FinishReason.LENGTH if finish == "length" else FinishReason.STOP


_BACKENDS = {
    BackendKind.STUB: StubBackend,
    BackendKind.LOCAL: LocalBackend,
    BackendKind.HTTP_CHAT: HttpChatBackend,
}


@dataclass
class Gateway:
    """Binds a backend to its config and enforces retries and a concurrency cap."""

    config: BackendConfig = field(default_factory=BackendConfig)
    backend: object = None

    def __post_init__(self):
        if self.backend is None:
            self.backend = _BACKENDS[self.config.kind]()
        self._slots = threading.BoundedSemaphore(self.config.max_concurrency)

    @classmethod
    def stub(cls, responder: Responder | None = None, model_name: str = "stub") -> "Gateway":
        return cls(BackendConfig(BackendKind.STUB, model_name), StubBackend(responder))

    @property
    def backend_id(self) -> str:
        return self.config.backend_id

    def complete(self, request: PromptRequest) -> LlmResponse:
        rendered = render_prompt(request)
        cfg = self.config
        attempts = 0
        last_exc: Exception | None = None
        with self._slots:
            while attempts <= cfg.max_retries:
                if attempts:
                    time.sleep(cfg.backoff_s * 2 ** (attempts - 1))
                attempts += 1
                t0 = time.monotonic()
                try:
                    text, finish = self.backend.generate(request, rendered, cfg)
                except TransportError as exc:
                    last_exc = exc
                    continue
                latency = int((time.monotonic() - t0) * 1000)
                return LlmResponse(text, finish, latency, cfg.backend_id)
        raise GatewayError(f"{cfg.backend_id}: giving up after {attempts} attempts: {last_exc}",
                           cfg.backend_id, attempts)


def complete(request: PromptRequest, config: BackendConfig) -> LlmResponse:
    return Gateway(config).complete(request)
