"""Training-target generation against an OpenAI-compatible chat-completions endpoint.

The client is deliberately small: ``requests`` for transport, a directory of
content-addressed JSON files as the response cache, and a thread pool for
bounded concurrency. Every call (cache hit or not) is appended to a JSONL
request log.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import requests

from .metadata import Manifest
from .seed import SeedTranscript, build_seed_transcript

logger = logging.getLogger(__name__)

DESCRIPTIVE_PROMPT = "What can you hear from the audio?"
DEFAULT_PROMPT_TEMPLATE = "{seed}\n\n{prompt}"
OPENQA_PROMPT = (
    "Based on the audio described above, write {k} open-ended question-answer "
    "pair{plural} about the speech. Use exactly this format for each pair:\n"
    "Q: <question>\nA: <answer>"
)
DEFAULT_CAPTION_SYSTEM_PROMPT = (
    "You are given metadata describing a speech recording. Write a concise "
    "caption of the recording covering what is said and how it is said."
)
DEFAULT_CAPTION_PROMPT = "Describe the audio."
API_KEY_ENV = "SPEECHALIGN_API_KEY"


class GenerationError(Exception):
    pass


class TransportExhausted(GenerationError):
    """All retry attempts failed."""


# ---------------------------------------------------------------------------
# data model


@dataclass(frozen=True)
class GenerationMode:
    kind: str
    k: int = 1

    KINDS = ("descriptive", "openqa", "seedcopy", "caption")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown generation mode {self.kind!r}")
        if self.k < 1:
            raise ValueError("OpenQA needs k >= 1")

    @classmethod
    def parse(cls, text: str) -> "GenerationMode":
        """``descriptive``, ``seedcopy``, ``caption`` or ``openqa:<k>``."""
        kind, _, k = text.strip().lower().partition(":")
        if kind == "openqa":
            return cls("openqa", int(k or 1))
        if k:
            raise ValueError(f"mode {kind!r} takes no argument")
        return cls(kind)

    def __str__(self) -> str:
        return f"openqa:{self.k}" if self.kind == "openqa" else self.kind

    @property
    def pairs_per_response(self) -> int:
        return self.k if self.kind == "openqa" else 1


DESCRIPTIVE = GenerationMode("descriptive")
SEED_COPY = GenerationMode("seedcopy")
CAPTION = GenerationMode("caption")


def OpenQA(k: int) -> GenerationMode:
    return GenerationMode("openqa", k)


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    top_p: float = 1.0
    max_tokens: int = 512
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"bad role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[ChatMessage, ...]
    sampling: SamplingConfig = SamplingConfig()

    def body(self, caption_index: int = 0) -> dict:
        body = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "temperature": self.sampling.temperature,
            "top_p": self.sampling.top_p,
            "max_tokens": self.sampling.max_tokens,
        }
        if self.sampling.seed is not None:
            body["seed"] = self.sampling.seed + caption_index
        return body


@dataclass(frozen=True)
class TrainingPair:
    record_id: str
    mode: str
    context: tuple[ChatMessage, ...]
    target: str
    caption_index: int = 0

    def __post_init__(self):
        if not self.target.strip():
            raise ValueError(f"empty target for {self.record_id}")
        if self.caption_index < 0:
            raise ValueError("caption_index must be >= 0")

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "mode": self.mode,
            "caption_index": self.caption_index,
            "context": [asdict(m) for m in self.context],
            "target": self.target,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainingPair":
        return cls(
            record_id=obj["record_id"],
            mode=obj["mode"],
            context=tuple(ChatMessage(**m) for m in obj["context"]),
            target=obj["target"],
            caption_index=int(obj["caption_index"]),
        )


def dump_pairs(pairs: Sequence[TrainingPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_dict(), ensure_ascii=False) + "\n")


def load_pairs(path: str | Path) -> list[TrainingPair]:
    with open(path, encoding="utf-8") as fh:
        return [TrainingPair.from_dict(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# prompts


def render_context(
    seed: SeedTranscript,
    mode: GenerationMode,
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE,
    system_prompt: str = DEFAULT_CAPTION_SYSTEM_PROMPT,
    caption_prompt: str = DEFAULT_CAPTION_PROMPT,
) -> list[ChatMessage]:
    """Messages sent to the generator LLM for one seed transcript.

    ``prompt_template`` needs ``{seed}`` and ``{prompt}`` placeholders.
    SeedCopy sends nothing.
    """
    for slot in ("{seed}", "{prompt}"):
        if slot not in prompt_template:
            raise ValueError(f"prompt template lacks {slot} placeholder")
    if mode.kind == "seedcopy":
        return []
    if mode.kind == "descriptive":
        prompt = DESCRIPTIVE_PROMPT
    elif mode.kind == "openqa":
        prompt = OPENQA_PROMPT.format(k=mode.k, plural="" if mode.k == 1 else "s")
    else:
        prompt = caption_prompt
    user = ChatMessage("user", prompt_template.format(seed=seed.text, prompt=prompt))
    if mode.kind == "caption":
        return [ChatMessage("system", system_prompt), user]
    return [user]


def training_context(
    seed: SeedTranscript, instruction: str, prompt_template: str = DEFAULT_PROMPT_TEMPLATE
) -> tuple[ChatMessage, ...]:
    """What the speech model itself is trained to answer: seed text plus one instruction."""
    return (ChatMessage("user", prompt_template.format(seed=seed.text, prompt=instruction)),)


_QA_START = re.compile(r"^\s*(?:\d+[.)]\s*)?(?:\*\*)?([QA])\d*(?:\*\*)?\s*[:：]\s*(?:\*\*)?\s*(.*)$")


def parse_qa_pairs(text: str) -> list[tuple[str, str]]:
    """Split a "Q: ... / A: ..." response into (question, answer) pairs.

    Incomplete blocks (question without answer, answer without question,
    empty halves) are dropped with a warning.
    """
    pairs: list[tuple[str, str]] = []
    question: list[str] | None = None
    answer: list[str] | None = None

    def flush():
        if question is None and answer is None:
            return
        q = " ".join(question or []).strip()
        a = " ".join(answer or []).strip()
        if q and a:
            pairs.append((q, a))
        else:
            logger.warning("dropping malformed QA block: Q=%r A=%r", q, a)

    for line in text.splitlines():
        m = _QA_START.match(line)
        if m and m.group(1) == "Q":
            flush()
            question, answer = [m.group(2)], None
        elif m and m.group(1) == "A":
            if answer is not None or question is None:
                flush()
                question = None
            answer = [m.group(2)]
        elif line.strip():
            if answer is not None:
                answer.append(line.strip())
            elif question is not None:
                question.append(line.strip())
    flush()
    return pairs


# ---------------------------------------------------------------------------
# cache and client


def cache_key(request: ChatRequest, caption_index: int = 0) -> str:
    payload = {
        "model": request.model,
        "messages": [[m.role, m.content] for m in request.messages],
        "sampling": asdict(request.sampling),
        "caption_index": caption_index,
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ResponseCache:
    """Raw response bodies stored as ``<dir>/<key>.json``.

    Reads are lock-free; writes go through a temp file and ``os.replace``
    under a lock so readers never see a partial file.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> str | None:
        try:
            return self.path(key).read_text(encoding="utf-8")
        except FileNotFoundError:
            return None

    def put(self, key: str, body: str) -> None:
        with self._lock:
            fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(body)
            os.replace(tmp, self.path(key))


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    base_delay: float = 1.0
    factor: float = 2.0
    jitter: float = 0.2

    def delay(self, attempt: int, rng: random.Random) -> float:
        """Sleep before retry number ``attempt`` (1-based)."""
        d = self.base_delay * self.factor ** (attempt - 1)
        return d * (1 + rng.uniform(-self.jitter, self.jitter))


@dataclass
class Completion:
    text: str | None
    key: str
    attempts: int
    cached: bool
    error: str | None = None


class RequestLog:
    """Append-only JSONL log of every completion request."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self.entries: list[dict] = []

    def write(self, entry: dict) -> None:
        with self._lock:
            self.entries.append(entry)
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _retryable_status(code: int) -> bool:
    return code == 429 or code >= 500


def extract_content(body: str) -> str:
    obj = json.loads(body)
    return obj["choices"][0]["message"]["content"] or ""


class ChatClient:
    """Chat-completions client with caching and exponential-backoff retries.

    Transport errors, 429 and 5xx are retried up to ``retry.max_attempts``
    total attempts. An empty completion is retried once more. Cached bodies
    are served without touching the network.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        cache: ResponseCache | None = None,
        retry: RetryPolicy = RetryPolicy(),
        api_key: str | None = None,
        timeout: float = 60.0,
        log: RequestLog | None = None,
        rng_seed: int = 0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.url = base_url.rstrip("/")
        if not self.url.endswith("/chat/completions"):
            self.url += "/chat/completions"
        self.model = model
        self.cache = cache
        self.retry = retry
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.timeout = timeout
        self.log = log or RequestLog(None)
        self._rng = random.Random(rng_seed)
        self._rng_lock = threading.Lock()
        self._sleep = sleep
        self._local = threading.local()
        self._count_lock = threading.Lock()
        self.network_calls = 0

    def _session(self) -> requests.Session:
        s = getattr(self._local, "session", None)
        if s is None:
            s = self._local.session = requests.Session()
        return s

    def _post(self, body: dict) -> requests.Response:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        with self._count_lock:
            self.network_calls += 1
        return self._session().post(self.url, json=body, headers=headers, timeout=self.timeout)

    def _backoff(self, attempt: int) -> None:
        with self._rng_lock:
            d = self.retry.delay(attempt, self._rng)
        self._sleep(d)

    def complete(self, request: ChatRequest, caption_index: int = 0, tag: str = "") -> Completion:
        key = cache_key(request, caption_index)
        t0 = time.time()
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                text = extract_content(hit)
                self.log.write({"key": key, "tag": tag, "caption_index": caption_index,
                                "cached": True, "attempts": 0, "status": "ok",
                                "t_start": t0, "t_end": time.time()})
                return Completion(text, key, 0, True)

        body = request.body(caption_index)
        attempts = 0
        empty_retried = False
        error = None
        text = None
        while attempts < self.retry.max_attempts:
            attempts += 1
            try:
                resp = self._post(body)
            except requests.RequestException as exc:
                error = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code == 200:
                    try:
                        text = extract_content(resp.text)
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        error = f"bad response body: {exc}"
                        text = None
                    else:
                        if text.strip():
                            if self.cache is not None:
                                self.cache.put(key, resp.text)
                            error = None
                            break
                        error = "empty completion"
                        text = None
                        if empty_retried:
                            break
                        empty_retried = True
                elif _retryable_status(resp.status_code):
                    error = f"HTTP {resp.status_code}"
                else:
                    error = f"HTTP {resp.status_code}: {resp.text[:200]}"
                    break
            if attempts < self.retry.max_attempts:
                self._backoff(attempts)
        self.log.write({"key": key, "tag": tag, "caption_index": caption_index,
                        "cached": False, "attempts": attempts,
                        "status": "ok" if error is None else "failed", "error": error,
                        "t_start": t0, "t_end": time.time()})
        return Completion(text, key, attempts, False, error)


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class GenerationResult:
    pairs: list[TrainingPair]
    failed: list[str] = field(default_factory=list)
    attempted_requests: int = 0


@dataclass(frozen=True)
class GenerationSettings:
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE
    system_prompt: str = DEFAULT_CAPTION_SYSTEM_PROMPT
    caption_prompt: str = DEFAULT_CAPTION_PROMPT
    attribute_order: tuple[str, ...] | None = None


def _seed_for(record, settings: GenerationSettings) -> SeedTranscript:
    if settings.attribute_order is None:
        return build_seed_transcript(record)
    return build_seed_transcript(record, settings.attribute_order)


def plan_requests(
    manifest: Manifest,
    mode: GenerationMode,
    sampling: SamplingConfig,
    captions_per_audio: int,
    model: str,
    settings: GenerationSettings = GenerationSettings(),
) -> list[tuple[str, ChatRequest, int]]:
    """All (record_id, request, caption_index) triples a run would issue."""
    if mode.kind == "seedcopy":
        return []
    plan = []
    for record in manifest.records:
        seed = _seed_for(record, settings)
        messages = render_context(
            seed, mode, settings.prompt_template, settings.system_prompt, settings.caption_prompt
        )
        req = ChatRequest(model, tuple(messages), sampling)
        for c in range(captions_per_audio):
            plan.append((record.id, req, c))
    return plan


def estimate_volume(plan: Sequence[tuple[str, ChatRequest, int]]) -> dict:
    """Rough token budget for a plan (4 characters per prompt token)."""
    prompt_chars = sum(len(m.content) for _, req, _ in plan for m in req.messages)
    completion = sum(req.sampling.max_tokens for _, req, _ in plan)
    return {
        "requests": len(plan),
        "prompt_tokens_est": prompt_chars // 4,
        "max_completion_tokens": completion,
        "total_tokens_est": prompt_chars // 4 + completion,
    }


def generate_targets(
    manifest: Manifest,
    mode: GenerationMode,
    sampling: SamplingConfig,
    captions_per_audio: int,
    client: ChatClient | None,
    parallelism: int = 4,
    settings: GenerationSettings = GenerationSettings(),
) -> GenerationResult:
    """Produce training pairs for every record, in manifest order.

    A record with any failed request is left out entirely and listed in
    ``GenerationResult.failed``.
    """
    if captions_per_audio < 1:
        raise ValueError("captions_per_audio must be >= 1")
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")

    seeds = {r.id: _seed_for(r, settings) for r in manifest.records}
    if mode.kind == "seedcopy":
        pairs = [
            TrainingPair(rid, str(mode), training_context(seed, DESCRIPTIVE_PROMPT,
                                                          settings.prompt_template),
                         seed.text, c)
            for rid, seed in seeds.items()
            for c in range(captions_per_audio)
        ]
        return GenerationResult(pairs)
    if client is None:
        raise ValueError(f"mode {mode} needs a chat client")

    plan = plan_requests(manifest, mode, sampling, captions_per_audio, client.model, settings)
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        completions = list(
            pool.map(lambda item: client.complete(item[1], item[2], tag=item[0]), plan)
        )

    by_record: dict[str, list[Completion]] = {}
    for (rid, _, _), comp in zip(plan, completions):
        by_record.setdefault(rid, []).append(comp)

    pairs: list[TrainingPair] = []
    failed: list[str] = []
    for record in manifest.records:
        comps = by_record[record.id]
        if any(c.error is not None or not c.text for c in comps):
            logger.warning("record %s failed: %s", record.id,
                           next(c.error for c in comps if c.error or not c.text))
            failed.append(record.id)
            continue
        seed = seeds[record.id]
        if mode.kind == "openqa":
            for c, comp in enumerate(comps):
                qa = parse_qa_pairs(comp.text)
                if len(qa) > mode.k:
                    logger.warning("record %s caption %d: %d QA pairs, keeping first %d",
                                   record.id, c, len(qa), mode.k)
                for j, (q, a) in enumerate(qa[: mode.k]):
                    ctx = training_context(seed, q, settings.prompt_template)
                    pairs.append(TrainingPair(record.id, str(mode), ctx, a, c * mode.k + j))
        else:
            ctx = training_context(seed, DESCRIPTIVE_PROMPT, settings.prompt_template)
            for c, comp in enumerate(comps):
                pairs.append(TrainingPair(record.id, str(mode), ctx, comp.text, c))
    return GenerationResult(pairs, failed, attempted_requests=len(plan))
