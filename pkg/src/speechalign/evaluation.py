"""Instruction-following evaluation with an LLM judge.

Two protocols: ``accuracy`` (judge says CORRECT/INCORRECT; task score is the
percentage correct) and ``agreement`` (judge gives 1-10; the Chat score is
the mean). Categories follow the five classification dimensions CON, SEM,
PAR, DEG and SPK, plus ``Chat`` for open-ended agreement tasks.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .generation import ChatClient, ChatMessage, ChatRequest, SamplingConfig
from .metadata import UtteranceRecord
from .seed import build_seed_transcript

logger = logging.getLogger(__name__)

CATEGORIES = ("CON", "SEM", "PAR", "DEG", "SPK")
CHAT = "Chat"
ACCURACY = "accuracy"
AGREEMENT = "agreement"

JUDGE_PROMPTS = {
    ACCURACY: (
        "accuracy-v1",
        "You are grading an answer to a speech-understanding task.\n"
        "Instruction: {instruction}\n"
        "Reference answer: {reference}\n"
        "Model answer: {response}\n\n"
        "Does the model answer match the reference? Reply with exactly one word: "
        "CORRECT or INCORRECT.",
    ),
    AGREEMENT: (
        "agreement-v1",
        "You are rating how well a model answer agrees with a reference answer.\n"
        "Question: {instruction}\n"
        "Reference answer: {reference}\n"
        "Model answer: {response}\n\n"
        "Rate the agreement on a scale of 1 to 10, where 10 means fully "
        "consistent. Reply in the form 'Score: <n>'.",
    ),
}
REPROMPT = {
    ACCURACY: "Your reply did not contain a verdict. Answer with exactly CORRECT or INCORRECT.",
    AGREEMENT: "Your reply did not contain a score. Answer with 'Score: <n>' where n is 1-10.",
}

Judge = Callable[[Sequence[ChatMessage]], str]
Responder = Callable[["EvalInstance"], str]


def prompt_digest(protocol: str) -> str:
    version, text = JUDGE_PROMPTS[protocol]
    return hashlib.sha256(f"{version}\n{text}".encode()).hexdigest()


@dataclass(frozen=True)
class EvalInstance:
    id: str
    instruction: str
    reference: str
    audio_ref: str | None = None


@dataclass(frozen=True)
class EvalTask:
    task_id: str
    category: str
    protocol: str
    instances: tuple[EvalInstance, ...]

    def __post_init__(self):
        if self.category not in (*CATEGORIES, CHAT):
            raise ValueError(f"{self.task_id}: unknown category {self.category!r}")
        if self.protocol not in (ACCURACY, AGREEMENT):
            raise ValueError(f"{self.task_id}: unknown protocol {self.protocol!r}")
        if (self.category == CHAT) != (self.protocol == AGREEMENT):
            raise ValueError(f"{self.task_id}: Chat tasks and only Chat tasks use agreement")
        if not self.instances:
            raise ValueError(f"{self.task_id}: no instances")

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "category": self.category,
            "protocol": self.protocol,
            "instances": [
                {"id": i.id, "instruction": i.instruction, "reference": i.reference,
                 **({"audio_ref": i.audio_ref} if i.audio_ref else {})}
                for i in self.instances
            ],
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "EvalTask":
        return cls(
            obj["task_id"], obj["category"], obj["protocol"],
            tuple(EvalInstance(str(i["id"]), i["instruction"], i["reference"], i.get("audio_ref"))
                  for i in obj["instances"]),
        )


def load_tasks(path: str | Path) -> list[EvalTask]:
    """A task file holds one task object or a list of them."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    items = obj if isinstance(obj, list) else [obj]
    return [EvalTask.from_dict(t) for t in items]


def dump_tasks(tasks: Sequence[EvalTask], path: str | Path) -> None:
    Path(path).write_text(json.dumps([t.to_dict() for t in tasks], indent=2) + "\n",
                          encoding="utf-8")


# ---------------------------------------------------------------------------
# responses


def collect_responses(task: EvalTask, responder: Responder) -> list[tuple[str, str]]:
    """(instance id, response) in instance order; instances whose responder call
    raised are left out and count as unanswered."""
    out = []
    for inst in task.instances:
        try:
            out.append((inst.id, str(responder(inst))))
        except Exception as exc:  # any responder failure just leaves the instance unanswered
            logger.warning("%s/%s unanswered: %s", task.task_id, inst.id, exc)
    return out


def echo_responder(inst: EvalInstance) -> str:
    return inst.instruction


class FileResponder:
    """Serves canned responses from JSONL lines ``{"id": ..., "response": ...}``."""

    def __init__(self, path: str | Path):
        self.responses: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    self.responses[str(obj["id"])] = obj["response"]

    def __call__(self, inst: EvalInstance) -> str:
        return self.responses[inst.id]


def cascade_responder(
    record: UtteranceRecord,
    instruction: str,
    llm: Callable[[Sequence[ChatMessage]], str],
    variant: str = "transcript",
) -> str:
    """Text-only baseline: an LLM answers from the transcript (``"transcript"``)
    or from the full seed transcript with attributes (``"seed"``)."""
    if variant == "transcript":
        if record.segments:
            context = " ".join(s.text for s in record.segments)
        else:
            context = record.attributes.get("spoken_text", "")
        if not context:
            raise ValueError(f"{record.id}: no transcript available")
    elif variant == "seed":
        context = build_seed_transcript(record).text
    else:
        raise ValueError(f"unknown cascade variant {variant!r}")
    return llm([ChatMessage("user", f"{context}\n{instruction}")])


# ---------------------------------------------------------------------------
# judging


@dataclass(frozen=True)
class JudgeVerdict:
    instance_id: str
    protocol: str
    correct: bool | None = None
    score: int | None = None
    raw: tuple[str, ...] = ()

    def __post_init__(self):
        if self.score is not None and not 1 <= self.score <= 10:
            raise ValueError(f"agreement score {self.score} outside 1..10")

    def to_dict(self) -> dict:
        return {"instance_id": self.instance_id, "protocol": self.protocol,
                "correct": self.correct, "score": self.score, "raw": list(self.raw)}

    @classmethod
    def from_dict(cls, obj: Mapping) -> "JudgeVerdict":
        return cls(obj["instance_id"], obj["protocol"], obj.get("correct"), obj.get("score"),
                   tuple(obj.get("raw", ())))


_INCORRECT = re.compile(r"\b(INCORRECT|NO)\b", re.IGNORECASE)
_CORRECT = re.compile(r"\b(CORRECT|YES)\b", re.IGNORECASE)
_SCORE = re.compile(r"score\s*[:=]?\s*(\d+)", re.IGNORECASE)
_BARE_INT = re.compile(r"^\s*(\d+)\s*(?:/\s*10)?\s*\.?\s*$")


def parse_accuracy(text: str) -> bool | None:
    if _INCORRECT.search(text):
        return False
    if _CORRECT.search(text):
        return True
    return None


def parse_agreement(text: str) -> int | None:
    m = _SCORE.search(text) or _BARE_INT.match(text)
    if m is None:
        return None
    value = int(m.group(1))
    return value if 1 <= value <= 10 else None


def _judge_one(inst: EvalInstance, response: str | None, protocol: str, judge: Judge) -> JudgeVerdict:
    if response is None:
        return JudgeVerdict(inst.id, protocol, correct=False if protocol == ACCURACY else None,
                            score=1 if protocol == AGREEMENT else None, raw=("<unanswered>",))
    _, template = JUDGE_PROMPTS[protocol]
    parse = parse_accuracy if protocol == ACCURACY else parse_agreement
    messages = [ChatMessage("user", template.format(
        instruction=inst.instruction, reference=inst.reference, response=response))]
    raw = []
    for attempt in range(2):
        reply = judge(messages)
        raw.append(reply)
        value = parse(reply)
        if value is not None:
            break
        messages = [*messages, ChatMessage("assistant", reply), ChatMessage("user", REPROMPT[protocol])]
    else:
        value = False if protocol == ACCURACY else 1
    if protocol == ACCURACY:
        return JudgeVerdict(inst.id, protocol, correct=value, raw=tuple(raw))
    return JudgeVerdict(inst.id, protocol, score=value, raw=tuple(raw))


def judge(
    instances: Sequence[EvalInstance],
    responses: Sequence[tuple[str, str]],
    protocol: str,
    judge_fn: Judge,
    parallelism: int = 4,
) -> list[JudgeVerdict]:
    """One verdict per instance, in instance order.

    Unparseable replies get one reprompt; a second failure counts as
    incorrect (accuracy) or score 1 (agreement). Unanswered instances are
    never sent to the judge.
    """
    answered = dict(responses)
    unknown = set(answered) - {i.id for i in instances}
    if unknown:
        raise ValueError(f"responses for unknown instances: {sorted(unknown)}")
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        return list(pool.map(lambda i: _judge_one(i, answered.get(i.id), protocol, judge_fn),
                             instances))


class LLMJudge:
    """Judge backed by a chat-completions endpoint (greedy decoding)."""

    def __init__(self, client: ChatClient, sampling: SamplingConfig = SamplingConfig(0.0, 1.0, 16)):
        self.client = client
        self.sampling = sampling

    def __call__(self, messages: Sequence[ChatMessage]) -> str:
        comp = self.client.complete(ChatRequest(self.client.model, tuple(messages), self.sampling))
        if comp.text is None:
            raise RuntimeError(f"judge request failed: {comp.error}")
        return comp.text


def _norm_words(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


class RuleBasedJudge:
    """Offline judge for tests and the bundled mini-suite.

    Accuracy: CORRECT iff the reference's words appear as a contiguous run in
    the answer. Agreement: ``1 + round(9 * recall)`` of reference words.
    """

    name = "rule-based-v1"

    def __call__(self, messages: Sequence[ChatMessage]) -> str:
        prompt = messages[0].content
        reference = re.search(r"^Reference answer: (.*)$", prompt, re.MULTILINE).group(1)
        response = re.search(r"^Model answer: (.*)$", prompt, re.MULTILINE | re.DOTALL).group(1)
        response = response.split("\n\n")[0]
        ref, ans = _norm_words(reference), _norm_words(response)
        if "Rate the agreement" in prompt:
            recall = sum(w in ans for w in ref) / len(ref) if ref else 0.0
            return f"Score: {1 + int(math.floor(9 * recall + 0.5))}"
        n = len(ref)
        hit = n > 0 and any(ans[i:i + n] == ref for i in range(len(ans) - n + 1))
        return "CORRECT" if hit else "INCORRECT"


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class EvalReport:
    task_scores: dict[str, float]
    task_categories: dict[str, str]
    category_scores: dict[str, float]
    overall: float | None
    chat_score: float | None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "task_scores": self.task_scores,
            "task_categories": self.task_categories,
            "category_scores": self.category_scores,
            "ALL": self.overall,
            "Chat": self.chat_score,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        cols = [*CATEGORIES, "ALL", CHAT]
        vals = [self.category_scores.get(c) for c in CATEGORIES] + [self.overall, self.chat_score]
        cells = ["-" if v is None else f"{v:.2f}" for v in vals]
        widths = [max(len(c), len(v)) for c, v in zip(cols, cells)]
        head = "  ".join(c.rjust(w) for c, w in zip(cols, widths))
        row = "  ".join(v.rjust(w) for v, w in zip(cells, widths))
        lines = [head, "-" * len(head), row, "", "per task:"]
        tw = max((len(t) for t in self.task_scores), default=4)
        for tid in sorted(self.task_scores):
            lines.append(f"  {tid.ljust(tw)}  {self.task_categories[tid]:>4}  {self.task_scores[tid]:7.2f}")
        return "\n".join(lines) + "\n"


def _mean(xs: Iterable[float]) -> float:
    xs = list(xs)
    return math.fsum(xs) / len(xs)


def aggregate(
    results: Mapping[str, tuple[EvalTask, Sequence[JudgeVerdict]]],
    weighting: str = "task",
    metadata: dict | None = None,
) -> EvalReport:
    """Scores per task, per category, overall and for Chat.

    Accuracy task score = 100 * correct / instances. Category score = mean of
    its tasks. ``ALL`` = mean over every accuracy task (``weighting="task"``)
    or over every accuracy instance (``weighting="instance"``); it is not the
    mean of the category scores. Chat = mean agreement score, 2 decimals.
    """
    if weighting not in ("task", "instance"):
        raise ValueError(f"unknown weighting {weighting!r}")
    task_scores: dict[str, float] = {}
    categories: dict[str, str] = {}
    chat_scores: list[int] = []
    n_correct = n_instances = 0
    for tid in sorted(results):
        task, verdicts = results[tid]
        if not verdicts:
            raise ValueError(f"task {tid} has no verdicts")
        if task.protocol == ACCURACY:
            correct = sum(bool(v.correct) for v in verdicts)
            task_scores[tid] = 100.0 * correct / len(task.instances)
            n_correct += correct
            n_instances += len(task.instances)
        else:
            scores = [v.score if v.score is not None else 1 for v in verdicts]
            task_scores[tid] = _mean(scores)
            chat_scores.extend(scores)
        categories[tid] = task.category

    by_cat: dict[str, list[float]] = {}
    for tid, cat in categories.items():
        if cat != CHAT:
            by_cat.setdefault(cat, []).append(task_scores[tid])
    category_scores = {c: _mean(by_cat[c]) for c in CATEGORIES if c in by_cat}
    acc_tasks = [task_scores[t] for t, c in categories.items() if c != CHAT]
    if not acc_tasks:
        overall = None
    elif weighting == "task":
        overall = _mean(acc_tasks)
    else:
        overall = 100.0 * n_correct / n_instances
    chat = round(_mean(chat_scores), 2) if chat_scores else None
    meta = {"weighting": weighting, **(metadata or {})}
    return EvalReport(task_scores, categories, category_scores, overall, chat, meta)


# ---------------------------------------------------------------------------
# persistence


def dump_verdicts(results: Mapping[str, tuple[EvalTask, Sequence[JudgeVerdict]]],
                  path: str | Path) -> None:
    """JSONL: one line per task with the task and all its verdicts (raw judge text included)."""
    with open(path, "w", encoding="utf-8") as fh:
        for tid in sorted(results):
            task, verdicts = results[tid]
            fh.write(json.dumps({"task": task.to_dict(),
                                 "verdicts": [v.to_dict() for v in verdicts]},
                                sort_keys=True, ensure_ascii=False) + "\n")


def load_verdicts(path: str | Path) -> dict[str, tuple[EvalTask, list[JudgeVerdict]]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                task = EvalTask.from_dict(obj["task"])
                out[task.task_id] = (task, [JudgeVerdict.from_dict(v) for v in obj["verdicts"]])
    return out


def run_task(task: EvalTask, responder: Responder, judge_fn: Judge, parallelism: int = 4):
    responses = collect_responses(task, responder)
    return task, judge(task.instances, responses, task.protocol, judge_fn, parallelism)


def report_metadata(judge_name: str) -> dict:
    return {
        "judge": judge_name,
        "prompts": {p: {"version": JUDGE_PROMPTS[p][0], "digest": prompt_digest(p)}
                    for p in JUDGE_PROMPTS},
    }
