"""Small bundled datasets: a 3-record sample manifest, a corpus with the
per-source counts of the combined training set, an 8-pair overfitting
corpus and a 5-category mini benchmark with known answers."""
from __future__ import annotations

import numpy as np

from .evaluation import ACCURACY, AGREEMENT, CATEGORIES, CHAT, EvalInstance, EvalTask
from .generation import DESCRIPTIVE_PROMPT, ChatMessage, TrainingPair, training_context
from .metadata import Manifest, TranscriptSegment, UtteranceRecord
from .seed import build_seed_transcript
from .training import Tokenizer

# (source, audios, captions, hours)
COMBINED_DATASET_ROWS = (
    ("AccentDB", 16874, 16874, 19.27),
    ("Dailytalk", 20000, 20000, 18.17),
    ("IEMOCAP", 4150, 20000, 5.17),
    ("PromptTTS", 20000, 20000, 38.54),
    ("VCTK", 20000, 20000, 19.90),
    ("VoxCeleb", 20000, 20000, 45.83),
    ("Mixed noise&reverb", 7214, 7214, 8.04),
)
COMBINED_DATASET_PRINTED_TOTAL = (108238, 124088, 154.95)


def sample_manifest() -> Manifest:
    return Manifest((
        UtteranceRecord(
            "sample-0001", "IEMOCAP", 3.0,
            (TranscriptSegment(0.0, 3.0, "How are you?"),),
            {"gender": "Female", "emotion": "Happy"},
        ),
        UtteranceRecord(
            "sample-0002", "VCTK", 2.8,
            (TranscriptSegment(0.0, 2.8, "Please call Stella."),),
            {"gender": "Male", "age": "Young adult", "accent": "Scottish", "pitch": "Low",
             "speaking_speed": "Normal", "duration": "2.8"},
        ),
        UtteranceRecord(
            "sample-0003", "Dailytalk", 6.4,
            (TranscriptSegment(0.0, 2.5, "Is the station far from here?"),
             TranscriptSegment(2.9, 6.4, "No, it is just around the corner.")),
            {"gender": "Female", "emotion": "Neutral", "volume": "Normal", "snr_level": "32.1",
             "c50_value": "58.4", "duration": "6.4", "intent": "question"},
        ),
    ))


def combined_dataset() -> tuple[Manifest, list[TrainingPair]]:
    """Records and pairs whose statistics reproduce every row of the combined set.

    Within a source all clips share the same length so the source's hours
    come out exactly; captions are spread as evenly as possible over clips.
    """
    records = []
    pairs = []
    for source, n_audio, n_caption, hours in COMBINED_DATASET_ROWS:
        dur = hours * 3600.0 / n_audio
        base, extra = divmod(n_caption, n_audio)
        ctx = (ChatMessage("user", f"[{source}]\n\n{DESCRIPTIVE_PROMPT}"),)
        for i in range(n_audio):
            rid = f"{source}-{i:06d}"
            records.append(UtteranceRecord(rid, source, dur))
            for c in range(base + (i < extra)):
                pairs.append(TrainingPair(rid, "descriptive", ctx, "synthetic caption", c))
    return Manifest(tuple(records)), pairs


_OVERFIT_WORDS = (
    "the speaker sounds happy sad calm angry excited tired with a low high "
    "pitch and fast slow voice female male young elderly loud quiet"
).split()


def overfit_corpus(n_pairs: int = 8, target_len: int = 5, seed: int = 0):
    """``(manifest, pairs, tokenizer)`` for the adapter overfitting check."""
    rng = np.random.default_rng(seed)
    records, pairs = [], []
    for i in range(n_pairs):
        rec = UtteranceRecord(
            f"toy-{i:02d}", "toy", 1.0,
            (TranscriptSegment(0.0, 1.0, f"utterance {i}"),),
            {"gender": "Female" if i % 2 else "Male"},
        )
        seed_text = build_seed_transcript(rec)
        target = " ".join(rng.choice(_OVERFIT_WORDS, size=target_len))
        records.append(rec)
        pairs.append(TrainingPair(rec.id, "descriptive",
                                  training_context(seed_text, DESCRIPTIVE_PROMPT), target, 0))
    texts = [p.target for p in pairs] + [DESCRIPTIVE_PROMPT, "<|user|> <|assistant|> utterance"]
    return Manifest(tuple(records)), pairs, Tokenizer.from_texts(texts)


_MINI_TASKS = {
    "CON": [("digit_recognition", "Which digit is spoken?", ["one", "two", "three", "four", "five"]),
            ("keyword_spotting", "Which command word is spoken?", ["yes", "no", "up", "down", "stop"])],
    "SEM": [("intent_classification", "What is the speaker's intent?",
             ["question", "request", "greeting", "complaint", "statement"]),
            ("sarcasm_detection", "Is the speaker sarcastic?", ["sarcastic", "sincere"])],
    "PAR": [("emotion_recognition", "What emotion does the speaker convey?",
             ["happy", "sad", "angry", "neutral"]),
            ("speaking_speed", "How fast does the speaker talk?", ["fast", "normal", "slow"])],
    "DEG": [("noise_detection", "Is there background noise?", ["noisy", "clean"]),
            ("reverberation_detection", "Is the recording reverberant?", ["reverberant", "dry"])],
    "SPK": [("gender_recognition", "What is the speaker's gender?", ["female", "male"]),
            ("age_group", "Which age group does the speaker belong to?",
             ["child", "adult", "elderly"])],
}


def mini_benchmark(n_instances: int = 10, seed: int = 0, with_chat: bool = True) -> list[EvalTask]:
    """Five categories x two tasks x ``n_instances`` with fixed reference labels."""
    rng = np.random.default_rng(seed)
    tasks = []
    for cat in CATEGORIES:
        for name, instruction, labels in _MINI_TASKS[cat]:
            insts = tuple(
                EvalInstance(f"{name}-{i:02d}", f"{instruction} Options: {', '.join(labels)}.",
                             str(rng.choice(labels)), f"mini/{name}/{i:02d}.wav")
                for i in range(n_instances)
            )
            tasks.append(EvalTask(f"{cat}-{name}", cat, ACCURACY, insts))
    if with_chat:
        refs = ["A woman asks how you are in a cheerful tone",
                "A man speaks slowly with a low pitch",
                "Two people discuss directions to the station",
                "A child laughs while speaking quickly"]
        insts = tuple(
            EvalInstance(f"chat-{i:02d}", "Describe the speaker and what they say.",
                         refs[i % len(refs)], f"mini/chat/{i:02d}.wav")
            for i in range(n_instances)
        )
        tasks.append(EvalTask("Chat-open_description", CHAT, AGREEMENT, insts))
    return tasks


def mini_benchmark_responder(accuracy: float = 0.6, seed: int = 1):
    """Deterministic stand-in model: answers with the reference label for a
    seeded ``accuracy`` fraction of instances and a non-answer otherwise."""
    def respond(inst: EvalInstance) -> str:
        h = np.random.default_rng([seed, *inst.id.encode()]).random()
        if inst.id.startswith("chat-"):
            words = inst.reference.split()
            keep = max(1, int(round(len(words) * (0.3 + 0.7 * h))))
            return " ".join(words[:keep])
        if h < accuracy:
            return f"The answer is {inst.reference}."
        return "The answer is unclear."
    return respond
