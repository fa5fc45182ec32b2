"""Adapter training against a frozen toy language model.

The toy LM scores position ``i`` from its own input row, gated by a fixed
single-head causal attention read-out over rows ``0..i``::

    c_i = sum_{j<=i} softmax_j(x_i Q . x_j K / sqrt(d_att)) x_j V
    logits_i = (tanh(x_i A) * tanh(c_i B + b)) W

Only the adapter receives updates. Speech feature rows enter the sequence
where the seed transcript sat in the chat template, followed by the
transcription tokens.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapter import (
    AdapterConfig,
    AdapterParams,
    adapter_backward,
    adapter_forward,
    load_checkpoint,
    softmax,
    mock_encoder,
    save_checkpoint,
)
from .generation import TrainingPair
from .metadata import Manifest, UtteranceRecord
from .seed import build_seed_transcript

logger = logging.getLogger(__name__)

SLOT = "<slot>"
DEFAULT_CHAT_TEMPLATE = "<|user|>\n{user}\n<|assistant|>\n"


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# tokenizer


class Tokenizer:
    """Whitespace word tokenizer; out-of-vocabulary words fall back to bytes.

    Ids: 0..3 specials, 4..259 the 256 bytes, then the word vocabulary.
    """

    SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>")
    BYTE_OFFSET = len(SPECIALS)

    def __init__(self, words: Sequence[str] = ()):
        self.words = list(dict.fromkeys(w for w in words if w))
        base = self.BYTE_OFFSET + 256
        self._word_ids = {w: base + i for i, w in enumerate(self.words)}

    @classmethod
    def from_texts(cls, texts, max_words: int | None = None) -> "Tokenizer":
        counts: dict[str, int] = {}
        for t in texts:
            for w in t.split():
                counts[w] = counts.get(w, 0) + 1
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        return cls(ranked[:max_words] if max_words is not None else ranked)

    @property
    def vocab_size(self) -> int:
        return self.BYTE_OFFSET + 256 + len(self.words)

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for w in text.split():
            wid = self._word_ids.get(w)
            if wid is not None:
                ids.append(wid)
            else:
                ids.extend(self.BYTE_OFFSET + b for b in w.encode("utf-8"))
        return ids

    def to_dict(self) -> dict:
        return {"words": self.words}


# ---------------------------------------------------------------------------
# frozen LM


class FrozenToyLM:
    def __init__(self, vocab_size: int, d_llm: int, hidden: int = 512, d_att: int = 64,
                 seed: int = 0, weight_scale: float = 30.0):
        rng = np.random.default_rng(seed)
        self.vocab_size = vocab_size
        self.d_llm = d_llm
        self.embedding = rng.standard_normal((vocab_size, d_llm))
        self.w_q = rng.standard_normal((d_llm, d_att)) / np.sqrt(d_llm)
        self.w_k = rng.standard_normal((d_llm, d_att)) / np.sqrt(d_llm)
        self.w_v = rng.standard_normal((d_llm, d_att)) / np.sqrt(d_llm)
        self.w_in = rng.standard_normal((d_llm, hidden)) / np.sqrt(d_llm)
        self.w_ctx = rng.standard_normal((d_att, hidden)) / np.sqrt(d_att)
        self.bias = np.zeros(hidden)
        self.w_out = rng.standard_normal((hidden, vocab_size)) * weight_scale / np.sqrt(hidden)
        for arr in self._tensors():
            arr.setflags(write=False)

    def _tensors(self):
        return (self.embedding, self.w_q, self.w_k, self.w_v, self.w_in, self.w_ctx,
                self.bias, self.w_out)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in self._tensors():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def embed(self, ids: Sequence[int]) -> np.ndarray:
        return self.embedding[np.asarray(ids, dtype=np.int64)].reshape(len(ids), self.d_llm)

    def forward(self, x: np.ndarray):
        s = x.shape[0]
        q, k, v = x @ self.w_q, x @ self.w_k, x @ self.w_v
        scale = 1.0 / np.sqrt(q.shape[1])
        scores = q @ k.T * scale
        scores[np.triu_indices(s, 1)] = -np.inf
        probs = softmax(scores)
        ctx = probs @ v
        a = np.tanh(x @ self.w_in)
        g = np.tanh(ctx @ self.w_ctx + self.bias)
        return (a * g) @ self.w_out, (x, q, k, v, probs, scale, a, g)

    def backward(self, dlogits: np.ndarray, cache) -> np.ndarray:
        """Gradient with respect to the input rows."""
        x, q, k, v, probs, scale, a, g = cache
        dh = dlogits @ self.w_out.T
        dza = dh * g * (1.0 - a * a)
        dzg = dh * a * (1.0 - g * g)
        dctx = dzg @ self.w_ctx.T
        dprobs = dctx @ v.T
        dv = probs.T @ dctx
        dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True)) * scale
        dq = dscores @ k
        dk = dscores.T @ q
        return (dza @ self.w_in.T + dq @ self.w_q.T + dk @ self.w_k.T + dv @ self.w_v.T)


# ---------------------------------------------------------------------------
# sequence assembly


@dataclass
class AssembledSequence:
    embeddings: np.ndarray
    token_ids: np.ndarray          # -1 on speech rows
    loss_mask: np.ndarray          # True on target positions
    speech_slice: slice

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]


def chat_template(pair: TrainingPair, seed_text: str, wrapper: str = DEFAULT_CHAT_TEMPLATE) -> str:
    """Training template for ``pair``: its user turn with the seed transcript replaced by the slot."""
    user = [m.content for m in pair.context if m.role == "user"]
    if not user:
        raise TrainingError(f"pair {pair.record_id} has no user message")
    content = user[-1]
    if seed_text not in content:
        raise TrainingError(f"seed transcript not found in context of {pair.record_id}")
    return wrapper.format(user=content.replace(seed_text, SLOT, 1))


def split_template(template: str) -> tuple[str, str]:
    if SLOT not in template:
        raise TrainingError(f"template has no {SLOT} marker")
    prefix, _, suffix = template.partition(SLOT)
    return prefix, suffix


@dataclass
class SequenceLayout:
    """Token ids around the speech rows; speech features are attached at step time."""
    prefix_ids: list[int]
    transcription_ids: list[int]
    suffix_ids: list[int]
    target_ids: list[int]
    n_speech: int

    def token_ids(self) -> np.ndarray:
        return np.array(
            self.prefix_ids + [-1] * self.n_speech + self.transcription_ids
            + self.suffix_ids + self.target_ids,
            dtype=np.int64,
        )

    def loss_mask(self) -> np.ndarray:
        n = len(self.prefix_ids) + self.n_speech + len(self.transcription_ids) + len(self.suffix_ids)
        mask = np.zeros(n + len(self.target_ids), dtype=bool)
        mask[n:] = True
        return mask

    @property
    def speech_slice(self) -> slice:
        start = len(self.prefix_ids)
        return slice(start, start + self.n_speech)


def layout(pair: TrainingPair, n_speech: int, tokenizer: Tokenizer, template: str,
           transcription: str = "") -> SequenceLayout:
    prefix, suffix = split_template(template)
    target_ids = tokenizer.encode(pair.target)
    if not target_ids:
        raise TrainingError(f"empty target for {pair.record_id}")
    return SequenceLayout(
        tokenizer.encode(prefix), tokenizer.encode(transcription), tokenizer.encode(suffix),
        target_ids, n_speech,
    )


def embed_layout(lay: SequenceLayout, speech: np.ndarray, lm: FrozenToyLM) -> AssembledSequence:
    if speech.shape != (lay.n_speech, lm.d_llm):
        raise TrainingError(f"speech features shape {speech.shape} != {(lay.n_speech, lm.d_llm)}")
    ids = lay.token_ids()
    emb = np.empty((len(ids), lm.d_llm))
    text = ids >= 0
    emb[text] = lm.embed(ids[text])
    emb[lay.speech_slice] = speech
    return AssembledSequence(emb, ids, lay.loss_mask(), lay.speech_slice)


def assemble(pair: TrainingPair, speech: np.ndarray, tokenizer: Tokenizer, template: str,
             lm: FrozenToyLM, transcription: str = "") -> AssembledSequence:
    """prefix ⊕ speech rows ⊕ transcription ⊕ suffix ⊕ target, mask on the target."""
    return embed_layout(layout(pair, speech.shape[0], tokenizer, template, transcription), speech, lm)


# ---------------------------------------------------------------------------
# loss


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def masked_nll(logits: np.ndarray, target_ids: np.ndarray, loss_mask: np.ndarray,
               return_grad: bool = False):
    """Mean ``-log p(target_ids[i])`` over positions where ``loss_mask`` is set.

    Row ``i`` of ``logits`` must already be the prediction for
    ``target_ids[i]`` (callers shift by one).
    """
    loss_mask = np.asarray(loss_mask, dtype=bool)
    n = int(loss_mask.sum())
    if n == 0:
        raise TrainingError("no masked positions")
    idx = np.flatnonzero(loss_mask)
    tgt = np.asarray(target_ids)[idx]
    logp = _log_softmax(logits[idx])
    loss = -logp[np.arange(n), tgt].sum() / n
    if not return_grad:
        return loss
    grad = np.zeros_like(logits)
    probs = np.exp(logp)
    probs[np.arange(n), tgt] -= 1.0
    grad[idx] = probs / n
    return loss, grad


def sequence_loss(seq: AssembledSequence, lm: FrozenToyLM):
    """Next-token loss of one sequence and its gradient on the speech rows."""
    logits, cache = lm.forward(seq.embeddings)
    loss, dlogits_shifted = masked_nll(logits[:-1], seq.token_ids[1:], seq.loss_mask[1:],
                                       return_grad=True)
    dlogits = np.zeros_like(logits)
    dlogits[:-1] = dlogits_shifted
    dx = lm.backward(dlogits, cache)
    return loss, dx[seq.speech_slice]


# ---------------------------------------------------------------------------
# schedule and optimizer


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    warmup_steps: int = 2000
    total_steps: int | None = None
    batch_size: int = 16
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    min_lr: float = 0.0
    checkpoint_every: int = 0

    def resolved_total(self, n_examples: int) -> int:
        if self.total_steps is not None:
            return self.total_steps
        return self.epochs * math.ceil(n_examples / self.batch_size)


def lr_at(step: int, config: TrainConfig, total_steps: int | None = None) -> float:
    """Linear warm-up to ``lr`` then cosine decay to ``min_lr`` at ``total_steps``."""
    total = config.total_steps if total_steps is None else total_steps
    if total is None:
        raise ValueError("total_steps unknown")
    if config.warmup_steps > total:
        raise ValueError("warmup_steps exceeds total_steps")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < config.warmup_steps:
        return config.lr * step / config.warmup_steps
    span = total - config.warmup_steps
    if span == 0:
        return config.lr
    progress = (step - config.warmup_steps) / span
    return config.min_lr + (config.lr - config.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        self.t += 1
        out = {}
        for name, g in grads.items():
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            out[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out

    def state(self) -> dict[str, np.ndarray]:
        st = {f"m.{k}": v for k, v in self.m.items()}
        st.update({f"v.{k}": v for k, v in self.v.items()})
        st["t"] = np.array(self.t)
        return st

    def load_state(self, st) -> None:
        self.t = int(st["t"])
        self.m = {k[2:]: np.array(st[k]) for k in st if k.startswith("m.")}
        self.v = {k[2:]: np.array(st[k]) for k in st if k.startswith("v.")}


# ---------------------------------------------------------------------------
# training loop


@dataclass
class Example:
    pair: TrainingPair
    states: np.ndarray
    layout: SequenceLayout


def states_digest(examples: Sequence[Example]) -> str:
    h = hashlib.sha256()
    for ex in examples:
        h.update(np.ascontiguousarray(ex.states).tobytes())
    return h.hexdigest()


def prepare_examples(
    pairs: Sequence[TrainingPair],
    manifest: Manifest,
    tokenizer: Tokenizer,
    config: AdapterConfig,
    encoder_seed: int = 0,
    frame_rate: float = 50.0,
    transcription: str = "ground_truth",
    decoder_transcripts: dict[str, str] | None = None,
    wrapper: str = DEFAULT_CHAT_TEMPLATE,
) -> list[Example]:
    """Attach mock-encoder states and token layouts to each pair.

    ``transcription`` picks the text that follows the speech rows:
    ``"ground_truth"`` (segment texts), ``"decoder"`` (from
    ``decoder_transcripts``, keyed by record id) or ``"none"``.
    """
    records = manifest.by_id()
    out = []
    for pair in pairs:
        rec = records.get(pair.record_id)
        if rec is None:
            raise TrainingError(f"unknown record id {pair.record_id}")
        template = chat_template(pair, build_seed_transcript(rec).text, wrapper)
        text = _transcription_for(rec, transcription, decoder_transcripts)
        states = mock_encoder(rec.id, config, encoder_seed, rec.audio_duration_s, frame_rate)
        out.append(Example(pair, states, layout(pair, config.n_queries, tokenizer, template, text)))
    return out


def _transcription_for(rec: UtteranceRecord, source: str, decoded: dict[str, str] | None) -> str:
    if source == "none":
        return ""
    if source == "ground_truth":
        if rec.segments:
            return " ".join(s.text for s in rec.segments)
        return rec.attributes.get("spoken_text", "")
    if source == "decoder":
        if not decoded or rec.id not in decoded:
            raise TrainingError(f"no decoder transcript for {rec.id}")
        return decoded[rec.id]
    raise ValueError(f"unknown transcription source {source!r}")


@dataclass
class TrainResult:
    params: AdapterParams
    trace: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [loss for _, _, loss in self.trace]


def example_loss(ex: Example, params: AdapterParams, lm: FrozenToyLM):
    speech, cache = adapter_forward(ex.states, params)
    seq = embed_layout(ex.layout, speech, lm)
    loss, dspeech = sequence_loss(seq, lm)
    return loss, adapter_backward(dspeech, cache, params)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.Generator(np.random.PCG64([seed, epoch])).permutation(n)


def batches(n: int, config: TrainConfig, seed: int, total: int):
    """Yield (step, indices) for steps 0..total-1; epochs reshuffle, last partial batch kept."""
    per_epoch = math.ceil(n / config.batch_size)
    for step in range(total):
        epoch, b = divmod(step, per_epoch)
        order = epoch_order(n, seed, epoch)
        yield step, order[b * config.batch_size : (b + 1) * config.batch_size]


def train(
    examples: Sequence[Example],
    params: AdapterParams,
    lm: FrozenToyLM,
    config: TrainConfig,
    seed: int = 0,
    checkpoint_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Adam on the adapter only; returns the final params and a (step, lr, loss) trace.

    Update ``k`` (0-based) uses ``lr_at(k + 1)``. Per-example gradients in a
    batch are summed in ascending example index, then averaged.
    """
    if not examples:
        raise TrainingError("empty corpus")
    total = config.resolved_total(len(examples))
    if config.warmup_steps > total:
        raise TrainingError(f"warmup_steps {config.warmup_steps} > total_steps {total}")
    params = params.copy()
    opt = Adam(config.beta1, config.beta2, config.eps)
    trace: list[tuple[int, float, float]] = []
    start = 0
    if resume_from is not None:
        params, extra = load_checkpoint(resume_from)
        with np.load(Path(resume_from).with_suffix(".opt.npz")) as st:
            opt.load_state(dict(st))
        start = int(extra["step"])
        trace = [tuple(t) for t in extra.get("trace", [])]

    lm_digest = lm.digest()
    enc_digest = states_digest(examples)
    for step, idx in batches(len(examples), config, seed, total):
        if step < start:
            continue
        losses = []
        grads: dict[str, np.ndarray] | None = None
        for i in sorted(int(j) for j in idx):
            loss, g = example_loss(examples[i], params, lm)
            losses.append(loss)
            if grads is None:
                grads = g
            else:
                for k in grads:
                    grads[k] += g[k]
        batch_loss = float(np.sum(losses) / len(losses))
        if not math.isfinite(batch_loss):
            raise TrainingError(f"non-finite loss at step {step}")
        grads = {k: v / len(losses) for k, v in grads.items()}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(f"non-finite gradient at step {step}")
        lr = lr_at(step + 1, config, total)
        params.update(opt.step(params.tensors, grads, lr))
        trace.append((step, lr, batch_loss))
        if checkpoint_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            _save_state(Path(checkpoint_dir) / f"step{step + 1:07d}.ckpt", params, opt, step + 1, trace)

    if lm.digest() != lm_digest or states_digest(examples) != enc_digest:
        raise TrainingError("frozen tensors changed during training")
    return TrainResult(params, trace)


def _save_state(path: Path, params: AdapterParams, opt: Adam, step: int, trace) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, params, extra={"step": step, "trace": [list(t) for t in trace]})
    np.savez(path.with_suffix(".opt.npz"), **opt.state())


def write_trace(trace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in trace:
            w.writerow([step, repr(lr), repr(loss)])


def train_config_dict(config: TrainConfig) -> dict:
    return asdict(config)
