import math

import numpy as np
import pytest

from speechalign.adapter import AdapterConfig, init_params, load_checkpoint
from speechalign.generation import ChatMessage, TrainingPair
from speechalign.synthetic import overfit_corpus
from speechalign.training import (
    SLOT,
    Adam,
    FrozenToyLM,
    Tokenizer,
    TrainConfig,
    TrainingError,
    assemble,
    layout,
    lr_at,
    masked_nll,
    prepare_examples,
    sequence_loss,
    split_template,
    train,
)

TINY = AdapterConfig(d_enc=8, d_model=32, d_llm=64, n_queries=4, n_blocks=1, n_heads=2, n_enc_layers=3)


def pair(target="a b c d e"):
    return TrainingPair("u", "descriptive", (ChatMessage("user", "x"),), target)


def test_tokenizer_bytes_and_words():
    tok = Tokenizer(["hello"])
    assert tok.vocab_size == 4 + 256 + 1
    assert tok.encode("hello") == [260]
    assert tok.encode("hi") == [4 + ord("h"), 4 + ord("i")]


def test_layout_arithmetic():
    tok = Tokenizer("a b c d e t1 t2 t3".split())
    template = f"{SLOT}\nWhat can you hear from the audio?"
    lay = layout(pair(), 64, tok, template, "t1 t2 t3")
    prefix, suffix = split_template(template)
    n_pre, n_suf = len(tok.encode(prefix)), len(tok.encode(suffix))
    ids, mask = lay.token_ids(), lay.loss_mask()
    assert len(ids) == n_pre + 64 + 3 + n_suf + 5
    assert mask[-5:].all() and mask.sum() == 5
    assert np.all(ids[lay.speech_slice] == -1)


def test_template_without_slot():
    with pytest.raises(TrainingError):
        layout(pair(), 4, Tokenizer(), "no slot here")


def test_same_context_different_targets():
    tok = Tokenizer("a b c x y".split())
    a = layout(pair("a b"), 4, tok, f"p {SLOT} s").token_ids()
    b = layout(pair("x y c"), 4, tok, f"p {SLOT} s").token_ids()
    n = len(a) - 2
    assert np.array_equal(a[:n], b[:n])


def test_masked_nll_uniform_and_saturated():
    V = 10
    loss = masked_nll(np.zeros((4, V)), np.array([1, 2, 3, 4]), np.ones(4, bool))
    assert abs(loss - math.log(10)) <= 1e-12
    logits = np.zeros((3, V))
    tgt = np.array([0, 5, 9])
    logits[np.arange(3), tgt] = 30.0
    assert masked_nll(logits, tgt, np.ones(3, bool)) < 1e-9 * 1e4  # margin 30: ~9*e^-30


def test_masked_nll_one_hot_margin():
    logits = np.full((2, 10), -15.0)
    tgt = np.array([3, 7])
    logits[np.arange(2), tgt] = 15.0
    assert masked_nll(logits, tgt, np.ones(2, bool)) < 1e-9


def test_masked_nll_loop_oracle():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((7, 6))
    tgt = rng.integers(0, 6, 7)
    mask = np.array([0, 1, 1, 0, 1, 0, 1], bool)
    total = 0.0
    for i in range(7):
        if mask[i]:
            z = sum(math.exp(x) for x in logits[i])
            total += -math.log(math.exp(logits[i, tgt[i]]) / z)
    assert abs(masked_nll(logits, tgt, mask) - total / 4) < 1e-12


def test_masked_nll_zero_positions():
    with pytest.raises(TrainingError):
        masked_nll(np.zeros((3, 4)), np.zeros(3, int), np.zeros(3, bool))


def test_mask_gradient_exact_zero():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((12, 9))
    tgt = rng.integers(0, 9, 12)
    mask = np.zeros(12, bool)
    mask[[7, 8, 9, 10, 11]] = True
    _, g = masked_nll(logits, tgt, mask, return_grad=True)
    assert np.all(g[~mask] == 0.0)
    assert np.all(g[mask] != 0.0)


def test_speech_gradient_matches_finite_differences():
    tok = Tokenizer("a b c".split())
    lm = FrozenToyLM(tok.vocab_size, 16, hidden=32, d_att=8, seed=0, weight_scale=3.0)
    speech = np.random.default_rng(2).standard_normal((3, 16))
    seq = assemble(pair("a b c"), speech, tok, f"x {SLOT} y", lm)
    loss, d = sequence_loss(seq, lm)
    eps = 1e-6
    for idx in [(0, 0), (1, 5), (2, 15)]:
        s2 = speech.copy()
        s2[idx] += eps
        lp = sequence_loss(assemble(pair("a b c"), s2, tok, f"x {SLOT} y", lm), lm)[0]
        s2[idx] -= 2 * eps
        lm_ = sequence_loss(assemble(pair("a b c"), s2, tok, f"x {SLOT} y", lm), lm)[0]
        assert abs((lp - lm_) / (2 * eps) - d[idx]) < 1e-6


def test_lm_is_read_only():
    lm = FrozenToyLM(300, 8, hidden=8, d_att=4)
    with pytest.raises(ValueError):
        lm.embedding[0, 0] = 1.0


def test_scheduler_points_and_continuity():
    cfg = TrainConfig(lr=1e-4, warmup_steps=2000, total_steps=20000)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(2000, cfg) == pytest.approx(1e-4, abs=1e-18)
    assert lr_at(20000, cfg) == pytest.approx(0.0, abs=1e-20)
    bound = cfg.lr * (1 / 2000 + math.pi / 18000)
    lrs = [lr_at(s, cfg) for s in range(20001)]
    assert max(abs(b - a) for a, b in zip(lrs, lrs[1:])) <= bound
    with pytest.raises(ValueError):
        lr_at(20001, cfg)
    assert lr_at(20000, TrainConfig(min_lr=1e-6, total_steps=20000)) == pytest.approx(1e-6)


def test_adam_textbook():
    # f(x) = x^2 from x = 1, lr 0.1
    opt = Adam()
    x, m, v = 1.0, 0.0, 0.0
    p = {"x": np.array([1.0])}
    for t in range(1, 4):
        g = 2 * x
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        p = opt.step(p, {"x": 2 * p["x"]}, 0.1)
        assert p["x"][0] == pytest.approx(x, abs=1e-15)
    # first Adam step moves by ~lr regardless of gradient scale
    assert Adam().step({"y": np.array([0.0])}, {"y": np.array([123.0])}, 0.1)["y"][0] == pytest.approx(-0.1)


def setup(n=4, epochs=2, **kw):
    manifest, pairs, tok = overfit_corpus(n)
    lm = FrozenToyLM(tok.vocab_size, TINY.d_llm, seed=0)
    ex = prepare_examples(pairs, manifest, tok, TINY, frame_rate=10.0)
    cfg = TrainConfig(lr=1e-2, warmup_steps=2, batch_size=2, epochs=epochs, **kw)
    return ex, lm, cfg


def test_zero_steps_identity():
    ex, lm, _ = setup()
    p0 = init_params(TINY, 0)
    res = train(ex, p0, lm, TrainConfig(warmup_steps=0, total_steps=0))
    assert res.params.digest() == p0.digest() and res.trace == []


def test_deterministic_and_frozen():
    ex, lm, cfg = setup()
    d_lm = lm.digest()
    a = train(ex, init_params(TINY, 0), lm, cfg, seed=3)
    b = train(ex, init_params(TINY, 0), lm, cfg, seed=3)
    assert a.trace == b.trace and a.params.digest() == b.params.digest()
    assert lm.digest() == d_lm
    assert [s for s, _, _ in a.trace] == list(range(4))
    assert a.trace[0][1] == lr_at(1, cfg, 4)


def test_resume_matches_uninterrupted(tmp_path):
    ex, lm, cfg = setup(epochs=3)
    full = train(ex, init_params(TINY, 0), lm, cfg, seed=1)
    ck = TrainConfig(**{**cfg.__dict__, "checkpoint_every": 2})
    train(ex, init_params(TINY, 0), lm, ck, seed=1, checkpoint_dir=tmp_path)
    resumed = train(ex, init_params(TINY, 0), lm, ck, seed=1, resume_from=tmp_path / "step0000002.ckpt")
    assert resumed.trace == full.trace
    assert resumed.params.digest() == full.params.digest()
    params, extra = load_checkpoint(tmp_path / "step0000004.ckpt")
    assert extra["step"] == 4


def test_nonfinite_loss_aborts():
    ex, lm, cfg = setup()
    p = init_params(TINY, 0)
    p.update({"out.w": np.full_like(p["out.w"], 1e300)})
    with pytest.raises(TrainingError, match="non-finite .* at step 0"), np.errstate(all="ignore"):
        train(ex, p, lm, cfg)


def test_transcription_sources():
    manifest, pairs, tok = overfit_corpus(2)
    none = prepare_examples(pairs, manifest, tok, TINY, transcription="none")
    gt = prepare_examples(pairs, manifest, tok, TINY, transcription="ground_truth")
    assert none[0].layout.transcription_ids == []
    assert gt[0].layout.transcription_ids == tok.encode("utterance 0")
    dec = prepare_examples(pairs, manifest, tok, TINY, transcription="decoder",
                           decoder_transcripts={p.record_id: "the" for p in pairs})
    assert dec[0].layout.transcription_ids == tok.encode("the")
    with pytest.raises(TrainingError):
        prepare_examples(pairs, manifest, tok, TINY, transcription="decoder")
