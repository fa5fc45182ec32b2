"""Command-line front end: one subcommand per pipeline stage.

Stages talk to each other only through files. Every stage writes
``run_manifest.json`` into its output directory with the config digest and
the sha256 of each input and output file.

Exit codes: 0 success, 1 validation failure or missing input, 2 transport
exhaustion while talking to the LLM endpoint.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .adapter import init_params, save_checkpoint
from .config import RunConfig, load_config
from .corpus import CorpusError, balance, compute_stats, split, write_corpus
from .evaluation import (
    EvalInstance,
    FileResponder,
    LLMJudge,
    RuleBasedJudge,
    aggregate,
    cascade_responder,
    dump_verdicts,
    echo_responder,
    load_tasks,
    load_verdicts,
    report_metadata,
    run_task,
)
from .generation import (
    ChatClient,
    ChatRequest,
    GenerationSettings,
    RequestLog,
    ResponseCache,
    SamplingConfig,
    dump_pairs,
    estimate_volume,
    generate_targets,
    load_pairs,
    plan_requests,
)
from .metadata import ManifestError, dump_manifest, load_manifest, merge_extractor_outputs
from .plots import plot_corpus_stats, plot_eval_report, plot_loss_trace
from .seed import build_seed_transcript
from .training import FrozenToyLM, Tokenizer, prepare_examples, train, write_trace

log = logging.getLogger("speechalign")

EXIT_OK, EXIT_INVALID, EXIT_TRANSPORT = 0, 1, 2


class StageError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise StageError(f"missing required input: {what}")
    p = Path(path)
    if not p.exists():
        raise StageError(f"missing input file: {p}")
    return p


def write_run_manifest(out: Path, stage: str, cfg: RunConfig, inputs: list[Path],
                       outputs: list[Path], extra: dict | None = None) -> Path:
    manifest = {
        "stage": stage,
        "tool": "speechalign",
        "tool_version": __version__,
        "config_digest": cfg.digest(),
        "config": cfg.to_dict(),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {p.name: sha256_file(p) for p in sorted(outputs)},
        **(extra or {}),
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _client(cfg: RunConfig, args) -> ChatClient:
    cache = ResponseCache(args.cache_dir) if args.cache_dir else None
    return ChatClient(
        cfg.endpoint.base_url, cfg.endpoint.model, cache=cache,
        retry=cfg.endpoint.retry_policy(), timeout=cfg.endpoint.timeout,
        log=RequestLog(Path(args.out) / "requests.jsonl"), rng_seed=cfg.seeds.client,
    )


# ---------------------------------------------------------------------------
# stages


def cmd_ingest(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    base_path = _require(args.manifest, "--manifest")
    base = load_manifest(base_path)
    inputs = [base_path]
    merged = base
    for ov in args.overlay or []:
        ov_path = _require(ov, "--overlay")
        merged = merge_extractor_outputs(merged, load_manifest(ov_path), args.policy)
        inputs.append(ov_path)
    out.mkdir(parents=True, exist_ok=True)
    dst = out / "manifest.jsonl"
    dump_manifest(merged, dst)
    report = out / "ingest_report.json"
    report.write_text(json.dumps({
        "records": len(merged),
        "skipped": [{"line": n, "reason": r} for n, r in base.skipped],
    }, indent=2) + "\n")
    write_run_manifest(out, "ingest", cfg, inputs, [dst, report])
    print(f"{len(merged)} records written, {base.skip_count} skipped")
    if base.skip_count and args.strict:
        return EXIT_INVALID
    return EXIT_OK


def cmd_seed(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    src = _require(args.manifest, "--manifest")
    manifest = load_manifest(src)
    seeds_dir = out / "seeds"
    seeds_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for rec in manifest.records:
        p = seeds_dir / f"{rec.id}.txt"
        p.write_text(build_seed_transcript(rec).text + "\n", encoding="utf-8")
        outputs.append(p)
    write_run_manifest(out, "seed", cfg, [src], outputs)
    print(f"{len(outputs)} seed transcripts in {seeds_dir}")
    return EXIT_OK


def cmd_generate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    src = _require(args.manifest, "--manifest")
    manifest = load_manifest(src)
    gen = cfg.generation
    mode = gen.generation_mode()
    settings = GenerationSettings(gen.prompt_template, gen.system_prompt, gen.caption_prompt)
    if args.dry_run:
        plan = plan_requests(manifest, mode, cfg.sampling, gen.captions_per_audio,
                             cfg.endpoint.model, settings)
        print(json.dumps(estimate_volume(plan), indent=2))
        return EXIT_OK
    out.mkdir(parents=True, exist_ok=True)
    (out / "requests.jsonl").unlink(missing_ok=True)
    client = None if mode.kind == "seedcopy" else _client(cfg, args)
    result = generate_targets(manifest, mode, cfg.sampling, gen.captions_per_audio, client,
                              parallelism=gen.parallelism, settings=settings)
    pairs_path = out / "pairs.jsonl"
    dump_pairs(result.pairs, pairs_path)
    failed_path = out / "failed.json"
    failed_path.write_text(json.dumps(result.failed, indent=2) + "\n")
    write_run_manifest(out, "generate", cfg, [src], [pairs_path, failed_path],
                       {"network_calls": client.network_calls if client else 0})
    print(f"{len(result.pairs)} pairs, {len(result.failed)} failed records")
    return EXIT_TRANSPORT if result.failed else EXIT_OK


def cmd_balance(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    pairs_path = _require(args.pairs, "--pairs")
    man_path = _require(args.manifest, "--manifest")
    manifest = load_manifest(man_path)
    policy = cfg.balance.policy()
    kept = balance(load_pairs(pairs_path), manifest, policy)
    train_pairs, val_pairs = split(kept, cfg.balance.val_fraction, cfg.balance.rng_seed)
    outputs = [write_corpus(train_pairs, out, compute_stats(train_pairs, manifest), policy)]
    outputs.append(out / "corpus.meta.json")
    if val_pairs:
        outputs.append(write_corpus(val_pairs, out, compute_stats(val_pairs, manifest), policy,
                                    name="val"))
        outputs.append(out / "val.meta.json")
    write_run_manifest(out, "balance", cfg, [pairs_path, man_path], outputs)
    print(f"{len(train_pairs)} train pairs, {len(val_pairs)} validation pairs")
    return EXIT_OK


def cmd_stats(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    pairs_path = _require(args.pairs, "--pairs")
    man_path = _require(args.manifest, "--manifest")
    stats = compute_stats(load_pairs(pairs_path), load_manifest(man_path))
    out.mkdir(parents=True, exist_ok=True)
    txt, js, fig = out / "stats.txt", out / "stats.json", out / "stats.png"
    txt.write_text(stats.table())
    js.write_text(json.dumps(stats.to_dict(), indent=2) + "\n")
    plot_corpus_stats(stats, fig)
    write_run_manifest(out, "stats", cfg, [pairs_path, man_path], [txt, js])
    sys.stdout.write(stats.table())
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    corpus_path = _require(args.corpus, "--corpus")
    man_path = _require(args.manifest, "--manifest")
    manifest = load_manifest(man_path)
    pairs = load_pairs(corpus_path)
    ts = cfg.training
    acfg = cfg.adapter
    tok = Tokenizer.from_texts([p.target for p in pairs]
                               + [m.content for p in pairs for m in p.context]
                               + [ts.chat_template])
    lm = FrozenToyLM(tok.vocab_size, acfg.d_llm, hidden=ts.lm_hidden, d_att=ts.lm_d_att,
                     seed=cfg.seeds.lm, weight_scale=ts.lm_weight_scale)
    examples = prepare_examples(pairs, manifest, tok, acfg, encoder_seed=cfg.seeds.encoder,
                                frame_rate=ts.frame_rate, transcription=ts.transcription,
                                wrapper=ts.chat_template)
    out.mkdir(parents=True, exist_ok=True)
    result = train(examples, init_params(acfg, cfg.seeds.init), lm, ts.train, seed=cfg.seeds.train,
                   checkpoint_dir=out / "checkpoints" if ts.train.checkpoint_every else None,
                   resume_from=args.resume)
    ckpt = out / "adapter.ckpt"
    digest = save_checkpoint(ckpt, result.params, extra={"step": len(result.trace)})
    trace_path = out / "loss.csv"
    write_trace(result.trace, trace_path)
    tok_path = out / "tokenizer.json"
    tok_path.write_text(json.dumps(tok.to_dict()) + "\n")
    plot_loss_trace(result.trace, out / "loss.png")
    write_run_manifest(out, "train", cfg, [corpus_path, man_path], [ckpt, trace_path, tok_path],
                       {"checkpoint_sha256": digest, "lm_digest": lm.digest()})
    final = result.trace[-1][2] if result.trace else float("nan")
    print(f"{len(result.trace)} steps, final loss {final:.4f}, checkpoint {digest[:12]}")
    return EXIT_OK


def _responder(args, cfg: RunConfig):
    if args.responses:
        return FileResponder(_require(args.responses, "--responses"))
    if args.responder == "echo":
        return echo_responder
    if args.responder.startswith("cascade"):
        records = load_manifest(_require(args.manifest, "--manifest")).by_id()
        client = _client(cfg, args)
        variant = "seed" if args.responder == "cascade-seed" else "transcript"
        sampling = SamplingConfig(0.0, 1.0, cfg.sampling.max_tokens)

        def llm(messages):
            comp = client.complete(ChatRequest(client.model, tuple(messages), sampling))
            if comp.text is None:
                raise RuntimeError(comp.error)
            return comp.text

        def respond(inst: EvalInstance) -> str:
            return cascade_responder(records[inst.audio_ref], inst.instruction, llm, variant)
        return respond
    raise StageError(f"unknown responder {args.responder!r}")


def _write_report(out: Path, results, cfg: RunConfig, judge_name: str) -> list[Path]:
    report = aggregate(results, weighting=cfg.eval.weighting, metadata=report_metadata(judge_name))
    js, txt, fig = out / "report.json", out / "report.txt", out / "report.png"
    js.write_text(report.to_json())
    txt.write_text(report.table())
    plot_eval_report(report, fig)
    sys.stdout.write(report.table())
    return [js, txt]


def cmd_eval(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    tasks_path = _require(args.tasks, "--tasks")
    tasks = load_tasks(tasks_path)
    out.mkdir(parents=True, exist_ok=True)
    responder = _responder(args, cfg)
    if cfg.eval.judge == "rule":
        judge_fn, judge_name = RuleBasedJudge(), RuleBasedJudge.name
    else:
        judge_fn, judge_name = LLMJudge(_client(cfg, args)), cfg.endpoint.model
    try:
        results = {t.task_id: run_task(t, responder, judge_fn, cfg.eval.parallelism) for t in tasks}
    except RuntimeError as exc:
        raise StageError(f"judge failed: {exc}", EXIT_TRANSPORT) from exc
    verdicts = out / "verdicts.jsonl"
    dump_verdicts(results, verdicts)
    outputs = [verdicts, *_write_report(out, results, cfg, judge_name)]
    inputs = [tasks_path] + ([Path(args.responses)] if args.responses else [])
    write_run_manifest(out, "eval", cfg, inputs, outputs, {"judge": judge_name})
    return EXIT_OK


def cmd_judge_report(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    src = _require(args.verdicts, "--verdicts")
    results = load_verdicts(src)
    out.mkdir(parents=True, exist_ok=True)
    outputs = _write_report(out, results, cfg, args.judge_name)
    write_run_manifest(out, "judge-report", cfg, [src], outputs)
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "seed": cmd_seed,
    "generate": cmd_generate,
    "balance": cmd_balance,
    "stats": cmd_stats,
    "train": cmd_train,
    "eval": cmd_eval,
    "judge-report": cmd_judge_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run config")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--mode", help="generation mode: descriptive, openqa:<k>, seedcopy, caption")
    common.add_argument("--cache-dir", help="response cache directory")
    common.add_argument("--parallelism", type=int, help="max concurrent requests")
    common.add_argument("--dry-run", action="store_true",
                        help="generate: print request count and token estimate, no network")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="speechalign", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="validate and merge manifests")
    p.add_argument("--manifest", required=True)
    p.add_argument("--overlay", action="append", help="extractor-output manifest (repeatable)")
    p.add_argument("--policy", default="annotation-wins", choices=["annotation-wins", "extractor-wins"])
    p.add_argument("--strict", action="store_true", help="exit 1 if any line was skipped")

    p = sub.add_parser("seed", parents=[common], help="write seed transcripts")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("generate", parents=[common], help="generate training targets")
    p.add_argument("--manifest", required=True)
    p.add_argument("--captions", type=int, help="captions per audio")

    for name, help_ in (("balance", "cap captions per source and split"),
                        ("stats", "corpus statistics table and figure")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--pairs", required=True)
        p.add_argument("--manifest", required=True)

    p = sub.add_parser("train", parents=[common], help="train the adapter on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval", parents=[common], help="collect responses and judge them")
    p.add_argument("--tasks", required=True)
    p.add_argument("--responses", help="JSONL of {id, response}")
    p.add_argument("--responder", default="echo",
                   help="echo | cascade-transcript | cascade-seed (when --responses is absent)")
    p.add_argument("--manifest", help="records for cascade responders, keyed by audio_ref")

    p = sub.add_parser("judge-report", parents=[common], help="rebuild a report from saved verdicts")
    p.add_argument("--verdicts", required=True)
    p.add_argument("--judge-name", default="unknown")
    return ap


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        s = args.seed
        cfg = replace(cfg, seeds=replace(cfg.seeds, init=s, encoder=s, train=s, lm=s, client=s),
                      balance=replace(cfg.balance, rng_seed=s))
    if args.mode:
        cfg = replace(cfg, generation=replace(cfg.generation, mode=args.mode))
    if args.parallelism:
        cfg = replace(cfg, generation=replace(cfg.generation, parallelism=args.parallelism),
                      eval=replace(cfg.eval, parallelism=args.parallelism))
    if getattr(args, "captions", None):
        cfg = replace(cfg, generation=replace(cfg.generation, captions_per_audio=args.captions))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        cfg.generation.generation_mode()
        return COMMANDS[args.command](args, cfg)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ManifestError, CorpusError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: missing file {exc.filename}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
