"""``longview`` command line: one subcommand per pipeline stage.

Every command writes its outputs atomically and appends a run manifest.
Exit codes: 0 ok, 1 runtime error, 2 usage or configuration error.  Errors
are reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import uuid
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Sequence

import torch

from .config import ConfigError, PipelineConfig
from .highlevel import PipelineVariant, TemplateSet, high_level_summary, naive_baseline, tldr_baseline
from .keyphrases import (
    extract_keyphrases,
    load_exemplars,
    load_keyphrases,
    stub_phrase_responder,
)
from .llm import BackendConfig, BackendKind, Gateway
from .metrics import (
    Backends,
    HashedUnigramLm,
    HfBertScore,
    HfLm,
    HfNli,
    LexicalNli,
    TokenRecallEmbedder,
    compare_reports,
    dumps_report,
    evaluate_record,
    merge_evidence,
    report_document,
)
from .summaries import TimelineSummary, load_summary_records, summary_record
from .thvae import Decode, ThVae, Vocabulary, generate_summary, load_checkpoint, train
from .timeline import dumps_jsonl, load_timelines, read_jsonl, segment_timeline, segmentation_record

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
RUN_NAMESPACE = uuid.UUID("6f1c1d52-3e0a-4f55-9d0e-2b8c5a1f7e42")
NAIVE_TEMPLATES = ("naive_chunk", "naive_rewrite")
TLDR_TEMPLATES = ("tldr", "tldr_keyphrases", "tldr_merge")

logger = logging.getLogger("longview")


class UsageError(Exception):
    pass


# --- plumbing ---------------------------------------------------------------

def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Outputs:
    """Collects temp files and renames them into place only if the command succeeds."""

    def __init__(self):
        self._pending: dict[Path, Path] = {}

    def path(self, final: str | Path) -> Path:
        final = Path(final)
        final.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=final.parent, prefix=f".{final.name}.", suffix=".tmp")
        os.close(fd)
        os.chmod(tmp, 0o644)
        self._pending[final] = Path(tmp)
        return Path(tmp)

    def write_text(self, final: str | Path, text: str) -> None:
        self.path(final).write_text(text, encoding="utf-8")

    @property
    def finals(self) -> list[str]:
        return [str(p) for p in self._pending]

    def commit(self) -> None:
        for final, tmp in self._pending.items():
            os.replace(tmp, final)
        self._pending.clear()

    def discard(self) -> None:
        for tmp in self._pending.values():
            tmp.unlink(missing_ok=True)
        self._pending.clear()


@dataclass
class Run:
    command: str
    config: PipelineConfig
    inputs: list[str]
    template_hash: str | None = None
    backend_ids: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def variant(self) -> PipelineVariant:
        return self.config.pipeline_variant

    @property
    def run_id(self) -> str:
        key = {
            "command": self.command,
            "config": self.config.content_hash(),
            "templates": self.template_hash,
            "inputs": [sha256_file(p) for p in self.inputs],
            "seed": self.config.seed,
            "variant": self.variant.name,
            "extra": self.extra,
        }
        return str(uuid.uuid5(RUN_NAMESPACE, json.dumps(key, sort_keys=True)))

    def manifest(self, outputs: Sequence[str], started: str, finished: str) -> dict:
        v = self.variant
        return {
            "run_id": self.run_id,
            "command": self.command,
            "config_hash": self.config.content_hash(),
            "template_hash": self.template_hash,
            "input_paths": list(self.inputs),
            "output_paths": list(outputs),
            "backend_ids": dict(sorted(self.backend_ids.items())),
            "variant": {"name": v.name, "keyphrases_enabled": v.keyphrases_enabled,
                        "clinical_prompts_enabled": v.clinical_prompts_enabled},
            "seed": self.config.seed,
            "started_at": started,
            "finished_at": finished,
        }


def append_manifest(path: Path, manifest: dict) -> None:
    """Append one JSON line by rewriting to a temp file and renaming over the old one."""
    path.parent.mkdir(parents=True, exist_ok=True)
    old = path.read_bytes() if path.exists() else b""
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        os.chmod(tmp, 0o644)
        with os.fdopen(fd, "wb") as fh:
            fh.write(old + (json.dumps(manifest, sort_keys=True) + "\n").encode())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@contextmanager
def running(run: Run) -> Iterator[Outputs]:
    started = _now()
    outs = Outputs()
    try:
        yield outs
        finals = outs.finals
        outs.commit()
    except BaseException:
        outs.discard()
        raise
    manifest_path = Path(run.config.manifest_path) if run.config.manifest_path else \
        Path(finals[0]).parent / "manifests.jsonl"
    append_manifest(manifest_path, run.manifest(finals, started, _now()))


# --- backends -----------------------------------------------------------------

def _gateway(cfg: BackendConfig, responder=None) -> Gateway:
    if cfg.kind is BackendKind.STUB:
        return Gateway.stub(responder, cfg.model_name)
    return Gateway(cfg)


def _metric_backends(config: PipelineConfig) -> Backends:
    b = config.backends
    embedder = (HfBertScore(b.embedder.model_name, b.embedder.layer or 17)
                if b.embedder.kind == "hf" else TokenRecallEmbedder())
    nli = HfNli(b.nli.model_name) if b.nli.kind == "hf" else LexicalNli()
    lm = HfLm(b.lm.model_name, b.lm.seq2seq_name) if b.lm.kind == "hf" else HashedUnigramLm()
    return Backends(embedder, nli, lm)


def _templates(config: PipelineConfig, override: str | None) -> TemplateSet:
    directory = override or config.templates_dir
    return TemplateSet.load(directory)


def _keyphrase_sets(path: str | None, timeline, variant: PipelineVariant, table=None):
    n = len(segment_timeline(timeline))
    if not variant.keyphrases_enabled or table is None:
        return [None] * n
    sets = table.get(timeline.timeline_id)
    if sets is None:
        raise ValueError(f"{path}: no key phrases for timeline {timeline.timeline_id!r}")
    if [s.segment_index for s in sets] != list(range(n)):
        raise ValueError(f"{path}: key-phrase sets for {timeline.timeline_id!r} do not match its {n} segments")
    return sets


# --- commands -----------------------------------------------------------------

def cmd_segment(args, config: PipelineConfig) -> None:
    run = Run("segment", config, [args.inp])
    timelines = load_timelines(args.inp)
    with running(run) as outs:
        outs.write_text(args.out, dumps_jsonl(segmentation_record(t, segment_timeline(t)) for t in timelines))


def cmd_extract_keyphrases(args, config: PipelineConfig) -> None:
    gateway = _gateway(config.backends.extract, stub_phrase_responder)
    run = Run("extract-keyphrases", config, [args.inp, args.exemplars],
              backend_ids={"extract": gateway.backend_id})
    timelines = load_timelines(args.inp)
    examples = load_exemplars(args.exemplars)
    records = []
    for t in timelines:
        for seg in segment_timeline(t):
            records.append(extract_keyphrases(seg, examples, gateway).to_record(t.timeline_id))
    with running(run) as outs:
        outs.write_text(args.out, dumps_jsonl(records))


def cmd_train_thvae(args, config: PipelineConfig) -> None:
    variant = config.pipeline_variant
    inputs = [args.timelines] + ([args.keyphrases] if args.keyphrases else [])
    steps = args.steps or config.training.steps
    run = Run("train-thvae", config, inputs, extra={"steps": steps})
    timelines = load_timelines(args.timelines)
    table = load_keyphrases(args.keyphrases) if args.keyphrases else None
    corpus = []
    for t in timelines:
        for seg, kps in zip(segment_timeline(t), _keyphrase_sets(args.keyphrases, t, variant, table)):
            corpus.append((seg, kps))
    texts = [s.text for s, _ in corpus] + [p for _, k in corpus if k for p in k.texts]
    vocab = Vocabulary.build(texts, config.thvae.embedding_dim, config.training.min_freq,
                             config.training.max_vocab)
    torch.manual_seed(config.seed)
    model = ThVae(config.thvae, vocab)
    log_path = args.log or f"{args.checkpoint}.train.jsonl"
    with running(run) as outs:
        report = train(corpus, model, steps, seed=config.seed,
                       batch_size=config.training.batch_size, checkpoint_path=outs.path(args.checkpoint))
        outs.write_text(log_path, report.to_jsonl())


def cmd_summarize(args, config: PipelineConfig) -> None:
    variant = config.pipeline_variant
    inputs = [args.timelines] + ([args.keyphrases] if args.keyphrases else [])
    timelines = load_timelines(args.timelines)
    table = load_keyphrases(args.keyphrases) if args.keyphrases else None
    records = []
    if args.system == "thvae":
        if not args.checkpoint:
            raise UsageError("--checkpoint is required for --system thvae")
        inputs.append(args.checkpoint)
        model = load_checkpoint(args.checkpoint)
        run = Run("summarize", config, inputs, extra={"system": "thvae"})
        decode = Decode.sampled(config.seed) if args.sample else Decode.greedy()
        for t in timelines:
            s = generate_summary(t, _keyphrase_sets(args.keyphrases, t, variant, table), model, decode)
            records.append(summary_record(t.timeline_id, s.system, variant.name, s.text))
    else:
        gateway = _gateway(config.backends.instruct)
        templates = _templates(config, args.templates)
        run = Run("summarize", config, inputs, template_hash=templates.content_hash(TLDR_TEMPLATES),
                  backend_ids={"instruct": gateway.backend_id}, extra={"system": "tldr"})
        for t in timelines:
            kps = [k for k in _keyphrase_sets(args.keyphrases, t, variant, table) if k is not None]
            s = tldr_baseline(t, kps, gateway, templates, config.context_budget, seed=config.seed)
            records.append(summary_record(t.timeline_id, s.system, variant.name, s.text))
    with running(run) as outs:
        outs.write_text(args.out, dumps_jsonl(records))


def cmd_highlevel(args, config: PipelineConfig) -> None:
    variant = config.pipeline_variant
    gateway = _gateway(config.backends.instruct)
    templates = _templates(config, args.templates)
    records = []
    if args.naive:
        if not args.timelines:
            raise UsageError("--naive needs --timelines")
        run = Run("highlevel", config, [args.timelines], template_hash=templates.content_hash(NAIVE_TEMPLATES),
                  backend_ids={"instruct": gateway.backend_id}, extra={"naive": True})
        for t in load_timelines(args.timelines):
            hl = naive_baseline(t, gateway, templates, config.context_budget, seed=config.seed)
            records.append(summary_record(t.timeline_id, hl.system, variant.name, None, hl))
    else:
        if not args.inp:
            raise UsageError("highlevel needs --in (timeline summaries) unless --naive is given")
        run = Run("highlevel", config, [args.inp],
                  template_hash=templates.content_hash(variant.highlevel_templates),
                  backend_ids={"instruct": gateway.backend_id})
        for rec in load_summary_records(args.inp):
            if not rec.get("timeline_summary"):
                raise ValueError(f"{args.inp}: record for {rec['timeline_id']!r} has no timeline_summary")
            T = TimelineSummary(rec["timeline_id"], rec["system"], rec["timeline_summary"])
            hl = high_level_summary(T, gateway, variant, templates=templates, seed=config.seed)
            records.append(summary_record(T.timeline_id, T.system, variant.name, T.text, hl))
    with running(run) as outs:
        outs.write_text(args.out, dumps_jsonl(records))


def cmd_evaluate(args, config: PipelineConfig) -> None:
    backends = _metric_backends(config)
    inputs = [p for p in (args.summaries, args.gold, args.evidence, args.timelines) if p]
    templates = _templates(config, None)
    run = Run("evaluate", config, inputs, template_hash=templates.content_hash(), backend_ids=backends.ids)
    summaries = load_summary_records(args.summaries)
    gold = {r["timeline_id"]: r for r in read_jsonl(args.gold)} if args.gold else {}
    evidence = merge_evidence(read_jsonl(args.evidence), backends.embedder) if args.evidence else {}
    timelines = {t.timeline_id: t for t in load_timelines(args.timelines)} if args.timelines else {}
    reports = [evaluate_record(r, backends, timelines.get(r["timeline_id"]), gold.get(r["timeline_id"]),
                               evidence.get(r["timeline_id"]), config.chunk_cutoff) for r in summaries]
    doc = report_document(run.run_id, run.template_hash, backends.ids, reports)
    with running(run) as outs:
        outs.write_text(args.out, dumps_report(doc))


def cmd_compare(args, config: PipelineConfig) -> None:
    run = Run("compare", config, [args.a, args.b], extra={"n_resamples": args.n_resamples})
    doc_a = json.loads(Path(args.a).read_text(encoding="utf-8"))
    doc_b = json.loads(Path(args.b).read_text(encoding="utf-8"))
    comparisons = compare_reports(doc_a, doc_b, args.n_resamples, config.seed)
    out = {"run_id": run.run_id, "report_a": doc_a["run_id"], "report_b": doc_b["run_id"],
           "comparisons": comparisons}
    with running(run) as outs:
        outs.write_text(args.out, json.dumps(out, sort_keys=True, indent=2) + "\n")


# --- argument parsing ----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML pipeline configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--variant", choices=["full", "-keyphrases", "-clinical-prompts"])
    common.add_argument("--backend", choices=["stub", "live"], default="stub",
                        help="stub forces every backend offline; live uses the configured profiles")

    p = _Parser(prog="longview", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("segment", parents=[common], help="split timelines into mood-phase segments")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_segment)

    s = sub.add_parser("extract-keyphrases", parents=[common], help="few-shot key phrases per segment")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--exemplars", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_extract_keyphrases)

    s = sub.add_parser("train-thvae", parents=[common], help="train the timeline VAE on segments")
    s.add_argument("--timelines", required=True)
    s.add_argument("--keyphrases")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--log", help="training log JSONL (default: <checkpoint>.train.jsonl)")
    s.set_defaults(fn=cmd_train_thvae)

    s = sub.add_parser("summarize", parents=[common], help="first-person timeline summaries")
    s.add_argument("--timelines", required=True)
    s.add_argument("--keyphrases")
    s.add_argument("--system", choices=["thvae", "tldr"], required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--templates")
    s.add_argument("--sample", action="store_true", help="sample instead of greedy decoding (thvae)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_summarize)

    s = sub.add_parser("highlevel", parents=[common], help="third-person clinical summaries")
    s.add_argument("--in", dest="inp")
    s.add_argument("--templates")
    s.add_argument("--naive", action="store_true", help="run the chunk-and-rewrite baseline instead")
    s.add_argument("--timelines")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_highlevel)

    s = sub.add_parser("evaluate", parents=[common], help="score summaries")
    s.add_argument("--summaries", required=True)
    s.add_argument("--gold")
    s.add_argument("--evidence")
    s.add_argument("--timelines")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("compare", parents=[common], help="paired permutation tests between two reports")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--n-resamples", type=int, default=10_000)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_compare)
    return p


def _join_variant(argv: list[str]) -> list[str]:
    # argparse treats "-keyphrases" as an option, so glue it to its flag.
    out, i = [], 0
    while i < len(argv):
        if argv[i] == "--variant" and i + 1 < len(argv):
            out.append(f"--variant={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def _fail(command: str | None, exc: BaseException, code: int) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "command": command, "exit_code": code}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    argv = _join_variant(list(sys.argv[1:] if argv is None else argv))
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        config = PipelineConfig.load(args.config).with_overrides(args.seed, args.variant, args.backend)
    except (UsageError, ConfigError) as exc:
        return _fail(command, exc, EXIT_USAGE)
    try:
        args.fn(args, config)
    except UsageError as exc:
        return _fail(command, exc, EXIT_USAGE)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        logger.debug("command failed", exc_info=True)
        return _fail(command, exc, EXIT_RUNTIME)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
