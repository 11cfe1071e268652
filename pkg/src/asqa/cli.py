"""Batch command-line entry point.

Every subcommand writes a ``key=value`` run summary (``--summary``, default
``run_summary.txt``). Exit codes: 0 success, 1 terminal error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import io
import json
import logging
import sys
import wave
from collections import defaultdict
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import aqa_closed, aqa_open, curriculum, evaluation, sampling, speech_features, tltr
from .llm import HttpChatClient, LlmError, MockLlmClient, ordered_map
from .records import (
    CLOSED_TASKS,
    Dataset,
    Entry,
    EvalSplitLeak,
    ManifestError,
    Task,
    assert_no_eval_split,
    exclude_eval_splits,
    parse_manifest,
    write_aqa,
    write_manifest,
)

logger = logging.getLogger("asqa")

SUBCOMMANDS = ("ingest", "features", "gen-closed", "gen-open", "sample", "plan", "tltr-check", "eval", "judge")


class UsageError(Exception):
    pass


def read_config_file(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Keys use underscores or dashes."""
    cfg = {}
    for lineno, line in enumerate(Path(path).read_text("utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        cfg[k.replace("-", "_")] = v
    return cfg


def _load_manifest(path: str, dataset: str | None = None) -> list[Entry]:
    data = Path(path).read_bytes()
    header_kind = dataset
    if header_kind is None:
        first = next((l for l in data.decode("utf-8").splitlines() if l.strip()), "")
        try:
            header_kind = json.loads(first).get("dataset", Dataset.CUSTOM.value) if first else Dataset.CUSTOM.value
        except (json.JSONDecodeError, AttributeError):
            header_kind = Dataset.CUSTOM.value
    result = parse_manifest(data, header_kind)
    for err in result.errors:
        logger.warning("%s:%d: %s", path, err.line, err.message)
    return result.records


def _training_entries(path: str) -> list[Entry]:
    entries = exclude_eval_splits(_load_manifest(path))
    assert_no_eval_split(entries)
    return entries


def _write_text(path: str, write: Callable[[io.StringIO], Any]) -> None:
    buf = io.StringIO()
    write(buf)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _llm_client(args: argparse.Namespace):
    if args.mock_llm:
        return MockLlmClient(args.mock_llm)
    return HttpChatClient()


# ---------------------------------------------------------------------------
# subcommands; each returns a dict of counts for the run summary


def cmd_ingest(args: argparse.Namespace) -> dict[str, Any]:
    data = Path(args.manifest).read_bytes()
    result = parse_manifest(data, args.dataset)
    kept = exclude_eval_splits(result.records)
    assert_no_eval_split(kept)
    _write_text(args.out, lambda f: write_manifest(kept, f, args.dataset))
    if args.errors:
        _write_text(
            args.errors,
            lambda f: [f.write(json.dumps({"line": e.line, "message": e.message}) + "\n") for e in result.errors],
        )
    for e in result.errors:
        logger.warning("%s:%d: %s", args.manifest, e.line, e.message)
    return {
        "records_in": len(result.records),
        "record_errors": len(result.errors),
        "excluded_eval": len(result.records) - len(kept),
        "records_out": len(kept),
    }


def cmd_features(args: argparse.Namespace) -> dict[str, Any]:
    entries = _training_entries(args.manifest)
    audio_root = Path(args.audio_root) if args.audio_root else Path(args.manifest).parent

    def raw_style(entry: Entry) -> tuple[speech_features.SpeechStyle, bool]:
        clip, meta = entry
        samples = sr = None
        ok = True
        if clip.audio_ref:
            try:
                samples, sr = speech_features.read_wav(audio_root / clip.audio_ref)
            except (OSError, EOFError, wave.Error, speech_features.FeatureError) as exc:
                logger.warning("%s: cannot read audio: %s", clip.clip_id, exc)
                ok = False
        return speech_features.build_style(samples, sr, meta.word_timestamps), ok

    raws = ordered_map(raw_style, entries, args.jobs)
    failures = sum(not ok for _, ok in raws)

    if args.references_in:
        with open(args.references_in, encoding="utf-8") as f:
            table = speech_features.read_references(f)
    else:
        values: dict[tuple[str, str], list[float]] = defaultdict(list)
        for (clip, meta), (st, _) in zip(entries, raws):
            ds = clip.source_dataset.value
            for feat, v in (("pitch", st.pitch_hz), ("energy", st.energy_rms), ("speed", st.speed_wps), ("age", meta.speaker_age_years)):
                if v is not None:
                    values[(ds, feat)].append(v)
        table = {key: speech_features.Quintiles.from_values(v) for key, v in values.items()}
    if args.references_out:
        _write_text(args.references_out, lambda f: speech_features.write_references(table, f))

    out_entries = []
    for (clip, meta), (st, _) in zip(entries, raws):
        ds = clip.source_dataset.value

        def _bin(feat: str, v: float | None):
            q = table.get((ds, feat))
            return q.bin(v) if q is not None and v is not None else None

        st = dataclasses.replace(
            st,
            pitch_bin=_bin("pitch", st.pitch_hz),
            energy_bin=_bin("energy", st.energy_rms),
            speed_bin=_bin("speed", st.speed_wps),
            age_bin=_bin("age", meta.speaker_age_years),
        )
        out_entries.append((clip, dataclasses.replace(meta, style=st)))
    _write_text(args.out, lambda f: write_manifest(out_entries, f))
    return {"records": len(entries), "audio_failures": failures, "reference_tables": len(table)}


def _tasks_arg(value: str | None) -> list[Task]:
    if not value:
        return sorted(CLOSED_TASKS, key=lambda t: list(Task).index(t))
    return [Task(v.strip()) for v in value.split(",") if v.strip()]


def cmd_gen_closed(args: argparse.Namespace) -> dict[str, Any]:
    entries = _training_entries(args.manifest)
    pools = aqa_closed.load_pools(args.pools)
    asr_cap = None if args.asr_cap in (None, "", "none") else int(args.asr_cap)
    tuples = aqa_closed.gen_closed_corpus([m for _, m in entries], _tasks_arg(args.tasks), pools, args.seed, asr_cap)
    _write_text(args.out, lambda f: write_aqa(tuples, f))
    counts: dict[str, Any] = {"clips": len(entries), "tuples": len(tuples)}
    for t in tuples:
        counts[f"tuples.{t.task.value}"] = counts.get(f"tuples.{t.task.value}", 0) + 1
    return counts


def cmd_gen_open(args: argparse.Namespace) -> dict[str, Any]:
    entries = _training_entries(args.manifest)
    client = _llm_client(args)
    flavor = None if args.flavor == "auto" else args.flavor
    result = aqa_open.gen_open_corpus(
        [m for _, m in entries], client, flavor, args.model, jobs=args.jobs, max_retries=int(args.max_retries)
    )
    _write_text(args.out, lambda f: write_aqa(result.tuples, f))
    if args.rejects:
        _write_text(args.rejects, lambda f: aqa_open.write_rejects(result.rejects, f))
    for clip_id, reason in result.failed:
        logger.error("%s: generation failed: %s", clip_id, reason)
    return {
        "clips": len(entries),
        "tuples": len(result.tuples),
        "rejects": len(result.rejects),
        "skipped": len(result.skipped),
        "failed": len(result.failed),
    }


def cmd_sample(args: argparse.Namespace) -> dict[str, Any]:
    entries = _training_entries(args.manifest)
    pool = sampling.filter_speech(entries) if args.filter_speech else entries
    out = pool
    if args.k is not None:
        out = sampling.balanced_sample(pool, int(args.k), args.seed)
    _write_text(args.out, lambda f: write_manifest(out, f))
    return {"records_in": len(entries), "after_filter": len(pool), "records_out": len(out)}


def cmd_plan(args: argparse.Namespace) -> dict[str, Any]:
    plan = curriculum.build_plan()
    if args.unlimited:
        plan = [curriculum.unlimited(s) for s in plan]
    _write_text(args.out, lambda f: curriculum.write_plan(plan, f))
    counts: dict[str, Any] = {"stages": len(plan)}
    if args.aqa:
        from .records import read_aqa

        with open(args.aqa, encoding="utf-8") as f:
            tuples = list(read_aqa(f))
        stage_dir = Path(args.stage_dir or Path(args.out).parent)
        stage_dir.mkdir(parents=True, exist_ok=True)
        for stage in plan:
            kept = curriculum.stage_filter(tuples, stage, args.seed)
            _write_text(str(stage_dir / f"stage{stage.index}.jsonl"), lambda f: write_aqa(kept, f))
            counts[f"stage{stage.index}.tuples"] = len(kept)
    return counts


def _tltr_config(name: str) -> tuple[tltr.TltrConfig, tltr.LoraConfig, int]:
    if name == "paper":
        return tltr.TltrConfig(), tltr.LoraConfig(), 1000
    if name == "toy":
        return (
            tltr.TltrConfig(n_layers_in=4, d_model=16, pooling_factor=4, pooled_len_cap=25, d_llm=32, n_heads=4),
            tltr.LoraConfig(rank=2, alpha=4, n_attention_layers=2, d_attn=32),
            8,
        )
    raise UsageError(f"unknown --config {name!r} (expected paper or toy)")


def cmd_tltr_check(args: argparse.Namespace) -> dict[str, Any]:
    cfg, lora_cfg, n_frames = _tltr_config(args.config)
    if args.stack:
        stack = tltr.load_stack(args.stack)
    else:
        stack = tltr.synthetic_stack(cfg.n_layers_in, n_frames, cfg.d_model, seed=args.seed)
    params = tltr.init_tltr_params(cfg, seed=args.seed)
    out = tltr.tltr_forward(stack, cfg, params)
    rng = np.random.default_rng(args.seed)
    w = rng.normal(0, 1 / np.sqrt(cfg.d_model), (cfg.d_model, cfg.d_llm))
    tokens = tltr.project(out, w, np.zeros(cfg.d_llm))
    counts = tltr.count_trainable_params(cfg, lora_cfg)
    print(f"input shape [{', '.join(map(str, stack.data.shape))}]")
    print(f"tltr output shape [{out.shape[0]}, {out.shape[1]}]")
    print(f"projected shape [{tokens.shape[0]}, {tokens.shape[1]}]")
    for name, n in counts.as_dict().items():
        print(f"params.{name} {n:,} ({tltr.millions(n)}M)")
    return {
        "tltr_out_shape": f"{out.shape[0]}x{out.shape[1]}",
        "projected_shape": f"{tokens.shape[0]}x{tokens.shape[1]}",
        **{f"params.{k}": v for k, v in counts.as_dict().items()},
    }


def cmd_eval(args: argparse.Namespace) -> dict[str, Any]:
    with open(args.predictions, encoding="utf-8") as f:
        preds = evaluation.read_predictions(f)
    embedder = evaluation.HttpEmbedder() if args.embedder == "http" else evaluation.TrigramEmbedder()
    report = evaluation.evaluate_predictions(preds, embedder)
    _write_text(args.out, lambda f: evaluation.write_results(report.results, f))
    counts: dict[str, Any] = {"predictions": len(preds), "results": len(report.results)}
    for r in report.results:
        counts[f"{r.task}.{r.metric_name}"] = round(r.value, 6)
    for task, n in report.unparseable.items():
        counts[f"{task}.unparseable"] = n
    return counts


def cmd_judge(args: argparse.Namespace) -> dict[str, Any]:
    pairs = []
    with open(args.pairs, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                pairs.append((d["question"], d["response"]))
    log = evaluation.JudgeLog()
    rate = evaluation.follow_rate(pairs, _llm_client(args), jobs=args.jobs, log=log, model_name=args.model)
    result = evaluation.EvalResult(args.task, "follow_rate", rate, len(pairs))
    _write_text(args.out, lambda f: evaluation.write_results([result], f))
    if args.transcript:
        _write_text(args.transcript, log.write)
    return {"pairs": len(pairs), "follow_rate": rate, "unparseable": sum(not e["parsed"] for e in log.entries)}


COMMANDS: dict[str, Callable[[argparse.Namespace], dict[str, Any]]] = {
    "ingest": cmd_ingest,
    "features": cmd_features,
    "gen-closed": cmd_gen_closed,
    "gen-open": cmd_gen_open,
    "sample": cmd_sample,
    "plan": cmd_plan,
    "tltr-check": cmd_tltr_check,
    "eval": cmd_eval,
    "judge": cmd_judge,
}


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--mock-llm", metavar="DIR", help="answer LLM requests from canned files in DIR")
    common.add_argument("--jobs", type=int, default=1, help="worker count for record-parallel stages")
    common.add_argument("--config-file", metavar="PATH", help="key=value file overriding flag defaults")
    common.add_argument("--summary", metavar="PATH", default="run_summary.txt")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="asqa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    subs: dict[str, argparse.ArgumentParser] = {}

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_)
        subs[name] = p
        return p

    p = add("ingest", "normalize a dataset manifest and drop test/eval splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--dataset", default="custom", choices=[d.value for d in Dataset])
    p.add_argument("--out", required=True)
    p.add_argument("--errors", help="write record-level errors here")

    p = add("features", "extract speech-style features and 5-level bins")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--audio-root", help="directory audio_ref paths are relative to (default: manifest dir)")
    p.add_argument("--references-in", help="use cached quintile boundaries")
    p.add_argument("--references-out", help="write the quintile boundaries used")

    p = add("gen-closed", "generate closed-ended AQA tuples")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pools", help="question-pool file (default: bundled pools)")
    p.add_argument("--out", required=True)
    p.add_argument("--tasks", help="comma-separated closed tasks (default: all)")
    p.add_argument("--asr-cap", default=None)

    p = add("gen-open", "generate open-ended AQA tuples with a chat LLM")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rejects", help="reject log path")
    p.add_argument("--flavor", default="auto", choices=["auto", *(f.value for f in aqa_open.Flavor)])
    p.add_argument("--model", default="gpt-3.5-turbo")
    p.add_argument("--max-retries", default=3)

    p = add("sample", "speech filter plus class-balanced sampling")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--filter-speech", action=argparse.BooleanOptionalAction, default=True)

    p = add("plan", "write the curriculum plan and per-stage manifests")
    p.add_argument("--out", required=True)
    p.add_argument("--aqa", help="AQA file to split into per-stage manifests")
    p.add_argument("--stage-dir")
    p.add_argument("--unlimited", action="store_true", help="ignore stage sample budgets")

    p = add("tltr-check", "run the perception-stack shape and parameter check")
    p.add_argument("--config", default="paper")
    p.add_argument("--stack", help="activation stack file (default: synthetic)")

    p = add("eval", "score closed-ended predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embedder", default="trigram", choices=["trigram", "http"])

    p = add("judge", "instruction-following rate with an LLM judge")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--transcript")
    p.add_argument("--model", default="gpt-4")
    p.add_argument("--task", default="open")
    return parser, subs


def _config_hash(args: argparse.Namespace) -> str:
    items = {k: v for k, v in vars(args).items() if k not in ("summary", "verbose")}
    blob = json.dumps(items, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def write_summary(path: str, summary: dict[str, Any]) -> None:
    lines = [f"{k}={v}" for k, v in summary.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _preparse_config(argv: Sequence[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config-file" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config-file="):
            return a.split("=", 1)[1]
    return None


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        cfg_path = _preparse_config(argv)
        if cfg_path and argv and argv[0] in subs:
            overrides = read_config_file(cfg_path)
            known = {a.dest for a in subs[argv[0]]._actions}
            unknown = sorted(set(overrides) - known)
            if unknown:
                raise UsageError(f"unknown config keys: {', '.join(unknown)}")
            subs[argv[0]].set_defaults(**overrides)
        args = parser.parse_args(argv)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
    except SystemExit as exc:
        return 2 if exc.code else 0
    except (UsageError, OSError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    summary: dict[str, Any] = {"command": args.command, "seed": args.seed, "config_hash": _config_hash(args)}
    try:
        counts = COMMANDS[args.command](args)
        summary.update(counts)
        summary["status"] = "ok"
        code = 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        summary["status"] = "usage_error"
        code = 2
    except (OSError, ValueError, LlmError, ManifestError, EvalSplitLeak, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        summary["status"] = "error"
        summary["error"] = str(exc).replace("\n", " ")
        code = 1
    try:
        write_summary(args.summary, summary)
    except OSError as exc:
        print(f"error: cannot write run summary: {exc}", file=sys.stderr)
        code = code or 1
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
