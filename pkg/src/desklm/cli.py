"""``desklm`` command line: one subcommand per pipeline stage.

Exit status: 0 success, 1 validation error, 2 I/O or remote failure,
64 usage error. Settings come from ``--config`` (TOML or JSON; top-level keys
and a table named after the subcommand) and are overridden by flags.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import corpus as corpus_mod
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    CorpusError,
    DeskLMError,
    PriceSourceError,
    RemoteError,
    TrainingDivergedError,
    UnsupportedCapabilityError,
    ValidationError,
)

log = logging.getLogger("desklm")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_USAGE = 0, 1, 2, 64

# built-in defaults, applied after config-file values
DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "threads": 1,
    "chunk_len": 512,
    "context": 512,
    "model_dim": 64,
    "layers": 2,
    "heads": 4,
    "rank": 4,
    "alpha": 8.0,
    "dropout": 0.05,
    "targets": "query,value",
    "epochs": 1,
    "batch_size": 1,
    "lr": 2e-4,
    "weight_decay": 0.01,
    "clip_norm": 1.0,
    "checkpoint_every": 0,
    "pooling": "mean",
    "max_new_tokens": 64,
    "strategy": "greedy",
    "temperature": 1.0,
    "top_k": 40,
    "normalization": "none",
    "token_env": "CHAT_API_TOKEN",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")

    def exit(self, status=0, message=None):
        if message:
            sys.stderr.write(message)
        raise SystemExit(status)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--seed", type=int, help="seed for every random choice (default 0)")
    p.add_argument("--threads", type=int, help="cap on worker threads (default 1)")
    p.add_argument("--no-timestamps", action="store_true", default=None, dest="no_timestamps",
                   help="omit wall-clock fields from reports and logs")
    p.add_argument("-v", "--verbose", action="store_true", default=None)
    return p


def _model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--base", help="base checkpoint (.ftlm); a fresh model is initialised when absent")
    g.add_argument("--context", type=int, help="context length (default 512)")
    g.add_argument("--model-dim", type=int)
    g.add_argument("--layers", type=int)
    g.add_argument("--heads", type=int)


def _lora_flags(p):
    g = p.add_argument_group("lora")
    g.add_argument("--rank", type=int)
    g.add_argument("--alpha", type=float)
    g.add_argument("--dropout", type=float)
    g.add_argument("--targets", help="comma list of query,value")


def _train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--clip-norm", type=float)
    g.add_argument("--checkpoint-every", type=int)
    g.add_argument("--stop-loss", type=float, help="stop once an epoch's mean loss falls below this")


def _gen_flags(p):
    g = p.add_argument_group("generation")
    g.add_argument("--max-new-tokens", type=int)
    g.add_argument("--strategy", choices=["greedy", "temperature", "top-k"])
    g.add_argument("--temperature", type=float)
    g.add_argument("--top-k", type=int)


def _backend_flags(p):
    g = p.add_argument_group("backend")
    g.add_argument("--checkpoint", help="local model checkpoint (.ftlm)")
    g.add_argument("--adapters", help="adapter file (.ftla)")
    g.add_argument("--remote-url", help="chat-completion endpoint URL")
    g.add_argument("--remote-model", help="model name sent to the remote endpoint")
    g.add_argument("--token-env", help="environment variable holding the bearer token")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="desklm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("build-corpus", parents=[common], help="load articles and cut token chunks")
    p.add_argument("--corpus-dir")
    p.add_argument("--manifest", help="CSV path,date supplying article dates")
    p.add_argument("--chunk-len", type=int)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--cutoff-date")
    p.add_argument("--out-dir")

    p = sub.add_parser("train-lm", parents=[common], help="next-token fine-tuning")
    p.add_argument("--chunks", help=".npy chunk file from build-corpus")
    p.add_argument("--corpus-dir", help="build chunks on the fly from this directory")
    p.add_argument("--chunk-len", type=int)
    p.add_argument("--full", action="store_true", default=None, help="train every base weight, no adapters")
    p.add_argument("--out-dir")
    _model_flags(p)
    _lora_flags(p)
    _train_flags(p)

    p = sub.add_parser("build-labels", parents=[common], help="join headlines to next-day return buckets")
    p.add_argument("--headlines")
    p.add_argument("--prices", help="CSV ticker,date,adj_close")
    p.add_argument("--price-url", help="HTTP price backend base URL")
    p.add_argument("--out")
    p.add_argument("--skip-report")

    p = sub.add_parser("train-cls", parents=[common], help="headline return-code regression")
    p.add_argument("--labels", help="labeled CSV from build-labels")
    p.add_argument("--pooling", choices=["mean", "last"])
    p.add_argument("--out-dir")
    _model_flags(p)
    _lora_flags(p)
    _train_flags(p)

    p = sub.add_parser("generate", parents=[common], help="continue a prompt")
    p.add_argument("--checkpoint")
    p.add_argument("--adapters")
    p.add_argument("--prompt")
    _gen_flags(p)

    p = sub.add_parser("eval-ppl", parents=[common], help="held-out perplexity")
    p.add_argument("--chunks")
    p.add_argument("--corpus-dir")
    p.add_argument("--chunk-len", type=int)
    p.add_argument("--report")
    _backend_flags(p)

    p = sub.add_parser("eval-rouge", parents=[common], help="summarization ROUGE-1/2/L")
    p.add_argument("--items")
    p.add_argument("--report")
    _backend_flags(p)
    _gen_flags(p)

    p = sub.add_parser("eval-mc", parents=[common], help="multiple-choice accuracy")
    p.add_argument("--items")
    p.add_argument("--normalization", choices=["none", "per-token"])
    p.add_argument("--report")
    _backend_flags(p)

    p = sub.add_parser("eval-human", parents=[common], help="sum human preference votes")
    p.add_argument("--votes")
    p.add_argument("--models", help="comma list of model ids")
    p.add_argument("--questions", help="comma list of question ids (optional)")
    p.add_argument("--report")

    p = sub.add_parser("build-instructions", parents=[common], help="Q&A items to chat JSONL")
    p.add_argument("--input")
    p.add_argument("--out")
    p.add_argument("--system-prompt")
    p.add_argument("--lenient", action="store_true", default=None, help="write valid items, list the rest")

    p = sub.add_parser("validate-instructions", parents=[common], help="check a chat JSONL file")
    p.add_argument("path", nargs="?")

    p = sub.add_parser("compare", parents=[common], help="side-by-side metrics for several backends")
    p.add_argument("--report")
    return parser


# -- configuration ----------------------------------------------------------------


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    data = path.read_bytes()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        return tomllib.loads(data.decode("utf-8"))
    return json.loads(data)


def resolve(args: argparse.Namespace) -> dict:
    """Flags over config-file values over built-in defaults."""
    file_cfg = load_config_file(args.config) if args.config else {}
    section = file_cfg.get(args.command, {}) if isinstance(file_cfg.get(args.command), dict) else {}
    resolved: dict[str, Any] = {}
    given = vars(args)
    # settings a subcommand has no flag for still come from the file or defaults
    for key in list(given) + [k for k in DEFAULTS if k not in given]:
        value = given.get(key)
        if value is None:
            alt = key.replace("_", "-")
            for src in (section, file_cfg):
                if key in src or alt in src:
                    value = src.get(key, src.get(alt))
                    break
        if value is None:
            value = DEFAULTS.get(key)
        resolved[key] = value
    resolved["no_timestamps"] = bool(resolved.get("no_timestamps"))
    resolved["_file"] = file_cfg
    return resolved


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _public(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- helpers shared by subcommands -------------------------------------------------


def _model(cfg: dict):
    from .model import TransformerConfig, init_model, load_checkpoint

    if cfg.get("base"):
        return load_checkpoint(cfg["base"]), False
    mc = TransformerConfig(
        context_length=cfg["context"], model_dim=cfg["model_dim"], num_layers=cfg["layers"],
        num_heads=cfg["heads"], seed=cfg["seed"],
    )
    return init_model(mc), True


def _train_config(cfg: dict):
    from .training import TrainConfig

    return TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], weight_decay=cfg["weight_decay"],
        clip_norm=cfg["clip_norm"], seed=cfg["seed"], checkpoint_every=cfg["checkpoint_every"],
        stop_loss=cfg.get("stop_loss"),
    )


def _chunks(cfg: dict):
    if cfg.get("chunks"):
        return corpus_mod.load_chunks(cfg["chunks"])
    if cfg.get("corpus_dir"):
        arts = corpus_mod.load_corpus(cfg["corpus_dir"])
        return corpus_mod.build_chunks(arts, chunk_len=cfg["chunk_len"])
    raise UsageError("give --chunks or --corpus-dir")


def _backend(cfg: dict):
    from .evalharness import LocalBackend, RemoteChatBackend

    if cfg.get("checkpoint"):
        return LocalBackend.from_files(cfg["checkpoint"], cfg.get("adapters"))
    if cfg.get("remote_url"):
        _require(cfg, "remote_model")
        return RemoteChatBackend(cfg["remote_url"], cfg["remote_model"], token_env=cfg["token_env"])
    raise UsageError("give --checkpoint or --remote-url")


def _gen_params(cfg: dict):
    from .model import GenerationParams

    return GenerationParams(
        max_new_tokens=cfg["max_new_tokens"], strategy=cfg["strategy"], temperature=cfg["temperature"],
        k=cfg["top_k"], seed=cfg["seed"],
    )


def _finish_reports(reports, cfg: dict) -> None:
    from .evalharness import format_table, write_reports

    for r in reports:
        r.config = _public(cfg)
    print(format_table(reports))
    if cfg.get("report"):
        write_reports(reports, cfg["report"], _public(cfg))


# -- subcommands -------------------------------------------------------------------


def cmd_build_corpus(cfg: dict) -> int:
    _require(cfg, "corpus_dir", "out_dir")
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    arts = corpus_mod.load_corpus(cfg["corpus_dir"], cfg.get("manifest"))
    summary: dict[str, Any] = {"articles": len(arts), "chunk_len": cfg["chunk_len"]}
    if cfg.get("test_fraction") is not None or cfg.get("cutoff_date"):
        train, test = corpus_mod.split_corpus(arts, cfg.get("test_fraction"), cfg.get("cutoff_date"))
    else:
        train, test = arts, []
    train_chunks = corpus_mod.build_chunks(train, chunk_len=cfg["chunk_len"])
    corpus_mod.save_chunks(train_chunks, out / "train_chunks.npy")
    summary["train"] = {"articles": [a.source_id for a in train], "chunks": len(train_chunks)}
    if test:
        test_chunks = corpus_mod.build_chunks(test, chunk_len=cfg["chunk_len"])
        corpus_mod.save_chunks(test_chunks, out / "test_chunks.npy")
        summary["test"] = {"articles": [a.source_id for a in test], "chunks": len(test_chunks)}
    (out / "corpus_manifest.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit(summary)
    return EXIT_OK


def _write_run(out: Path, history, cfg: dict, extra: dict) -> None:
    import time

    history.write_csv(out / "history.csv", timings=not cfg["no_timestamps"])
    record = {"config": _public(cfg), "losses": history.losses, **extra}
    if not cfg["no_timestamps"]:
        record["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        record["seconds"] = history.seconds
    from .training import append_run_log

    append_run_log(out / "run.jsonl", record)


def cmd_train_lm(cfg: dict) -> int:
    from .lora import attach_adapters, save_adapters
    from .model import save_checkpoint
    from .training import train_lm

    _require(cfg, "out_dir")
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    weights, fresh = _model(cfg)
    chunks = _chunks(cfg)
    if fresh and not cfg.get("full"):
        save_checkpoint(weights, out / "base.ftlm")
    adapters = None
    if not cfg.get("full"):
        adapters = attach_adapters(
            weights, cfg["rank"], cfg["alpha"], cfg["targets"].split(","), cfg["seed"], cfg["dropout"]
        )
    history = train_lm(weights, adapters, chunks, _train_config(cfg), checkpoint_dir=out / "checkpoints")
    if adapters:
        target = out / "adapters.ftla"
        save_adapters(adapters, target)
    else:
        target = out / "model.ftlm"
        save_checkpoint(weights, target)
    extra = {"output": target.name, "sha256": _sha256(target)}
    _write_run(out, history, cfg, extra)
    _emit({"losses": history.losses, **extra})
    return EXIT_OK


def cmd_build_labels(cfg: dict) -> int:
    from .labels import build_labeled_dataset, read_headlines_csv, write_labeled_csv
    from .prices import CsvPriceSource, HttpPriceSource

    _require(cfg, "headlines", "out")
    if cfg.get("prices"):
        source = CsvPriceSource(cfg["prices"])
    elif cfg.get("price_url"):
        source = HttpPriceSource(cfg["price_url"])
    else:
        raise UsageError("give --prices or --price-url")
    headlines = read_headlines_csv(cfg["headlines"])
    labeled, report = build_labeled_dataset(headlines, source, workers=cfg["threads"])
    write_labeled_csv(labeled, cfg["out"])
    if cfg.get("skip_report"):
        Path(cfg["skip_report"]).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _emit({"labeled": len(labeled), "skipped": dict(report.counts)})
    return EXIT_OK


def cmd_train_cls(cfg: dict) -> int:
    from .labels import read_labeled_csv
    from .lora import attach_adapters, save_adapters
    from .model import save_checkpoint
    from .training import RegressionHead, classification_metrics, save_head, train_classifier

    _require(cfg, "labels", "out_dir")
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    dataset = read_labeled_csv(cfg["labels"])
    weights, fresh = _model(cfg)
    if fresh:
        save_checkpoint(weights, out / "base.ftlm")
    adapters = attach_adapters(
        weights, cfg["rank"], cfg["alpha"], cfg["targets"].split(","), cfg["seed"], cfg["dropout"]
    )
    head = RegressionHead.create(weights.config.model_dim, cfg["seed"], cfg["pooling"])
    history = train_classifier(weights, adapters, head, dataset, _train_config(cfg))
    save_adapters(adapters, out / "adapters.ftla")
    save_head(head, out / "head.ftlh")
    metrics = classification_metrics(weights, adapters, head, dataset)
    metrics["mse"] = history.final_eval_loss
    _write_run(out, history, cfg, {"metrics": metrics})
    _emit({"losses": history.losses, "metrics": metrics})
    return EXIT_OK


def cmd_generate(cfg: dict) -> int:
    from .lora import load_adapters
    from .model import generate, load_checkpoint

    _require(cfg, "checkpoint")
    weights = load_checkpoint(cfg["checkpoint"])
    adapters = load_adapters(cfg["adapters"]) if cfg.get("adapters") else None
    print(generate(weights, cfg.get("prompt") or "", _gen_params(cfg), adapters))
    return EXIT_OK


def cmd_eval_ppl(cfg: dict) -> int:
    from .evalharness import perplexity

    backend = _backend(cfg)
    chunks = _chunks(cfg)
    dataset = cfg.get("chunks") or cfg.get("corpus_dir")
    _finish_reports([perplexity(backend, chunks, str(dataset), not cfg["no_timestamps"])], cfg)
    return EXIT_OK


def cmd_eval_rouge(cfg: dict) -> int:
    from .evalharness import read_summarization_items, summarization_eval

    _require(cfg, "items")
    items = read_summarization_items(cfg["items"])
    backend = _backend(cfg) if any(it.candidate is None for it in items) else None
    rep = summarization_eval(backend, items, _gen_params(cfg), cfg["items"], cfg["threads"],
                             not cfg["no_timestamps"])
    _finish_reports([rep], cfg)
    return EXIT_OK if rep.status == "OK" else EXIT_IO


def cmd_eval_mc(cfg: dict) -> int:
    from .evalharness import mc_accuracy, read_mc_items

    _require(cfg, "items")
    rep = mc_accuracy(_backend(cfg), read_mc_items(cfg["items"]), cfg["normalization"], cfg["items"],
                      not cfg["no_timestamps"])
    _finish_reports([rep], cfg)
    return EXIT_OK


def cmd_eval_human(cfg: dict) -> int:
    from .evalharness.preferences import aggregate_preferences, format_scores, read_votes_csv

    _require(cfg, "votes", "models")
    models = [m.strip() for m in cfg["models"].split(",") if m.strip()]
    questions = [q.strip() for q in cfg["questions"].split(",")] if cfg.get("questions") else None
    result = aggregate_preferences(read_votes_csv(cfg["votes"]), models, questions)
    print(format_scores(result))
    if cfg.get("report"):
        Path(cfg["report"]).write_text(
            json.dumps({"config": _public(cfg), "result": result}, indent=2, sort_keys=True) + "\n"
        )
    return EXIT_OK


def cmd_build_instructions(cfg: dict) -> int:
    from .instructions import DEFAULT_SYSTEM_PROMPT, build_jsonl, read_instruction_items

    _require(cfg, "input", "out")
    items = read_instruction_items(cfg["input"])
    summary = build_jsonl(items, cfg["out"], cfg.get("system_prompt") or DEFAULT_SYSTEM_PROMPT,
                          strict=not cfg.get("lenient"))
    for w in summary.warnings:
        log.warning(w)
    _emit({"written": summary.written, "per_category": summary.per_category,
           "rejected": summary.rejected, "warnings": summary.warnings})
    return EXIT_VALIDATION if summary.rejected else EXIT_OK


def cmd_validate_instructions(cfg: dict) -> int:
    from .instructions import validate_jsonl

    _require(cfg, "path")
    report = validate_jsonl(cfg["path"])
    for line, msg in report.violations:
        print(f"line {line}: {msg}")
    print(f"{report.lines} lines, {len(report.violations)} violations")
    return report.exit_status


def cmd_compare(cfg: dict) -> int:
    from .evalharness import EvalSuite, LocalBackend, RemoteChatBackend, compare_backends
    from .evalharness import read_mc_items, read_summarization_items

    file_cfg = cfg["_file"]
    specs = file_cfg.get("backends") or []
    if len(specs) < 2:
        raise UsageError("compare needs a config file listing at least two backends")
    backends = []
    for spec in specs:
        kind = spec.get("kind", "local")
        if kind == "local":
            backends.append(LocalBackend.from_files(spec["checkpoint"], spec.get("adapters"), spec.get("name")))
        elif kind == "remote-chat":
            backends.append(RemoteChatBackend(spec["url"], spec["model"], spec.get("token_env", "CHAT_API_TOKEN"),
                                              timeout=spec.get("timeout", 30.0), name=spec.get("name")))
        else:
            raise ConfigError(f"unknown backend kind {kind!r}")
    data = file_cfg.get("datasets", {})
    suite = EvalSuite(
        perplexity_chunks=corpus_mod.load_chunks(data["chunks"]) if data.get("chunks") else None,
        summarization_items=read_summarization_items(data["summarization"]) if data.get("summarization") else None,
        mc_items=read_mc_items(data["mc"]) if data.get("mc") else None,
        generation=_gen_params(cfg),
        normalization=cfg["normalization"],
    )
    reports = compare_backends(backends, suite, not cfg["no_timestamps"])
    _finish_reports(reports, cfg)
    return EXIT_OK


COMMANDS = {
    "build-corpus": cmd_build_corpus,
    "train-lm": cmd_train_lm,
    "build-labels": cmd_build_labels,
    "train-cls": cmd_train_cls,
    "generate": cmd_generate,
    "eval-ppl": cmd_eval_ppl,
    "eval-rouge": cmd_eval_rouge,
    "eval-mc": cmd_eval_mc,
    "eval-human": cmd_eval_human,
    "build-instructions": cmd_build_instructions,
    "validate-instructions": cmd_validate_instructions,
    "compare": cmd_compare,
}


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve(args)
        for key in ("chunk_len", "threads"):
            if cfg.get(key) is not None and cfg[key] < 1:
                raise UsageError(f"--{key.replace('_', '-')} must be positive")
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        sys.stderr.write(f"desklm {args.command}: {exc}\n")
        return EXIT_USAGE
    except (ValidationError, ContractError, CorpusError, UnsupportedCapabilityError, TrainingDivergedError) as exc:
        sys.stderr.write(f"desklm {args.command}: {exc}\n")
        for problem in getattr(exc, "problems", []):
            sys.stderr.write(f"  {problem}\n")
        return EXIT_VALIDATION
    except (OSError, CheckpointError, RemoteError, PriceSourceError, json.JSONDecodeError) as exc:
        sys.stderr.write(f"desklm {args.command}: {exc}\n")
        return EXIT_IO
    except DeskLMError as exc:
        sys.stderr.write(f"desklm {args.command}: {exc}\n")
        return EXIT_VALIDATION


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
