"""Command line entry point for the forgetting laboratory.

Subcommands cover the whole pipeline: corpus generation, knowledge-base
construction, trace scrubbing, training, retraining, selective unlearning,
evaluation, the fraction x method x seed matrix, and report rendering.

Configuration is resolved in three layers with strictly increasing
precedence: built-in defaults, then a TOML/JSON config file (``--config``),
then command line overrides (``--seed`` and repeatable ``--set key=value``).
Every run writes a manifest next to its outputs recording the resolved
config hash, content hashes of the input files, and the artifact names;
a rerun whose manifest still matches is skipped.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import corpus as corpus_mod
from . import evaluation as eval_mod
from . import losses as losses_mod
from . import model as model_mod
from . import orchestrator as orch_mod
from . import scrubber as scrub_mod
from . import tokenizer as tok_mod

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

log = logging.getLogger("frul.cli")

EXTRACTOR_URL_ENV = "FRUL_EXTRACTOR_URL"

#: names of the artifacts each subcommand produces inside the output dir
ARTIFACTS = {
    "gen-data": ("corpus.jsonl", "facts.jsonl"),
    "build-kb": ("split.json", "kb.jsonl"),
    "scrub": ("scrubbed.jsonl",),
    "train": ("model.ckpt", "train_record.jsonl"),
    "retrain": ("retrained.ckpt", "retrain_record.jsonl"),
    "unlearn": ("unlearned.ckpt", "unlearn_record.jsonl"),
    "eval": ("report.json", "summary.csv", "per_example.csv"),
    "matrix": ("matrix.csv", "matrix_manifest.json"),
    "report": ("ue_chart.svg",),
}

UNLEARN_METHODS = tuple(m for m in orch_mod.METHODS if m not in ("finetune", "retrain"))


class CliError(Exception):
    """Invalid invocation, config, or input artifact. Exit code 1."""

    exit_code = 1


class CliRuntimeError(CliError):
    """Failure while executing an otherwise valid run. Exit code 2."""

    exit_code = 2


class _UsageError(CliError):
    pass


# ---------------------------------------------------------------------------
# Settings: three-layer resolution (defaults < config file < CLI overrides)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusSection:
    n_entities: int = 100
    questions_per_entity: int = 4
    seed: int = 0


@dataclass(frozen=True)
class SplitSection:
    fraction: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class ScrubSection:
    k: int = 5
    vote_threshold: float = 0.5
    max_in_flight: int = 4


@dataclass(frozen=True)
class MatrixSection:
    fractions: tuple = (0.01, 0.03, 0.05)
    methods: tuple = ("frul",)
    seeds: tuple = (0,)


@dataclass(frozen=True)
class Settings:
    """Resolved configuration for one CLI invocation."""

    corpus: CorpusSection = field(default_factory=CorpusSection)
    split: SplitSection = field(default_factory=SplitSection)
    scrub: ScrubSection = field(default_factory=ScrubSection)
    matrix: MatrixSection = field(default_factory=MatrixSection)
    run: orch_mod.RunConfig = field(default_factory=orch_mod.RunConfig)


def settings_hash(settings: Settings) -> str:
    payload = json.dumps(dataclasses.asdict(settings), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _coerce_string(current, text: str, key: str):
    """Parse a --set value string against the type of the current value."""
    if isinstance(current, bool):
        lowered = text.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise CliError(f"config key {key!r} expects a boolean, got {text!r}")
    if isinstance(current, int):
        try:
            return int(text)
        except ValueError:
            raise CliError(f"config key {key!r} expects an integer, got {text!r}") from None
    if isinstance(current, float):
        try:
            return float(text)
        except ValueError:
            raise CliError(f"config key {key!r} expects a number, got {text!r}") from None
    if isinstance(current, str):
        return text
    if isinstance(current, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip() != ""]
        if not current:
            raise CliError(f"config key {key!r} cannot be set from the command line")
        elem = current[0]
        return tuple(_coerce_string(elem, p, key) for p in parts)
    raise CliError(f"config key {key!r} holds a {type(current).__name__} and cannot "
                   "be set from the command line")


def _coerce_file_value(current, value, key: str):
    """Type-check a value parsed from a TOML/JSON config file."""
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise CliError(f"config key {key!r} expects a boolean, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise CliError(f"config key {key!r} expects an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise CliError(f"config key {key!r} expects a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise CliError(f"config key {key!r} expects a string, got {value!r}")
        return value
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise CliError(f"config key {key!r} expects a list, got {value!r}")
        if not current:
            return tuple(value)
        elem = current[0]
        return tuple(_coerce_file_value(elem, v, key) for v in value)
    if isinstance(current, dict):
        if not isinstance(value, dict):
            raise CliError(f"config key {key!r} expects a table, got {value!r}")
        return dict(value)
    raise CliError(f"config key {key!r} has unsupported type {type(current).__name__}")


def _rebuild(obj, updates: dict, context: str):
    try:
        return dataclasses.replace(obj, **updates)
    except (ValueError, TypeError, losses_mod.LossError,
            orch_mod.OrchestratorError) as e:
        raise CliError(f"invalid config value under {context!r}: {e}") from None


def _merge_mapping(obj, data: dict, prefix: str):
    """Recursively apply a parsed config-file mapping onto a settings node."""
    if not isinstance(data, dict):
        raise CliError(f"config section {prefix or '<root>'!r} must be a table")
    names = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, value in data.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if key not in names:
            raise CliError(f"unknown config key {dotted!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            updates[key] = _merge_mapping(current, value, dotted)
        else:
            updates[key] = _coerce_file_value(current, value, dotted)
    return _rebuild(obj, updates, prefix or "<root>") if updates else obj


def _set_dotted(settings: Settings, key: str, text: str) -> Settings:
    """Apply one ``--set section.field=value`` override."""
    parts = key.split(".")
    chain = [settings]
    for i, part in enumerate(parts[:-1]):
        node = chain[-1]
        if not dataclasses.is_dataclass(node) or part not in {f.name for f in dataclasses.fields(node)}:
            raise CliError(f"unknown config key {key!r}")
        nxt = getattr(node, part)
        if not dataclasses.is_dataclass(nxt):
            raise CliError(f"unknown config key {key!r} ({'.'.join(parts[:i + 1])} is a value, "
                           "not a section)")
        chain.append(nxt)
    leaf_owner = chain[-1]
    leaf = parts[-1]
    if not dataclasses.is_dataclass(leaf_owner) or leaf not in {f.name for f in dataclasses.fields(leaf_owner)}:
        raise CliError(f"unknown config key {key!r}")
    value = _coerce_string(getattr(leaf_owner, leaf), text, key)
    rebuilt = _rebuild(leaf_owner, {leaf: value}, key)
    for node, part in zip(reversed(chain[:-1]), reversed(parts[:-1])):
        rebuilt = _rebuild(node, {part: rebuilt}, key)
    return rebuilt


def _load_config_file(path: Path) -> dict:
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    data = path.read_bytes()
    suffix = path.suffix.lower()
    try:
        if suffix == ".json":
            return json.loads(data.decode("utf-8"))
        if suffix == ".toml":
            return tomllib.loads(data.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as e:
        raise CliError(f"could not parse config file {path}: {e}") from None
    raise CliError(f"config file must be .toml or .json, got {path.suffix!r}")


#: which settings keys a bare ``--seed N`` maps onto, per subcommand
_SEED_KEYS = {
    "gen-data": ("corpus.seed",),
    "build-kb": ("corpus.seed",),
    "train": ("run.model_seed", "run.run_seed"),
    "retrain": ("run.model_seed", "run.run_seed"),
    "unlearn": ("run.run_seed",),
    "matrix": ("matrix.seeds",),
}


def resolve_settings(args) -> Settings:
    settings = Settings()
    if args.config is not None:
        settings = _merge_mapping(settings, _load_config_file(args.config), "")
    if args.seed is not None:
        for key in _SEED_KEYS.get(args.subcommand, ()):
            settings = _set_dotted(settings, key, str(args.seed))
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise CliError(f"--set expects key=value, got {item!r}")
        settings = _set_dotted(settings, key.strip(), value)
    return settings


# ---------------------------------------------------------------------------
# Manifests, warm cache, and the output-directory lock
# ---------------------------------------------------------------------------


def _content_hash(path: Path) -> str:
    """Git-style blob hash of a file's bytes."""
    data = path.read_bytes()
    return hashlib.sha1(b"blob %d\x00" % len(data) + data).hexdigest()


def _manifest_path(out: Path, subcommand: str) -> Path:
    return out / f"manifest.{subcommand}.json"


def _manifest_doc(subcommand: str, settings: Settings, inputs: dict) -> dict:
    return {
        "version": 1,
        "subcommand": subcommand,
        "config_hash": settings_hash(settings),
        "inputs": {name: {"path": str(p), "content_hash": _content_hash(p)}
                   for name, p in sorted(inputs.items())},
        "artifacts": list(ARTIFACTS[subcommand]),
    }


def _is_current(out: Path, subcommand: str, settings: Settings, inputs: dict) -> bool:
    """True when the previous run's manifest still matches config and inputs."""
    path = _manifest_path(out, subcommand)
    if not path.exists():
        return False
    try:
        stored = json.loads(path.read_text(encoding="utf-8"))
    except ValueError:
        return False
    if stored != _manifest_doc(subcommand, settings, inputs):
        return False
    return all((out / name).exists() for name in ARTIFACTS[subcommand])


def _write_manifest(out: Path, subcommand: str, settings: Settings, inputs: dict) -> None:
    doc = _manifest_doc(subcommand, settings, inputs)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    _manifest_path(out, subcommand).write_text(text, encoding="utf-8")


class _OutputLock:
    """Rejects concurrent invocations targeting the same output directory."""

    def __init__(self, out: Path):
        self.path = out / ".frul.lock"
        self._fd = None

    def __enter__(self):
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliRuntimeError(
                f"output directory is locked by another run ({self.path}); "
                "remove the lock file if no other process is active") from None
        os.write(self._fd, f"pid {os.getpid()}\n".encode("ascii"))
        return self

    def __exit__(self, *exc):
        if self._fd is not None:
            os.close(self._fd)
            self.path.unlink(missing_ok=True)
        return False


# ---------------------------------------------------------------------------
# Input loading helpers
# ---------------------------------------------------------------------------

_LOAD_ERRORS = (corpus_mod.CorpusError, tok_mod.TokenizerError, model_mod.CheckpointError,
                scrub_mod.ScrubberError, eval_mod.EvalError, OSError, ValueError)


def _resolve_input(explicit, out: Path, default_name: str, what: str) -> Path:
    path = Path(explicit) if explicit is not None else out / default_name
    if not path.exists():
        raise CliError(f"missing {what}: {path}")
    return path


def _load(loader, path: Path, what: str):
    try:
        return loader(path)
    except _LOAD_ERRORS as e:
        raise CliError(f"could not load {what} from {path}: {e}") from None


def _load_corpus(args, out: Path) -> tuple:
    """Read corpus.jsonl (+ facts.jsonl when present) and return (corpus, path-map)."""
    corpus_path = _resolve_input(args.corpus, out, "corpus.jsonl", "corpus file")
    corpus = _load(corpus_mod.read_corpus, corpus_path, "corpus")
    inputs = {"corpus": corpus_path}
    facts_path = Path(args.facts) if getattr(args, "facts", None) else corpus_path.parent / "facts.jsonl"
    if facts_path.exists():
        facts = _load(corpus_mod.read_facts, facts_path, "facts")
        corpus = dataclasses.replace(corpus, facts=facts)
        inputs["facts"] = facts_path
    return corpus, inputs


def _load_split(args, out: Path, corpus, settings: Settings, inputs: dict):
    explicit = getattr(args, "split", None)
    default = out / "split.json"
    if explicit is not None or default.exists():
        path = _resolve_input(explicit, out, "split.json", "split file")
        split = _load(corpus_mod.read_split, path, "split")
        inputs["split"] = path
        return split
    log.info("no split file given; partitioning with fraction=%s seed=%s",
             settings.split.fraction, settings.split.seed)
    try:
        return corpus_mod.partition(corpus, settings.split.fraction, settings.split.seed)
    except corpus_mod.CorpusError as e:
        raise CliError(str(e)) from None


def _load_params(path: Path, settings: Settings, vocab, what: str):
    expected = settings.run.model_config(len(vocab))
    params, _ = _load(lambda p: model_mod.load_checkpoint(p, expected_config=expected),
                      path, what)
    return params


def _run(fn, *args, **kwargs):
    """Execute a pipeline stage, mapping failures to runtime exit code 2."""
    try:
        return fn(*args, **kwargs)
    except CliError:
        raise
    except Exception as e:
        raise CliRuntimeError(f"{type(e).__name__}: {e}") from e


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_gen_data(args, settings: Settings) -> int:
    out = args.out
    inputs: dict = {}
    if _is_current(out, "gen-data", settings, inputs):
        log.info("gen-data is up to date in %s; skipping", out)
        return 0
    spec = corpus_mod.CorpusSpec(**dataclasses.asdict(settings.corpus))
    corpus = _run(corpus_mod.generate_corpus, spec)
    _run(corpus_mod.write_corpus, corpus, out / "corpus.jsonl")
    _run(corpus_mod.write_facts, list(corpus.facts), out / "facts.jsonl")
    _write_manifest(out, "gen-data", settings, inputs)
    log.info("wrote %d examples and %d facts to %s",
             len(corpus.examples), len(corpus.facts), out)
    return 0


def _cmd_build_kb(args, settings: Settings) -> int:
    out = args.out
    corpus, inputs = _load_corpus(args, out)
    if _is_current(out, "build-kb", settings, inputs):
        log.info("build-kb is up to date in %s; skipping", out)
        return 0
    try:
        split = corpus_mod.partition(corpus, settings.split.fraction, settings.split.seed)
        kb = corpus_mod.forget_knowledge_base(corpus, split)
    except corpus_mod.CorpusError as e:
        raise CliError(str(e)) from None
    _run(corpus_mod.write_split, split, out / "split.json")
    _run(corpus_mod.write_facts, kb, out / "kb.jsonl")
    _write_manifest(out, "build-kb", settings, inputs)
    log.info("split: %d forget / %d retain; knowledge base: %d facts",
             len(split.forget_ids), len(split.retain_ids), len(kb))
    return 0


def _cmd_scrub(args, settings: Settings) -> int:
    out = args.out
    corpus, inputs = _load_corpus(args, out)
    split = _load_split(args, out, corpus, settings, inputs)
    if _is_current(out, "scrub", settings, inputs):
        log.info("scrub is up to date in %s; skipping", out)
        return 0
    extractors = scrub_mod.default_extractors()
    endpoint = os.environ.get(EXTRACTOR_URL_ENV)
    if endpoint:
        log.info("adding remote extractor at %s", endpoint)
        extractors = extractors + [scrub_mod.RemoteExtractor(endpoint)]
    config = scrub_mod.ScrubConfig(k=settings.scrub.k,
                                   vote_threshold=settings.scrub.vote_threshold,
                                   max_in_flight=settings.scrub.max_in_flight)
    failures: dict = {}
    scrubbed = _run(scrub_mod.scrub_corpus, corpus, split,
                    extractor_set=extractors, config=config, failures=failures)
    _run(scrub_mod.write_scrubbed, out / "scrubbed.jsonl", scrubbed)
    for ex_id, err in sorted(failures.items()):
        log.warning("scrub failed for %s: %s", ex_id, err)
    _write_manifest(out, "scrub", settings, inputs)
    log.info("scrubbed %d of %d forget traces", len(scrubbed), len(split.forget_ids))
    return 0


def _cmd_train(args, settings: Settings) -> int:
    out = args.out
    corpus, inputs = _load_corpus(args, out)
    if _is_current(out, "train", settings, inputs):
        log.info("train is up to date in %s; skipping", out)
        return 0
    vocab = _run(tok_mod.build_vocab, corpus)
    config = dataclasses.replace(settings.run, method="finetune")
    params, record = _run(orch_mod.finetune, config, list(corpus.examples), vocab)
    _run(model_mod.save_checkpoint, params, out / "model.ckpt")
    record.save(out / "train_record.jsonl")
    _write_manifest(out, "train", settings, inputs)
    log.info("trained %d epochs (%d steps); checkpoint %s",
             config.epochs, len(record.history), out / "model.ckpt")
    return 0


def _cmd_retrain(args, settings: Settings) -> int:
    out = args.out
    corpus, inputs = _load_corpus(args, out)
    split = _load_split(args, out, corpus, settings, inputs)
    if _is_current(out, "retrain", settings, inputs):
        log.info("retrain is up to date in %s; skipping", out)
        return 0
    vocab = _run(tok_mod.build_vocab, corpus)
    params, record = _run(orch_mod.retrain, settings.run, corpus, split, vocab)
    _run(model_mod.save_checkpoint, params, out / "retrained.ckpt")
    record.save(out / "retrain_record.jsonl")
    _write_manifest(out, "retrain", settings, inputs)
    log.info("retrained on %d retain examples; checkpoint %s",
             len(split.retain_ids), out / "retrained.ckpt")
    return 0


def _cmd_unlearn(args, settings: Settings) -> int:
    out = args.out
    method = settings.run.method
    if method not in UNLEARN_METHODS:
        raise CliError(f"run.method must be one of {UNLEARN_METHODS} for unlearn, "
                       f"got {method!r} (set it with --set run.method=frul)")
    corpus, inputs = _load_corpus(args, out)
    split = _load_split(args, out, corpus, settings, inputs)
    model_path = _resolve_input(args.model, out, "model.ckpt", "original checkpoint")
    inputs["model"] = model_path
    scrubbed = []
    if method == "frul":
        scrub_path = _resolve_input(args.scrubbed, out, "scrubbed.jsonl", "scrubbed traces")
        scrubbed = _load(scrub_mod.read_scrubbed, scrub_path, "scrubbed traces")
        inputs["scrubbed"] = scrub_path
    if _is_current(out, "unlearn", settings, inputs):
        log.info("unlearn is up to date in %s; skipping", out)
        return 0
    vocab = _run(tok_mod.build_vocab, corpus)
    original = _load_params(model_path, settings, vocab, "original checkpoint")
    params, record = _run(orch_mod.unlearn, settings.run, original, split,
                          scrubbed, corpus, vocab)
    _run(model_mod.save_checkpoint, params, out / "unlearned.ckpt")
    record.save(out / "unlearn_record.jsonl")
    _write_manifest(out, "unlearn", settings, inputs)
    log.info("unlearned with method=%s (%d steps, early_stop=%s); checkpoint %s",
             method, len(record.history), record.stopped_early, out / "unlearned.ckpt")
    return 0


def _cmd_eval(args, settings: Settings) -> int:
    out = args.out
    corpus, inputs = _load_corpus(args, out)
    split = _load_split(args, out, corpus, settings, inputs)
    model_path = _resolve_input(args.model, out, "unlearned.ckpt", "model checkpoint")
    ref_path = _resolve_input(args.reference, out, "retrained.ckpt", "reference checkpoint")
    inputs["model"] = model_path
    inputs["reference"] = ref_path
    if _is_current(out, "eval", settings, inputs):
        log.info("eval is up to date in %s; skipping", out)
        return 0
    vocab = _run(tok_mod.build_vocab, corpus)
    params = _load_params(model_path, settings, vocab, "model checkpoint")
    reference = _load_params(ref_path, settings, vocab, "reference checkpoint")
    config = eval_mod.EvalConfig(vocab=vocab, max_new=settings.run.eval_max_new,
                                 meta={"model_checkpoint": _content_hash(model_path),
                                       "reference_checkpoint": _content_hash(ref_path),
                                       "config_hash": settings_hash(settings)})
    report = _run(eval_mod.evaluate_pair, params, reference, corpus, split, config)
    _run(eval_mod.emit_report, report, out)
    _write_manifest(out, "eval", settings, inputs)
    for key in sorted(report.cells):
        log.info("%s: model=%.4f ref=%.4f ue=%.4f", key,
                 report.cells[key]["model_mean"], report.cells[key]["ref_mean"],
                 report.cells[key]["ue"])
    return 0


def _cmd_matrix(args, settings: Settings) -> int:
    out = args.out
    corpus, inputs = _load_corpus(args, out)
    if _is_current(out, "matrix", settings, inputs):
        log.info("matrix is up to date in %s; skipping", out)
        return 0
    vocab = _run(tok_mod.build_vocab, corpus)
    _run(orch_mod.run_matrix, settings.run, corpus, vocab, out,
         fractions=settings.matrix.fractions, methods=settings.matrix.methods,
         seeds=settings.matrix.seeds)
    manifest = json.loads((out / "matrix_manifest.json").read_text(encoding="utf-8"))
    failed = sorted(cell for cell, entry in manifest.items()
                    if entry.get("status") != "done")
    if failed:
        raise CliRuntimeError(
            f"matrix finished with {len(failed)} failed cell(s): {', '.join(failed)}; "
            "rerun to resume")
    _write_manifest(out, "matrix", settings, inputs)
    log.info("matrix complete: %s", out / "matrix.csv")
    return 0


def _cmd_report(args, settings: Settings) -> int:
    report_dir = Path(args.report_dir) if args.report_dir is not None else args.out
    report_path = report_dir / "report.json"
    if not report_path.exists():
        raise CliError(f"missing report: {report_path}")
    report = _load(eval_mod.read_report, report_path, "report")
    inputs = {"report": report_path}
    out = args.out
    table = render_table(report.cells)
    svg = ue_chart_svg(report.cells)
    if not _is_current(out, "report", settings, inputs):
        (out / "ue_chart.svg").write_text(svg, encoding="utf-8")
        _write_manifest(out, "report", settings, inputs)
    print(table)
    return 0


# ---------------------------------------------------------------------------
# Rendering: console table and SVG bar chart
# ---------------------------------------------------------------------------

_CELL_ORDER = tuple(f"{s}/{c}" for s in eval_mod.SPLITS for c in eval_mod.CHANNELS)


def render_table(cells: dict) -> str:
    """Fixed-width table of the four split x channel cells, 4 decimals."""
    header = f"{'split':<8}{'channel':<11}{'model_mean':>12}{'ref_mean':>10}{'ue':>10}"
    lines = [header, "-" * len(header)]
    for key in _CELL_ORDER:
        split, channel = key.split("/")
        cell = cells[key]
        lines.append(f"{split:<8}{channel:<11}{cell['model_mean']:>12.4f}"
                     f"{cell['ref_mean']:>10.4f}{cell['ue']:>10.4f}")
    return "\n".join(lines)


def ue_chart_svg(cells: dict) -> str:
    """Deterministic SVG bar chart; bar heights are proportional to UE."""
    bar_w, gap, left, top, plot_h = 60, 24, 42, 18, 160
    base_y = top + plot_h
    width = left + len(_CELL_ORDER) * (bar_w + gap) + gap
    height = base_y + 46
    ues = [cells[key]["ue"] for key in _CELL_ORDER]
    peak = max(ues)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<style>text{font-family:monospace;font-size:10px}</style>',
        f'<line x1="{left}" y1="{base_y}" x2="{width - gap}" y2="{base_y}" '
        'stroke="#333" stroke-width="1"/>',
    ]
    for i, (key, ue) in enumerate(zip(_CELL_ORDER, ues)):
        h = 0.0 if peak == 0 else plot_h * ue / peak
        x = left + gap + i * (bar_w + gap)
        y = base_y - h
        split, channel = key.split("/")
        cx = x + bar_w / 2
        parts.append(f'<rect class="bar" data-cell="{key}" data-ue="{ue:.9f}" '
                     f'x="{x}" y="{y:.6f}" width="{bar_w}" height="{h:.6f}" fill="#5b84b1"/>')
        parts.append(f'<text x="{cx}" y="{y - 4:.6f}" text-anchor="middle">{ue:.4f}</text>')
        parts.append(f'<text x="{cx}" y="{base_y + 14}" text-anchor="middle">{split}</text>')
        parts.append(f'<text x="{cx}" y="{base_y + 27}" text-anchor="middle">{channel}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{message}\n{self.format_usage()}".rstrip())


_DISPATCH = {
    "gen-data": _cmd_gen_data,
    "build-kb": _cmd_build_kb,
    "scrub": _cmd_scrub,
    "train": _cmd_train,
    "retrain": _cmd_retrain,
    "unlearn": _cmd_unlearn,
    "eval": _cmd_eval,
    "matrix": _cmd_matrix,
    "report": _cmd_report,
}

_INPUT_FLAGS = {
    "build-kb": ("--corpus", "--facts"),
    "scrub": ("--corpus", "--facts", "--split"),
    "train": ("--corpus",),
    "retrain": ("--corpus", "--split"),
    "unlearn": ("--corpus", "--facts", "--split", "--model", "--scrubbed"),
    "eval": ("--corpus", "--split", "--model", "--reference"),
    "matrix": ("--corpus", "--facts"),
}

_HELP = {
    "gen-data": "generate the synthetic corpus and fact list",
    "build-kb": "partition the corpus and build the forget knowledge base",
    "scrub": "replace forget-fact segments in forget traces",
    "train": "fine-tune the base model on the full corpus",
    "retrain": "train the retain-only reference model",
    "unlearn": "run an unlearning method against a trained checkpoint",
    "eval": "compare a model against a reference checkpoint",
    "matrix": "run the fraction x method x seed grid",
    "report": "render an evaluation report as a table and SVG chart",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, metavar="PATH",
                        help="TOML or JSON config file")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--seed", type=int, metavar="N",
                        help="shorthand for the subcommand's seed keys")
    common.add_argument("--out", type=Path, default=Path("frul_out"), metavar="DIR",
                        help="output directory (default: frul_out)")
    volume = common.add_mutually_exclusive_group()
    volume.add_argument("--quiet", action="store_true", help="warnings only")
    volume.add_argument("--verbose", action="store_true", help="debug logging")

    parser = _Parser(prog="frul",
                     description="Desk-scale selective forgetting laboratory.")
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND", required=True)
    for name in _DISPATCH:
        sp = sub.add_parser(name, parents=[common], help=_HELP[name])
        for flag in _INPUT_FLAGS.get(name, ()):
            sp.add_argument(flag, type=Path, metavar="PATH")
        if name == "report":
            sp.add_argument("--report-dir", type=Path, metavar="DIR",
                            help="directory holding report.json (default: --out)")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        level = logging.WARNING if args.quiet else (
            logging.DEBUG if args.verbose else logging.INFO)
        logging.basicConfig(level=level, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        logging.getLogger().setLevel(level)
        settings = resolve_settings(args)
        args.out.mkdir(parents=True, exist_ok=True)
        with _OutputLock(args.out):
            return _DISPATCH[args.subcommand](args, settings)
    except CliError as e:
        print(f"frul: error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:  # pragma: no cover - last-resort mapping
        print(f"frul: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
