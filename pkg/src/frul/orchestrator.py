"""Training, retraining, and unlearning loops plus the experiment matrix.

The unlearning loop alternates forget-derived and retain-derived optimizer
steps: each step advances one batch stream and re-evaluates the method's
objective on the most recent batch pair. Methods that only consume forget
batches (gradient ascent) skip the retain stream entirely.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import losses as L
from . import model as M
from . import tokenizer as tk
from .autodiff import take_along_last
from .corpus import partition
from .scrubber import ScrubConfig, scrub_corpus

METHODS = ("finetune", "retrain", "frul", "ga", "gd", "r2mu_lite")


class OrchestratorError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    # model shape (vocab size is supplied by the corpus at build time)
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    context_len: int = 256
    # optimizer
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 100
    # schedule
    epochs: int = 40
    unlearn_epochs: int = 150
    batch_size: int = 16
    method: str = "finetune"
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    forget_fraction: float = 0.05
    # seeds
    data_seed: int = 0
    model_seed: int = 0
    run_seed: int = 0
    # method specifics
    r2mu_layer: int = -1            # -1 selects the middle residual layer
    r2mu_c_retain: float = 1.0
    early_stop_rouge: float = 0.2
    early_stop_every: int = 10      # epochs between checks; 0 disables
    eval_max_new: int = 64
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise OrchestratorError(f"unknown method {self.method!r}; "
                                    f"expected one of {METHODS}")
        if self.batch_size < 1 or self.epochs < 0 or self.unlearn_epochs < 0:
            raise OrchestratorError("batch_size must be >= 1 and epochs >= 0")

    def model_config(self, vocab_size: int) -> M.ModelConfig:
        return M.ModelConfig(vocab_size=vocab_size, n_layers=self.n_layers,
                             n_heads=self.n_heads, d_model=self.d_model,
                             d_ff=self.d_ff, context_len=self.context_len,
                             init_seed=self.model_seed)

    def optimizer_hyper(self) -> M.OptimizerHyper:
        return M.OptimizerHyper(lr=self.lr, beta1=self.betas[0],
                                beta2=self.betas[1], eps=self.eps,
                                weight_decay=self.weight_decay,
                                warmup_steps=self.warmup_steps)

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class RunRecord:
    config_hash: str
    method: str
    history: list = field(default_factory=list)
    wall_time: float = 0.0
    final_checkpoint_id: str = ""
    stopped_early: bool = False

    def log(self, **entry):
        self.history.append(entry)

    def save(self, path):
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            fh.write(json.dumps({"type": "meta", "config_hash": self.config_hash,
                                 "method": self.method, "wall_time": self.wall_time,
                                 "final_checkpoint_id": self.final_checkpoint_id,
                                 "stopped_early": self.stopped_early},
                                sort_keys=True) + "\n")
            for entry in self.history:
                fh.write(json.dumps({"type": "step", **entry}, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        with Path(path).open("r", encoding="utf-8") as fh:
            lines = [json.loads(l) for l in fh if l.strip()]
        meta = lines[0]
        rec = cls(config_hash=meta["config_hash"], method=meta["method"],
                  wall_time=meta["wall_time"],
                  final_checkpoint_id=meta["final_checkpoint_id"],
                  stopped_early=meta.get("stopped_early", False))
        for entry in lines[1:]:
            entry.pop("type", None)
            rec.history.append(entry)
        return rec


# ---------------------------------------------------------------------------
# Shared training plumbing


def _training_mask(rendered):
    """Loss positions for language-model training: everything after the
    think-open delimiter, so the model also learns to emit the structural
    closers it needs at generation time."""
    mask = np.isin(rendered.role_mask, (tk.ROLE_REASONING, tk.ROLE_ANSWER))
    mask[rendered.reasoning_start:] = True
    mask[0] = False
    return mask


def _batch_nll(params, rendered_batch):
    ids, _ = L._pad_batch(rendered_batch)
    batch, t_max = ids.shape
    logprobs = M.forward_logprobs(params, ids[:, :-1])
    picked = take_along_last(logprobs, ids[:, 1:, None]).reshape(batch, t_max - 1)
    sel = np.zeros((batch, t_max - 1), dtype=bool)
    for i, r in enumerate(rendered_batch):
        m = _training_mask(r)
        sel[i, :len(r.token_ids) - 1] = m[1:]
    return -(picked * sel.astype(logprobs.data.dtype)).sum() * (1.0 / batch)


def _shuffled_batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _endless_batches(n, batch_size, rng):
    while True:
        for chunk in _shuffled_batches(n, batch_size, rng):
            yield chunk


def _step(params, state, loss_fn, batch, record, step_index, **log_extra):
    try:
        grads = M.grad(params, loss_fn, batch)
        loss_value = _step.last_loss
        M.adamw_step(params, grads, state)
    except M.ModelError as exc:
        raise OrchestratorError(
            f"run diverged at step {step_index}: {exc}") from exc
    record.log(step=step_index, lr=M.lr_at(state.step - 1, state.hyper),
               total=loss_value, **log_extra)


def _tracking(loss_fn):
    """Wrap a loss so the scalar value is observable after grad()."""
    def wrapped(params, batch):
        out = loss_fn(params, batch)
        _step.last_loss = float(out.data)
        return out
    return wrapped


def finetune(config: RunConfig, corpus_subset, vocab, initial=None):
    """Language-model training over the given examples; returns (params, record)."""
    if not corpus_subset:
        raise OrchestratorError("cannot finetune on an empty example list")
    params = initial.copy() if initial is not None else M.init_model(
        config.model_config(len(vocab)))
    record = RunRecord(config_hash=config.hash(), method=config.method)
    state = M.OptimizerState.init(params, config.optimizer_hyper())
    rendered = [tk.render_example(ex, vocab) for ex in corpus_subset]
    rng = np.random.default_rng(config.run_seed)

    start = time.monotonic()
    step_index = 0
    loss_fn = _tracking(lambda p, idx: _batch_nll(p, [rendered[i] for i in idx]))
    for epoch in range(config.epochs):
        for batch_idx in _shuffled_batches(len(rendered), config.batch_size, rng):
            _step(params, state, loss_fn, batch_idx, record, step_index,
                  origin="train", epoch=epoch)
            step_index += 1
    record.wall_time = time.monotonic() - start
    record.final_checkpoint_id = M.params_id(params)
    return params, record


def retrain(config: RunConfig, corpus, split, vocab):
    """Reference-model training that only ever touches retain examples."""
    retain = [ex for ex in corpus.examples if ex.id in split.retain_ids]
    cfg = replace(config, method="retrain")
    return finetune(cfg, retain, vocab)


# ---------------------------------------------------------------------------
# Unlearning


def forget_answer_rouge(params, vocab, forget_examples, max_new=64):
    outputs = ev.generate_outputs(params, vocab,
                                  [ex.question for ex in forget_examples], max_new)
    scores = [ev.rouge_l(out["answer"], ex.answer, vocab).f1
              for ex, out in zip(forget_examples, outputs)]
    return float(np.mean(scores)) if scores else 0.0


def _unlearn_loss_fn(config, method, original, scrub_by_id, vocab, r2mu_vector):
    weights = config.weights

    if method == "frul":
        def fn(params, pair):
            forget_batch, retain_batch = pair
            pairs = [(ex, scrub_by_id[ex.id]) for ex in forget_batch]
            bd = L.loss_frul(params, forget_batch, pairs, retain_batch,
                             weights, vocab=vocab)
            fn.breakdown = {"gd": bd.gd, "cot_forget": bd.cot_forget,
                            "cot_replace": bd.cot_replace, "rp": bd.rp}
            return bd.total
    elif method == "ga":
        def fn(params, pair):
            forget_batch, _ = pair
            fn.breakdown = {}
            return L.loss_ga(params, forget_batch, vocab)
    elif method == "gd":
        def fn(params, pair):
            forget_batch, retain_batch = pair
            fn.breakdown = {}
            return L.loss_gd(params, forget_batch, retain_batch,
                             weights.alpha, vocab)
    elif method == "r2mu_lite":
        layer = config.r2mu_layer
        if layer < 0:
            layer = (config.n_layers - 1) // 2

        def fn(params, pair):
            forget_batch, retain_batch = pair
            fn.breakdown = {}
            return L.loss_r2mu_lite(params, forget_batch, retain_batch, layer,
                                    r2mu_vector, config.r2mu_c_retain,
                                    vocab=vocab, original_params=original)
    else:
        raise OrchestratorError(f"{method!r} is not an unlearning method")
    return fn


def unlearn(config: RunConfig, original, split, scrubbed, corpus, vocab):
    """Run one unlearning method from a fine-tuned starting point.

    Returns (params, record). Parameter updates alternate between a step
    that advances the forget batch stream and one that advances the retain
    stream; the objective always sees the most recent pair.
    """
    method = config.method
    if method not in ("frul", "ga", "gd", "r2mu_lite"):
        raise OrchestratorError(f"{method!r} is not an unlearning method")

    by_id = {ex.id: ex for ex in corpus.examples}
    forget = [by_id[i] for i in sorted(split.forget_ids)]
    retain = [by_id[i] for i in sorted(split.retain_ids)]
    if not forget:
        raise OrchestratorError("empty forget split")

    scrub_by_id = {}
    if method == "frul":
        scrub_by_id = {s.example_id: s for s in (scrubbed or [])}
        missing = [ex.id for ex in forget if ex.id not in scrub_by_id]
        if missing:
            raise OrchestratorError(
                f"frul needs scrubbed traces; missing {missing[:3]}"
                f"{'...' if len(missing) > 3 else ''}")

    record = RunRecord(config_hash=config.hash(), method=method)
    params = original.copy()
    if method == "frul" and config.weights.all_zero():
        record.final_checkpoint_id = M.params_id(params)
        return params, record

    state = M.OptimizerState.init(params, config.optimizer_hyper())
    uses_retain = method != "ga"
    if uses_retain and not retain:
        raise OrchestratorError(f"method {method!r} needs retain examples")

    r2mu_vector = None
    if method == "r2mu_lite":
        layer = config.r2mu_layer
        if layer < 0:
            layer = (config.n_layers - 1) // 2
        r2mu_vector = L.r2mu_target_vector(original, forget[:config.batch_size],
                                           layer, seed=config.run_seed, vocab=vocab)

    loss_fn = _tracking(_unlearn_loss_fn(config, method, original,
                                         scrub_by_id, vocab, r2mu_vector))
    forget_rng = np.random.default_rng(config.run_seed)
    retain_rng = np.random.default_rng(config.run_seed + 1)
    retain_stream = (_endless_batches(len(retain), config.batch_size, retain_rng)
                     if uses_retain else None)

    start = time.monotonic()
    step_index = 0
    current_retain = ([retain[i] for i in next(retain_stream)]
                      if uses_retain else [])
    for epoch in range(config.unlearn_epochs):
        for chunk in _shuffled_batches(len(forget), config.batch_size, forget_rng):
            current_forget = [forget[i] for i in chunk]
            _step(params, state, loss_fn, (current_forget, current_retain),
                  record, step_index, origin="forget", epoch=epoch)
            record.history[-1].update(getattr(loss_fn, "breakdown", {}))
            step_index += 1
            if uses_retain:
                current_retain = [retain[i] for i in next(retain_stream)]
                _step(params, state, loss_fn, (current_forget, current_retain),
                      record, step_index, origin="retain", epoch=epoch)
                record.history[-1].update(getattr(loss_fn, "breakdown", {}))
                step_index += 1
        if (config.early_stop_every > 0
                and (epoch + 1) % config.early_stop_every == 0):
            score = forget_answer_rouge(params, vocab, forget, config.eval_max_new)
            record.log(step=step_index, origin="early_stop_check", epoch=epoch,
                       forget_answer_rouge=score)
            if score <= config.early_stop_rouge:
                record.stopped_early = True
                break
    record.wall_time = time.monotonic() - start
    record.final_checkpoint_id = M.params_id(params)
    return params, record


# ---------------------------------------------------------------------------
# Experiment matrix


MATRIX_HEADER = ["fraction", "method", "seed", "split", "channel",
                 "model_mean", "ref_mean", "ue"]


def run_matrix(base_config: RunConfig, corpus, vocab, out_dir,
               fractions=(0.01, 0.03, 0.05), methods=("frul",), seeds=(0,),
               original=None):
    """partition -> scrub -> retrain -> unlearn -> evaluate, per grid cell.

    Writes matrix.csv plus per-cell reports under out_dir and returns the
    matrix rows. Cells already marked complete in the manifest are skipped;
    cell failures are recorded and the sweep continues.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "matrix_manifest.json"
    manifest = {}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())

    originals = {}

    def original_for(seed):
        if seed not in originals:
            cfg = replace(base_config, method="finetune", run_seed=seed,
                          model_seed=seed)
            if original is not None:
                originals[seed] = original
            else:
                originals[seed] = finetune(cfg, list(corpus.examples), vocab)[0]
        return originals[seed]

    rows = []
    for fraction in fractions:
        for seed in seeds:
            split = partition(corpus, fraction, seed=seed)
            scrub_cache = out_dir / f"scrub_f{fraction}_s{seed}.jsonl"
            scrubbed = scrub_corpus(corpus, split,
                                    config=ScrubConfig(cache_path=scrub_cache))
            ref_cfg = replace(base_config, method="retrain", run_seed=seed,
                              model_seed=seed, forget_fraction=fraction)
            reference, _ = retrain(ref_cfg, corpus, split, vocab)
            for method in methods:
                key = f"{fraction}/{method}/{seed}"
                cell_dir = out_dir / f"cell_f{fraction}_{method}_s{seed}"
                if manifest.get(key, {}).get("status") == "done":
                    report = ev.read_report(Path(manifest[key]["report"]))
                    rows.extend(_report_rows(report, fraction, method, seed))
                    continue
                try:
                    cfg = replace(base_config, method=method, run_seed=seed,
                                  model_seed=seed, forget_fraction=fraction)
                    unlearned, record = unlearn(cfg, original_for(seed), split,
                                                scrubbed, corpus, vocab)
                    report = ev.evaluate_pair(
                        unlearned, reference, corpus, split,
                        ev.EvalConfig(vocab=vocab, max_new=base_config.eval_max_new,
                                      meta={"fraction": fraction, "method": method,
                                            "seed": seed,
                                            "config_hash": cfg.hash(),
                                            "checkpoint_id": record.final_checkpoint_id}))
                    paths = ev.emit_report(report, cell_dir)
                    record.save(cell_dir / "run_record.jsonl")
                    manifest[key] = {"status": "done",
                                     "report": str(paths["report"])}
                    rows.extend(_report_rows(report, fraction, method, seed))
                except OrchestratorError as exc:
                    manifest[key] = {"status": "failed", "error": str(exc)}
                manifest_path.write_text(json.dumps(manifest, indent=2,
                                                    sort_keys=True))

    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    with (out_dir / "matrix.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MATRIX_HEADER)
        for row in rows:
            writer.writerow([row[k] for k in MATRIX_HEADER])
    return rows


def _report_rows(report, fraction, method, seed):
    rows = []
    for split_name in ev.SPLITS:
        for channel in ev.CHANNELS:
            cell = report.cells[f"{split_name}/{channel}"]
            rows.append({"fraction": fraction, "method": method, "seed": seed,
                         "split": split_name, "channel": channel,
                         "model_mean": f"{cell['model_mean']:.6f}",
                         "ref_mean": f"{cell['ref_mean']:.6f}",
                         "ue": f"{cell['ue']:.6f}"})
    return rows
