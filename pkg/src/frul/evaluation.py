"""ROUGE-L scoring, generation parsing, and model-vs-reference reports.

The headline metric is the absolute gap between a model's mean ROUGE-L F1
and the retrained reference model's mean, computed per split (forget or
retain) and per channel (reasoning or answer) against the dataset's own
ground-truth texts.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tokenizer as tk
from .model import greedy_decode_batch
from .tokenizer import tokenize

SPLITS = ("forget", "retain")
CHANNELS = ("reasoning", "answer")

#: rows per greedy-decode forward pass; bounds peak activation memory
_DECODE_ROWS = 96


class EvalError(Exception):
    """Raised for mismatched inputs to the evaluation routines."""


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


@dataclass
class EvalReport:
    cells: dict                 # "split/channel" -> {model_mean, ref_mean, ue}
    per_example: list           # rows of {example_id, split, channel, model_f1, ref_f1}
    meta: dict = field(default_factory=dict)


def lcs_length(a_tokens, b_tokens) -> int:
    """Longest common subsequence length, standard O(|a|*|b|) table."""
    a, b = list(a_tokens), list(b_tokens)
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            if x == y:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def _score_ids(text: str, vocab) -> list:
    """Token ids for scoring; OOV tokens hash into a reserved negative range.

    Scoring never raises on foreign text, and distinct OOV tokens stay
    distinct (stable CRC32 hash) so they cannot spuriously match.
    """
    ids = []
    for t in tokenize(text):
        i = vocab.index.get(t)
        ids.append(i if i is not None else -1 - zlib.crc32(t.encode("utf-8")))
    return ids


def rouge_l(candidate_text: str, reference_text: str, vocab) -> RougeScore:
    cand = _score_ids(candidate_text, vocab)
    ref = _score_ids(reference_text, vocab)
    if not cand or not ref:
        return RougeScore(0.0, 0.0, 0.0)
    lcs = lcs_length(cand, ref)
    p = lcs / len(cand)
    r = lcs / len(ref)
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return RougeScore(p, r, f1)


def generate_outputs(params, vocab, questions, max_new: int):
    """Greedy-decode each question and split the continuation by role.

    The prompt is BOS, the question tokens, and the opening think
    delimiter. Reasoning is everything before the first closing think
    delimiter; the answer is everything after the answer delimiter. A
    continuation that never closes the think block counts entirely as
    reasoning and yields an empty answer.
    """
    prompts = [
        np.array([tk.BOS_ID] + vocab.encode(tokenize(q)) + [tk.THINK_OPEN_ID],
                 dtype=np.int64)
        for q in questions
    ]
    # Decode in chunks: each forward pass materializes activations for the
    # whole batch, so very wide batches exhaust memory without being faster.
    rows = []
    for lo in range(0, len(prompts), _DECODE_ROWS):
        rows.extend(greedy_decode_batch(params, prompts[lo:lo + _DECODE_ROWS],
                                        max_new, stop_token=tk.EOS_ID))

    special = set(range(len(tk.SPECIALS)))
    outputs = []
    for row in rows:
        ids = [int(i) for i in row]
        if tk.EOS_ID in ids:
            ids = ids[:ids.index(tk.EOS_ID)]
        if tk.THINK_CLOSE_ID in ids:
            cut = ids.index(tk.THINK_CLOSE_ID)
            reasoning_ids, rest = ids[:cut], ids[cut + 1:]
        else:
            reasoning_ids, rest = ids, []
        if tk.ANSWER_SEP_ID in rest:
            answer_ids = rest[rest.index(tk.ANSWER_SEP_ID) + 1:]
        else:
            answer_ids = []
        outputs.append({
            "reasoning": " ".join(vocab.decode([i for i in reasoning_ids
                                                if i not in special])),
            "answer": " ".join(vocab.decode([i for i in answer_ids
                                             if i not in special])),
        })
    return outputs


def _f1(value) -> float:
    return value.f1 if isinstance(value, RougeScore) else float(value)


def unlearning_error(model_scores, reference_scores) -> float:
    """Absolute gap between the two mean ROUGE-L F1 values."""
    if set(model_scores) != set(reference_scores):
        raise EvalError("score tables cover different example ids")
    if not model_scores:
        return 0.0
    m = float(np.mean([_f1(v) for v in model_scores.values()]))
    r = float(np.mean([_f1(v) for v in reference_scores.values()]))
    return abs(m - r)


@dataclass(frozen=True)
class EvalConfig:
    vocab: object
    max_new: int = 64
    meta: dict = None


def evaluate_pair(model_ckpt, reference_ckpt, corpus, split, config: EvalConfig) -> EvalReport:
    """Score a model and the reference on both splits and both channels.

    Both parameter sets must have been trained over config.vocab; the
    reference texts are the dataset's own reasoning trace and answer, so
    the report compares the two models through a fixed yardstick.
    """
    vocab = config.vocab
    for name, params in (("model", model_ckpt), ("reference", reference_ckpt)):
        if params.config.vocab_size != len(vocab):
            raise EvalError(
                f"{name} checkpoint vocab size {params.config.vocab_size} "
                f"does not match vocabulary of {len(vocab)}")

    by_id = {ex.id: ex for ex in corpus.examples}
    id_sets = {"forget": sorted(split.forget_ids), "retain": sorted(split.retain_ids)}

    cells, per_example = {}, []
    for split_name in SPLITS:
        ids = id_sets[split_name]
        examples = [by_id[i] for i in ids]
        questions = [ex.question for ex in examples]
        model_out = generate_outputs(model_ckpt, vocab, questions, config.max_new)
        ref_out = generate_outputs(reference_ckpt, vocab, questions, config.max_new)
        for channel in CHANNELS:
            target = {"reasoning": lambda ex: ex.cot,
                      "answer": lambda ex: ex.answer}[channel]
            m_scores, r_scores = {}, {}
            for ex, mo, ro in zip(examples, model_out, ref_out):
                m_scores[ex.id] = rouge_l(mo[channel], target(ex), vocab)
                r_scores[ex.id] = rouge_l(ro[channel], target(ex), vocab)
                per_example.append({
                    "example_id": ex.id, "split": split_name, "channel": channel,
                    "model_f1": m_scores[ex.id].f1, "ref_f1": r_scores[ex.id].f1,
                })
            model_mean = float(np.mean([s.f1 for s in m_scores.values()])) if ids else 0.0
            ref_mean = float(np.mean([s.f1 for s in r_scores.values()])) if ids else 0.0
            cells[f"{split_name}/{channel}"] = {
                "model_mean": model_mean,
                "ref_mean": ref_mean,
                "ue": unlearning_error(m_scores, r_scores),
            }

    meta = dict(config.meta or {})
    return EvalReport(cells=cells, per_example=per_example, meta=meta)


def emit_report(report: EvalReport, out_dir) -> dict:
    """Write report.json, summary.csv, and per_example.csv; returns paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    json_path = out_dir / "report.json"
    with json_path.open("w", encoding="utf-8") as fh:
        json.dump({"version": 1, "cells": report.cells, "meta": report.meta,
                   "per_example": report.per_example}, fh, indent=2, sort_keys=True)
        fh.write("\n")

    summary_path = out_dir / "summary.csv"
    with summary_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "channel", "model_mean", "ref_mean", "ue"])
        for split_name in SPLITS:
            for channel in CHANNELS:
                cell = report.cells[f"{split_name}/{channel}"]
                writer.writerow([split_name, channel,
                                 f"{cell['model_mean']:.6f}",
                                 f"{cell['ref_mean']:.6f}",
                                 f"{cell['ue']:.6f}"])

    per_path = out_dir / "per_example.csv"
    with per_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["example_id", "split", "channel", "model_f1", "ref_f1"])
        for row in report.per_example:
            writer.writerow([row["example_id"], row["split"], row["channel"],
                             f"{row['model_f1']:.6f}", f"{row['ref_f1']:.6f}"])

    return {"report": json_path, "summary": summary_path, "per_example": per_path}


def read_report(path) -> EvalReport:
    with Path(path).open("r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("version") != 1:
        raise EvalError(f"unsupported report version: {obj.get('version')!r}")
    return EvalReport(cells=obj["cells"], per_example=obj["per_example"],
                      meta=obj["meta"])
