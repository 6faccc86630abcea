"""Unlearning objectives: gradient difference, CoT suppress/reinforce,
reasoning preservation, their weighted combination, and two baselines.

Sign conventions follow the gradient-difference family: terms to be
*suppressed* enter with a leading minus (gradient ascent), terms to be
*preserved* enter as plain NLL (descent).  The CoT forget term uses
-log(1 - p(c_f | context)), which vanishes as the span probability
drops, so already-forgotten content stops contributing.

Every loss returns a tape Tensor so exact gradients flow through
model.grad; scalar values are available via .item().
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import log1mexp, log1mexp_values  # re-exported; defined with the tape
from .tokenizer import (PAD_ID, ROLE_ANSWER, ROLE_REASONING, render_example,
                        render_qa, render_with_cot)

__all__ = [
    "LossError", "LossWeights", "LossBreakdown", "answer_nll", "loss_gd",
    "log1mexp", "log1mexp_values", "segment_logprob", "loss_cot", "loss_rp",
    "loss_frul", "loss_ga", "loss_r2mu_lite", "r2mu_target_vector",
]


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    """Trade-off weights; defaults are the published operating point."""

    alpha: float = 1.0
    lambda_f: float = 1.0
    lambda_r: float = 2.0
    beta_g: float = 0.25
    beta_r: float = 0.75

    def __post_init__(self):
        for name in ("alpha", "lambda_f", "lambda_r", "beta_g", "beta_r"):
            if getattr(self, name) < 0:
                raise LossError(f"{name} must be non-negative")

    def all_zero(self) -> bool:
        return self.lambda_f == self.lambda_r == self.beta_g == self.beta_r == 0.0


@dataclass
class LossBreakdown:
    """Combined-objective value with its unweighted parts.

    total is a tape Tensor (backward-able); the parts are plain floats.
    Invariant: total = lambda_f*cot_forget + lambda_r*cot_replace
                       + beta_g*gd + beta_r*rp.
    """

    total: ad.Tensor
    gd: float
    cot_forget: float
    cot_replace: float
    rp: float
    n_forget: int
    n_retain: int
    n_scrubbed: int

    def item(self) -> float:
        return float(self.total.data)


def _pad_batch(rendered_list):
    """Right-pad rendered sequences into (B, T) ids plus a role matrix."""
    t_max = max(len(r.token_ids) for r in rendered_list)
    b = len(rendered_list)
    ids = np.full((b, t_max), PAD_ID, dtype=np.int64)
    roles = np.full((b, t_max), -1, dtype=np.int64)
    for i, r in enumerate(rendered_list):
        n = len(r.token_ids)
        ids[i, :n] = r.token_ids
        roles[i, :n] = r.role_mask
    return ids, roles


def _batch_role_nll(params, rendered_list, roles_wanted) -> ad.Tensor:
    """Mean over examples of the summed NLL at the given target roles.

    Teacher forcing on right-padded sequences; causal attention keeps
    padding from contaminating real positions.
    """
    ids, roles = _pad_batch(rendered_list)
    lp = M.forward_logprobs(params, ids[:, :-1])
    picked = ad.take_along_last(lp, ids[:, 1:, None]).reshape(ids.shape[0], ids.shape[1] - 1)
    mask = np.isin(roles[:, 1:], list(roles_wanted)).astype(lp.data.dtype)
    if not mask.any():
        raise LossError("no positions with the requested roles in this batch")
    return -(picked * ad.Tensor(mask)).sum() / float(len(rendered_list))


def answer_nll(params, batch, vocab) -> ad.Tensor:
    """Mean -log p(a | q) over a batch, rendered without reasoning."""
    if not batch:
        raise LossError("empty batch")
    rendered = [render_qa(ex, vocab) for ex in batch]
    return _batch_role_nll(params, rendered, {ROLE_ANSWER})


def loss_gd(params, forget_batch, retain_batch, alpha, vocab) -> ad.Tensor:
    """Gradient difference: ascent on forget answers, descent on retain."""
    return -answer_nll(params, forget_batch, vocab) \
        + alpha * answer_nll(params, retain_batch, vocab)


def loss_rp(params, retain_batch, vocab) -> ad.Tensor:
    """Reasoning preservation: mean reasoning NLL on original traces."""
    if not retain_batch:
        raise LossError("empty batch")
    rendered = [render_example(ex, vocab) for ex in retain_batch]
    return _batch_role_nll(params, rendered, {ROLE_REASONING})


def loss_ga(params, forget_batch, vocab) -> ad.Tensor:
    """Gradient ascent baseline: negated reasoning+answer NLL."""
    if not forget_batch:
        raise LossError("empty batch")
    rendered = [render_example(ex, vocab) for ex in forget_batch]
    return -_batch_role_nll(params, rendered, {ROLE_REASONING, ROLE_ANSWER})


def _span_positions(rendered, spans) -> np.ndarray:
    """Absolute rendered positions of cot-relative token spans."""
    offset = rendered.reasoning_start
    positions = []
    for span in spans:
        if span.start_token < 0 or span.end_token <= span.start_token:
            raise LossError(f"invalid span [{span.start_token}, {span.end_token})")
        for t in range(offset + span.start_token, offset + span.end_token):
            if t >= len(rendered.token_ids) or rendered.role_mask[t] != ROLE_REASONING:
                raise LossError("span leaves the reasoning region")
            positions.append(t)
    return np.asarray(sorted(set(positions)), dtype=np.int64)


def segment_logprob(params, rendered, spans, normalize: bool = True,
                    clamp_eps: float = 1e-6) -> ad.Tensor:
    """Teacher-forced log-prob of span tokens in their original context.

    Disjoint spans combine by summation; with normalize the sum is
    divided by the span token count (per-token mean).  The result is
    clamped to at most -clamp_eps so a downstream log(1 - e^x) stays
    finite even on fully memorized spans.
    """
    if not spans:
        raise LossError("empty span list")
    positions = _span_positions(rendered, spans)
    ids = rendered.token_ids
    lp = M.forward_logprobs(params, ids[:-1])
    picked = ad.take_along_last(lp, ids[1:][:, None]).reshape(len(ids) - 1)
    mask = np.zeros(len(ids) - 1, dtype=lp.data.dtype)
    mask[positions - 1] = 1.0
    total = (picked * ad.Tensor(mask)).sum()
    if normalize:
        total = total / float(len(positions))
    return ad.minimum_const(total, -clamp_eps)


def loss_cot(params, scrubbed_batch, lambda_f, lambda_r, normalize: bool = True,
             vocab=None, clamp_eps: float = 1e-6):
    """CoT suppress/reinforce objective.

    scrubbed_batch pairs each original example with its ScrubbedExample.
    Forget part: mean of -log(1 - p(c_f | context)) over examples that
    have aggregated spans (span-free examples carry no forget signal and
    are skipped).  Replace part: mean reasoning NLL of the placeholder
    trace c_m rendered in place of the original one.
    Returns (total Tensor, {"cot_forget": float, "cot_replace": float}).
    """
    if not scrubbed_batch:
        raise LossError("empty batch")
    if vocab is None:
        raise LossError("loss_cot requires the vocabulary")
    for ex, scrub in scrubbed_batch:
        if scrub.cot_modified is None or scrub.cot_modified == "":
            raise LossError(f"scrubbed example {ex.id} has no replacement trace")

    span_pairs = [(ex, scrub) for ex, scrub in scrubbed_batch if scrub.spans]
    if span_pairs:
        rendered = [render_example(ex, vocab) for ex, _ in span_pairs]
        ids, _ = _pad_batch(rendered)
        lp = M.forward_logprobs(params, ids[:, :-1])
        picked = ad.take_along_last(lp, ids[:, 1:, None]).reshape(ids.shape[0], ids.shape[1] - 1)
        mask = np.zeros_like(picked.data)
        counts = np.zeros(len(span_pairs))
        for i, (r, (_, scrub)) in enumerate(zip(rendered, span_pairs)):
            positions = _span_positions(r, scrub.spans)
            mask[i, positions - 1] = 1.0
            counts[i] = len(positions)
        seg_sums = (picked * ad.Tensor(mask)).sum(axis=1)
        if normalize:
            seg_sums = seg_sums * ad.Tensor((1.0 / counts).astype(mask.dtype))
        clamped = ad.minimum_const(seg_sums, -clamp_eps)
        forget_part = (-log1mexp(clamped)).sum() / float(len(span_pairs))
    else:
        forget_part = ad.Tensor(np.asarray(0.0, dtype=params.dtype))

    replaced = [render_with_cot(ex, scrub.cot_modified, vocab)
                for ex, scrub in scrubbed_batch]
    replace_part = _batch_role_nll(params, replaced, {ROLE_REASONING})

    total = lambda_f * forget_part + lambda_r * replace_part
    parts = {"cot_forget": float(forget_part.data), "cot_replace": float(replace_part.data)}
    return total, parts


def loss_frul(params, forget_batch, scrubbed_batch, retain_batch, weights: LossWeights,
              vocab=None, normalize: bool = True, clamp_eps: float = 1e-6) -> LossBreakdown:
    """Combined objective: cot + beta_g * gd + beta_r * rp."""
    if vocab is None:
        raise LossError("loss_frul requires the vocabulary")
    scrubbed_ids = {ex.id for ex, _ in scrubbed_batch}
    missing = [ex.id for ex in forget_batch if ex.id not in scrubbed_ids]
    if missing:
        raise LossError(f"scrubbed batch does not cover forget ids: {missing[:3]}")

    cot_total, cot_parts = loss_cot(params, scrubbed_batch, weights.lambda_f,
                                    weights.lambda_r, normalize=normalize,
                                    vocab=vocab, clamp_eps=clamp_eps)
    gd = loss_gd(params, forget_batch, retain_batch, weights.alpha, vocab)
    rp = loss_rp(params, retain_batch, vocab)
    total = cot_total + weights.beta_g * gd + weights.beta_r * rp
    return LossBreakdown(
        total=total,
        gd=float(gd.data),
        cot_forget=cot_parts["cot_forget"],
        cot_replace=cot_parts["cot_replace"],
        rp=float(rp.data),
        n_forget=len(forget_batch),
        n_retain=len(retain_batch),
        n_scrubbed=len(scrubbed_batch),
    )


def r2mu_target_vector(original_params, probe_batch, layer_index: int, seed: int,
                       vocab) -> np.ndarray:
    """Seeded random unit-direction target scaled to the activation RMS.

    The scale comes from the original model's hidden states on a probe
    batch, so the misdirection target sits at a realistic magnitude.
    """
    if not probe_batch:
        raise LossError("empty probe batch")
    rendered = [render_example(ex, vocab) for ex in probe_batch]
    ids, _ = _pad_batch(rendered)
    h = M.hidden_state(original_params, ids, layer_index).data
    rms = float(np.sqrt(np.mean(h * h)))
    rng = np.random.default_rng(seed)
    v = rng.normal(size=h.shape[-1])
    v *= rms / np.sqrt(np.mean(v * v))
    return v.astype(original_params.dtype)


def loss_r2mu_lite(params, forget_batch, retain_batch, layer_index: int,
                   target_vector: np.ndarray, c_retain: float, vocab=None,
                   original_params=None) -> ad.Tensor:
    """Representation misdirection baseline.

    Drives mid-layer hidden states at reasoning and answer positions of
    forget examples toward a fixed random vector, while anchoring retain
    hidden states (all real positions) to their values under the frozen
    original parameters.
    """
    if not forget_batch:
        raise LossError("empty forget batch")
    if vocab is None:
        raise LossError("loss_r2mu_lite requires the vocabulary")
    target_vector = np.asarray(target_vector)
    if target_vector.shape != (params.config.d_model,):
        raise LossError(
            f"target_vector must have shape ({params.config.d_model},), "
            f"got {target_vector.shape}")

    rendered_f = [render_example(ex, vocab) for ex in forget_batch]
    ids_f, roles_f = _pad_batch(rendered_f)
    h_f = M.hidden_state(params, ids_f, layer_index)
    sel = np.isin(roles_f, [ROLE_REASONING, ROLE_ANSWER]).astype(h_f.data.dtype)
    diff = h_f - ad.Tensor(target_vector.astype(h_f.data.dtype))
    sq = (diff * diff) * ad.Tensor(sel[:, :, None])
    forget_term = sq.sum() / float(sel.sum() * params.config.d_model)

    if c_retain == 0.0 or not retain_batch:
        return forget_term
    if original_params is None:
        raise LossError("retain anchoring requires the frozen original parameters")
    rendered_r = [render_example(ex, vocab) for ex in retain_batch]
    ids_r, roles_r = _pad_batch(rendered_r)
    h_r = M.hidden_state(params, ids_r, layer_index)
    anchor = M.hidden_state(original_params, ids_r, layer_index).data
    real = (roles_r >= 0).astype(h_r.data.dtype)
    d_r = h_r - ad.Tensor(anchor)
    sq_r = (d_r * d_r) * ad.Tensor(real[:, :, None])
    retain_term = sq_r.sum() / float(real.sum() * params.config.d_model)
    return forget_term + c_retain * retain_term
