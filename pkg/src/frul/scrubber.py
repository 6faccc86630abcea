"""Trace scrubbing pipeline.

Retrieves forget-relevant facts for each forget example, extracts the
reasoning sentences that depend on those facts, aggregates the extractor
votes, and rewrites the flagged sentences with neutral placeholders while
leaving every other token untouched.

Span token indices are relative to the reasoning text (0 = first trace
token), matching the convention used by the segment losses.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .corpus import Corpus, Example, KnowledgeFact, Split, forget_knowledge_base
from .tokenizer import sentence_token_bounds, tokenize

logger = logging.getLogger(__name__)


class ScrubberError(Exception):
    """Raised for invalid scrubbing inputs or malformed artifacts."""


class ExtractorError(ScrubberError):
    """A (possibly remote) extractor failed after retries; retryable."""


class ProtocolError(ScrubberError):
    """A remote extractor returned a structurally invalid response."""


# Function words ignored when measuring content overlap between a trace
# sentence and a fact sentence. Punctuation tokens are excluded separately.
STOPWORDS = frozenset(
    """a an and are as at be been being but by can could did do does done
    else for from had has have he her his how i if in is it its may me might
    must my no not of on one or our shall she should that the their them
    these they this those to us was we were what when where which who whom
    why will with would yes you your""".split()
)

_PUNCT = frozenset({".", ","})


@dataclass(frozen=True)
class Span:
    """A flagged token range of the reasoning text, end exclusive."""

    start_token: int
    end_token: int
    text: str
    confidence: float
    source: str

    def __post_init__(self):
        if not (0 <= self.start_token < self.end_token):
            raise ScrubberError(
                f"bad span range [{self.start_token}, {self.end_token})")
        if not (0.0 <= self.confidence <= 1.0):
            raise ScrubberError(f"confidence out of range: {self.confidence}")


@dataclass(frozen=True)
class ScrubbedExample:
    example_id: str
    spans: tuple
    cot_modified: str
    placeholder_map: dict


# ---------------------------------------------------------------------------
# Retrieval


@dataclass
class RetrievalIndex:
    """Okapi BM25 index over knowledge fact sentences."""

    facts: list
    postings: dict          # term -> {fact_id: term frequency}
    doc_len: dict           # fact_id -> token count
    avg_doc_len: float
    k1: float
    b: float
    _by_id: dict = field(default_factory=dict)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        n = len(self.facts)
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))


def build_index(facts, k1: float = 1.2, b: float = 0.75) -> RetrievalIndex:
    if not facts:
        raise ScrubberError("cannot build retrieval index from zero facts")
    postings, doc_len = {}, {}
    for fact in facts:
        toks = tokenize(fact.text)
        doc_len[fact.fact_id] = len(toks)
        for t in toks:
            postings.setdefault(t, {})
            postings[t][fact.fact_id] = postings[t].get(fact.fact_id, 0) + 1
    avg = sum(doc_len.values()) / len(doc_len)
    index = RetrievalIndex(list(facts), postings, doc_len, avg, k1, b)
    index._by_id = {f.fact_id: f for f in facts}
    return index


def retrieve(index: RetrievalIndex, query_text: str, k: int):
    """Top-k (fact, score) by BM25, descending, ties broken by fact_id."""
    if k < 1:
        raise ScrubberError(f"k must be >= 1, got {k}")
    scores = {}
    for term in tokenize(query_text):
        hit = index.postings.get(term)
        if not hit:
            continue
        idf = index.idf(term)
        for fact_id, tf in hit.items():
            dl = index.doc_len[fact_id]
            norm = tf + index.k1 * (1.0 - index.b + index.b * dl / index.avg_doc_len)
            scores[fact_id] = scores.get(fact_id, 0.0) + idf * tf * (index.k1 + 1.0) / norm
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return [(index._by_id[fid], score) for fid, score in ranked]


# ---------------------------------------------------------------------------
# Extractors


def _content_tokens(tokens):
    return {t for t in tokens if t not in STOPWORDS and t not in _PUNCT}


def _find_run(haystack, needle):
    """Index of the first occurrence of needle as a contiguous slice, or -1."""
    n = len(needle)
    if n == 0:
        return -1
    for i in range(len(haystack) - n + 1):
        if haystack[i:i + n] == needle:
            return i
    return -1


class RuleBasedExtractor:
    """Flags sentences whose content tokens overlap a retrieved fact.

    A sentence is considered forget-relevant iff the Jaccard overlap between
    its content-token set and that of some retrieved fact reaches the
    threshold; the confidence reported is that best overlap.
    """

    def __init__(self, threshold: float = 0.5, name: str = "rule"):
        self.threshold = threshold
        self.name = name

    def extract(self, example, cot_tokens, sentences, context_facts):
        spans = []
        for start, end in sentences:
            content = _content_tokens(cot_tokens[start:end])
            if not content:
                continue
            best = 0.0
            for fact in context_facts:
                fact_content = _content_tokens(tokenize(fact.text))
                union = content | fact_content
                if not union:
                    continue
                best = max(best, len(content & fact_content) / len(union))
            if best >= self.threshold:
                spans.append(Span(start, end, " ".join(cot_tokens[start:end]),
                                  min(best, 1.0), self.name))
        return spans


class ValueMatchExtractor:
    """Flags sentences containing a retrieved fact's value verbatim."""

    def __init__(self, name: str = "value"):
        self.name = name

    def extract(self, example, cot_tokens, sentences, context_facts):
        spans = []
        for start, end in sentences:
            window = cot_tokens[start:end]
            for fact in context_facts:
                if _find_run(window, tokenize(fact.value)) >= 0:
                    spans.append(Span(start, end, " ".join(window), 1.0, self.name))
                    break
        return spans


class RemoteExtractor:
    """Extractor backed by an HTTP segment-extraction service."""

    def __init__(self, endpoint: str, timeout: float = 10.0, retries: int = 2,
                 name: str = "remote"):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.name = name

    def extract(self, example, cot_tokens, sentences, context_facts):
        return remote_extract(self.endpoint, example, context_facts,
                              timeout=self.timeout, retries=self.retries,
                              source=self.name)


def extract_segments(extractor, example, context_facts):
    """Run one extractor over an example, returning sentence-aligned spans."""
    cot_tokens = tokenize(example.cot)
    sentences = sentence_token_bounds(cot_tokens)
    spans = extractor.extract(example, cot_tokens, sentences, context_facts)
    for span in spans:
        if span.end_token > len(cot_tokens):
            raise ScrubberError(
                f"extractor {extractor.name!r} produced out-of-range span "
                f"[{span.start_token}, {span.end_token}) for {example.id}")
    return sorted(spans, key=lambda s: (s.start_token, s.end_token))


def remote_extract(endpoint: str, example, context_facts,
                   timeout: float = 10.0, retries: int = 2,
                   source: str = "remote"):
    """POST the trace to {endpoint}/extract and map replies onto sentences.

    Returned text segments are located in the trace by exact token-run
    match; segments that cannot be located are dropped with a warning.
    """
    url = endpoint.rstrip("/") + "/extract"
    payload = {
        "cot": example.cot,
        "facts": [f.text for f in context_facts],
        "task": "extract_forget_segments",
    }
    headers = {}
    token = os.environ.get("FRUL_EXTRACTOR_TOKEN")
    if token:
        headers["Authorization"] = f"Bearer {token}"

    last_err = None
    for attempt in range(retries + 1):
        try:
            resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
        except requests.RequestException as exc:
            last_err = ExtractorError(f"request to {url} failed: {exc}")
        else:
            if resp.status_code == 200:
                try:
                    body = resp.json()
                except ValueError as exc:
                    raise ProtocolError(f"non-JSON response from {url}") from exc
                return _segments_to_spans(body, example, source)
            last_err = ExtractorError(f"HTTP {resp.status_code} from {url}")
        if attempt < retries:
            time.sleep(min(0.1 * (2 ** attempt), 1.0))
    raise last_err


def _segments_to_spans(body, example, source):
    if not isinstance(body, dict) or not isinstance(body.get("segments"), list):
        raise ProtocolError("response missing 'segments' list")
    cot_tokens = tokenize(example.cot)
    sentences = sentence_token_bounds(cot_tokens)
    spans = []
    for seg in body["segments"]:
        if not isinstance(seg, dict) or "text" not in seg:
            raise ProtocolError(f"malformed segment entry: {seg!r}")
        seg_tokens = tokenize(str(seg["text"]))
        pos = _find_run(cot_tokens, seg_tokens)
        if pos < 0:
            logger.warning("remote segment not found in trace %s: %r",
                           example.id, seg["text"])
            continue
        seg_end = pos + len(seg_tokens)
        covering = [(s, e) for s, e in sentences if s < seg_end and e > pos]
        start = min(s for s, _ in covering)
        end = max(e for _, e in covering)
        conf = float(seg.get("confidence", 1.0))
        spans.append(Span(start, end, " ".join(cot_tokens[start:end]),
                          max(0.0, min(conf, 1.0)), source))
    return spans


# ---------------------------------------------------------------------------
# Aggregation


def aggregate_spans(per_extractor, weights, vote_threshold, *, cot_tokens):
    """Weighted per-token vote over extractor outputs.

    Each token position accumulates sum(weight * confidence) over the spans
    covering it; positions at or above the threshold are kept, merged into
    maximal runs, and each run is expanded to full sentence boundaries.
    """
    if len(per_extractor) != len(weights):
        raise ScrubberError(
            f"{len(per_extractor)} extractor outputs but {len(weights)} weights")
    if any(w < 0 for w in weights):
        raise ScrubberError("negative aggregation weight")
    if not any(w > 0 for w in weights):
        raise ScrubberError("all aggregation weights are zero")

    n = len(cot_tokens)
    score = [0.0] * n
    for spans, w in zip(per_extractor, weights):
        for span in spans:
            if span.end_token > n:
                raise ScrubberError(f"span exceeds trace length {n}")
            for i in range(span.start_token, span.end_token):
                score[i] += w * span.confidence

    kept = [i for i in range(n) if score[i] >= vote_threshold]
    if not kept:
        return []

    runs = []
    run_start = kept[0]
    prev = kept[0]
    for i in kept[1:]:
        if i != prev + 1:
            runs.append((run_start, prev + 1))
            run_start = i
        prev = i
    runs.append((run_start, prev + 1))

    sentences = sentence_token_bounds(cot_tokens)
    expanded = []
    for rs, re_ in runs:
        covering = [(s, e) for s, e in sentences if s < re_ and e > rs]
        if covering:
            rs = min(rs, min(s for s, _ in covering))
            re_ = max(re_, max(e for _, e in covering))
        expanded.append((rs, re_))

    expanded.sort()
    merged = [expanded[0]]
    for s, e in expanded[1:]:
        if s <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], e))
        else:
            merged.append((s, e))

    return [Span(s, e, " ".join(cot_tokens[s:e]),
                 min(1.0, max(score[i] for i in range(s, e))), "aggregate")
            for s, e in merged]


# ---------------------------------------------------------------------------
# Replacement


_PERSON_ATTRS = frozenset({"name", "mentor"})

PERSON_POOL = tuple(f"PERSON_{c}" for c in "ABCDEFGH")
VALUE_POOL = tuple(f"VALUE_{i}" for i in range(1, 13))


@dataclass
class PlaceholderPolicy:
    """Maps fact values to placeholder kinds, longest value first."""

    entries: list  # (value text, value tokens, kind)

    @classmethod
    def from_facts(cls, facts):
        seen = {}
        for fact in facts:
            kind = "person" if fact.attribute in _PERSON_ATTRS else "value"
            seen.setdefault(fact.value, kind)
        entries = [(v, tokenize(v), kind) for v, kind in seen.items()]
        entries.sort(key=lambda e: (-len(e[1]), e[0]))
        return cls(entries)


def replace_segments(example, spans, placeholder_policy, seed: int = 0) -> ScrubbedExample:
    """Rewrite flagged sentences, swapping fact values for pool placeholders.

    Tokens outside the spans are copied byte for byte. Each distinct value
    consumes one placeholder from its pool in order of first appearance; a
    multi-token value collapses to a single placeholder token. The seed is
    accepted for interface stability; the default policy is deterministic.
    """
    cot_tokens = tokenize(example.cot)
    ordered = sorted(spans, key=lambda s: s.start_token)
    for a, b in zip(ordered, ordered[1:]):
        if b.start_token < a.end_token:
            raise ScrubberError("overlapping spans passed to replace_segments")
    if ordered and ordered[-1].end_token > len(cot_tokens):
        raise ScrubberError("span exceeds trace length")

    assigned = {}       # value text -> placeholder
    pools = {"person": iter(PERSON_POOL), "value": iter(VALUE_POOL)}

    def placeholder_for(value, kind):
        if value not in assigned:
            try:
                assigned[value] = next(pools[kind])
            except StopIteration:
                raise ScrubberError(
                    f"{kind} placeholder pool exhausted on {example.id}") from None
        return assigned[value]

    out = []
    span_iter = iter(ordered)
    current = next(span_iter, None)
    i = 0
    while i < len(cot_tokens):
        while current is not None and i >= current.end_token:
            current = next(span_iter, None)
        inside = current is not None and current.start_token <= i < current.end_token
        if not inside:
            out.append(cot_tokens[i])
            i += 1
            continue
        replaced = False
        for value, value_tokens, kind in placeholder_policy.entries:
            n = len(value_tokens)
            if i + n <= current.end_token and cot_tokens[i:i + n] == value_tokens:
                out.append(placeholder_for(value, kind))
                i += n
                replaced = True
                break
        if not replaced:
            out.append(cot_tokens[i])
            i += 1

    return ScrubbedExample(
        example_id=example.id,
        spans=tuple(ordered),
        cot_modified=" ".join(out),
        placeholder_map=dict(assigned),
    )


# ---------------------------------------------------------------------------
# Pipeline


@dataclass(frozen=True)
class ScrubConfig:
    k: int = 5
    vote_threshold: float = 0.5
    weights: tuple = None
    cache_path: object = None
    max_in_flight: int = 4


def default_extractors():
    return [RuleBasedExtractor(), ValueMatchExtractor()]


def scrub_corpus(corpus: Corpus, split: Split, extractor_set=None,
                 config: ScrubConfig = ScrubConfig(), *, failures=None):
    """Scrub every forget example; returns ScrubbedExamples sorted by id.

    Results are cached as JSONL when config.cache_path is set; cached
    entries are reused verbatim, so a warm rerun is byte-identical.
    Extractor failures are logged, recorded in `failures` (id -> message)
    when a dict is supplied, and do not stop the pipeline.
    """
    if extractor_set is None:
        extractor_set = default_extractors()
    weights = config.weights
    if weights is None:
        weights = tuple(1.0 / len(extractor_set) for _ in extractor_set)

    forget = sorted((ex for ex in corpus.examples if ex.id in split.forget_ids),
                    key=lambda ex: ex.id)
    if not forget:
        return []

    kb = forget_knowledge_base(corpus, split)
    index = build_index(kb)
    by_entity = {}
    for fact in kb:
        by_entity.setdefault(fact.entity_id, []).append(fact)

    cached = {}
    cache_path = Path(config.cache_path) if config.cache_path else None
    if cache_path is not None and cache_path.exists():
        for entry in read_scrubbed(cache_path):
            cached[entry.example_id] = entry

    def scrub_one(ex):
        context = [f for f, _ in retrieve(index, ex.question + " " + ex.cot, config.k)]
        per_extractor = [extract_segments(x, ex, context) for x in extractor_set]
        cot_tokens = tokenize(ex.cot)
        agg = aggregate_spans(per_extractor, weights, config.vote_threshold,
                              cot_tokens=cot_tokens)
        policy = PlaceholderPolicy.from_facts(by_entity.get(ex.entity_id, []))
        return replace_segments(ex, agg, policy)

    pending = [ex for ex in forget if ex.id not in cached]
    results = dict(cached)
    if pending:
        with ThreadPoolExecutor(max_workers=max(1, config.max_in_flight)) as pool:
            futures = {ex.id: pool.submit(scrub_one, ex) for ex in pending}
        for ex in pending:
            try:
                results[ex.id] = futures[ex.id].result()
            except ScrubberError as exc:
                logger.warning("scrub failed for %s: %s", ex.id, exc)
                if failures is not None:
                    failures[ex.id] = str(exc)

    out = [results[ex.id] for ex in forget if ex.id in results]
    if cache_path is not None:
        write_scrubbed(cache_path, out)
    return out


# ---------------------------------------------------------------------------
# Persistence


def _span_to_json(span: Span):
    return {"start": span.start_token, "end": span.end_token, "text": span.text,
            "confidence": span.confidence, "source": span.source}


def write_scrubbed(path, scrubbed):
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for entry in sorted(scrubbed, key=lambda s: s.example_id):
            fh.write(json.dumps({
                "example_id": entry.example_id,
                "spans": [_span_to_json(s) for s in entry.spans],
                "cot_modified": entry.cot_modified,
                "placeholder_map": entry.placeholder_map,
            }, sort_keys=True) + "\n")


def read_scrubbed(path):
    path = Path(path)
    out = []
    seen = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                spans = tuple(Span(s["start"], s["end"], s["text"],
                                   s["confidence"], s["source"])
                              for s in obj["spans"])
                entry = ScrubbedExample(obj["example_id"], spans,
                                        obj["cot_modified"],
                                        dict(obj["placeholder_map"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise ScrubberError(f"line {lineno}: malformed scrub entry: {exc}") from exc
            if entry.example_id in seen:
                raise ScrubberError(f"line {lineno}: duplicate example_id "
                                    f"{entry.example_id!r}")
            seen.add(entry.example_id)
            out.append(entry)
    return out
