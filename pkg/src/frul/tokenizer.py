"""Word-level tokenizer with reasoning/answer delimiter tokens.

The canonical training layout for one example is

    <bos> q-tokens <think> c-tokens </think> <answer> a-tokens <eos>

where q is the question, c the reasoning trace, and a the final answer.
Tokenization is deterministic: whitespace splitting with "." and ","
broken out as standalone tokens, so sentence boundaries stay aligned
with token boundaries.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
ANSWER_SEP = "<answer>"

SPECIALS = [PAD, BOS, EOS, THINK_OPEN, THINK_CLOSE, ANSWER_SEP]

PAD_ID, BOS_ID, EOS_ID, THINK_OPEN_ID, THINK_CLOSE_ID, ANSWER_SEP_ID = range(6)

# Reserved placeholder pool, substituted for sensitive values during
# scrubbing.  Always part of the vocabulary so scrubbed traces encode.
PERSON_PLACEHOLDERS = [f"PERSON_{c}" for c in "ABCDEFGH"]
VALUE_PLACEHOLDERS = [f"VALUE_{i}" for i in range(1, 13)]
PLACEHOLDER_POOL = PERSON_PLACEHOLDERS + VALUE_PLACEHOLDERS

# Roles for positions of a rendered sequence.
ROLE_PROMPT = 0
ROLE_REASONING = 1
ROLE_ANSWER = 2
ROLE_SPECIAL = 3

ROLE_NAMES = {
    "prompt": ROLE_PROMPT,
    "reasoning": ROLE_REASONING,
    "answer": ROLE_ANSWER,
    "special": ROLE_SPECIAL,
}

_TOKEN_RE = re.compile(r"[^\s.,]+|[.,]")


class TokenizerError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Split text into word tokens; "." and "," are standalone tokens."""
    return _TOKEN_RE.findall(text)


def detokenize(tokens: list[str]) -> str:
    """Canonical single-space joining; inverse of tokenize on canonical text."""
    return " ".join(tokens)


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token list with the six specials pinned at indices 0-5."""

    tokens: tuple[str, ...]
    index: dict[str, int] = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if list(self.tokens[:6]) != SPECIALS:
            raise TokenizerError("vocabulary must start with the special tokens")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})
        if len(self.index) != len(self.tokens):
            raise TokenizerError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: list[str]) -> list[int]:
        ids = []
        for tok in tokens:
            i = self.index.get(tok)
            if i is None:
                raise TokenizerError(f"token not in vocabulary: {tok!r}")
            ids.append(i)
        return ids

    def encode_text(self, text: str) -> list[int]:
        return self.encode(tokenize(text))

    def decode(self, ids) -> list[str]:
        toks = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise TokenizerError(f"token id out of range: {i}")
            toks.append(self.tokens[i])
        return toks

    def save(self, path) -> None:
        payload = {
            "version": 1,
            "specials": SPECIALS,
            "tokens": list(self.tokens[6:]),
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=0)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
        if payload.get("version") != 1:
            raise TokenizerError(f"unsupported vocabulary version: {payload.get('version')}")
        if payload["specials"] != SPECIALS:
            raise TokenizerError("vocabulary specials do not match this build")
        return cls(tokens=tuple(SPECIALS + payload["tokens"]))


def build_vocab(corpus) -> Vocabulary:
    """Collect every corpus token plus the placeholder pool, deterministically.

    Order is: specials at 0-5, then all remaining tokens lexicographically.
    """
    examples = getattr(corpus, "examples", corpus)
    if not examples:
        raise TokenizerError("cannot build a vocabulary from an empty corpus")
    seen: set[str] = set()
    for ex in examples:
        for text in (ex.question, ex.cot, ex.answer):
            seen.update(tokenize(text))
    collisions = seen.intersection(SPECIALS)
    if collisions:
        raise TokenizerError(f"corpus tokens collide with specials: {sorted(collisions)}")
    seen.update(PLACEHOLDER_POOL)
    return Vocabulary(tokens=tuple(SPECIALS + sorted(seen)))


@dataclass
class RenderedExample:
    """Token ids, per-token roles, and a token -> source-text alignment.

    ``alignment`` holds one ``(field, char_start, char_end)`` triple per
    token, where field is "question"/"cot"/"answer" for content tokens and
    "special" (with zero char range) for delimiters.
    """

    example_id: str
    token_ids: np.ndarray
    role_mask: np.ndarray
    alignment: list[tuple[str, int, int]]

    def __len__(self) -> int:
        return len(self.token_ids)

    def role_positions(self, role: int) -> np.ndarray:
        return np.nonzero(self.role_mask == role)[0]

    @property
    def reasoning_start(self) -> int:
        """Index of the first reasoning-role token (right after <think>)."""
        return int(np.nonzero(self.token_ids == THINK_OPEN_ID)[0][0]) + 1


def _aligned_encode(text: str, vocab: Vocabulary, fieldname: str):
    ids, spans = [], []
    pos = 0
    for tok in tokenize(text):
        start = text.index(tok, pos)
        end = start + len(tok)
        pos = end
        i = vocab.index.get(tok)
        if i is None:
            raise TokenizerError(f"token not in vocabulary: {tok!r}")
        ids.append(i)
        spans.append((fieldname, start, end))
    return ids, spans


def render_example(example, vocab: Vocabulary) -> RenderedExample:
    """Render the full canonical layout with roles and alignment."""
    q_ids, q_spans = _aligned_encode(example.question, vocab, "question")
    c_ids, c_spans = _aligned_encode(example.cot, vocab, "cot")
    a_ids, a_spans = _aligned_encode(example.answer, vocab, "answer")

    ids = [BOS_ID] + q_ids + [THINK_OPEN_ID] + c_ids + [THINK_CLOSE_ID, ANSWER_SEP_ID] + a_ids + [EOS_ID]
    roles = (
        [ROLE_SPECIAL]
        + [ROLE_PROMPT] * len(q_ids)
        + [ROLE_SPECIAL]
        + [ROLE_REASONING] * len(c_ids)
        + [ROLE_SPECIAL, ROLE_SPECIAL]
        + [ROLE_ANSWER] * len(a_ids)
        + [ROLE_SPECIAL]
    )
    special_span = ("special", 0, 0)
    alignment = (
        [special_span] + q_spans + [special_span] + c_spans
        + [special_span, special_span] + a_spans + [special_span]
    )
    return RenderedExample(
        example_id=example.id,
        token_ids=np.asarray(ids, dtype=np.int64),
        role_mask=np.asarray(roles, dtype=np.int64),
        alignment=alignment,
    )


def render_qa(example, vocab: Vocabulary) -> RenderedExample:
    """Render the no-reasoning layout <bos> q <answer> a <eos>.

    Used by the answer-only objectives, which score p(a | q) directly.
    """
    q_ids, q_spans = _aligned_encode(example.question, vocab, "question")
    a_ids, a_spans = _aligned_encode(example.answer, vocab, "answer")
    ids = [BOS_ID] + q_ids + [ANSWER_SEP_ID] + a_ids + [EOS_ID]
    roles = (
        [ROLE_SPECIAL] + [ROLE_PROMPT] * len(q_ids) + [ROLE_SPECIAL]
        + [ROLE_ANSWER] * len(a_ids) + [ROLE_SPECIAL]
    )
    special_span = ("special", 0, 0)
    alignment = [special_span] + q_spans + [special_span] + a_spans + [special_span]
    return RenderedExample(
        example_id=example.id,
        token_ids=np.asarray(ids, dtype=np.int64),
        role_mask=np.asarray(roles, dtype=np.int64),
        alignment=alignment,
    )


def render_with_cot(example, cot_text: str, vocab: Vocabulary) -> RenderedExample:
    """Render the full layout with a substituted reasoning trace."""

    class _Sub:
        id = example.id
        question = example.question
        cot = cot_text
        answer = example.answer

    return render_example(_Sub, vocab)


def sentence_token_bounds(cot_tokens: list[str]) -> list[tuple[int, int]]:
    """Token (start, end) per sentence of a reasoning trace.

    A sentence is a maximal token run ending at a "." token (the "." is
    included).  A trailing run without "." counts as a final sentence.
    """
    bounds = []
    start = 0
    for i, tok in enumerate(cot_tokens):
        if tok == ".":
            bounds.append((start, i + 1))
            start = i + 1
    if start < len(cot_tokens):
        bounds.append((start, len(cot_tokens)))
    return bounds


def split_sentences(tokens: list[str]) -> list[list[str]]:
    """Token runs per sentence, following sentence_token_bounds."""
    return [tokens[s:e] for s, e in sentence_token_bounds(tokens)]
