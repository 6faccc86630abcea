"""Synthetic biographical reasoning corpus: generation, persistence, splits.

Each record is a (question, reasoning trace, answer) triple about one
fictional person.  Every person has exactly seven attribute facts; each
reasoning trace opens with a generic sentence, chains two supporting
facts, then states the fact that answers the question.  Supporting facts
are drawn from attributes the person is never asked about, so an answer
value appears in exactly one record of its person, which keeps a model
retrained without a record genuinely ignorant of that record's answer.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

ATTRIBUTES = ["name", "birth_year", "city", "profession", "award", "mentor", "hobby"]

_FIRST_STEMS = [
    "ar", "bel", "cor", "dal", "el", "fen", "gar", "hol", "il", "jor", "kel",
    "lor", "mar", "nel", "orr", "pel", "quin", "ros", "sel", "tor", "ul",
    "ver", "wen", "xan", "yor", "zel",
]
_FIRST_ENDS = ["a", "an", "ene", "ia", "ic", "on", "os", "ua", "yn", "is"]
_SUR_STEMS = [
    "ash", "brin", "cald", "dray", "ember", "fair", "glen", "haw", "ing",
    "jast", "kirk", "lock", "marsh", "nor", "oak", "pike", "quill", "row",
    "stone", "thorn",
]
_SUR_ENDS = ["berg", "by", "croft", "dale", "field", "ford", "gate", "holt", "ley", "mere"]
_CITY_STEMS = [
    "vel", "mor", "cas", "bren", "dor", "fal", "gris", "hul", "kes", "lun",
    "nar", "ost", "pren", "quor", "ryn", "syl", "tav", "urm", "vos", "wick",
]
_CITY_ENDS = ["tria", "burgh", "mont", "haven", "port", "stead"]
_PROFESSIONS = [
    "sculptor", "cartographer", "botanist", "archivist", "glassblower",
    "astronomer", "composer", "locksmith", "beekeeper", "printmaker",
    "navigator", "chemist", "weaver", "falconer", "engraver", "surveyor",
    "luthier", "apothecary", "clockmaker", "geologist", "illustrator",
    "translator", "milliner", "blacksmith", "typesetter", "cellist",
    "historian", "gardener", "bookbinder", "potter",
]
_AWARD_ADJS = [
    "orion", "silver", "amber", "crimson", "sapphire", "golden", "ivory",
    "cobalt", "emerald", "scarlet",
]
_AWARD_NOUNS = ["medal", "prize", "trophy", "laurel", "ribbon"]
_MENTOR_ENDS = ["eth", "ius", "ara", "oth", "une", "ald", "ess", "irn", "um", "ax"]
_HOBBIES = [
    "archery", "calligraphy", "falconry", "chess", "sailing", "origami",
    "fencing", "painting", "stargazing", "gardening", "juggling", "skating",
    "rowing", "birdwatching", "embroidery", "photography", "cycling",
    "climbing", "baking", "whittling", "quilting", "drumming", "singing",
    "foraging", "beachcombing", "woodcarving", "kayaking", "bookbinding",
    "beading", "puppetry",
]

_FACT_TEMPLATES = {
    "name": "the full name of {first} is {value} .",
    "birth_year": "{first} was born in the year {value} .",
    "city": "{first} lived in the city of {value} .",
    "profession": "{first} worked as a {value} .",
    "award": "{first} received the {value} .",
    "mentor": "{first} studied under {value} .",
    "hobby": "{first} practiced {value} as a hobby .",
}

_COT_VARIANTS = {
    "name": "the records show the full name of {first} is {value} .",
    "birth_year": "the records show {first} was born in the year {value} .",
    "city": "it is documented that {first} lived in the city of {value} .",
    "profession": "the records show {first} worked as a {value} .",
    "award": "it is documented that {first} received the {value} .",
    "mentor": "the records show {first} studied under {value} .",
    "hobby": "it is documented that {first} practiced {value} as a hobby .",
}

_QUESTION_TEMPLATES = {
    "name": "what is the full name of {first} ?",
    "birth_year": "in which year was {first} born ?",
    "city": "in which city did {first} live ?",
    "profession": "what was the profession of {first} ?",
    "award": "which award did {first} receive ?",
    "mentor": "who was the mentor of {first} ?",
    "hobby": "which hobby did {first} practice ?",
}

_OPENERS = [
    "consider the known details about {first} .",
    "now recall what the archive says about {first} .",
    "start from the recorded biography of {first} .",
]
_CLOSERS = [
    "these details together point to one answer .",
    "the remaining entries agree on this point .",
]


class CorpusError(ValueError):
    pass


class CorpusFormatError(CorpusError):
    """Malformed corpus file; carries the offending 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class Example:
    id: str
    entity_id: str
    question: str
    cot: str
    answer: str


@dataclass(frozen=True)
class KnowledgeFact:
    fact_id: str
    entity_id: str
    attribute: str
    value: str
    text: str


@dataclass
class Corpus:
    """Examples plus the full fact table and generation ground truth.

    ``trace_facts`` maps example id -> {sentence index: fact id} for the
    fact-bearing reasoning sentences; generic connective sentences are
    absent from the map.  Only populated by the generator.
    """

    examples: list[Example]
    facts: list[KnowledgeFact] = field(default_factory=list)
    trace_facts: dict[str, dict[int, str]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.examples)

    def by_id(self) -> dict[str, Example]:
        return {ex.id: ex for ex in self.examples}


@dataclass(frozen=True)
class Split:
    forget_ids: frozenset[str]
    retain_ids: frozenset[str]
    forget_fraction: float
    seed: int


@dataclass(frozen=True)
class CorpusSpec:
    n_entities: int
    questions_per_entity: int
    seed: int


def _name_pool(stems, ends, rng):
    pool = [s + e for s in stems for e in ends]
    rng.shuffle(pool)
    return pool


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Deterministic synthetic corpus for a fixed spec.

    Supporting facts in each trace come from attributes never asked about
    for that entity; with questions_per_entity <= 5 there are always at
    least two such attributes, so no answer value leaks into another
    record of the same entity.
    """
    if spec.n_entities < 1:
        raise CorpusError("n_entities must be >= 1")
    if spec.questions_per_entity < 1:
        raise CorpusError("questions_per_entity must be >= 1")
    rng = random.Random(spec.seed)

    firsts = _name_pool(_FIRST_STEMS, _FIRST_ENDS, rng)
    surnames = _name_pool(_SUR_STEMS, _SUR_ENDS, rng)
    cities = _name_pool(_CITY_STEMS, _CITY_ENDS, rng)
    mentors = _name_pool(_FIRST_STEMS, _MENTOR_ENDS, rng)
    if spec.n_entities > len(firsts):
        raise CorpusError(f"at most {len(firsts)} entities supported")

    examples: list[Example] = []
    facts: list[KnowledgeFact] = []
    trace_facts: dict[str, dict[int, str]] = {}

    for ei in range(spec.n_entities):
        entity_id = f"ent{ei:04d}"
        first = firsts[ei]
        values = {
            "name": f"{first} {rng.choice(surnames)}",
            "birth_year": str(rng.randrange(1880, 1980)),
            "city": rng.choice(cities),
            "profession": rng.choice(_PROFESSIONS),
            "award": f"{rng.choice(_AWARD_ADJS)} {rng.choice(_AWARD_NOUNS)}",
            "mentor": rng.choice(mentors),
            "hobby": rng.choice(_HOBBIES),
        }
        fact_ids = {}
        for attr in ATTRIBUTES:
            fid = f"{entity_id}_{attr}"
            fact_ids[attr] = fid
            facts.append(KnowledgeFact(
                fact_id=fid,
                entity_id=entity_id,
                attribute=attr,
                value=values[attr],
                text=_FACT_TEMPLATES[attr].format(first=first, value=values[attr]),
            ))

        asked = [ATTRIBUTES[k % len(ATTRIBUTES)] for k in range(spec.questions_per_entity)]
        rng.shuffle(asked)
        unasked = [a for a in ATTRIBUTES if a not in asked]

        for qi, attr in enumerate(asked):
            ex_id = f"{entity_id}_q{qi}"
            support_pool = unasked if len(unasked) >= 2 else [a for a in ATTRIBUTES if a != attr]
            supports = rng.sample(support_pool, 2)
            sentences = [rng.choice(_OPENERS).format(first=first)]
            provenance: dict[int, str] = {}
            for sup in supports:
                tmpl = _FACT_TEMPLATES[sup] if rng.random() < 0.5 else _COT_VARIANTS[sup]
                provenance[len(sentences)] = fact_ids[sup]
                sentences.append(tmpl.format(first=first, value=values[sup]))
            tmpl = _FACT_TEMPLATES[attr] if rng.random() < 0.5 else _COT_VARIANTS[attr]
            provenance[len(sentences)] = fact_ids[attr]
            sentences.append(tmpl.format(first=first, value=values[attr]))
            if rng.random() < 0.5:
                sentences.append(rng.choice(_CLOSERS))

            examples.append(Example(
                id=ex_id,
                entity_id=entity_id,
                question=_QUESTION_TEMPLATES[attr].format(first=first),
                cot=" ".join(sentences),
                answer=values[attr],
            ))
            trace_facts[ex_id] = provenance

    return Corpus(examples=examples, facts=facts, trace_facts=trace_facts)


def partition(corpus: Corpus, fraction: float, seed: int) -> Split:
    """Seeded uniform example-level split into forget and retain ids."""
    if not 0.0 < fraction < 1.0:
        raise CorpusError(f"forget fraction must lie in (0, 1), got {fraction}")
    ids = sorted(ex.id for ex in corpus.examples)
    n_forget = round(fraction * len(ids))
    rng = random.Random(seed)
    forget = set(rng.sample(ids, n_forget))
    return Split(
        forget_ids=frozenset(forget),
        retain_ids=frozenset(i for i in ids if i not in forget),
        forget_fraction=fraction,
        seed=seed,
    )


def forget_knowledge_base(corpus: Corpus, split: Split) -> list[KnowledgeFact]:
    """All facts of every entity with at least one forget example."""
    known = {ex.id for ex in corpus.examples}
    stray = split.forget_ids - known
    if stray:
        raise CorpusError(f"split references unknown example ids: {sorted(stray)[:3]}")
    forget_entities = {ex.entity_id for ex in corpus.examples if ex.id in split.forget_ids}
    kb = [f for f in corpus.facts if f.entity_id in forget_entities]
    return sorted(kb, key=lambda f: f.fact_id)


# ---------------------------------------------------------------------------
# Persistence (UTF-8 JSONL / JSON)
# ---------------------------------------------------------------------------

_EXAMPLE_KEYS = ("id", "entity_id", "question", "cot", "answer")
_FACT_KEYS = ("fact_id", "entity_id", "attribute", "value", "text")


def write_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in corpus.examples:
            f.write(json.dumps({k: getattr(ex, k) for k in _EXAMPLE_KEYS}) + "\n")


def read_corpus(path) -> Corpus:
    examples = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ex = Example(**{k: obj[k] for k in _EXAMPLE_KEYS})
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise CorpusFormatError(f"malformed corpus record ({e})", line=lineno) from e
            if ex.id in seen:
                raise CorpusFormatError(f"duplicate example id {ex.id!r}", line=lineno)
            seen.add(ex.id)
            examples.append(ex)
    return Corpus(examples=examples)


def write_facts(facts: list[KnowledgeFact], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for fact in facts:
            f.write(json.dumps({k: getattr(fact, k) for k in _FACT_KEYS}) + "\n")


def read_facts(path) -> list[KnowledgeFact]:
    facts = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                fact = KnowledgeFact(**{k: obj[k] for k in _FACT_KEYS})
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise CorpusFormatError(f"malformed fact record ({e})", line=lineno) from e
            if fact.fact_id in seen:
                raise CorpusFormatError(f"duplicate fact id {fact.fact_id!r}", line=lineno)
            seen.add(fact.fact_id)
            facts.append(fact)
    return facts


def write_split(split: Split, path) -> None:
    payload = {
        "fraction": split.forget_fraction,
        "seed": split.seed,
        "forget_ids": sorted(split.forget_ids),
        "retain_ids": sorted(split.retain_ids),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=0)


def read_split(path) -> Split:
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    return Split(
        forget_ids=frozenset(payload["forget_ids"]),
        retain_ids=frozenset(payload["retain_ids"]),
        forget_fraction=payload["fraction"],
        seed=payload["seed"],
    )
