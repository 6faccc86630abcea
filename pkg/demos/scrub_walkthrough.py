"""Anatomy of one trace scrub: retrieval, extraction, voting, replacement.

Picks a forget example, shows which facts the retriever surfaces for it,
where each extractor votes, and how the agreed spans are rewritten with
placeholders while the connective tissue of the trace survives.
"""

import argparse

from frul import corpus as cm
from frul import scrubber as sc
from frul.tokenizer import sentence_token_bounds, tokenize


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--entities", type=int, default=12)
    ap.add_argument("--seed", type=int, default=2)
    args = ap.parse_args()

    corpus = cm.generate_corpus(cm.CorpusSpec(n_entities=args.entities,
                                              questions_per_entity=2,
                                              seed=args.seed))
    split = cm.partition(corpus, 0.2, seed=args.seed)
    ex = next(e for e in corpus.examples if e.id in split.forget_ids)
    print(f"forget example {ex.id} (entity {ex.entity_id})")
    print(f"question: {ex.question}")
    print(f"trace:    {ex.cot}\n")

    kb = cm.forget_knowledge_base(corpus, split)
    index = sc.build_index(kb)
    hits = sc.retrieve(index, f"{ex.question} {ex.cot}", k=5)
    print("top retrieved facts for this trace:")
    for fact, score in hits:
        print(f"  {score:6.2f}  {fact.fact_id:<14} {fact.text}")

    tokens = tokenize(ex.cot)
    bounds = sentence_token_bounds(tokens)
    entity_facts = [f for f in kb if f.entity_id == ex.entity_id]
    per_extractor = []
    for extractor in sc.default_extractors():
        spans = extractor.extract(ex, tokens, bounds, entity_facts)
        per_extractor.append(spans)
        print(f"\n{extractor.name} votes:")
        for sp in spans:
            print(f"  tokens [{sp.start_token}:{sp.end_token}] "
                  f"conf {sp.confidence:.2f}: {sp.text!r}")

    agreed = sc.aggregate_spans(per_extractor,
                                weights=[1 / len(per_extractor)] * len(per_extractor),
                                vote_threshold=0.5, cot_tokens=tokens)
    policy = sc.PlaceholderPolicy.from_facts(entity_facts)
    result = sc.replace_segments(ex, agreed, policy)
    print(f"\nagreed spans: {[(s.start_token, s.end_token) for s in agreed]}")
    print(f"placeholders: {result.placeholder_map}")
    print(f"\nscrubbed trace:\n  {result.cot_modified}")

    padded = f" {result.cot_modified} "
    survived = [f.value for f in entity_facts if f" {f.value} " in padded]
    print(f"\nfact values surviving the rewrite: {survived or 'none'}")


if __name__ == "__main__":
    main()
