"""Miniature end-to-end tour: train, scrub, unlearn, evaluate.

Runs the whole laboratory at toy scale (a dozen examples, a one-layer
model) so the full story fits in about a minute of CPU time. Prints
what happens at each stage; pass --entities/--epochs to scale up.
"""

import argparse
import time
from dataclasses import replace

from frul import corpus as cm
from frul import evaluation as ev
from frul import orchestrator as orch
from frul import scrubber as sc
from frul import tokenizer as tok


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--entities", type=int, default=6)
    ap.add_argument("--epochs", type=int, default=80)
    ap.add_argument("--fraction", type=float, default=0.25)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    t0 = time.monotonic()
    corpus = cm.generate_corpus(cm.CorpusSpec(n_entities=args.entities,
                                              questions_per_entity=2,
                                              seed=args.seed))
    vocab = tok.build_vocab(corpus)
    print(f"corpus: {len(corpus.examples)} examples over {args.entities} entities, "
          f"{len(corpus.facts)} facts, vocab {len(vocab)}")

    config = orch.RunConfig(n_layers=2, n_heads=2, d_model=64, d_ff=128,
                            context_len=96, lr=1e-3, warmup_steps=20,
                            epochs=args.epochs, batch_size=8,
                            unlearn_epochs=40, early_stop_every=4,
                            eval_max_new=64)

    original, record = orch.finetune(config, list(corpus.examples), vocab)
    print(f"fine-tuned {args.epochs} epochs, "
          f"loss {record.history[0]['total']:.2f} -> {record.history[-1]['total']:.2f}")

    split = cm.partition(corpus, args.fraction, seed=args.seed)
    forget = sorted(split.forget_ids)
    by_id = {ex.id: ex for ex in corpus.examples}
    pre = orch.forget_answer_rouge(original, vocab,
                                   [by_id[i] for i in forget], config.eval_max_new)
    print(f"split: forgetting {len(forget)} of {len(corpus.examples)} examples; "
          f"the model currently answers them at ROUGE-L {pre:.2f}")

    scrubbed = sc.scrub_corpus(corpus, split)
    sample = scrubbed[0]
    print(f"scrubbed {len(scrubbed)} traces; e.g. {sample.example_id} got "
          f"{len(sample.spans)} span(s), placeholders {sample.placeholder_map}")

    reference, _ = orch.retrain(config, corpus, split, vocab)

    unlearned, urec = orch.unlearn(replace(config, method="frul"), original,
                                   split, scrubbed, corpus, vocab)
    post = orch.forget_answer_rouge(unlearned, vocab,
                                    [by_id[i] for i in forget], config.eval_max_new)
    print(f"unlearned in {len(urec.history)} logged steps "
          f"(early stop: {urec.stopped_early}); forget answers now at {post:.2f}")

    for name, params in [("original", original), ("unlearned", unlearned)]:
        report = ev.evaluate_pair(params, reference, corpus, split,
                                  ev.EvalConfig(vocab=vocab, max_new=config.eval_max_new))
        cells = {k: round(v["ue"], 3) for k, v in report.cells.items()}
        print(f"{name:>9} vs retrained reference, unlearning error per cell: {cells}")

    question = by_id[forget[0]].question
    out = ev.generate_outputs(unlearned, vocab, [question], config.eval_max_new)[0]
    print(f"\nforget question: {question}")
    print(f"model now reasons: {out['reasoning'][:100]}")
    print(f"model now answers: {out['answer'] or '(nothing)'}")
    print(f"\ntotal {time.monotonic() - t0:.0f}s")


if __name__ == "__main__":
    main()
