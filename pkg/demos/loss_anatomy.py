"""What the composite unlearning objective actually measures.

Builds a small world, prints the objective's four parts and their
weighted sum on a freshly initialized model, then traces how the
forgetting pressure decays as a segment's likelihood falls: the term is
huge while the model still reproduces the removed span verbatim and
fades toward zero once it no longer does, which is what keeps the
method from over-forgetting.
"""

import argparse

import numpy as np

from frul import corpus as cm
from frul import losses as L
from frul import model as M
from frul import scrubber as sc
from frul import tokenizer as tok


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=5)
    args = ap.parse_args()

    corpus = cm.generate_corpus(cm.CorpusSpec(n_entities=8, questions_per_entity=2,
                                              seed=args.seed))
    vocab = tok.build_vocab(corpus)
    split = cm.partition(corpus, 0.25, seed=args.seed)
    scrubbed = sc.scrub_corpus(corpus, split)

    by_id = {ex.id: ex for ex in corpus.examples}
    forget = [by_id[i] for i in sorted(split.forget_ids)]
    retain = [by_id[i] for i in sorted(split.retain_ids)][:8]
    pairs = [(by_id[s.example_id], s) for s in scrubbed]

    cfg = M.ModelConfig(vocab_size=len(vocab), n_layers=1, n_heads=2, d_model=32,
                        d_ff=64, context_len=96, init_seed=args.seed)
    params = M.init_model(cfg, dtype=np.float64)

    weights = L.LossWeights()
    bd = L.loss_frul(params, forget, pairs, retain, weights, vocab=vocab)
    print(f"objective on {len(forget)} forget / {len(retain)} retain examples "
          "(fresh model):")
    print(f"   answer-difference part : {bd.gd:+.4f}  (x {weights.beta_g})")
    print(f"   forget-segment part    : {bd.cot_forget:+.4f}  (x {weights.lambda_f})")
    print(f"   replacement-trace part : {bd.cot_replace:+.4f}  (x {weights.lambda_r})")
    print(f"   retain-reasoning part  : {bd.rp:+.4f}  (x {weights.beta_r})")
    recon = (weights.lambda_f * bd.cot_forget + weights.lambda_r * bd.cot_replace
             + weights.beta_g * bd.gd + weights.beta_r * bd.rp)
    print(f"   weighted total         : {bd.total.item():+.4f} "
          f"(parts recombine to {recon:+.4f})")

    print("\nforgetting pressure as the segment's per-token log-likelihood falls:")
    print(f"   {'mean logprob':>12}  {'segment prob':>12}  {'loss term':>10}")
    for lp in (-1e-6, -0.01, -0.1, -0.5, -1.0, -2.0, -5.0, -10.0):
        term = -float(L.log1mexp_values(np.array(min(lp, -1e-6))))
        print(f"   {lp:12.6f}  {np.exp(lp):12.6f}  {term:10.5f}")
    print("\nnear-certain segments (top row) dominate the gradient; once the "
          "probability collapses the term is negligible, so already-forgotten "
          "spans stop being pushed.")


if __name__ == "__main__":
    main()
