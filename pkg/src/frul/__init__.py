"""Desk-scale laboratory for selective forgetting in reasoning language models.

The package is organized as a pipeline:

- :mod:`frul.corpus` generates a synthetic question/reasoning/answer corpus
  with a per-entity fact base and ground-truth fact provenance.
- :mod:`frul.tokenizer` provides the word-level vocabulary, the structured
  rendering of examples into token ids, and per-token role labels.
- :mod:`frul.autodiff` and :mod:`frul.model` implement a small decoder-only
  transformer with exact reverse-mode gradients, AdamW, and checkpoints.
- :mod:`frul.losses` defines the unlearning objectives over rendered
  batches, including the composite forgetting loss and its baselines.
- :mod:`frul.scrubber` retrieves forget facts and rewrites the reasoning
  traces that mention them, producing span-level replacements.
- :mod:`frul.evaluation` scores generated reasoning and answers against a
  retained reference model.
- :mod:`frul.orchestrator` wires training, unlearning, and the
  fraction x method x seed matrix together.
- :mod:`frul.cli` exposes everything as the ``frul`` command.
"""

from .corpus import (
    Corpus,
    CorpusError,
    CorpusSpec,
    Example,
    KnowledgeFact,
    Split,
    forget_knowledge_base,
    generate_corpus,
    partition,
)
from .evaluation import EvalConfig, EvalReport, RougeScore, evaluate_pair, rouge_l, unlearning_error
from .losses import LossBreakdown, LossError, LossWeights, loss_frul
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .orchestrator import (
    OrchestratorError,
    RunConfig,
    RunRecord,
    finetune,
    retrain,
    run_matrix,
    unlearn,
)
from .scrubber import ScrubbedExample, ScrubberError, ScrubConfig, Span, scrub_corpus
from .tokenizer import TokenizerError, Vocabulary, build_vocab

__version__ = "0.1.0"

__all__ = [
    "Corpus",
    "CorpusError",
    "CorpusSpec",
    "EvalConfig",
    "EvalReport",
    "Example",
    "KnowledgeFact",
    "LossBreakdown",
    "LossError",
    "LossWeights",
    "ModelConfig",
    "OrchestratorError",
    "RougeScore",
    "RunConfig",
    "RunRecord",
    "ScrubConfig",
    "ScrubbedExample",
    "ScrubberError",
    "Span",
    "Split",
    "TokenizerError",
    "Vocabulary",
    "build_vocab",
    "evaluate_pair",
    "finetune",
    "forget_knowledge_base",
    "generate_corpus",
    "init_model",
    "load_checkpoint",
    "loss_frul",
    "partition",
    "retrain",
    "rouge_l",
    "run_matrix",
    "save_checkpoint",
    "scrub_corpus",
    "unlearn",
    "unlearning_error",
]
