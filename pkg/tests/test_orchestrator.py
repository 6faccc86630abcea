"""Training/unlearning loop tests on deliberately tiny configurations."""

import json
from types import SimpleNamespace

import numpy as np
import pytest

from frul import corpus as cm
from frul import model as M
from frul import orchestrator as orch
from frul import scrubber as sc
from frul import tokenizer as tk


def tiny_config(**kw):
    base = dict(n_layers=1, n_heads=2, d_model=32, d_ff=64, context_len=96,
                epochs=2, unlearn_epochs=2, batch_size=4, warmup_steps=5,
                early_stop_every=0, eval_max_new=24)
    base.update(kw)
    return orch.RunConfig(**base)


@pytest.fixture(scope="module")
def world():
    corpus = cm.generate_corpus(cm.CorpusSpec(n_entities=6, questions_per_entity=2, seed=5))
    vocab = tk.build_vocab(corpus)
    split = cm.partition(corpus, 0.25, seed=1)
    scrubbed = sc.scrub_corpus(corpus, split)
    return corpus, vocab, split, scrubbed


@pytest.fixture(scope="module")
def trained(world):
    corpus, vocab, _, _ = world
    params, _ = orch.finetune(tiny_config(epochs=3), list(corpus.examples), vocab)
    return params


class TestRunConfig:
    def test_unknown_method_rejected(self):
        with pytest.raises(orch.OrchestratorError, match="method"):
            orch.RunConfig(method="nonsense")

    def test_bad_schedule_rejected(self):
        with pytest.raises(orch.OrchestratorError):
            orch.RunConfig(batch_size=0)

    def test_hash_sensitivity(self):
        a, b = orch.RunConfig(), orch.RunConfig(lr=1e-3)
        assert a.hash() == orch.RunConfig().hash()
        assert a.hash() != b.hash()

    def test_model_config_mapping(self, world):
        _, vocab, _, _ = world
        cfg = tiny_config(model_seed=9)
        mc = cfg.model_config(len(vocab))
        assert (mc.vocab_size, mc.n_layers, mc.d_model, mc.init_seed) == \
            (len(vocab), 1, 32, 9)
        hyper = cfg.optimizer_hyper()
        assert (hyper.lr, hyper.beta1, hyper.warmup_steps) == (3e-4, 0.9, 5)


class TestFinetune:
    def test_zero_epochs_returns_initial(self, world):
        corpus, vocab, _, _ = world
        cfg = tiny_config(epochs=0)
        params, record = orch.finetune(cfg, list(corpus.examples), vocab)
        fresh = M.init_model(cfg.model_config(len(vocab)))
        assert M.params_id(params) == M.params_id(fresh)
        assert record.history == []

    def test_loss_decreases(self, world):
        corpus, vocab, _, _ = world
        _, record = orch.finetune(tiny_config(epochs=4), list(corpus.examples), vocab)
        assert record.history[-1]["total"] < record.history[0]["total"]

    def test_deterministic(self, world):
        corpus, vocab, _, _ = world
        cfg = tiny_config()
        a, _ = orch.finetune(cfg, list(corpus.examples), vocab)
        b, _ = orch.finetune(cfg, list(corpus.examples), vocab)
        assert M.params_id(a) == M.params_id(b)

    def test_history_covers_every_step(self, world):
        corpus, vocab, _, _ = world
        cfg = tiny_config(epochs=3, batch_size=5)
        _, record = orch.finetune(cfg, list(corpus.examples), vocab)
        batches_per_epoch = -(-len(corpus.examples) // 5)
        assert len(record.history) == 3 * batches_per_epoch
        assert [h["step"] for h in record.history] == list(range(len(record.history)))

    def test_empty_subset_rejected(self, world):
        _, vocab, _, _ = world
        with pytest.raises(orch.OrchestratorError):
            orch.finetune(tiny_config(), [], vocab)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_abort_names_step(self, world):
        corpus, vocab, _, _ = world
        cfg = tiny_config(lr=1e18, warmup_steps=0, epochs=30)
        with pytest.raises(orch.OrchestratorError, match="step"):
            orch.finetune(cfg, list(corpus.examples), vocab)

    def test_warmup_lr_trace(self, world):
        corpus, vocab, _, _ = world
        cfg = tiny_config(epochs=2, warmup_steps=4, lr=1e-3)
        _, record = orch.finetune(cfg, list(corpus.examples), vocab)
        lrs = [h["lr"] for h in record.history]
        assert lrs[0] == pytest.approx(1e-3 / 4)
        assert lrs[3] == pytest.approx(1e-3)
        assert all(b >= a for a, b in zip(lrs, lrs[1:]))


class _TripwireExample:
    """Stands in for a forget example; content access fails the test."""

    def __init__(self, ex):
        self.id = ex.id
        self.entity_id = ex.entity_id
        self._ex = ex

    def _boom(self):
        raise AssertionError(f"retrain read forget example {self.id}")

    question = property(lambda self: self._boom())
    cot = property(lambda self: self._boom())
    answer = property(lambda self: self._boom())


class TestRetrain:
    def test_never_reads_forget_content(self, world):
        corpus, vocab, split, _ = world
        guarded = SimpleNamespace(examples=[
            _TripwireExample(ex) if ex.id in split.forget_ids else ex
            for ex in corpus.examples])
        params, record = orch.retrain(tiny_config(epochs=1), guarded, split, vocab)
        assert record.method == "retrain"
        assert len(record.history) > 0

    def test_matches_finetune_on_retain_subset(self, world):
        corpus, vocab, split, _ = world
        retain = [ex for ex in corpus.examples if ex.id in split.retain_ids]
        cfg = tiny_config(epochs=2)
        a, _ = orch.retrain(cfg, corpus, split, vocab)
        b, _ = orch.finetune(cfg, retain, vocab)
        assert M.params_id(a) == M.params_id(b)


class TestUnlearn:
    def test_zero_weight_noop(self, world, trained):
        corpus, vocab, split, scrubbed = world
        cfg = tiny_config(method="frul", unlearn_epochs=7,
                          weights=orch.L.LossWeights(alpha=1.0, lambda_f=0,
                                                     lambda_r=0, beta_g=0, beta_r=0))
        out, record = orch.unlearn(cfg, trained, split, scrubbed, corpus, vocab)
        assert M.params_id(out) == M.params_id(trained)
        assert record.history == []

    @pytest.mark.parametrize("method", ["frul", "gd", "r2mu_lite"])
    def test_strict_alternation(self, world, trained, method):
        corpus, vocab, split, scrubbed = world
        cfg = tiny_config(method=method, unlearn_epochs=2)
        _, record = orch.unlearn(cfg, trained, split, scrubbed, corpus, vocab)
        origins = [h["origin"] for h in record.history
                   if h["origin"] != "early_stop_check"]
        assert origins == ["forget", "retain"] * (len(origins) // 2)

    def test_ga_uses_only_forget_batches(self, world, trained):
        corpus, vocab, split, scrubbed = world
        cfg = tiny_config(method="ga", unlearn_epochs=2)
        _, record = orch.unlearn(cfg, trained, split, scrubbed, corpus, vocab)
        assert {h["origin"] for h in record.history} == {"forget"}

    def test_ga_ignores_missing_retain_split(self, world, trained):
        corpus, vocab, split, scrubbed = world
        all_forget = cm.Split(forget_ids=split.forget_ids, retain_ids=frozenset(),
                              forget_fraction=1.0, seed=0)
        cfg = tiny_config(method="ga", unlearn_epochs=1)
        out, _ = orch.unlearn(cfg, trained, all_forget, scrubbed, corpus, vocab)
        assert M.params_id(out) != M.params_id(trained)

    def test_frul_requires_scrubbed(self, world, trained):
        corpus, vocab, split, _ = world
        cfg = tiny_config(method="frul")
        with pytest.raises(orch.OrchestratorError, match="scrub"):
            orch.unlearn(cfg, trained, split, None, corpus, vocab)

    def test_training_method_rejected(self, world, trained):
        corpus, vocab, split, scrubbed = world
        with pytest.raises(orch.OrchestratorError, match="unlearning"):
            orch.unlearn(tiny_config(method="finetune"), trained, split,
                         scrubbed, corpus, vocab)

    def test_empty_forget_rejected(self, world, trained):
        corpus, vocab, split, scrubbed = world
        empty = cm.Split(forget_ids=frozenset(), retain_ids=split.retain_ids,
                         forget_fraction=0.0, seed=0)
        with pytest.raises(orch.OrchestratorError, match="forget"):
            orch.unlearn(tiny_config(method="ga"), trained, empty, scrubbed,
                         corpus, vocab)

    def test_early_stop_triggers_on_weak_model(self, world):
        corpus, vocab, split, scrubbed = world
        cfg = tiny_config(method="gd", unlearn_epochs=20, early_stop_every=2)
        fresh = M.init_model(cfg.model_config(len(vocab)))
        _, record = orch.unlearn(cfg, fresh, split, scrubbed, corpus, vocab)
        assert record.stopped_early
        checks = [h for h in record.history if h["origin"] == "early_stop_check"]
        assert len(checks) == 1
        assert checks[0]["forget_answer_rouge"] <= 0.2
        assert max(h["epoch"] for h in record.history) == 1

    def test_deterministic(self, world, trained):
        corpus, vocab, split, scrubbed = world
        cfg = tiny_config(method="frul", unlearn_epochs=2)
        a, _ = orch.unlearn(cfg, trained, split, scrubbed, corpus, vocab)
        b, _ = orch.unlearn(cfg, trained, split, scrubbed, corpus, vocab)
        assert M.params_id(a) == M.params_id(b)

    def test_original_params_untouched(self, world, trained):
        corpus, vocab, split, scrubbed = world
        before = M.params_id(trained)
        cfg = tiny_config(method="frul", unlearn_epochs=1)
        orch.unlearn(cfg, trained, split, scrubbed, corpus, vocab)
        assert M.params_id(trained) == before


class TestRunRecord:
    def test_save_load_round_trip(self, tmp_path):
        rec = orch.RunRecord(config_hash="abc", method="frul")
        rec.log(step=0, origin="forget", total=1.5, lr=3e-4)
        rec.log(step=1, origin="retain", total=1.2, lr=3e-4)
        rec.wall_time = 2.5
        rec.final_checkpoint_id = "deadbeef"
        rec.stopped_early = True
        path = tmp_path / "rec.jsonl"
        rec.save(path)
        back = orch.RunRecord.load(path)
        assert back.config_hash == "abc"
        assert back.method == "frul"
        assert back.wall_time == 2.5
        assert back.final_checkpoint_id == "deadbeef"
        assert back.stopped_early
        assert back.history == rec.history

    def test_jsonl_one_step_per_line(self, tmp_path):
        rec = orch.RunRecord(config_hash="x", method="ga")
        rec.log(step=0, origin="forget", total=0.5, lr=1e-4)
        path = tmp_path / "rec.jsonl"
        rec.save(path)
        lines = [json.loads(l) for l in path.read_text().splitlines()]
        assert lines[0]["type"] == "meta"
        assert lines[1] == {"type": "step", "step": 0, "origin": "forget",
                            "total": 0.5, "lr": 1e-4}


class TestRunMatrix:
    def test_single_cell(self, world, trained, tmp_path):
        corpus, vocab, _, _ = world
        cfg = tiny_config(unlearn_epochs=1)
        rows = orch.run_matrix(cfg, corpus, vocab, tmp_path, fractions=(0.25,),
                               methods=("ga",), seeds=(1,), original=trained)
        assert len(rows) == 4
        csv_lines = (tmp_path / "matrix.csv").read_text().strip().splitlines()
        assert csv_lines[0] == "fraction,method,seed,split,channel,model_mean,ref_mean,ue"
        assert len(csv_lines) == 5
        manifest = json.loads((tmp_path / "matrix_manifest.json").read_text())
        assert manifest["0.25/ga/1"]["status"] == "done"

    def test_resume_skips_completed(self, world, trained, tmp_path, monkeypatch):
        corpus, vocab, _, _ = world
        cfg = tiny_config(unlearn_epochs=1)
        first = orch.run_matrix(cfg, corpus, vocab, tmp_path, fractions=(0.25,),
                                methods=("ga",), seeds=(1,), original=trained)

        def explode(*args, **kwargs):
            raise AssertionError("completed cell was re-run")

        monkeypatch.setattr(orch, "unlearn", explode)
        second = orch.run_matrix(cfg, corpus, vocab, tmp_path, fractions=(0.25,),
                                 methods=("ga",), seeds=(1,), original=trained)
        assert second == first

    def test_failure_recorded_and_sweep_continues(self, world, trained, tmp_path,
                                                  monkeypatch):
        corpus, vocab, _, _ = world
        cfg = tiny_config(unlearn_epochs=1)
        real_unlearn = orch.unlearn

        def flaky(config, *args, **kwargs):
            if config.method == "gd":
                raise orch.OrchestratorError("injected cell failure")
            return real_unlearn(config, *args, **kwargs)

        monkeypatch.setattr(orch, "unlearn", flaky)
        rows = orch.run_matrix(cfg, corpus, vocab, tmp_path, fractions=(0.25,),
                               methods=("gd", "ga"), seeds=(1,), original=trained)
        manifest = json.loads((tmp_path / "matrix_manifest.json").read_text())
        assert manifest["0.25/gd/1"]["status"] == "failed"
        assert "injected" in manifest["0.25/gd/1"]["error"]
        assert manifest["0.25/ga/1"]["status"] == "done"
        assert len(rows) == 4
