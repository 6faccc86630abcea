"""Tokenizer, vocabulary, and rendering tests."""

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from frul import corpus as corpus_mod
from frul import tokenizer as tok

WORD = st.from_regex(r"[a-z]{1,8}", fullmatch=True)
TEXT = st.lists(WORD, min_size=1, max_size=12).map(lambda ws: " ".join(ws) + " .")


@pytest.fixture(scope="module")
def small_corpus():
    return corpus_mod.generate_corpus(corpus_mod.CorpusSpec(n_entities=8, questions_per_entity=4, seed=3))


@pytest.fixture(scope="module")
def vocab(small_corpus):
    return tok.build_vocab(small_corpus)


class TestTokenize:
    def test_whitespace_split(self):
        assert tok.tokenize("alice was born in 1901 .") == ["alice", "was", "born", "in", "1901", "."]

    def test_punctuation_is_standalone(self):
        assert tok.tokenize("a b. c,d") == ["a", "b", ".", "c", ",", "d"]

    def test_empty(self):
        assert tok.tokenize("") == []
        assert tok.tokenize("   ") == []

    def test_detokenize_single_space(self):
        assert tok.detokenize(["a", "b", "."]) == "a b ."

    @given(TEXT)
    def test_round_trip_on_normalized_text(self, text):
        assert tok.detokenize(tok.tokenize(text)) == text


class TestVocabulary:
    def test_specials_occupy_first_indices(self, vocab):
        assert list(vocab.tokens[:6]) == list(tok.SPECIALS)
        assert vocab.index[tok.PAD] == 0
        assert vocab.index[tok.BOS] == 1
        assert vocab.index[tok.EOS] == 2
        assert vocab.index[tok.THINK_OPEN] == 3
        assert vocab.index[tok.THINK_CLOSE] == 4
        assert vocab.index[tok.ANSWER_SEP] == 5

    def test_sorted_after_specials(self, vocab):
        rest = list(vocab.tokens[6:])
        assert rest == sorted(rest)

    def test_placeholders_present(self, vocab):
        for p in tok.PLACEHOLDER_POOL:
            assert p in vocab.index

    def test_encode_decode_round_trip(self, vocab, small_corpus):
        words = tok.tokenize(small_corpus.examples[0].cot)
        ids = vocab.encode(words)
        assert vocab.decode(ids) == words

    def test_oov_raises_with_token_named(self, vocab):
        with pytest.raises(tok.TokenizerError, match="zzznotaword"):
            vocab.encode(["zzznotaword"])

    def test_decode_out_of_range(self, vocab):
        with pytest.raises(tok.TokenizerError):
            vocab.decode([len(vocab.tokens)])

    def test_save_load_round_trip(self, vocab, tmp_path):
        path = tmp_path / "vocab.json"
        vocab.save(path)
        loaded = tok.Vocabulary.load(path)
        assert loaded.tokens == vocab.tokens

    def test_load_rejects_corrupt_specials(self, vocab, tmp_path):
        path = tmp_path / "vocab.json"
        vocab.save(path)
        payload = json.loads(path.read_text())
        payload["specials"][0] = "<wrong>"
        path.write_text(json.dumps(payload))
        with pytest.raises(tok.TokenizerError):
            tok.Vocabulary.load(path)

    def test_load_rejects_unknown_version(self, vocab, tmp_path):
        path = tmp_path / "vocab.json"
        vocab.save(path)
        payload = json.loads(path.read_text())
        payload["version"] = 99
        path.write_text(json.dumps(payload))
        with pytest.raises(tok.TokenizerError):
            tok.Vocabulary.load(path)

    def test_build_vocab_deterministic(self, small_corpus):
        a = tok.build_vocab(small_corpus)
        b = tok.build_vocab(small_corpus)
        assert a.tokens == b.tokens

    def test_build_vocab_empty_raises(self):
        with pytest.raises(tok.TokenizerError):
            tok.build_vocab([])


class TestRendering:
    def test_layout(self, vocab, small_corpus):
        ex = small_corpus.examples[0]
        r = tok.render_example(ex, vocab)
        toks = vocab.decode(r.token_ids.tolist())
        assert toks[0] == tok.BOS
        assert toks[-1] == tok.EOS
        i_open = toks.index(tok.THINK_OPEN)
        i_close = toks.index(tok.THINK_CLOSE)
        i_ans = toks.index(tok.ANSWER_SEP)
        assert 0 < i_open < i_close < i_ans < len(toks) - 1
        assert tok.detokenize(toks[1:i_open]) == ex.question
        assert tok.detokenize(toks[i_open + 1:i_close]) == ex.cot
        assert tok.detokenize(toks[i_ans + 1:-1]) == ex.answer

    def test_role_mask(self, vocab, small_corpus):
        ex = small_corpus.examples[0]
        r = tok.render_example(ex, vocab)
        toks = vocab.decode(r.token_ids.tolist())
        i_open = toks.index(tok.THINK_OPEN)
        i_close = toks.index(tok.THINK_CLOSE)
        i_ans = toks.index(tok.ANSWER_SEP)
        assert all(r.role_mask[1:i_open] == tok.ROLE_PROMPT)
        assert all(r.role_mask[i_open + 1:i_close] == tok.ROLE_REASONING)
        assert all(r.role_mask[i_ans + 1:-1] == tok.ROLE_ANSWER)
        for i in (0, i_open, i_close, i_ans, len(toks) - 1):
            assert r.role_mask[i] == tok.ROLE_SPECIAL

    def test_alignment_spans_recover_source_text(self, vocab, small_corpus):
        ex = small_corpus.examples[1]
        r = tok.render_example(ex, vocab)
        fields = {"question": ex.question, "cot": ex.cot, "answer": ex.answer}
        toks = vocab.decode(r.token_ids.tolist())
        for pos, (fieldname, start, end) in enumerate(r.alignment):
            if fieldname == "special":
                continue
            assert fields[fieldname][start:end] == toks[pos]

    def test_reasoning_start(self, vocab, small_corpus):
        ex = small_corpus.examples[0]
        r = tok.render_example(ex, vocab)
        toks = vocab.decode(r.token_ids.tolist())
        assert toks[r.reasoning_start - 1] == tok.THINK_OPEN

    def test_render_qa_has_no_reasoning(self, vocab, small_corpus):
        ex = small_corpus.examples[0]
        r = tok.render_qa(ex, vocab)
        toks = vocab.decode(r.token_ids.tolist())
        assert tok.THINK_OPEN not in toks
        assert tok.detokenize(toks[toks.index(tok.ANSWER_SEP) + 1:-1]) == ex.answer

    def test_render_with_cot_substitutes_trace(self, vocab, small_corpus):
        ex = small_corpus.examples[0]
        other = "PERSON_A was born in the year VALUE_1 ."
        r = tok.render_with_cot(ex, other, vocab)
        toks = vocab.decode(r.token_ids.tolist())
        i_open = toks.index(tok.THINK_OPEN)
        i_close = toks.index(tok.THINK_CLOSE)
        assert tok.detokenize(toks[i_open + 1:i_close]) == other

    def test_renders_are_int64(self, vocab, small_corpus):
        r = tok.render_example(small_corpus.examples[0], vocab)
        assert r.token_ids.dtype == np.int64


class TestSentences:
    def test_split_sentences(self):
        text = "a b . c d e . f ."
        assert tok.split_sentences(tok.tokenize(text)) == [
            ["a", "b", "."], ["c", "d", "e", "."], ["f", "."]]

    def test_sentence_token_bounds(self):
        toks = tok.tokenize("a b . c d e . f .")
        assert tok.sentence_token_bounds(toks) == [(0, 3), (3, 7), (7, 9)]

    def test_trailing_fragment_without_period(self):
        toks = tok.tokenize("a b . c d")
        assert tok.sentence_token_bounds(toks) == [(0, 3), (3, 5)]

    @given(st.lists(st.sampled_from(["a", "b", "c", "."]), min_size=1, max_size=20))
    def test_bounds_tile_the_sequence(self, toks):
        bounds = tok.sentence_token_bounds(toks)
        assert bounds[0][0] == 0
        assert bounds[-1][1] == len(toks)
        for (a0, a1), (b0, b1) in zip(bounds, bounds[1:]):
            assert a1 == b0
            assert a0 < a1
