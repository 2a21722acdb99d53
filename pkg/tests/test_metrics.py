import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embleak.clinical import ClinicalRuleExtractor, generate_clinical_corpus
from embleak.encoders import HashingBackbone
from embleak.errors import AlignmentError, JudgeProtocolError, UsageError
from embleak.metrics import (
    aggregate_rows,
    cosine,
    embedding_cos,
    evaluate_pairs,
    format_judge_prompt,
    llm_eval,
    nerr,
    parse_judge_score,
    perplexity,
    perplexity_from_nll,
    rouge_l,
    stealing_rate,
)

from oracles import lcs_bruteforce


class UniformScorer:
    def __init__(self, vocab_size):
        self.v = vocab_size

    def token_logprobs(self, text):
        return [-math.log(self.v)] * (len(text.split()) + 1)


class FixedJudge:
    def __init__(self, reply):
        self.reply = reply

    def complete(self, prompt):
        return self.reply


@pytest.mark.parametrize(
    "ref, cand, expected",
    [("the cat sat", "the cat sat", 1.0), ("the cat sat", "dogs run far", 0.0), ("a b c", "a b d", 2 / 3),
     ("The cat, sat!", "the CAT sat", 1.0), ("a b", "", 0.0)],
)
def test_rouge_l_hand_cases(ref, cand, expected):
    assert rouge_l(ref, cand) == pytest.approx(expected)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.sampled_from("abcd"), min_size=1, max_size=6), st.lists(st.sampled_from("abcd"), min_size=1,
                                                                           max_size=6))
def test_rouge_l_matches_bruteforce_lcs(a, b):
    lcs = lcs_bruteforce(a, b)
    p, r = lcs / len(b), lcs / len(a)
    expected = 0.0 if lcs == 0 else 2 * p * r / (p + r)
    assert rouge_l(" ".join(a), " ".join(b)) == pytest.approx(expected)
    assert rouge_l(" ".join(a), " ".join(b)) == pytest.approx(rouge_l(" ".join(b), " ".join(a)))


@pytest.mark.parametrize("v", [2, 17, 50257])
def test_perplexity_uniform_equals_vocab(v):
    assert perplexity(["a b c", "d", "e f g h i"], UniformScorer(v)) == pytest.approx(v, rel=1e-12)


def test_perplexity_errors():
    with pytest.raises(UsageError):
        perplexity([], UniformScorer(3))
    with pytest.raises(UsageError):
        perplexity_from_nll([0.0], [0])


def test_cosine_hand_vectors():
    assert cosine([1, 0], [1, 1]) == pytest.approx(1 / math.sqrt(2))
    assert cosine([0, 0], [1, 1]) == 0.0


def test_embedding_cos_identity_and_empty_candidate():
    ev = HashingBackbone(16, 7)
    assert embedding_cos(["a b", "c d e"], ["a b", "c d e"], ev) == pytest.approx(1.0)
    assert embedding_cos(["a b"], [""], ev) == 0.0
    with pytest.raises(AlignmentError):
        embedding_cos(["a"], ["a", "b"], ev)


def test_judge_prompt_substitution_order():
    p = format_judge_prompt("GROUND", "PRED")
    assert p.endswith("explaination.\nPRED\nGROUND")


@pytest.mark.parametrize("reply, value", [("0.85", 0.85), (" 1 ", 1.0), ("0.5.", 0.5), ("1.2", 1.0), ("-3", 0.0)])
def test_judge_parse(reply, value):
    assert parse_judge_score(reply) == value


def test_judge_clamp_warns(caplog):
    assert llm_eval("r", "c", FixedJudge("1.2")) == 1.0
    assert "clamping" in caplog.text


def test_judge_rejects_prose():
    with pytest.raises(JudgeProtocolError):
        llm_eval("r", "c", FixedJudge("similarity is high"))


def test_nerr_hand_cases():
    ex = ClinicalRuleExtractor()
    ref = "67 year-old male with a history of obesity who presents with chest pain."
    assert nerr(ref, ref, ex) == {"age": 1.0, "sex": 1.0, "history": 1.0, "symptom": 1.0}
    partial = nerr(ref, "a male who presents with fever and obesity", ex)
    assert partial == {"age": 0.0, "sex": 1.0, "history": 1.0, "symptom": 0.0}
    assert nerr("nothing clinical here", "x", ex) == {}


def test_extractor_categories_on_generated_notes():
    ex = ClinicalRuleExtractor()
    for note in generate_clinical_corpus(30, seed=5):
        cats = {c for c, _ in ex.extract(note)}
        assert {"age", "sex", "symptom"} <= cats


def test_stealing_rate():
    assert stealing_rate(0.3, 0.6) == 0.5
    assert stealing_rate(0.9, 0.6) == pytest.approx(1.5)
    with pytest.raises(UsageError):
        stealing_rate(0.3, 0.0)


def test_evaluate_pairs_toggles_and_roundtrip(tmp_path):
    refs = ["the cat sat", "a b c"]
    cands = ["the cat sat", "a b d"]
    rep = evaluate_pairs(refs, cands, ["rougeL"])
    assert rep.aggregate() == {"n_examples": 2, "rougeL": pytest.approx((1 + 2 / 3) / 2)}
    full = evaluate_pairs(refs, cands, ["rougeL", "ppl", "cos", "llm_eval"], scorer=UniformScorer(9),
                          evaluator=HashingBackbone(8), judge=FixedJudge("0.5"))
    assert full.ppl == pytest.approx(9)
    assert full.llm_eval == 0.5 and full.llm_eval_failures == 0
    full.save(tmp_path / "r.json")
    saved = json.loads((tmp_path / "r.json").read_text())
    assert aggregate_rows(saved["examples"], ["rougeL", "ppl", "cos", "llm_eval"]) == pytest.approx(saved["aggregate"])


def test_ppl_aggregate_pools_tokens():
    class Scorer:
        def token_logprobs(self, text):
            return [-1.0] if text == "short" else [-3.0] * 3

    rep = evaluate_pairs(["r", "r"], ["short", "long one"], ["ppl"], scorer=Scorer())
    assert rep.ppl == pytest.approx(math.exp((1 + 9) / 4))


def test_judge_failures_are_counted():
    rep = evaluate_pairs(["a", "b"], ["a", "b"], ["llm_eval"], judge=FixedJudge("no idea"))
    assert rep.llm_eval is None and rep.llm_eval_failures == 2


def test_evaluate_pairs_requires_backends():
    with pytest.raises(UsageError):
        evaluate_pairs(["a"], ["a"], ["ppl"])
    with pytest.raises(UsageError):
        evaluate_pairs(["a"], ["a"], ["bleu"])
    with pytest.raises(AlignmentError):
        evaluate_pairs(["a"], [], ["rougeL"])
