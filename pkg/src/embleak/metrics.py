"""Reconstruction quality and privacy-leakage metrics."""

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import AlignmentError, ExternalServiceError, ExtractorError, JudgeProtocolError, UsageError
from .text import normalize_surface, rouge_tokens

log = logging.getLogger(__name__)

JUDGE_PROMPT = (
    "Output a number between 0 and 1 describing the semantic similiarity, fluent ,and coherent "
    "between the following two sentences: please output the answer without any explaination.\n"
    "{pred sentence}\n"
    "{ground truth sentence}"
)

ALL_METRICS = ("rougeL", "ppl", "cos", "llm_eval", "nerr")
DEFAULT_METRICS = ("rougeL", "ppl", "cos")


def _lcs(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(reference, candidate):
    ref, cand = rouge_tokens(reference), rouge_tokens(candidate)
    if not ref or not cand:
        return 0.0
    lcs = _lcs(ref, cand)
    p, r = lcs / len(cand), lcs / len(ref)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def perplexity_from_nll(nll_sums, token_counts):
    total = sum(token_counts)
    if total == 0:
        raise UsageError("perplexity over zero tokens")
    return math.exp(sum(nll_sums) / total)


def perplexity(texts, scorer):
    """``exp`` of the mean per-token NLL over every token of every text.

    ``scorer.token_logprobs(text)`` returns the natural-log probability of each token.
    """
    if not texts:
        raise UsageError("perplexity of an empty corpus")
    sums, counts = [], []
    for t in texts:
        lps = list(scorer.token_logprobs(t))
        sums.append(-sum(lps))
        counts.append(len(lps))
    return perplexity_from_nll(sums, counts)


class DecoderScorer:
    """Scores text with the attack decoder conditioned on a zero vector."""

    def __init__(self, decoder, tokenizer, max_len=64):
        self.decoder = decoder
        self.tokenizer = tokenizer
        self.max_len = max_len

    @torch.no_grad()
    def token_logprobs(self, text):
        from .decoder import token_nll

        ids = self.tokenizer.encode(text, self.max_len)
        if len(ids) < 2:
            return []
        dtype = next(self.decoder.parameters()).dtype
        nll, mask = token_nll(self.decoder, torch.zeros(1, self.decoder.cond_dim, dtype=dtype), [ids])
        return (-nll[0][mask[0]]).tolist()


def cosine(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def embedding_cos_values(references, candidates, evaluator):
    if len(references) != len(candidates):
        raise AlignmentError(f"{len(references)} references but {len(candidates)} candidates")
    if not references:
        return []
    from .encoders import encode_batch

    # reconstructions can be empty strings; give the encoder a placeholder and score 0
    safe = [c if c.strip() else "∅" for c in candidates]
    ref = encode_batch(evaluator, list(references)).double().numpy()
    cand = encode_batch(evaluator, safe).double().numpy()
    return [0.0 if not c.strip() else cosine(r, e) for c, r, e in zip(candidates, ref, cand)]


def embedding_cos(references, candidates, evaluator):
    vals = embedding_cos_values(references, candidates, evaluator)
    return float(np.mean(vals)) if vals else 0.0


_FLOAT_RE = re.compile(r"^[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?$")


def format_judge_prompt(reference, candidate):
    return JUDGE_PROMPT.replace("{pred sentence}", candidate).replace("{ground truth sentence}", reference)


def parse_judge_score(reply):
    token = reply.strip().rstrip(".")
    if not _FLOAT_RE.match(token):
        raise JudgeProtocolError(f"judge reply is not a single number: {reply!r}")
    value = float(token)
    if not 0.0 <= value <= 1.0:
        log.warning("judge score %s outside [0, 1]; clamping", value)
        value = min(1.0, max(0.0, value))
    return value


def llm_eval(reference, candidate, judge):
    return parse_judge_score(judge.complete(format_judge_prompt(reference, candidate)))


def nerr(reference, candidate, extractor):
    """Per-category fraction of reference entities found in the candidate (normalized substring match)."""
    try:
        ents = extractor.extract(reference)
    except Exception as exc:
        raise ExtractorError(f"entity extractor failed: {exc}") from exc
    cand = normalize_surface(candidate)
    found, total = {}, {}
    for cat, surface in ents:
        total[cat] = total.get(cat, 0) + 1
        found[cat] = found.get(cat, 0) + (normalize_surface(surface) in cand)
    return {cat: found[cat] / total[cat] for cat in total}


def stealing_rate(transfer_score, oracle_score):
    if not oracle_score > 0:
        raise UsageError(f"oracle score must be positive, got {oracle_score}")
    return transfer_score / oracle_score


@dataclass
class AttackReport:
    n_examples: int
    rougeL: float | None = None
    ppl: float | None = None
    cos: float | None = None
    llm_eval: float | None = None
    nerr: dict | None = None
    llm_eval_failures: int = 0
    examples: list = field(default_factory=list)

    def aggregate(self):
        out = {"n_examples": self.n_examples}
        for key in ("rougeL", "ppl", "cos", "llm_eval", "nerr"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        if self.llm_eval is not None or self.llm_eval_failures:
            out["llm_eval_failures"] = self.llm_eval_failures
        return out

    def to_json(self):
        return {"aggregate": self.aggregate(), "examples": self.examples}

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")


def aggregate_rows(rows, metrics):
    """Recompute aggregates from per-example rows (reports round-trip through this)."""
    agg = {"n_examples": len(rows)}
    if not rows:
        return agg
    if "rougeL" in metrics:
        agg["rougeL"] = float(np.mean([r["rougeL"] for r in rows]))
    if "cos" in metrics:
        agg["cos"] = float(np.mean([r["cos"] for r in rows]))
    if "ppl" in metrics:
        agg["ppl"] = perplexity_from_nll([r["nll_sum"] for r in rows], [r["n_tokens"] for r in rows])
    if "llm_eval" in metrics:
        scored = [r["llm_eval"] for r in rows if r.get("llm_eval") is not None]
        agg["llm_eval"] = float(np.mean(scored)) if scored else None
        agg["llm_eval_failures"] = len(rows) - len(scored)
    if "nerr" in metrics:
        cats = sorted({c for r in rows for c in r["nerr"]})
        agg["nerr"] = {c: float(np.mean([r["nerr"][c] for r in rows if c in r["nerr"]])) for c in cats}
    return agg


def evaluate_pairs(references, candidates, metrics=DEFAULT_METRICS, *, scorer=None, evaluator=None,
                   judge=None, extractor=None):
    """Score aligned (reference, candidate) pairs; returns an :class:`AttackReport`."""
    metrics = tuple(metrics)
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise UsageError(f"unknown metrics: {sorted(unknown)}")
    if len(references) != len(candidates):
        raise AlignmentError(f"{len(references)} references but {len(candidates)} candidates")
    rows = [{"reference": r, "candidate": c} for r, c in zip(references, candidates)]
    if "rougeL" in metrics:
        for row in rows:
            row["rougeL"] = rouge_l(row["reference"], row["candidate"])
    if "ppl" in metrics:
        if scorer is None:
            raise UsageError("ppl needs a scorer")
        for row in rows:
            lps = list(scorer.token_logprobs(row["candidate"]))
            row["nll_sum"] = -float(sum(lps))
            row["n_tokens"] = len(lps)
    if "cos" in metrics:
        if evaluator is None:
            raise UsageError("cos needs an evaluator encoder")
        for row, v in zip(rows, embedding_cos_values(references, candidates, evaluator)):
            row["cos"] = v
    if "llm_eval" in metrics:
        if judge is None:
            raise UsageError("llm_eval needs a judge client")
        for row in rows:
            try:
                row["llm_eval"] = llm_eval(row["reference"], row["candidate"], judge)
            except ExternalServiceError as exc:
                log.warning("llm judge skipped an example: %s", exc)
                row["llm_eval"] = None
    if "nerr" in metrics:
        if extractor is None:
            raise UsageError("nerr needs an entity extractor")
        for row in rows:
            row["nerr"] = nerr(row["reference"], row["candidate"], extractor)
    agg = aggregate_rows(rows, metrics)
    return AttackReport(
        n_examples=len(rows),
        rougeL=agg.get("rougeL"),
        ppl=agg.get("ppl"),
        cos=agg.get("cos"),
        llm_eval=agg.get("llm_eval"),
        nerr=agg.get("nerr"),
        llm_eval_failures=agg.get("llm_eval_failures", 0),
        examples=rows,
    )
