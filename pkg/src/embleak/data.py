"""Leaked pairs, external corpora, surrogate datasets and text augmentation.

File formats (UTF-8, one JSON object per line):

* leak file:   ``{"text": str, "embedding": [float, ...]}``
* corpus file: ``{"text": str}``
"""

import hashlib
import json
import logging
import math
import os
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import AugmentationError, DimensionError, ExternalServiceError, ParseError, UsageError
from .text import first_sentence

log = logging.getLogger(__name__)

STRATEGIES = ("llm", "swap", "delete", "replace", "insert", "none")

AUGMENT_PROMPT = (
    "Please rewrite the original sentence with synonyms within 2 words.\n"
    "Please output 5 different new sentences.\n"
    "Please simply modify the original sentence without changing more than 2 words.\n"
    "\n"
    "Example:\n"
    "Original sentence:\n"
    "{ORIGINAL SENTENCE}\n"
    "New sentence:\n"
    "{NEW SENTENCE 1}\n"
    "{NEW SENTENCE 2}\n"
    "{NEW SENTENCE 3}\n"
    "{NEW SENTENCE 4}\n"
    "{NEW SENTENCE 5}\n"
    "\n"
    "Original sentence:\n"
    "{INPUT SENTENCE}\n"
    "New sentence:"
)
LLM_VARIANTS_PER_CALL = 5


@dataclass
class LeakedPair:
    text: str
    embedding: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, LeakedPair)
            and self.text == other.text
            and np.array_equal(self.embedding, other.embedding)
        )


@dataclass
class SurrogatePair:
    text: str
    embedding: np.ndarray
    origin: str = "external"


def _read_jsonl(path):
    path = Path(path)
    try:
        fh = path.open("r", encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ParseError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def _clean_text(obj, path, lineno):
    text = obj.get("text")
    if not isinstance(text, str):
        raise ParseError(f"{path}:{lineno}: missing string field 'text'")
    text = text.strip()
    if not text:
        raise ParseError(f"{path}:{lineno}: empty text")
    return text


def load_leak(path):
    pairs, width = [], None
    for lineno, obj in _read_jsonl(path):
        text = _clean_text(obj, path, lineno)
        emb = obj.get("embedding")
        try:
            vec = np.asarray(emb, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{path}:{lineno}: embedding is not a numeric list") from exc
        if vec.ndim != 1 or vec.size == 0:
            raise ParseError(f"{path}:{lineno}: embedding must be a non-empty flat list")
        if not np.isfinite(vec).all():
            raise ParseError(f"{path}:{lineno}: embedding has non-finite values")
        if width is None:
            width = vec.size
        elif vec.size != width:
            raise DimensionError(f"{path}:{lineno}: embedding width {vec.size}, expected {width}")
        pairs.append(LeakedPair(text, vec))
    return pairs


def _atomic_write_lines(path, lines):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")
    os.replace(tmp, path)


def save_leak(path, pairs):
    _atomic_write_lines(
        path,
        (json.dumps({"text": p.text, "embedding": [float(x) for x in p.embedding]}) for p in pairs),
    )


def load_corpus(path):
    return [_clean_text(obj, path, lineno) for lineno, obj in _read_jsonl(path)]


def save_corpus(path, texts):
    _atomic_write_lines(path, (json.dumps({"text": t}) for t in texts))


def leak_matrix(pairs):
    return np.stack([p.embedding for p in pairs]) if pairs else np.zeros((0, 0))


def sample_pairs(items, n, seed):
    """Deterministic sample of ``n`` items without replacement, in sampled order."""
    if n < 1:
        raise UsageError(f"sample size must be >= 1, got {n}")
    if n > len(items):
        raise UsageError(f"sample size {n} exceeds available {len(items)} records")
    idx = np.random.default_rng(seed).permutation(len(items))[:n]
    return [items[i] for i in idx]


def preprocess(text, truncate_first_sentence=False):
    text = " ".join(text.split())
    return first_sentence(text) if truncate_first_sentence else text


@torch.no_grad()
def build_surrogate_dataset(model, corpus, batch_size=64, origin="external"):
    """Embed ``corpus`` with the current surrogate. Call again after every adapter update."""
    if not corpus:
        raise UsageError("external corpus is empty")
    out = []
    for i in range(0, len(corpus), batch_size):
        chunk = corpus[i : i + batch_size]
        emb = model(chunk).detach().cpu().numpy()
        out.extend(SurrogatePair(t, e, origin) for t, e in zip(chunk, emb))
    return out


@dataclass(frozen=True)
class AugmentationSpec:
    strategy: str = "none"
    multiplier: int = 1
    seed: int = 0
    replace_mode: str = "random"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise UsageError(f"unknown augmentation strategy {self.strategy!r}")
        if self.multiplier < 0:
            raise UsageError("augmentation multiplier must be >= 0")
        if self.replace_mode not in ("random", "synonym"):
            raise UsageError(f"unknown replace mode {self.replace_mode!r}")


def _text_rng(spec, text, k):
    digest = hashlib.blake2b(f"{spec.seed}\x1f{spec.strategy}\x1f{k}\x1f{text}".encode(), digest_size=8)
    return random.Random(int.from_bytes(digest.digest(), "little"))


def corpus_vocabulary(texts):
    return sorted({tok for t in texts for tok in t.split()})


def format_augment_prompt(text):
    return AUGMENT_PROMPT.replace("{INPUT SENTENCE}", text)


_ENUM_RE = re.compile(r"^\s*(?:\d+[.)]|[-*])\s+")


def parse_llm_variants(reply):
    lines = [_ENUM_RE.sub("", ln).strip() for ln in reply.splitlines()]
    return [ln for ln in lines if ln]


def augment(text, spec: AugmentationSpec, vocabulary=None, llm=None, synonyms=None):
    """Return ``spec.multiplier`` variants of ``text`` (empty list when the text is too short)."""
    if spec.strategy == "none" or spec.multiplier == 0:
        return []
    if spec.strategy == "llm":
        return _augment_llm(text, spec, llm)
    tokens = text.split()
    need = 1 if spec.strategy == "insert" else 2
    if len(tokens) < need:
        log.warning("skipping %s augmentation of %r: needs at least %d tokens", spec.strategy, text, need)
        return []
    if spec.strategy in ("replace", "insert") and not vocabulary:
        raise UsageError(f"{spec.strategy} augmentation needs a corpus vocabulary")
    out = []
    for k in range(spec.multiplier):
        rng = _text_rng(spec, text, k)
        toks = list(tokens)
        if spec.strategy == "swap":
            i, j = rng.sample(range(len(toks)), 2)
            toks[i], toks[j] = toks[j], toks[i]
        elif spec.strategy == "delete":
            del toks[rng.randrange(len(toks))]
        elif spec.strategy == "replace":
            i = rng.randrange(len(toks))
            if spec.replace_mode == "synonym":
                options = (synonyms or {}).get(toks[i].lower())
                toks[i] = rng.choice(sorted(options)) if options else toks[i]
            else:
                toks[i] = rng.choice(vocabulary)
        elif spec.strategy == "insert":
            toks.insert(rng.randrange(len(toks) + 1), rng.choice(vocabulary))
        out.append(" ".join(toks))
    return out


def _augment_llm(text, spec, llm):
    if llm is None:
        raise UsageError("llm augmentation needs a completion client")
    prompt = format_augment_prompt(text)
    out = []
    for _ in range(math.ceil(spec.multiplier / LLM_VARIANTS_PER_CALL)):
        try:
            reply = llm.complete(prompt)
        except ExternalServiceError as exc:
            raise AugmentationError(f"llm augmentation failed: {exc}") from exc
        variants = parse_llm_variants(reply)
        if not variants:
            raise AugmentationError("llm returned no usable lines")
        out.extend(variants[:LLM_VARIANTS_PER_CALL])
    return out[: spec.multiplier]


def augment_corpus(texts, spec: AugmentationSpec, vocabulary=None, llm=None, synonyms=None):
    if spec.strategy in ("replace", "insert") and vocabulary is None:
        vocabulary = corpus_vocabulary(texts)
    out = []
    for t in texts:
        out.extend(augment(t, spec, vocabulary=vocabulary, llm=llm, synonyms=synonyms))
    return out


@dataclass
class SurrogatePool:
    """Texts feeding the surrogate path: the external corpus plus augmented leak texts."""

    external: list
    augmented: list = field(default_factory=list)

    @property
    def texts(self):
        return self.external + self.augmented

    @property
    def origins(self):
        return ["external"] * len(self.external) + ["augmented"] * len(self.augmented)

    def __len__(self):
        return len(self.external) + len(self.augmented)
