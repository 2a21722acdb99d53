"""Word-level tokenization shared by the toy encoders, the decoder and the metrics."""

import re
import string

_WORD_RE = re.compile(r"\w+|[^\w\s]")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def word_tokens(text):
    return _WORD_RE.findall(text.lower())


def detokenize(tokens):
    text = " ".join(tokens)
    text = re.sub(r"\s*([-/'])\s*", r"\1", text)
    text = re.sub(r"\s+([.,!?;:%)])", r"\1", text)
    text = re.sub(r"\(\s+", "(", text)
    return text


def rouge_tokens(text):
    """Lowercase, strip punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


def normalize_surface(text):
    return " ".join(text.lower().split())


def first_sentence(text):
    match = re.search(r"(?<=[.!?])\s", text.strip())
    return text.strip()[: match.start()] if match else text.strip()
