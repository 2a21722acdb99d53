"""Fabricate a complete synthetic attack setup on disk.

A templated clinical corpus is split into leaked, external and held-out
evaluation texts; the leaked and evaluation texts are embedded by a hidden
victim backend. The attacker-side files never carry the victim's identity.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clinical import generate_clinical_corpus
from .data import LeakedPair, save_corpus, save_leak
from .encoders import encode_batch, get_backend
from .errors import DataError


@dataclass
class SyntheticSetup:
    leak_path: Path
    corpus_path: Path
    eval_path: Path
    oracle_path: Path


def _embed(victim, texts, batch=256):
    rows = []
    for i in range(0, len(texts), batch):
        rows.append(encode_batch(victim, texts[i : i + batch]).double().numpy())
    return np.concatenate(rows)


def make_synthetic_setup(out_dir, n_leak=200, n_external=2000, n_eval=200, victim="victim:48:1", seed=0):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    texts = list(dict.fromkeys(generate_clinical_corpus(3 * (n_leak + n_external + n_eval), seed)))
    need = n_leak + n_external + n_eval
    if len(texts) < need:
        raise DataError(f"generator produced only {len(texts)} distinct notes, need {need}")
    leak_t = texts[:n_leak]
    ext_t = texts[n_leak : n_leak + n_external]
    eval_t = texts[n_leak + n_external : need]
    backend = get_backend(victim) if isinstance(victim, str) else victim
    setup = SyntheticSetup(out_dir / "leak.jsonl", out_dir / "corpus.jsonl", out_dir / "eval.jsonl",
                           out_dir / "oracle.jsonl")
    save_leak(setup.leak_path, [LeakedPair(t, e) for t, e in zip(leak_t, _embed(backend, leak_t))])
    save_corpus(setup.corpus_path, ext_t)
    save_leak(setup.eval_path, [LeakedPair(t, e) for t, e in zip(eval_t, _embed(backend, eval_t))])
    save_leak(setup.oracle_path, [LeakedPair(t, e) for t, e in zip(ext_t, _embed(backend, ext_t))])
    return setup
