"""Embedding-to-text inversion decoder.

The conditioning embedding is mapped by one learned affine projection into the
decoder's hidden width and occupies a single prefix position; the gold
sequence follows, starting with BOS. Position ``i`` of the output predicts
token ``i+1`` of the sequence, so the prefix position itself is never scored.

Two decoders share this interface:

* :class:`ToyDecoder` - small word-level transformer for tests and toy runs
* :class:`HFCausalDecoder` - a pretrained causal LM (DialoGPT-small by default)
"""

import math
from collections import Counter
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import AlignmentError, UsageError, VocabularyError
from .text import detokenize, word_tokens

DEFAULT_HF_DECODER = "microsoft/DialoGPT-small"

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ["<pad>", "<bos>", "<eos>", "<unk>"]


class WordTokenizer:
    pad_id, bos_id, eos_id, unk_id = PAD, BOS, EOS, UNK

    def __init__(self, vocab):
        if list(vocab[:4]) != SPECIALS:
            raise VocabularyError("vocabulary must start with the special tokens")
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}

    @classmethod
    def build(cls, texts, max_size=None, min_freq=1):
        counts = Counter(tok for t in texts for tok in word_tokens(t))
        words = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
        if max_size is not None:
            words = words[: max(0, max_size - len(SPECIALS))]
        return cls(SPECIALS + words)

    def __len__(self):
        return len(self.vocab)

    def encode(self, text, max_len=None):
        ids = [BOS] + [self.index.get(t, UNK) for t in word_tokens(text)] + [EOS]
        if max_len is not None:
            ids = ids[:max_len]
        return ids

    def decode(self, ids):
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.vocab[i])
        return detokenize(words)

    def to_dict(self):
        return {"kind": "word", "vocab": self.vocab}


class ToyDecoder(nn.Module):
    """Small pre-norm causal transformer; every position can attend to the prefix."""

    def __init__(self, vocab_size, cond_dim, hidden=128, layers=2, heads=4, max_positions=130, generator=None):
        super().__init__()
        self.vocab_size = vocab_size
        self.cond_dim = cond_dim
        self.max_positions = max_positions
        self.config = {"kind": "toy", "vocab_size": vocab_size, "hidden": hidden, "layers": layers,
                       "heads": heads, "max_positions": max_positions}
        with torch.random.fork_rng(devices=[]):
            if generator is not None:
                torch.manual_seed(int(torch.randint(0, 2**62, (1,), generator=generator)))
            self.proj = nn.Linear(cond_dim, hidden)
            self.embed = nn.Embedding(vocab_size, hidden)
            self.pos = nn.Embedding(max_positions, hidden)
            layer = nn.TransformerEncoderLayer(hidden, heads, 4 * hidden, dropout=0.0, batch_first=True,
                                               norm_first=True, activation="gelu")
            self.core = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
            self.norm = nn.LayerNorm(hidden)
            self.head = nn.Linear(hidden, vocab_size)

    def forward(self, cond, inputs):
        """``cond`` (B, d), ``inputs`` (B, L) token ids -> logits (B, L, V)."""
        prefix = self.proj(cond.to(self.proj.weight.dtype)).unsqueeze(1)
        x = torch.cat([prefix, self.embed(inputs)], dim=1)
        n = x.shape[1]
        if n > self.max_positions:
            raise UsageError(f"sequence of {n} positions exceeds the decoder limit {self.max_positions}")
        x = x + self.pos(torch.arange(n, device=x.device))
        mask = torch.triu(torch.full((n, n), float("-inf"), dtype=x.dtype, device=x.device), diagonal=1)
        return self.head(self.norm(self.core(x, mask=mask)))[:, 1:]


class HFCausalDecoder(nn.Module):
    """Pretrained causal LM fed through ``inputs_embeds`` with a projected embedding prefix."""

    def __init__(self, identifier, cond_dim):
        super().__init__()
        from transformers import AutoModelForCausalLM

        self.lm = AutoModelForCausalLM.from_pretrained(identifier)
        hidden = self.lm.get_input_embeddings().embedding_dim
        self.vocab_size = self.lm.get_input_embeddings().num_embeddings
        self.cond_dim = cond_dim
        self.config = {"kind": "hf", "identifier": identifier, "cond_dim": cond_dim}
        self.proj = nn.Linear(cond_dim, hidden)

    def forward(self, cond, inputs):
        prefix = self.proj(cond.to(self.proj.weight.dtype)).unsqueeze(1)
        x = torch.cat([prefix, self.lm.get_input_embeddings()(inputs)], dim=1)
        return self.lm(inputs_embeds=x).logits[:, 1:]


class HFTokenizer:
    """GPT-2 style tokenizer wrapper; the model's EOS doubles as BOS."""

    def __init__(self, identifier):
        from transformers import AutoTokenizer

        self.identifier = identifier
        self.tok = AutoTokenizer.from_pretrained(identifier)
        self.eos_id = self.tok.eos_token_id
        self.bos_id = self.tok.bos_token_id if self.tok.bos_token_id is not None else self.eos_id
        self.pad_id = self.eos_id
        self.unk_id = self.tok.unk_token_id

    def __len__(self):
        return len(self.tok)

    def encode(self, text, max_len=None):
        ids = [self.bos_id] + self.tok.encode(text) + [self.eos_id]
        return ids[:max_len] if max_len is not None else ids

    def decode(self, ids):
        ids = [int(i) for i in ids]
        if ids and ids[0] == self.bos_id:
            ids = ids[1:]
        if self.eos_id in ids:
            ids = ids[: ids.index(self.eos_id)]
        return self.tok.decode(ids, skip_special_tokens=True).strip()

    def to_dict(self):
        return {"kind": "hf", "identifier": self.identifier}


def tokenizer_from_dict(d):
    if d["kind"] == "word":
        return WordTokenizer(d["vocab"])
    return HFTokenizer(d["identifier"])


def build_decoder(config, cond_dim, tokenizer=None, generator=None):
    """``config`` is the dict stored in checkpoints (``decoder.config``)."""
    if config["kind"] == "toy":
        return ToyDecoder(config["vocab_size"], cond_dim, config.get("hidden", 128), config.get("layers", 2),
                          config.get("heads", 4), config.get("max_positions", 130), generator=generator)
    return HFCausalDecoder(config["identifier"], cond_dim)


def _pad_batch(token_lists, vocab_size, device=None):
    lengths = []
    for j, ids in enumerate(token_lists):
        if len(ids) < 2:
            raise UsageError(f"sequence {j} has no target tokens beyond BOS")
        bad = [i for i in ids if not 0 <= int(i) < vocab_size]
        if bad:
            raise VocabularyError(f"sequence {j}: token id {bad[0]} outside vocabulary of size {vocab_size}")
        lengths.append(len(ids))
    width = max(lengths)
    batch = torch.full((len(token_lists), width), PAD, dtype=torch.long, device=device)
    for j, ids in enumerate(token_lists):
        batch[j, : len(ids)] = torch.as_tensor(ids, dtype=torch.long)
    mask = torch.arange(width - 1).unsqueeze(0) < (torch.tensor(lengths) - 1).unsqueeze(1)
    return batch, mask


def token_nll(decoder, E, token_lists):
    """Per-target negative log-likelihoods ``(B, L-1)`` and their validity mask."""
    E = torch.as_tensor(E)
    if E.dim() == 1:
        E = E.unsqueeze(0)
    if E.shape[0] != len(token_lists):
        raise AlignmentError(f"{E.shape[0]} embeddings but {len(token_lists)} token sequences")
    if E.shape[1] != decoder.cond_dim:
        raise AlignmentError(f"decoder expects embedding width {decoder.cond_dim}, got {E.shape[1]}")
    batch, mask = _pad_batch(token_lists, decoder.vocab_size)
    logits = decoder(E, batch[:, :-1])
    nll = F.cross_entropy(logits.transpose(1, 2), batch[:, 1:], reduction="none")
    return nll * mask, mask


def sequence_losses(decoder, E, token_lists):
    """Mean NLL per sequence, shape (B,)."""
    nll, mask = token_nll(decoder, E, token_lists)
    return nll.sum(1) / mask.sum(1)


def lm_loss(decoder, embedding, tokens):
    """Teacher-forced per-token mean of ``-log Pr(w_i | embedding, w_<i)``."""
    return sequence_losses(decoder, torch.as_tensor(embedding).reshape(1, -1), [list(tokens)])[0]


def batch_lm_loss(decoder, E, token_lists):
    """Mean of the per-sequence ``lm_loss`` values."""
    return sequence_losses(decoder, E, token_lists).mean()


@dataclass(frozen=True)
class DecodeStrategy:
    kind: str = "greedy"
    k: int = 1
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("greedy", "beam", "top_k"):
            raise UsageError(f"unknown decoding strategy {self.kind!r}")
        if self.k < 1 or self.temperature <= 0:
            raise UsageError("decoding needs k >= 1 and temperature > 0")

    @classmethod
    def parse(cls, spec: str):
        """``greedy`` | ``beam:<k>`` | ``top_k:<k>[:<temperature>[:<seed>]]``"""
        parts = spec.split(":")
        try:
            if parts[0] == "greedy" and len(parts) == 1:
                return cls()
            if parts[0] == "beam" and len(parts) == 2:
                return cls("beam", int(parts[1]))
            if parts[0] == "top_k" and 2 <= len(parts) <= 4:
                temp = float(parts[2]) if len(parts) > 2 else 1.0
                seed = int(parts[3]) if len(parts) > 3 else 0
                return cls("top_k", int(parts[1]), temp, seed)
        except ValueError:
            pass
        raise UsageError(f"cannot parse decoding strategy {spec!r}")

    def __str__(self):
        if self.kind == "greedy":
            return "greedy"
        if self.kind == "beam":
            return f"beam:{self.k}"
        return f"top_k:{self.k}:{self.temperature}:{self.seed}"


def _next_logits(decoder, cond, seqs, bos_id):
    logits = decoder(cond, seqs)[:, -1].double()
    if bos_id is not None:
        logits[:, bos_id] = -math.inf
    if isinstance(decoder, ToyDecoder):
        logits[:, PAD] = -math.inf
    return logits


@torch.no_grad()
def generate_ids(decoder, tokenizer, E, strategy=DecodeStrategy(), max_len=64):
    """Decode every row of ``E``; returns one list of generated ids (EOS excluded) per row."""
    if max_len < 1:
        raise UsageError("max_len must be >= 1")
    E = torch.as_tensor(E, dtype=torch.float32)
    if E.dim() == 1:
        E = E.unsqueeze(0)
    if E.shape[1] != decoder.cond_dim:
        raise AlignmentError(f"decoder expects embedding width {decoder.cond_dim}, got {E.shape[1]}")
    was_training = decoder.training
    decoder.eval()
    try:
        if strategy.kind == "greedy":
            return _greedy(decoder, tokenizer, E, max_len)
        if strategy.kind == "beam":
            return [_beam(decoder, tokenizer, e, strategy.k, max_len) for e in E]
        gen = torch.Generator().manual_seed(strategy.seed)
        return [_top_k(decoder, tokenizer, e, strategy, max_len, gen) for e in E]
    finally:
        decoder.train(was_training)


def _greedy(decoder, tokenizer, E, max_len):
    n = E.shape[0]
    seqs = torch.full((n, 1), tokenizer.bos_id, dtype=torch.long)
    done = torch.zeros(n, dtype=torch.bool)
    for _ in range(max_len):
        # argmax returns the first maximal index, so ties go to the lowest id
        nxt = _next_logits(decoder, E, seqs, tokenizer.bos_id).argmax(-1)
        nxt = torch.where(done, torch.full_like(nxt, tokenizer.eos_id), nxt)
        seqs = torch.cat([seqs, nxt.unsqueeze(1)], dim=1)
        done |= nxt == tokenizer.eos_id
        if done.all():
            break
    out = []
    for row in seqs[:, 1:].tolist():
        out.append(row[: row.index(tokenizer.eos_id)] if tokenizer.eos_id in row else row)
    return out


def _beam(decoder, tokenizer, e, k, max_len):
    beams = [([tokenizer.bos_id], 0.0)]
    finished = []
    for _ in range(max_len):
        seqs = torch.tensor([b[0] for b in beams])
        logp = F.log_softmax(_next_logits(decoder, e.expand(len(beams), -1), seqs, tokenizer.bos_id), -1)
        cand = []
        for j, (seq, score) in enumerate(beams):
            top = torch.topk(logp[j], min(k, logp.shape[1]))
            for lp, tok in zip(top.values.tolist(), top.indices.tolist()):
                cand.append((seq + [tok], score + lp))
        cand.sort(key=lambda c: (-c[1], c[0]))
        beams = []
        for seq, score in cand:
            if seq[-1] == tokenizer.eos_id:
                finished.append((seq, score))
            else:
                beams.append((seq, score))
            if len(beams) == k:
                break
        if not beams or len(finished) >= k:
            break
    pool = finished or beams
    best = max(pool, key=lambda c: c[1] / (len(c[0]) - 1))[0][1:]
    return best[: best.index(tokenizer.eos_id)] if tokenizer.eos_id in best else best


def _top_k(decoder, tokenizer, e, strategy, max_len, gen):
    seq = [tokenizer.bos_id]
    for _ in range(max_len):
        logits = _next_logits(decoder, e.unsqueeze(0), torch.tensor([seq]), tokenizer.bos_id)[0]
        top = torch.topk(logits / strategy.temperature, min(strategy.k, logits.shape[0]))
        probs = F.softmax(top.values, -1)
        tok = int(top.indices[torch.multinomial(probs, 1, generator=gen)])
        if tok == tokenizer.eos_id:
            break
        seq.append(tok)
    return seq[1:]


def generate(decoder, tokenizer, embedding, strategy=DecodeStrategy(), max_len=64):
    return tokenizer.decode(generate_ids(decoder, tokenizer, embedding, strategy, max_len)[0])


def generate_batch(decoder, tokenizer, E, strategy=DecodeStrategy(), max_len=64):
    return [tokenizer.decode(ids) for ids in generate_ids(decoder, tokenizer, E, strategy, max_len)]
