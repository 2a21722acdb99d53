"""Text encoders: the victim, the surrogate backbone and the evaluator all share
one small interface (``name``, ``dimension``, ``encode``).

Backbones are resolved by identifier through :func:`get_backend`. Two toy
families are built in so everything runs without a pretrained checkpoint:

* ``hash:<dim>:<seed>``   deterministic hashing bag-of-tokens encoder
* ``victim:<dim>:<seed>`` hidden random affine map of the public ``hash:64:0``
  features concatenated with a private ``hash:32:<seed+1>`` block (scaled by
  0.5), plus per-text Gaussian noise; stands in for an anonymous embedding
  service that is related to, but not a copy of, the attacker's backbone

Any other identifier is handed to ``sentence_transformers``.
"""

import hashlib
import math
import re
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .errors import BackendError, DimensionError, UsageError
from .text import word_tokens

DEFAULT_BACKBONE = "sentence-transformers/gtr-t5-base"
DEFAULT_EVALUATOR = "sentence-transformers/all-MiniLM-L6-v2"


class EncoderBackend(Protocol):
    name: str
    dimension: int

    def encode(self, texts: Sequence[str]) -> torch.Tensor: ...


def _stable_hash(*parts) -> int:
    digest = hashlib.blake2b("\x1f".join(map(str, parts)).encode("utf-8"), digest_size=8)
    return int.from_bytes(digest.digest(), "little")


class HashingBackbone(nn.Module):
    """Bag of unigrams and bigrams hashed into a fixed random table.

    The embedding is the sum of the token rows divided by the square root of
    the token count, so entries stay O(1) regardless of text length.
    """

    def __init__(self, dim: int, seed: int = 0, n_buckets: int = 4096, bigram_weight: float = 0.5):
        super().__init__()
        self.name = f"hash:{dim}:{seed}"
        self.dimension = dim
        self.seed = seed
        self.n_buckets = n_buckets
        self.bigram_weight = bigram_weight
        gen = torch.Generator().manual_seed(seed)
        table = torch.randn(n_buckets, dim, generator=gen)
        self.table = nn.Parameter(table, requires_grad=False)

    def _features(self, text):
        tokens = word_tokens(text)
        feats = [(_stable_hash(self.seed, "u", t) % self.n_buckets, 1.0) for t in tokens]
        feats += [
            (_stable_hash(self.seed, "b", a, b) % self.n_buckets, self.bigram_weight)
            for a, b in zip(tokens, tokens[1:])
        ]
        return feats, max(len(tokens), 1)

    @torch.no_grad()
    def encode(self, texts):
        out = torch.zeros(len(texts), self.dimension)
        for i, text in enumerate(texts):
            feats, n = self._features(text)
            if not feats:
                continue
            idx = torch.tensor([f for f, _ in feats])
            w = torch.tensor([w for _, w in feats]).unsqueeze(1)
            out[i] = (self.table[idx] * w).sum(0) / math.sqrt(n)
        return out


class AffineVictim:
    """``base(x) @ A + b + noise``; noise is seeded by the text so encode stays deterministic."""

    def __init__(self, base: EncoderBackend, dim: int, seed: int = 0, noise: float = 0.01, name=None):
        self.base = base
        self.dimension = dim
        self.noise = noise
        self.seed = seed
        self.name = name or f"affine({base.name})->{dim}"
        gen = torch.Generator().manual_seed(10_007 + seed)
        self.weight = torch.randn(base.dimension, dim, generator=gen) / math.sqrt(base.dimension)
        self.bias = 0.1 * torch.randn(dim, generator=gen)

    @torch.no_grad()
    def encode(self, texts):
        out = self.base.encode(texts) @ self.weight + self.bias
        if self.noise > 0:
            for i, text in enumerate(texts):
                gen = torch.Generator().manual_seed(_stable_hash(self.seed, "noise", text) % (2**63))
                out[i] += self.noise * torch.randn(self.dimension, generator=gen)
        return out


class ConcatBackend:
    """Column-wise concatenation of several backends, each with its own scale."""

    def __init__(self, parts, scales=None, name=None):
        self.parts = list(parts)
        self.scales = list(scales or [1.0] * len(self.parts))
        self.dimension = sum(p.dimension for p in self.parts)
        self.name = name or "concat(" + ",".join(p.name for p in self.parts) + ")"

    @torch.no_grad()
    def encode(self, texts):
        return torch.cat([s * p.encode(texts) for p, s in zip(self.parts, self.scales)], dim=1)


def synthetic_victim(dim, seed, noise=0.01, private_scale=0.5):
    base = ConcatBackend([HashingBackbone(64, 0), HashingBackbone(32, seed + 1)], [1.0, private_scale])
    return AffineVictim(base, dim, seed=seed, noise=noise, name=f"victim:{dim}:{seed}")


class SentenceTransformerBackend:
    def __init__(self, identifier: str, device: str = "cpu"):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise BackendError(identifier, "sentence-transformers is not installed") from exc
        try:
            self.model = SentenceTransformer(identifier, device=device)
        except Exception as exc:
            raise BackendError(identifier, f"cannot load model: {exc}") from exc
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.name = identifier
        self.dimension = int(self.model.get_sentence_embedding_dimension())

    @torch.no_grad()
    def encode(self, texts):
        emb = self.model.encode(list(texts), convert_to_tensor=True, show_progress_bar=False)
        return emb.detach().float().cpu()


_REGISTRY: dict[str, Callable[[], EncoderBackend]] = {}
_TOY_RE = re.compile(r"^(hash|victim):(\d+):(\d+)$")


def register_backend(name: str, factory: Callable[[], EncoderBackend]) -> None:
    _REGISTRY[name] = factory


def get_backend(name: str) -> EncoderBackend:
    if name in _REGISTRY:
        return _REGISTRY[name]()
    match = _TOY_RE.match(name)
    if match:
        kind, dim, seed = match.group(1), int(match.group(2)), int(match.group(3))
        if dim < 1:
            raise UsageError(f"backend {name!r}: dimension must be positive")
        if kind == "hash":
            return HashingBackbone(dim, seed)
        return synthetic_victim(dim, seed)
    return SentenceTransformerBackend(name)


def is_known_backend(name: str) -> bool:
    return name in _REGISTRY or bool(_TOY_RE.match(name)) or "/" in name


def encode_batch(backend: EncoderBackend, texts: Sequence[str]) -> torch.Tensor:
    """Encode ``texts`` into an ``N x d`` matrix, validating inputs and output."""
    if len(texts) == 0:
        raise UsageError("encode_batch: empty batch")
    for i, t in enumerate(texts):
        if not isinstance(t, str) or not t.strip():
            raise UsageError(f"encode_batch: text {i} is empty")
    try:
        emb = backend.encode(list(texts))
    except (BackendError, UsageError):
        raise
    except Exception as exc:
        raise BackendError(getattr(backend, "name", type(backend).__name__), str(exc)) from exc
    emb = torch.as_tensor(emb)
    if emb.shape != (len(texts), backend.dimension):
        raise BackendError(
            backend.name, f"returned shape {tuple(emb.shape)}, expected {(len(texts), backend.dimension)}"
        )
    if not torch.isfinite(emb).all():
        raise BackendError(backend.name, "returned non-finite values")
    return emb


class Adapter(nn.Module):
    """Affine map from backbone width ``d_in`` to victim width ``d_out``."""

    def __init__(self, d_in: int, d_out: int, generator: torch.Generator | None = None):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        weight = (torch.rand(d_in, d_out, generator=generator) * 2 - 1) * bound
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(d_out))

    @property
    def d_in(self):
        return self.weight.shape[0]

    @property
    def d_out(self):
        return self.weight.shape[1]

    def forward(self, emb):
        if emb.shape[-1] != self.d_in:
            raise DimensionError(f"adapter expects width {self.d_in}, got width {emb.shape[-1]}")
        return emb.to(self.weight.dtype) @ self.weight + self.bias


def apply_adapter(adapter: Adapter, emb) -> torch.Tensor:
    return adapter(torch.as_tensor(emb))


class SurrogateModel(nn.Module):
    """Frozen backbone followed by a trainable adapter.

    The backbone is deliberately not registered as a submodule, so it is
    excluded from ``parameters()`` and ``state_dict()``.
    """

    def __init__(self, backbone: EncoderBackend, victim_dim: int, generator: torch.Generator | None = None):
        super().__init__()
        self.__dict__["backbone"] = backbone
        if isinstance(backbone, nn.Module):
            for p in backbone.parameters():
                p.requires_grad_(False)
        self.adapter = Adapter(backbone.dimension, victim_dim, generator=generator)

    @property
    def dimension(self):
        return self.adapter.d_out

    @property
    def name(self):
        return f"surrogate({self.backbone.name})"

    def forward(self, texts):
        return self.adapter(encode_batch(self.backbone, texts))

    def encode(self, texts):
        return self(texts)


def as_numpy(emb) -> np.ndarray:
    if isinstance(emb, torch.Tensor):
        return emb.detach().cpu().numpy()
    return np.asarray(emb)
