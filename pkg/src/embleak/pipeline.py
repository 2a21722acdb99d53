"""Joint training of surrogate adapter, discriminator and inversion decoder.

Three modes share one loop:

``direct``    decoder trained on the leaked pairs only (baseline)
``transfer``  consistency + adversarial alignment on the surrogate, decoder
              trained on leaked pairs and on surrogate embeddings of the
              external pool (external corpus + augmented leak texts)
``oracle``    as transfer, but the external texts carry true victim
              embeddings read from ``oracle_path`` (upper bound)

The victim encoder never appears here: leaked embeddings come from the leak
file, and nothing in this module can query the victim.
"""

import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .adversarial import Discriminator, discriminator_update, gen_adv_loss
from .consistency import inter_loss, intra_loss
from .decoder import (
    DecodeStrategy,
    HFTokenizer,
    WordTokenizer,
    batch_lm_loss,
    build_decoder,
    generate_batch,
    tokenizer_from_dict,
)
from .encoders import SurrogateModel, get_backend
from .errors import DataError, DimensionError, DivergenceError, UsageError

log = logging.getLogger(__name__)

MODES = ("direct", "transfer", "oracle")
CHECKPOINT_FORMAT = "embleak-checkpoint/1"
CHECKPOINT_FILE = "checkpoint.pt"
# fields that do not change what gets trained
_UNHASHED = {"name", "runs_dir", "checkpoint_every"}


@dataclass
class LossWeights:
    lm: float = 1.0
    lm_ext: float = 1.0
    intra: float = 1.0
    inter: float = 1.0
    adv: float = 1.0


@dataclass
class AttackConfig:
    mode: str = "transfer"
    leak_path: str | None = None
    corpus_path: str | None = None
    oracle_path: str | None = None
    eval_path: str | None = None
    name: str = "run"
    runs_dir: str = "runs"
    backbone: str = "hash:64:0"
    decoder: str = "toy"
    decoder_hidden: int = 128
    decoder_layers: int = 2
    vocab_size: int | None = None
    evaluator: str = "hash:64:7"
    learning_rate: float = 3e-5
    disc_learning_rate: float | None = None
    weight_decay: float = 0.01
    grad_clip: float | None = 1.0
    batch_size: int = 16
    warmup_steps: int = 0
    total_steps: int = 1000
    checkpoint_every: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    d_steps: int = 1
    disc_hidden: int = 256
    lm_through_surrogate: bool = True
    augmentation: str = "none"
    augmentation_multiplier: int = 1
    augmentation_seed: int = 0
    replace_mode: str = "random"
    llm_endpoint: str | None = None
    leak_size: int | None = None
    truncate_first_sentence: bool = False
    decode: str = "greedy"
    max_len: int = 64
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)

    def validate(self):
        if self.mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.leak_path:
            raise UsageError("config needs leak_path")
        if self.mode == "transfer" and not self.corpus_path:
            raise UsageError("transfer mode needs corpus_path")
        if self.mode == "oracle" and not self.oracle_path:
            raise UsageError("oracle mode needs oracle_path")
        if self.batch_size < 1 or self.total_steps < 0 or self.warmup_steps < 0 or self.d_steps < 1:
            raise UsageError("batch_size >= 1, d_steps >= 1, total_steps >= 0 and warmup_steps >= 0 required")
        if self.max_len < 1:
            raise UsageError("max_len must be >= 1")
        if self.learning_rate <= 0:
            raise UsageError("learning_rate must be positive")
        data_mod.AugmentationSpec(self.augmentation, self.augmentation_multiplier, self.augmentation_seed,
                                  self.replace_mode)
        DecodeStrategy.parse(self.decode)
        for k, v in dataclasses.asdict(self.weights).items():
            if v < 0:
                raise UsageError(f"loss weight {k} must be nonnegative")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc.msg}") from exc
        return cls.from_dict(raw)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")

    def fingerprint(self):
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def run_dir(self):
        return Path(self.runs_dir) / self.name


def lr_at(step, base_lr, warmup_steps, total_steps):
    """Linear warmup to ``base_lr`` then linear decay to zero at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * step / max(1, warmup_steps)
    return base_lr * max(0.0, (total_steps - step) / max(1, total_steps - warmup_steps))


class CyclicSampler:
    """Shuffled cyclic index stream with a serializable state."""

    def __init__(self, n, seed):
        if n < 1:
            raise UsageError("cannot sample from an empty dataset")
        self.n = n
        self.rng = np.random.default_rng(seed)
        self.perm = self.rng.permutation(n)
        self.pos = 0

    def take(self, k):
        out = []
        while len(out) < k:
            if self.pos == self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            step = min(k - len(out), self.n - self.pos)
            out.extend(self.perm[self.pos : self.pos + step].tolist())
            self.pos += step
        return out

    def state_dict(self):
        return {"perm": self.perm.tolist(), "pos": self.pos, "rng": self.rng.bit_generator.state}

    def load_state_dict(self, s):
        self.perm = np.asarray(s["perm"])
        self.pos = s["pos"]
        self.rng.bit_generator.state = s["rng"]


@dataclass
class TrainState:
    surrogate: SurrogateModel
    decoder: torch.nn.Module
    discriminator: Discriminator
    tokenizer: object
    optimizer: torch.optim.Optimizer
    disc_optimizer: torch.optim.Optimizer
    step: int = 0
    ema: dict = field(default_factory=dict)
    adversarial_steps: int = 0
    token_cache: dict = field(default_factory=dict)

    def tokens(self, text, max_len):
        ids = self.token_cache.get(text)
        if ids is None:
            ids = self.token_cache[text] = self.tokenizer.encode(text, max_len + 1)
        return ids


def _decoder_config(config, tokenizer):
    if config.decoder == "toy":
        return {"kind": "toy", "vocab_size": len(tokenizer), "hidden": config.decoder_hidden,
                "layers": config.decoder_layers, "heads": 4, "max_positions": config.max_len + 2}
    return {"kind": "hf", "identifier": config.decoder}


def build_state(config, victim_dim, tokenizer, backbone=None):
    """Initialise every module from ``config.seed`` in a fixed order, whatever the mode."""
    gen = torch.Generator().manual_seed(config.seed)
    backbone = backbone or get_backend(config.backbone)
    surrogate = SurrogateModel(backbone, victim_dim, generator=gen)
    decoder = build_decoder(_decoder_config(config, tokenizer), victim_dim, tokenizer, generator=gen)
    disc = Discriminator(victim_dim, config.disc_hidden, generator=gen)
    params = list(surrogate.adapter.parameters()) + list(decoder.parameters())
    optimizer = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    disc_lr = config.disc_learning_rate or config.learning_rate
    disc_optimizer = torch.optim.AdamW(disc.parameters(), lr=disc_lr, weight_decay=config.weight_decay)
    return TrainState(surrogate, decoder, disc, tokenizer, optimizer, disc_optimizer)


def _weighted(weight, fn):
    """Evaluate a loss term; zero-weight terms are computed without a graph, for logging only."""
    if weight > 0:
        return fn()
    with torch.no_grad():
        return fn()


def train_step(state, leak_batch, ext_batch, config, ext_embeddings=None):
    """One optimizer step on the weighted objective. Returns ``(state, breakdown)``.

    ``breakdown`` holds the raw components, the discriminator loss, and
    ``total = sum(weight_k * component_k)``.
    """
    w = config.weights
    mode = config.mode
    if not leak_batch:
        raise UsageError("train_step needs a non-empty leak batch")
    if mode != "direct" and not ext_batch:
        raise UsageError(f"{mode} mode needs a non-empty external batch")
    for g in state.optimizer.param_groups:
        g["lr"] = lr_at(state.step, config.learning_rate, config.warmup_steps, config.total_steps)

    leak_texts = [p.text for p in leak_batch]
    E_P = torch.as_tensor(np.stack([p.embedding for p in leak_batch]), dtype=torch.float32)
    leak_tokens = [state.tokens(t, config.max_len) for t in leak_texts]
    zero = torch.zeros(())
    parts = {"lm": zero, "lm_ext": zero, "intra": zero, "inter": zero, "adv": zero}
    disc_value = 0.0

    parts["lm"] = _weighted(w.lm, lambda: batch_lm_loss(state.decoder, E_P, leak_tokens))
    if mode != "direct":
        ext_tokens = [state.tokens(t, config.max_len) for t in ext_batch]
        need_graph = w.intra > 0 or w.inter > 0
        with torch.set_grad_enabled(need_graph):
            E_S = state.surrogate(leak_texts)
        parts["intra"] = _weighted(w.intra, lambda: intra_loss(E_P, E_S))
        parts["inter"] = _weighted(w.inter, lambda: inter_loss(E_P, E_S))
        need_graph = w.adv > 0 or (mode == "transfer" and w.lm_ext > 0 and config.lm_through_surrogate)
        with torch.set_grad_enabled(need_graph):
            E_T = state.surrogate(list(ext_batch))
        if w.adv > 0:
            for _ in range(config.d_steps):
                disc_value = discriminator_update(state.discriminator, state.disc_optimizer, E_P, E_T, state.step)
                state.adversarial_steps += 1
        parts["adv"] = _weighted(w.adv, lambda: gen_adv_loss(state.discriminator, E_T))
        if mode == "oracle":
            E_dec = torch.as_tensor(np.stack(ext_embeddings), dtype=torch.float32)
        else:
            E_dec = E_T if config.lm_through_surrogate else E_T.detach()
        parts["lm_ext"] = _weighted(w.lm_ext, lambda: batch_lm_loss(state.decoder, E_dec, ext_tokens))

    weights = dataclasses.asdict(w)
    total = sum(weights[k] * parts[k] for k in parts if weights[k] > 0)
    breakdown = {k: float(v.detach()) for k, v in parts.items()}
    breakdown["disc"] = disc_value
    breakdown["total"] = float(sum(weights[k] * breakdown[k] for k in parts))
    if not all(math.isfinite(v) for v in breakdown.values()):
        raise DivergenceError(f"non-finite loss at step {state.step}: {breakdown}", step=state.step,
                              breakdown=breakdown)

    state.optimizer.zero_grad(set_to_none=True)
    if isinstance(total, torch.Tensor) and total.requires_grad:
        total.backward()
        if config.grad_clip:
            params = [p for g in state.optimizer.param_groups for p in g["params"] if p.grad is not None]
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        state.optimizer.step()
    state.step += 1
    for k, v in breakdown.items():
        state.ema[k] = v if k not in state.ema else 0.9 * state.ema[k] + 0.1 * v
    return state, breakdown


class Trainer:
    """Owns the data streams and the :class:`TrainState` of one run."""

    def __init__(self, config: AttackConfig, backbone=None):
        self.config = config.validate()
        self.leak = data_mod.load_leak(config.leak_path)
        if not self.leak:
            raise DataError(f"leak file {config.leak_path} is empty")
        if config.leak_size is not None:
            self.leak = data_mod.sample_pairs(self.leak, config.leak_size, config.seed)
        if config.truncate_first_sentence:
            self.leak = [data_mod.LeakedPair(data_mod.preprocess(p.text, True), p.embedding) for p in self.leak]
        self.victim_dim = self.leak[0].embedding.size

        corpus = data_mod.load_corpus(config.corpus_path) if config.corpus_path else []
        corpus = [data_mod.preprocess(t, config.truncate_first_sentence) for t in corpus]
        self.oracle = []
        if config.mode == "oracle":
            self.oracle = data_mod.load_leak(config.oracle_path)
            if self.oracle and self.oracle[0].embedding.size != self.victim_dim:
                raise DimensionError(
                    f"oracle embeddings have width {self.oracle[0].embedding.size}, leak has {self.victim_dim}"
                )
        self.pool = self._build_pool(corpus)
        if config.mode != "direct" and len(self.pool) == 0:
            raise DataError("external pool is empty")

        # dedup so the vocabulary (and its id order) does not depend on the mode
        vocab_texts = list(dict.fromkeys([p.text for p in self.leak] + corpus + self.pool.texts))
        if config.decoder == "toy":
            tokenizer = WordTokenizer.build(vocab_texts, max_size=config.vocab_size)
        else:
            tokenizer = HFTokenizer(config.decoder)
        self.state = build_state(config, self.victim_dim, tokenizer, backbone=backbone)
        self.leak_sampler = CyclicSampler(len(self.leak), config.seed * 2 + 1)
        self.ext_sampler = CyclicSampler(max(1, len(self.pool)), config.seed * 2 + 2)

    def _build_pool(self, corpus):
        cfg = self.config
        if cfg.mode == "oracle":
            return data_mod.SurrogatePool([p.text for p in self.oracle])
        if cfg.mode == "direct":
            return data_mod.SurrogatePool([])
        spec = data_mod.AugmentationSpec(cfg.augmentation, cfg.augmentation_multiplier, cfg.augmentation_seed,
                                         cfg.replace_mode)
        llm = None
        if spec.strategy == "llm":
            from .remote import HTTPTextClient

            if not cfg.llm_endpoint:
                raise UsageError("llm augmentation needs llm_endpoint")
            llm = HTTPTextClient(cfg.llm_endpoint)
        leak_texts = [p.text for p in self.leak]
        vocab = data_mod.corpus_vocabulary(leak_texts + corpus)
        augmented = data_mod.augment_corpus(leak_texts, spec, vocabulary=vocab, llm=llm)
        return data_mod.SurrogatePool(list(corpus), augmented)

    def next_batches(self):
        bs = self.config.batch_size
        leak_batch = [self.leak[i] for i in self.leak_sampler.take(bs)]
        if self.config.mode == "direct":
            return leak_batch, [], None
        idx = self.ext_sampler.take(bs)
        texts = self.pool.texts
        ext_batch = [texts[i] for i in idx]
        ext_emb = [self.oracle[i].embedding for i in idx] if self.config.mode == "oracle" else None
        return leak_batch, ext_batch, ext_emb

    def step(self):
        leak_batch, ext_batch, ext_emb = self.next_batches()
        _, breakdown = train_step(self.state, leak_batch, ext_batch, self.config, ext_emb)
        return breakdown

    # checkpointing -------------------------------------------------------

    def checkpoint_dict(self):
        s = self.state
        params = {
            "adapter": s.surrogate.adapter.state_dict(),
            "decoder": s.decoder.state_dict(),
            "discriminator": s.discriminator.state_dict(),
        }
        meta = {
            f"{group}.{k}": {"shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", "")}
            for group, sd in params.items()
            for k, v in sd.items()
        }
        return {
            "format": CHECKPOINT_FORMAT,
            "config": self.config.to_dict(),
            "config_hash": self.config.fingerprint(),
            "step": s.step,
            "victim_dim": self.victim_dim,
            "tokenizer": s.tokenizer.to_dict(),
            "decoder_config": s.decoder.config,
            "params": params,
            "optimizer": s.optimizer.state_dict(),
            "disc_optimizer": s.disc_optimizer.state_dict(),
            "samplers": {"leak": self.leak_sampler.state_dict(), "ext": self.ext_sampler.state_dict()},
            "ema": dict(s.ema),
            "adversarial_steps": s.adversarial_steps,
            "metadata": meta,
        }

    def save_checkpoint(self):
        path = self.config.run_dir / f"step-{self.state.step}" / CHECKPOINT_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(CHECKPOINT_FILE + ".tmp")
        torch.save(self.checkpoint_dict(), tmp)
        os.replace(tmp, path)
        return path

    def load_checkpoint(self, path):
        ckpt = load_checkpoint(path)
        if ckpt["config_hash"] != self.config.fingerprint():
            raise UsageError(f"checkpoint {path} was trained with a different config")
        s = self.state
        s.surrogate.adapter.load_state_dict(ckpt["params"]["adapter"])
        s.decoder.load_state_dict(ckpt["params"]["decoder"])
        s.discriminator.load_state_dict(ckpt["params"]["discriminator"])
        s.optimizer.load_state_dict(ckpt["optimizer"])
        s.disc_optimizer.load_state_dict(ckpt["disc_optimizer"])
        s.step = ckpt["step"]
        s.ema = dict(ckpt["ema"])
        s.adversarial_steps = ckpt["adversarial_steps"]
        self.leak_sampler.load_state_dict(ckpt["samplers"]["leak"])
        self.ext_sampler.load_state_dict(ckpt["samplers"]["ext"])
        return ckpt


def load_checkpoint(path):
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_FILE
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a checkpoint")
    return ckpt


@dataclass
class TrainingResult:
    checkpoint: Path
    metrics_log: Path
    steps: int
    adversarial_steps: int
    final_losses: dict


def _read_log(path, upto):
    if not path.exists():
        return []
    lines = path.read_text(encoding="utf-8").splitlines()
    return [ln for ln in lines if ln and json.loads(ln)["step"] <= upto]


def run_training(config: AttackConfig, resume_from=None, backbone=None, stop_at=None) -> TrainingResult:
    """Train for ``config.total_steps`` steps (or until ``stop_at``), writing checkpoints and a loss log.

    Layout: ``<runs_dir>/<name>/step-<k>/checkpoint.pt`` and ``<runs_dir>/<name>/metrics.jsonl``.
    """
    trainer = Trainer(config, backbone=backbone)
    run_dir = config.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "metrics.jsonl"
    if resume_from is not None:
        trainer.load_checkpoint(resume_from)
        kept = _read_log(log_path, trainer.state.step)
    else:
        kept = []
    log_path.write_text("".join(ln + "\n" for ln in kept), encoding="utf-8")

    last = trainer.save_checkpoint() if resume_from is None else Path(resume_from)
    end = config.total_steps if stop_at is None else min(stop_at, config.total_steps)
    breakdown = {}
    with log_path.open("a", encoding="utf-8") as fh:
        while trainer.state.step < end:
            lr = lr_at(trainer.state.step, config.learning_rate, config.warmup_steps, config.total_steps)
            breakdown = trainer.step()
            fh.write(json.dumps({"step": trainer.state.step, "lr": lr, **breakdown}) + "\n")
            if config.checkpoint_every and trainer.state.step % config.checkpoint_every == 0:
                fh.flush()
                last = trainer.save_checkpoint()
            if trainer.state.step % 200 == 0:
                log.info("step %d: %s", trainer.state.step, {k: round(v, 4) for k, v in breakdown.items()})
    if last.parent.name != f"step-{trainer.state.step}":
        last = trainer.save_checkpoint()
    return TrainingResult(last, log_path, trainer.state.step, trainer.state.adversarial_steps, breakdown)


def load_attack_model(checkpoint):
    ckpt = load_checkpoint(checkpoint) if not isinstance(checkpoint, dict) else checkpoint
    tokenizer = tokenizer_from_dict(ckpt["tokenizer"])
    decoder = build_decoder(ckpt["decoder_config"], ckpt["victim_dim"], tokenizer)
    decoder.load_state_dict(ckpt["params"]["decoder"])
    decoder.eval()
    return decoder, tokenizer, ckpt


def run_attack(checkpoint, eval_pairs, strategy=None, max_len=None, batch_size=256):
    """Decode each private embedding; returns ``[(ground_truth, reconstruction), ...]`` in order."""
    decoder, tokenizer, ckpt = load_attack_model(checkpoint)
    if not eval_pairs:
        return []
    cfg = ckpt["config"]
    strategy = strategy or DecodeStrategy.parse(cfg["decode"])
    if isinstance(strategy, str):
        strategy = DecodeStrategy.parse(strategy)
    max_len = max_len or cfg["max_len"]
    width = eval_pairs[0].embedding.size
    if width != ckpt["victim_dim"]:
        raise DimensionError(f"eval embeddings have width {width}, checkpoint expects {ckpt['victim_dim']}")
    out = []
    for i in range(0, len(eval_pairs), batch_size):
        chunk = eval_pairs[i : i + batch_size]
        E = np.stack([p.embedding for p in chunk])
        recon = generate_batch(decoder, tokenizer, E, strategy, max_len)
        out.extend((p.text, r) for p, r in zip(chunk, recon))
    return out
