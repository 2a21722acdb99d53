"""Domain discriminator and the alternating min-max update.

Labels are fixed: private embeddings are class 1, surrogate embeddings of
external documents are class 0. The discriminator minimizes a balanced binary
cross-entropy; the generator (the surrogate adapter) minimizes the
non-saturating loss ``-log C(e_t)``.
"""

import hashlib
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError, DivergenceError, UsageError


class Discriminator(nn.Module):
    def __init__(self, in_features: int, hidden: int = 256, generator: torch.Generator | None = None):
        super().__init__()
        self.in_features = in_features
        self.net = nn.Sequential(
            nn.Linear(in_features, hidden),
            nn.GELU(),
            nn.Linear(hidden, hidden),
            nn.GELU(),
            nn.Linear(hidden, 1),
        )
        if generator is not None:
            for m in self.net:
                if isinstance(m, nn.Linear):
                    bound = 1.0 / math.sqrt(m.in_features)
                    with torch.no_grad():
                        m.weight.uniform_(-bound, bound, generator=generator)
                        m.bias.uniform_(-bound, bound, generator=generator)

    def logits(self, emb, detach_params=False):
        if emb.shape[-1] != self.in_features:
            raise DimensionError(f"discriminator expects width {self.in_features}, got {emb.shape[-1]}")
        x = emb.to(self.net[0].weight.dtype)
        if not detach_params:
            return self.net(x).squeeze(-1)
        for layer in self.net:
            if isinstance(layer, nn.Linear):
                x = F.linear(x, layer.weight.detach(), layer.bias.detach())
            else:
                x = layer(x)
        return x.squeeze(-1)

    def forward(self, emb):
        # float64 with clamped logits keeps the probability strictly inside (0, 1)
        return torch.sigmoid(self.logits(emb).double().clamp(-30.0, 30.0))


@dataclass(frozen=True)
class AdvSchedule:
    d_steps: int = 1
    g_steps: int = 1
    adv_weight: float = 1.0

    def __post_init__(self):
        if self.d_steps < 1 or self.g_steps < 1:
            raise UsageError("d_steps and g_steps must be >= 1")
        if self.adv_weight < 0:
            raise UsageError("adv_weight must be nonnegative")


def disc_loss(C: Discriminator, E_P, E_T):
    """Balanced BCE: ``(mean -log C(e_p) + mean -log(1 - C(e_t))) / 2``."""
    E_P, E_T = torch.as_tensor(E_P), torch.as_tensor(E_T)
    if E_P.shape[-1] != E_T.shape[-1]:
        raise DimensionError(f"disc_loss: widths differ, {E_P.shape[-1]} vs {E_T.shape[-1]}")
    return 0.5 * (F.softplus(-C.logits(E_P)).mean() + F.softplus(C.logits(E_T)).mean())


def gen_adv_loss(C: Discriminator, E_T):
    """Non-saturating generator loss ``mean -log C(e_t)``.

    The discriminator is evaluated with detached parameters, so gradients reach
    ``E_T`` (and through it the adapter) but never the discriminator.
    """
    return F.softplus(-C.logits(torch.as_tensor(E_T), detach_params=True)).mean()


def disc_accuracy(C: Discriminator, E_P, E_T) -> float:
    with torch.no_grad():
        hits = (C.logits(torch.as_tensor(E_P)) > 0).sum() + (C.logits(torch.as_tensor(E_T)) <= 0).sum()
    return float(hits) / (len(E_P) + len(E_T))


def param_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class AdversarialState:
    """``generator`` maps the ``batch_T`` inputs to embeddings (typically the surrogate adapter)."""

    generator: nn.Module
    discriminator: Discriminator
    gen_optimizer: torch.optim.Optimizer
    disc_optimizer: torch.optim.Optimizer
    step: int = 0
    history: list = field(default_factory=list)


def discriminator_update(C, optimizer, E_P, E_T, step=None):
    loss = disc_loss(C, E_P, E_T.detach())
    if not torch.isfinite(loss):
        raise DivergenceError(f"discriminator loss is {float(loss.detach())} at step {step}", step=step)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def adv_step(state: AdversarialState, batch_P, batch_T, schedule: AdvSchedule = AdvSchedule()):
    """One alternation: ``d_steps`` discriminator updates, then ``g_steps`` generator updates."""
    if len(batch_P) == 0 or len(batch_T) == 0:
        raise UsageError("adv_step needs non-empty batches")
    E_P = torch.as_tensor(batch_P)
    d_loss = g_loss = float("nan")
    for _ in range(schedule.d_steps):
        with torch.no_grad():
            E_T = state.generator(batch_T)
        d_loss = discriminator_update(state.discriminator, state.disc_optimizer, E_P, E_T, state.step)
    for _ in range(schedule.g_steps):
        loss = gen_adv_loss(state.discriminator, state.generator(batch_T))
        if not torch.isfinite(loss):
            raise DivergenceError(f"generator loss is {float(loss.detach())} at step {state.step}", step=state.step)
        g_loss = float(loss.detach())
        if schedule.adv_weight > 0:
            state.gen_optimizer.zero_grad(set_to_none=True)
            (schedule.adv_weight * loss).backward()
            state.gen_optimizer.step()
    state.step += 1
    state.history.append((d_loss, g_loss))
    return state, d_loss, g_loss
