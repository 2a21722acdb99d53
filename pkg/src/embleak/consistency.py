"""Encoder-stealing objective.

``intra_loss`` is the pointwise MSE between private and surrogate embeddings
(averaged over all N*d entries). ``inter_loss`` compares the in-batch cosine
similarity structure of the two batches, ``||Q_P - Q_S||_F^2 / N^2``.

Losses accept numpy arrays or torch tensors and return a 0-d tensor so they
can sit directly in an autograd graph. ``consistency_grad`` is the closed-form
gradient used to cross-check autograd.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateInputError, DimensionError


@dataclass(frozen=True)
class ConsistencyLossValue:
    intra: float
    inter: float

    @property
    def total(self) -> float:
        return self.intra + self.inter


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_2d(name, x):
    if x.dim() != 2:
        raise DimensionError(f"{name} must be a 2-d matrix, got shape {tuple(x.shape)}")


def normalize_rows(E):
    E = _as_tensor(E)
    _check_2d("E", E)
    norms = E.norm(dim=1)
    zero = torch.nonzero(norms == 0)
    if len(zero):
        row = int(zero[0, 0])
        raise DegenerateInputError(f"row {row} has zero norm; cosine similarity is undefined", row=row)
    return E / norms.unsqueeze(1)


def pairwise_cosine(E):
    """In-batch cosine similarity matrix ``Q = Qn Qn^T`` with unit-normalized rows ``Qn``."""
    unit = normalize_rows(E)
    return unit @ unit.T


def intra_loss(E_P, E_S):
    E_P, E_S = _as_tensor(E_P), _as_tensor(E_S)
    if E_P.shape != E_S.shape:
        raise DimensionError(f"intra_loss: shapes differ, {tuple(E_P.shape)} vs {tuple(E_S.shape)}")
    return ((E_P.to(E_S.dtype) - E_S) ** 2).mean()


def inter_loss(E_P, E_S):
    E_P, E_S = _as_tensor(E_P), _as_tensor(E_S)
    _check_2d("E_P", E_P)
    _check_2d("E_S", E_S)
    n = E_P.shape[0]
    if E_S.shape[0] != n:
        raise DimensionError(f"inter_loss: row counts differ, {n} vs {E_S.shape[0]}")
    Q_P = pairwise_cosine(E_P).to(E_S.dtype)
    Q_S = pairwise_cosine(E_S)
    return ((Q_P - Q_S) ** 2).sum() / n**2


def surrogate_loss(E_P, E_S, intra_weight=1.0, inter_weight=1.0):
    return intra_weight * intra_loss(E_P, E_S) + inter_weight * inter_loss(E_P, E_S)


def consistency_values(E_P, E_S) -> ConsistencyLossValue:
    with torch.no_grad():
        return ConsistencyLossValue(float(intra_loss(E_P, E_S)), float(inter_loss(E_P, E_S)))


def intra_grad(E_P, E_S):
    E_P, E_S = np.asarray(E_P, float), np.asarray(E_S, float)
    if E_P.shape != E_S.shape:
        raise DimensionError(f"shapes differ, {E_P.shape} vs {E_S.shape}")
    return 2.0 * (E_S - E_P) / E_S.size


def inter_grad(E_P, E_S):
    E_P, E_S = np.asarray(E_P, float), np.asarray(E_S, float)
    n = E_S.shape[0]
    if E_P.shape[0] != n:
        raise DimensionError(f"row counts differ, {E_P.shape[0]} vs {n}")
    Q_P = pairwise_cosine(E_P).numpy()
    unit = normalize_rows(E_S).numpy()
    norms = np.linalg.norm(E_S, axis=1, keepdims=True)
    Q_S = unit @ unit.T
    # dL/dQ_S is symmetric, so dL/dunit = 2 G unit
    G = -2.0 * (Q_P - Q_S) / n**2
    d_unit = 2.0 * G @ unit
    # project out the radial component: d(x/|x|)/dx = (I - u u^T)/|x|
    radial = np.sum(d_unit * unit, axis=1, keepdims=True)
    return (d_unit - radial * unit) / norms


def consistency_grad(E_P, E_S, intra_weight=1.0, inter_weight=1.0):
    """Gradient of ``intra_weight*intra + inter_weight*inter`` with respect to ``E_S``."""
    return intra_weight * intra_grad(E_P, E_S) + inter_weight * inter_grad(E_P, E_S)
