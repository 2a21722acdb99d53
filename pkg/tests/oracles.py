"""Brute-force reference computations, written with plain loops and math only."""

import math

import numpy as np
import torch


def intra_bruteforce(P, S):
    P, S = np.asarray(P, float), np.asarray(S, float)
    total = 0.0
    for i in range(P.shape[0]):
        for j in range(P.shape[1]):
            total += (P[i, j] - S[i, j]) ** 2
    return total / (P.shape[0] * P.shape[1])


def cosine_matrix_bruteforce(E):
    E = np.asarray(E, float)
    n = E.shape[0]
    Q = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            dot = sum(E[i, k] * E[j, k] for k in range(E.shape[1]))
            ni = math.sqrt(sum(x * x for x in E[i]))
            nj = math.sqrt(sum(x * x for x in E[j]))
            Q[i, j] = dot / (ni * nj)
    return Q


def inter_bruteforce(P, S):
    QP, QS = cosine_matrix_bruteforce(P), cosine_matrix_bruteforce(S)
    n = QP.shape[0]
    return sum((QP[i, j] - QS[i, j]) ** 2 for i in range(n) for j in range(n)) / n**2


def disc_bruteforce(probs_p, probs_t):
    a = sum(-math.log(p) for p in probs_p) / len(probs_p)
    b = sum(-math.log(1 - p) for p in probs_t) / len(probs_t)
    return (a + b) / 2


def gen_bruteforce(probs_t):
    return sum(-math.log(p) for p in probs_t) / len(probs_t)


@torch.no_grad()
def lm_bruteforce(decoder, embedding, tokens):
    """Score position by position, re-running the decoder on each growing prefix."""
    cond = torch.as_tensor(embedding).reshape(1, -1)
    total = 0.0
    for i in range(1, len(tokens)):
        logits = decoder(cond, torch.tensor([tokens[:i]]))[0, -1].double().tolist()
        m = max(logits)
        log_z = m + math.log(sum(math.exp(v - m) for v in logits))
        total += log_z - logits[tokens[i]]
    return total / (len(tokens) - 1)


def central_difference(f, x, h=1e-5):
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f(x)
        x[idx] = orig - h
        down = f(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def lcs_bruteforce(a, b):
    """Exponential subsequence enumeration; only for very short inputs."""
    from itertools import combinations

    best = 0
    for k in range(min(len(a), len(b)), 0, -1):
        subs = {c for c in combinations(a, k)}
        if any(s in subs for s in combinations(b, k)):
            return k
    return best
