import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from embleak.consistency import (
    consistency_grad,
    consistency_values,
    inter_grad,
    inter_loss,
    intra_grad,
    intra_loss,
    normalize_rows,
    pairwise_cosine,
    surrogate_loss,
)
from embleak.errors import DegenerateInputError, DimensionError

from oracles import central_difference, cosine_matrix_bruteforce, inter_bruteforce, intra_bruteforce


def test_intra_hand_case():
    assert float(intra_loss([[1.0, 0.0]], [[0.0, 0.0]])) == pytest.approx(0.5)


def test_inter_zero_for_identical_structure():
    E = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert float(inter_loss(E, E)) == 0.0


def test_inter_hand_case():
    # orthogonal vs parallel pair: off-diagonal entries differ by 1, two of them, over N^2 = 4
    assert float(inter_loss([[1, 0], [0, 1]], [[1, 0], [1, 0]])) == pytest.approx(0.5)


def test_intra_shape_mismatch():
    with pytest.raises(DimensionError):
        intra_loss(np.ones((2, 3)), np.ones((2, 4)))


def test_inter_row_mismatch():
    with pytest.raises(DimensionError):
        inter_loss(np.ones((2, 3)), np.ones((3, 5)))


def test_inter_allows_different_widths():
    rng = np.random.default_rng(1)
    val = float(inter_loss(rng.normal(size=(4, 3)), rng.normal(size=(4, 7))))
    assert val >= 0


def test_zero_row_reports_index():
    E = np.array([[1.0, 2.0], [0.0, 0.0], [3.0, 1.0]])
    with pytest.raises(DegenerateInputError) as exc:
        pairwise_cosine(E)
    assert exc.value.row == 1


@pytest.mark.parametrize("seed", range(20))
def test_losses_match_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n, d = rng.integers(1, 9), rng.integers(1, 17)
    P, S = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    assert float(intra_loss(P, S)) == pytest.approx(intra_bruteforce(P, S), rel=1e-6)
    assert float(inter_loss(P, S)) == pytest.approx(inter_bruteforce(P, S), rel=1e-6, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_closed_form_gradient_matches_finite_difference(seed):
    rng = np.random.default_rng(100 + seed)
    P, S = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    analytic = consistency_grad(P, S, 0.7, 1.3)
    numeric = central_difference(lambda x: float(surrogate_loss(P, x, 0.7, 1.3)), S, h=1e-6)
    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_closed_form_matches_autograd(seed):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(6, 4))
    S = torch.tensor(rng.normal(size=(6, 4)), requires_grad=True)
    (intra_loss(P, S) + inter_loss(P, S)).backward()
    np.testing.assert_allclose(S.grad.numpy(), intra_grad(P, S.detach()) + inter_grad(P, S.detach()), rtol=1e-9,
                               atol=1e-12)


def test_values_dataclass_total():
    v = consistency_values([[1.0, 0.0]], [[0.0, 1.0]])
    assert v.intra == pytest.approx(1.0)
    assert v.inter == 0.0
    assert v.total == pytest.approx(v.intra + v.inter)


finite = st.floats(-10, 10, allow_nan=False).filter(lambda x: abs(x) > 1e-3)


def matrix_pair(draw, n=None):
    n = n or draw(st.integers(1, 6))
    d = draw(st.integers(1, 6))
    P = draw(arrays(np.float64, (n, d), elements=finite))
    S = draw(arrays(np.float64, (n, d), elements=finite))
    return P, S


@st.composite
def pairs(draw):
    return matrix_pair(draw)


@settings(max_examples=60, deadline=None)
@given(pairs(), st.sampled_from([0.1, 1.0, 7.3]))
def test_inter_scale_invariance(ps, c):
    P, S = ps
    base = float(inter_loss(P, S))
    assert abs(float(inter_loss(c * P, S)) - base) < 1e-9
    assert abs(float(inter_loss(P, c * S)) - base) < 1e-9


@settings(max_examples=60, deadline=None)
@given(pairs(), st.randoms(use_true_random=False))
def test_joint_permutation_invariance(ps, r):
    P, S = ps
    perm = list(range(len(P)))
    r.shuffle(perm)
    assert float(intra_loss(P[perm], S[perm])) == pytest.approx(float(intra_loss(P, S)), rel=1e-12, abs=1e-15)
    assert float(inter_loss(P[perm], S[perm])) == pytest.approx(float(inter_loss(P, S)), rel=1e-9, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(pairs())
def test_losses_nonnegative_and_zero_on_equal(ps):
    P, S = ps
    assert float(intra_loss(P, S)) >= 0
    assert float(inter_loss(P, S)) >= 0
    assert float(intra_loss(P, P)) == 0
    assert float(inter_loss(P, P)) < 1e-24


@settings(max_examples=60, deadline=None)
@given(pairs())
def test_pairwise_cosine_structure(ps):
    E, _ = ps
    Q = pairwise_cosine(E).numpy()
    np.testing.assert_allclose(np.diag(Q), 1.0, atol=1e-12)
    np.testing.assert_allclose(Q, Q.T, atol=1e-15)
    assert np.all(np.abs(Q) <= 1 + 1e-12)
    np.testing.assert_allclose(Q, cosine_matrix_bruteforce(E), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(pairs())
def test_normalize_rows_unit_norm(ps):
    E, _ = ps
    np.testing.assert_allclose(np.linalg.norm(normalize_rows(E).numpy(), axis=1), 1.0, atol=1e-12)


def test_inter_bounded_by_four():
    # every entry differs by at most 2
    rng = np.random.default_rng(3)
    for _ in range(20):
        assert float(inter_loss(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)))) <= 4.0 + 1e-12


def test_accepts_torch_and_numpy_equally():
    rng = np.random.default_rng(4)
    P, S = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert float(inter_loss(torch.tensor(P), torch.tensor(S))) == pytest.approx(float(inter_loss(P, S)))
    assert math.isfinite(float(intra_loss(torch.tensor(P), S)))
