"""Property tests for the invariants of the information-theoretic core."""
import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from dmilab import autograd as ag
from dmilab.adapt import SGD, information_maximization, plain_mutual_information
from dmilab.dmi import (
    ClassSubset,
    DmiConfig,
    candidate_subset,
    conditional_dmi,
    dmi,
    dmi_from_predictions,
    selective_im,
)
from dmilab.info import conditional_joints, entropy, estimate_joint, mutual_information
from oracles import mi_loops, sgd_loops

seeds = st.integers(0, 2**32 - 1)


def _joint(rng, K):
    P = rng.gamma(rng.uniform(0.05, 2.0), size=(K, K))
    P[rng.random((K, K)) < rng.uniform(0, 0.7)] = 0.0
    if P.sum() == 0:
        P[0, 0] = 1.0
    return P / P.sum()


def _probs(rng, n, K):
    z = rng.normal(size=(n, K)) * rng.uniform(0.1, 5.0)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _subset(rng, K, lo=2, hi_gap=2):
    size = int(rng.integers(lo, K - hi_gap + 1))
    return ClassSubset(K, tuple(rng.choice(K, size=size, replace=False)))


@given(seeds, st.integers(2, 16))
def test_mi_nonnegative_and_bounded_by_entropies(seed, K):
    rng = np.random.default_rng(seed)
    P = _joint(rng, K)
    mi = mutual_information(P)
    assert mi >= -1e-9
    assert mi <= min(entropy(P.sum(1)), entropy(P.sum(0))) + 1e-9
    assert abs(mi - mi_loops(P)) < 1e-10


@given(seeds, st.integers(4, 20), st.sampled_from([0.1, 0.5, 1.0, 1.7, 2.0]))
def test_dmi_bounds_and_decomposition(seed, K, lam):
    rng = np.random.default_rng(seed)
    S = _subset(rng, K)
    b = dmi(_joint(rng, K), S, DmiConfig(lam))
    assert -lam * math.log(len(S)) - 1e-9 <= b.value <= math.log(len(S)) + 1e-9
    assert abs(b.value - (b.enhancement - b.scale * b.suppression)) <= 1e-12


@given(seeds, st.integers(3, 12))
def test_degeneracy_contract(seed, K):
    rng = np.random.default_rng(seed)
    P = _joint(rng, K)
    near_full = ClassSubset(K, tuple(rng.choice(K, size=K - int(rng.integers(0, 2)), replace=False)))
    b = dmi(P, near_full)
    assert b.scale == 0.0 and b.value == b.enhancement and not b.skipped
    single = ClassSubset(K, (int(rng.integers(K)),))
    assert dmi(P, single).skipped
    X = _probs(rng, 6, K)
    assert dmi_from_predictions(ag.parameters({"x": X})["x"], X, single).tensor is None


@given(seeds, st.integers(2, 40), st.integers(3, 15))
def test_candidate_subset_is_symmetric(seed, n, K):
    rng = np.random.default_rng(seed)
    X, Y = _probs(rng, n, K), _probs(rng, n, K)
    assert candidate_subset(X, Y) == candidate_subset(Y, X)


@given(seeds, st.integers(2, 30), st.integers(3, 12))
def test_selective_im_region_bound(seed, n, K):
    rng = np.random.default_rng(seed)
    S = _subset(rng, K, hi_gap=0)
    b = selective_im(_probs(rng, n, K), S, DmiConfig(1.0))
    assert b.enhancement <= math.log(len(S)) + 1e-9
    if len(S.complement) >= 2:
        assert b.suppression <= math.log(len(S.complement)) + 1e-9


@given(seeds, st.integers(2, 20), st.integers(3, 10))
def test_conditional_dmi_with_constant_z(seed, n, K):
    rng = np.random.default_rng(seed)
    X, Y = _probs(rng, n, K), _probs(rng, n, K)
    S = candidate_subset(X, Y)
    if len(S) < 2:
        S = ClassSubset(K, (0, 1))
    Z = np.zeros((n, K))
    Z[:, int(rng.integers(K))] = 1.0
    cfg = DmiConfig(float(rng.uniform(0.1, 2.0)))
    assert abs(conditional_dmi(X, Y, Z, S, cfg).item() - dmi_from_predictions(X, Y, S, cfg).value) < 1e-10


@given(seeds, st.integers(2, 20), st.integers(2, 10), st.booleans())
def test_conditional_joints_mix_back(seed, n, K, sym):
    rng = np.random.default_rng(seed)
    X, Y, Z = _probs(rng, n, K), _probs(rng, n, K), _probs(rng, n, K)
    cj = conditional_joints(X, Y, Z, sym)
    assert abs(cj.weights.sum() - 1.0) < 1e-12
    mix = sum(w * J.P for w, J in cj)
    assert np.abs(mix - estimate_joint(X, Y, sym).P).max() < 1e-9


@given(seeds, st.integers(2, 20), st.integers(2, 10))
def test_reduction_identity(seed, n, K):
    rng = np.random.default_rng(seed)
    X, Y = _probs(rng, n, K), _probs(rng, n, K)
    full = ClassSubset.full(K)
    assert abs(plain_mutual_information(X, Y).item() - dmi_from_predictions(X, Y, full).value) < 1e-10
    assert abs(information_maximization(X).item() - selective_im(X, full).value) < 1e-10


@given(seeds, st.integers(1, 8), st.floats(1e-4, 1.0), st.floats(0.0, 0.99), st.floats(0.0, 1e-2))
def test_sgd_update_law(seed, steps, lr, momentum, wd):
    rng = np.random.default_rng(seed)
    p0 = rng.normal(size=(2, 3))
    grads = [rng.normal(size=(2, 3)) for _ in range(steps)]
    opt = SGD({"m": lr}, momentum, wd)
    p = p0
    for g in grads:
        p = opt.step({"m.w": p}, {"m.w": g})["m.w"]
    assert np.abs(p - sgd_loops(p0, grads, lr, momentum, wd)).max() <= 1e-12


@settings(max_examples=25)
@given(seeds, st.integers(4, 16), st.integers(3, 8))
def test_forward_and_gradients_are_deterministic(seed, n, K):
    rng = np.random.default_rng(seed)
    Z0, Y = rng.normal(size=(n, K)), _probs(rng, n, K)
    S = ClassSubset(K, (0, 1))

    def run():
        leaves = ag.parameters({"z": Z0})
        b = dmi_from_predictions(ag.softmax(leaves["z"], axis=1), Y, S, DmiConfig(0.5))
        return b.value, ag.backward(ag.neg(b.tensor))["z"]

    (v1, g1), (v2, g2) = run(), run()
    assert v1 == v2 and np.array_equal(g1, g2)


@given(seeds, st.integers(2, 10))
def test_estimator_is_a_valid_joint(seed, K):
    rng = np.random.default_rng(seed)
    X, Y = _probs(rng, 7, K), _probs(rng, 7, K)
    P = estimate_joint(X, Y).P
    assert P.min() >= 0 and abs(P.sum() - 1) < 1e-12 and np.allclose(P, P.T)


def test_estimator_consistency_on_one_hot_rows():
    rng = np.random.default_rng(0)
    q = np.array([0.5, 0.3, 0.15, 0.05])
    labels = rng.choice(4, size=10_000, p=q)
    X = np.eye(4)[labels]
    assert np.abs(estimate_joint(X, X).P - np.diag(q)).max() < 2e-2

