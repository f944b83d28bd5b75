import math

import numpy as np
import pytest

from dmilab import autograd as ag
from dmilab.autograd import Tensor
from dmilab.dmi import (
    ClassSubset,
    DmiConfig,
    bound_check,
    candidate_subset,
    conditional_dmi,
    dmi,
    dmi_from_predictions,
    restrict_joint,
    selective_im,
)
from dmilab.info import JointDistribution, estimate_joint, mutual_information
from oracles import (
    argmax_union_loops,
    block_mi_loops,
    conditional_dmi_loops,
    dmi_loops,
    finite_difference,
    random_joint,
    random_probs,
    selective_im_loops,
)

VEHICLES = ["Plane", "Bicycle", "Bus", "Car", "Truck"]


def one_hot_rows(labels, K):
    M = np.zeros((len(labels), K))
    M[np.arange(len(labels)), labels] = 1.0
    return M


# ------------------------------------------------------------- subsets

def test_vehicle_example_subset():
    idx = {n: i for i, n in enumerate(VEHICLES)}
    X = one_hot_rows([idx["Bus"], idx["Car"], idx["Car"]], 5) * 0.9 + 0.02
    Y = one_hot_rows([idx["Truck"], idx["Bus"], idx["Car"]], 5) * 0.9 + 0.02
    S = candidate_subset(X, Y)
    assert [VEHICLES[k] for k in S.members] == ["Bus", "Car", "Truck"]
    assert [VEHICLES[k] for k in S.complement] == ["Plane", "Bicycle"]


def test_all_rows_one_class_gives_singleton_and_skips():
    X = one_hot_rows([0, 0, 0], 4) * 0.7 + 0.075
    S = candidate_subset(X, X)
    assert S.members == (0,)
    assert dmi_from_predictions(X, X, S).skipped


def test_candidate_subset_matches_brute_force(rng):
    for _ in range(10):
        X, Y = random_probs(rng, 64, 10, 0.3), random_probs(rng, 64, 10, 0.3)
        assert list(candidate_subset(X, Y).members) == argmax_union_loops(X, Y)
        assert candidate_subset(X, Y) == candidate_subset(Y, X)


def test_ties_break_to_lowest_index():
    X = np.array([[0.4, 0.4, 0.2], [0.2, 0.4, 0.4]])
    assert candidate_subset(X, X).members == (0, 1)


def test_threshold_filters_votes():
    X = np.array([[0.9, 0.05, 0.05], [0.3, 0.4, 0.3], [0.1, 0.1, 0.8]])
    assert candidate_subset(X, X, threshold=0.5).members == (0, 2)


def test_class_subset_validation():
    with pytest.raises(ValueError):
        ClassSubset(4, ())
    with pytest.raises(ValueError):
        ClassSubset(4, (4,))
    S = ClassSubset(5, (3, 1, 3))
    assert S.members == (1, 3) and S.complement == (0, 2, 4)


# ---------------------------------------------------------- restriction

def test_restrict_full_subset_is_identity(rng):
    P = random_joint(rng, 4)
    block, mass = restrict_joint(P, ClassSubset.full(4), "confident")
    np.testing.assert_allclose(block.P, P, atol=1e-15)
    assert mass == pytest.approx(1.0)


def test_restrict_diagonal():
    block, mass = restrict_joint(np.eye(4) / 4, ClassSubset(4, (0, 1)), "confident")
    np.testing.assert_allclose(block.P, np.eye(2) / 2)
    assert mass == pytest.approx(0.5)


def test_restrict_matches_index_filter(rng):
    for _ in range(10):
        P = random_joint(rng, 7)
        members = tuple(sorted(rng.choice(7, size=3, replace=False)))
        S = ClassSubset(7, members)
        for which, idx in (("confident", list(members)), ("uncertain", list(S.complement))):
            block, mass = restrict_joint(P, S, which)
            raw = np.array([[P[a, b] for b in idx] for a in idx])
            np.testing.assert_allclose(block.P, raw / raw.sum(), atol=1e-12)
            assert mass == pytest.approx(raw.sum(), abs=1e-15)


def test_restrict_empty_mass_gives_uniform_placeholder():
    P = np.zeros((4, 4))
    P[0, 0] = P[1, 1] = 0.5
    block, mass = restrict_joint(P, ClassSubset(4, (0, 1)), "uncertain")
    assert mass == 0.0
    np.testing.assert_allclose(block.P, np.full((2, 2), 0.25))


# ------------------------------------------------------------------ dmi

def test_dmi_matches_per_block_oracle(rng):
    cfg = DmiConfig(lam=1.0)
    for _ in range(20):
        P = random_joint(rng, 8)
        members = tuple(sorted(rng.choice(8, size=5, replace=False)))
        b = dmi(P, ClassSubset(8, members), cfg)
        comp = [k for k in range(8) if k not in members]
        expect = block_mi_loops(P, list(members)) - math.log(5) / math.log(3) * block_mi_loops(P, comp)
        assert b.value == pytest.approx(expect, abs=1e-10)
        assert b.scale == pytest.approx(math.log(5) / math.log(3))
        assert b.value == pytest.approx(b.enhancement - b.scale * b.suppression, abs=1e-12)


def test_dmi_empty_uncertain_region_reduces_to_enhancement():
    P = np.zeros((5, 5))
    P[:3, :3] = random_joint(np.random.default_rng(1), 3)
    b = dmi(P, ClassSubset(5, (0, 1, 2)))
    assert b.suppression == 0.0
    assert b.value == pytest.approx(mutual_information(P[:3, :3] / P[:3, :3].sum()))


def test_degenerate_rules():
    P = random_joint(np.random.default_rng(2), 4)
    b = dmi(P, ClassSubset(4, (0, 1, 2)))
    assert b.scale == 0.0 and b.value == b.enhancement
    b = dmi(P, ClassSubset(4, (2,)))
    assert b.skipped and "1 class" in b.reason


def test_three_class_subset_respects_bound(rng):
    for lam in (0.5, 1.0, 2.0):
        for _ in range(20):
            b = dmi(random_joint(rng, 6, 0.3), ClassSubset(6, (0, 2, 4)), DmiConfig(lam))
            assert -lam * math.log(3) - 1e-9 <= b.value <= math.log(3) + 1e-9


def test_perfect_dependence_on_subset_hits_upper_bound():
    X = one_hot_rows([0, 1, 2, 0, 1, 2], 5)
    S = candidate_subset(X, X)
    b = dmi_from_predictions(X, X, S)
    assert b.enhancement == pytest.approx(math.log(3), abs=1e-9)
    assert bound_check(b).margin == pytest.approx(0.0, abs=1e-9)


def test_lower_bound_is_tight():
    # S = {0,1} independent; complement {2,3} perfectly dependent
    P = np.zeros((4, 4))
    P[:2, :2] = 0.125
    P[2, 2] = P[3, 3] = 0.25
    b = dmi(P, ClassSubset(4, (0, 1)), DmiConfig(lam=1.0))
    assert b.value == pytest.approx(-math.log(2), abs=1e-12)
    assert bound_check(b, DmiConfig(lam=1.0)).margin == pytest.approx(0.0, abs=1e-12)


def test_independent_predictions_give_near_zero():
    U = np.full((8, 4), 0.25)
    b = dmi_from_predictions(U, U, ClassSubset(4, (0, 1)))
    assert abs(b.value) < 1e-12


def test_bound_check_refuses_skipped():
    with pytest.raises(ValueError):
        bound_check(dmi(np.eye(3) / 3, ClassSubset(3, (0,))))


def test_prediction_level_equals_value_level(rng):
    X, Y = random_probs(rng, 16, 6), random_probs(rng, 16, 6)
    S = candidate_subset(X, Y)
    a = dmi_from_predictions(X, Y, S).value
    assert a == pytest.approx(dmi(estimate_joint(X, Y), S).value, abs=1e-12)


def test_dmi_gradient(rng):
    Y = random_probs(rng, 8, 5)
    Z0 = rng.normal(size=(8, 5))
    S = candidate_subset(np.exp(Z0) / np.exp(Z0).sum(1, keepdims=True), Y)
    if len(S) < 2 or len(S) == 5:
        S = ClassSubset(5, (0, 1, 2))

    def loss(p):
        return dmi_from_predictions(ag.softmax(p["z"], axis=1), Tensor(Y), S).tensor

    assert ag.grad_check(loss, {"z": Z0}) < 1e-4


# ----------------------------------------------------- conditional dmi

def test_conditional_dmi_matches_loop_oracle(rng):
    for _ in range(5):
        X, Y, Z = random_probs(rng, 32, 6), random_probs(rng, 32, 6), random_probs(rng, 32, 6)
        S = candidate_subset(X, Y)
        got = conditional_dmi(X, Y, Z, S, DmiConfig(0.5)).item()
        assert got == pytest.approx(conditional_dmi_loops(X, Y, Z, S.members, 0.5), abs=1e-10)


@pytest.mark.parametrize("kind", ["one_hot", "uniform"])
def test_conditional_dmi_with_constant_z(kind, rng):
    X, Y = random_probs(rng, 12, 5), random_probs(rng, 12, 5)
    Z = one_hot_rows([3] * 12, 5) if kind == "one_hot" else np.full((12, 5), 0.2)
    S = candidate_subset(X, Y)
    expect = dmi_from_predictions(X, Y, S).value
    assert conditional_dmi(X, Y, Z, S).item() == pytest.approx(expect, abs=1e-10)


def test_conditional_dmi_degenerate_subset_is_zero(rng):
    X = random_probs(rng, 4, 3)
    assert conditional_dmi(X, X, X, ClassSubset(3, (1,))).item() == 0.0


# --------------------------------------------------------- selective im

def test_selective_im_one_hot_even_cover():
    T = one_hot_rows([0, 1, 2, 0, 1, 2], 6)
    b = selective_im(T, ClassSubset(6, (0, 1, 2)))
    assert b.enhancement == pytest.approx(math.log(3), abs=1e-9)
    assert b.suppression == 0.0


def test_selective_im_identical_uniform_rows_is_zero():
    T = np.zeros((5, 4))
    T[:, :2] = 0.5
    b = selective_im(T, ClassSubset(4, (0, 1)))
    assert b.enhancement == pytest.approx(0.0, abs=1e-12)


def test_selective_im_matches_formula_oracle(rng):
    for lam in (0.5, 1.0):
        for _ in range(10):
            T = random_probs(rng, 20, 7, 0.5)
            members = tuple(sorted(rng.choice(7, size=3, replace=False)))
            got = selective_im(T, ClassSubset(7, members), DmiConfig(lam)).value
            assert got == pytest.approx(selective_im_loops(T, members, lam), abs=1e-10)


def test_selective_im_gradient(rng):
    Z0 = rng.normal(size=(10, 6))
    S = ClassSubset(6, (1, 2, 4))

    def loss(p):
        return selective_im(ag.softmax(p["z"], axis=1), S).tensor

    assert ag.grad_check(loss, {"z": Z0}) < 1e-4


def test_dmi_loops_oracle_agrees_with_block_definition(rng):
    # guards the oracle itself against the two-sided formula
    P = random_joint(rng, 6)
    S = ClassSubset(6, (0, 1, 2, 3))
    assert dmi(P, S, DmiConfig(0.7)).value == pytest.approx(dmi_loops(P, S.members, 0.7), abs=1e-12)


def test_selective_im_gradient_when_one_class_is_left_out(rng):
    # the uncovered logit only moves the row normaliser, which region
    # renormalization cancels exactly: its true gradient is zero
    Z0 = rng.normal(size=(9, 5))
    S = ClassSubset(5, (0, 1, 2, 3))
    leaves = ag.parameters({"z": Z0})
    g = ag.backward(selective_im(ag.softmax(leaves["z"], axis=1), S).tensor)["z"]
    assert np.abs(g[:, 4]).max() < 1e-14

    def f(z):
        return selective_im(np.exp(z) / np.exp(z).sum(1, keepdims=True), S).value

    num = finite_difference(f, Z0, eps=1e-5)
    np.testing.assert_allclose(g[:, :4], num[:, :4], rtol=1e-5, atol=1e-9)
