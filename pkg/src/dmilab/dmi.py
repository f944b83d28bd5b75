"""Decomposed mutual information over a candidate class subset.

The class space is split into the subset ``S`` of classes that appear as a
batch argmax of either model and its complement.  Dependence inside the
``S x S`` block is rewarded; dependence inside the complement block is
penalised with weight ``lam * log|S| / log|S^c|``.  Both blocks are
renormalized before their MI is taken, which keeps the result inside
``[-lam * log|S|, log|S|]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .info import (
    JointDistribution,
    ZERO_WEIGHT,
    as_prob_matrix,
    conditional_joint_tensor,
    entropy_rows_tensor,
    joint_tensor,
    mutual_information,
    mutual_information_tensor,
)

EMPTY_MASS = 1e-12
ROW_MASS = 1e-9


@dataclass(frozen=True)
class ClassSubset:
    K: int
    members: tuple[int, ...]

    def __post_init__(self):
        members = tuple(sorted({int(m) for m in self.members}))
        if not members:
            raise ValueError("class subset must contain at least one class")
        if members[0] < 0 or members[-1] >= self.K:
            raise ValueError(f"class subset {members} out of range for K={self.K}")
        object.__setattr__(self, "members", members)

    @property
    def complement(self) -> tuple[int, ...]:
        inside = set(self.members)
        return tuple(k for k in range(self.K) if k not in inside)

    def region(self, which: str) -> tuple[int, ...]:
        if which == "confident":
            return self.members
        if which == "uncertain":
            return self.complement
        raise ValueError(f"unknown region {which!r}")

    def __len__(self) -> int:
        return len(self.members)

    @classmethod
    def full(cls, K: int) -> "ClassSubset":
        return cls(K, tuple(range(K)))


@dataclass(frozen=True)
class DmiConfig:
    lam: float = 0.5
    clamp_floor: float = ag.LOG_FLOOR
    confidence_threshold: float | None = None
    min_region_size: int = field(default=2, init=False)

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lam must be positive, got {self.lam}")

    def suppression_scale(self, s_size: int, sc_size: int) -> float:
        if sc_size < self.min_region_size:
            return 0.0
        return self.lam * math.log(s_size) / math.log(sc_size)


@dataclass
class DmiBreakdown:
    """Result of a DMI evaluation.

    ``tensor`` carries the differentiable value when the breakdown came from
    predictions; it is ``None`` for skipped batches and value-level calls.
    """

    value: float
    enhancement: float
    suppression: float
    scale: float
    s_size: int
    sc_size: int
    skipped: bool = False
    reason: str = ""
    tensor: Tensor | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class BoundCheck:
    passed: bool
    margin: float
    lower: float
    upper: float


def _skipped(s_size: int, sc_size: int) -> DmiBreakdown:
    return DmiBreakdown(0.0, 0.0, 0.0, 0.0, s_size, sc_size, True,
                        f"confident subset has {s_size} class(es); need at least 2")


def candidate_subset(X, Y, threshold: float | None = None) -> ClassSubset:
    """Union of the row argmaxes of two prediction batches.

    With ``threshold`` set, only rows whose top probability reaches it vote.
    """
    X, Y = as_prob_matrix(X, "X"), as_prob_matrix(Y, "Y")
    if X.shape != Y.shape:
        raise ShapeError("candidate_subset", X.shape, Y.shape)
    votes = []
    for M in (X, Y):
        top = M.argmax(axis=1)
        if threshold is not None:
            top = top[M.max(axis=1) >= threshold]
        votes.append(top)
    return ClassSubset(X.shape[1], tuple(np.unique(np.concatenate(votes)).tolist()))


def restrict_joint(P, S: ClassSubset, which: Literal["confident", "uncertain"]):
    """Renormalized sub-block of ``P`` on one region, and its raw mass.

    An empty-mass block comes back as a uniform placeholder.
    """
    J = P if isinstance(P, JointDistribution) else JointDistribution(P)
    if S.K != J.K:
        raise ShapeError("restrict_joint", (J.K, J.K), (S.K,))
    idx = np.asarray(S.region(which), dtype=np.intp)
    if idx.size == 0:
        raise ValueError(f"{which} region is empty")
    block = J.P[np.ix_(idx, idx)]
    mass = float(block.sum())
    if mass < EMPTY_MASS:
        return JointDistribution.uniform(idx.size), mass
    return JointDistribution(block / mass), mass


def _region_mi(J: JointDistribution, S: ClassSubset, which: str) -> float:
    block, mass = restrict_joint(J, S, which)
    return 0.0 if mass < EMPTY_MASS else mutual_information(block)


def dmi(P, S: ClassSubset, cfg: DmiConfig = DmiConfig()) -> DmiBreakdown:
    """Value-level decomposed MI of a joint distribution."""
    J = P if isinstance(P, JointDistribution) else JointDistribution(P)
    s, sc = len(S), S.K - len(S)
    if s < cfg.min_region_size:
        return _skipped(s, sc)
    enh = _region_mi(J, S, "confident")
    scale = cfg.suppression_scale(s, sc)
    sup = _region_mi(J, S, "uncertain") if scale > 0 else 0.0
    return DmiBreakdown(enh - scale * sup, enh, sup, scale, s, sc)


def _block_mi(P: Tensor, region: Sequence[int], floor: float) -> Tensor:
    """MI of the renormalized region block of every joint in a stack."""
    block = ag.take(ag.take(P, region, axis=1), region, axis=2)
    m = block.shape[0]
    mass = ag.tsum(block, axis=(1, 2), keepdims=True)
    live = (mass.data.reshape(m) >= EMPTY_MASS).astype(np.float64)
    normed = block / ag.broadcast_to(ag.clamp_min(mass, EMPTY_MASS), block.shape)
    return mutual_information_tensor(normed, floor) * Tensor(live)


def dmi_tensor(P: Tensor, S: ClassSubset, cfg: DmiConfig = DmiConfig()):
    """DMI of each joint in an m x K x K stack.

    Returns ``(value, enhancement, suppression, scale)``; the first three are
    length-m tensors.  Caller must ensure ``|S| >= 2``.
    """
    s, sc = len(S), S.K - len(S)
    if s < cfg.min_region_size:
        raise ValueError("dmi_tensor needs |S| >= 2")
    enh = _block_mi(P, S.members, cfg.clamp_floor)
    scale = cfg.suppression_scale(s, sc)
    if scale == 0.0:
        return enh, enh, Tensor(np.zeros(enh.shape)), 0.0
    sup = _block_mi(P, S.complement, cfg.clamp_floor)
    return enh - ag.scale(sup, scale), enh, sup, scale


def dmi_from_predictions(X, Y, S: ClassSubset, cfg: DmiConfig = DmiConfig(),
                         symmetrize: bool = True) -> DmiBreakdown:
    """DMI between two prediction batches, differentiable through ``tensor``."""
    X, Y = ag.as_tensor(X), ag.as_tensor(Y)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != S.K:
        raise ShapeError("dmi_from_predictions", X.shape, Y.shape, (S.K,))
    s, sc = len(S), S.K - len(S)
    if s < cfg.min_region_size:
        return _skipped(s, sc)
    value, enh, sup, scale = dmi_tensor(joint_tensor(X, Y, symmetrize), S, cfg)
    total = ag.reshape(value, ())
    return DmiBreakdown(total.item(), enh.item(), sup.item(), scale, s, sc, tensor=total)


def conditional_dmi(X, Y, Z, S: ClassSubset, cfg: DmiConfig = DmiConfig(),
                    symmetrize: bool = True) -> Tensor:
    """Expectation over the classes of Z of the DMI of the Z-conditioned joints.

    A degenerate subset contributes a constant zero.
    """
    X, Y, Z = ag.as_tensor(X), ag.as_tensor(Y), ag.as_tensor(Z)
    if X.shape != Y.shape or X.shape != Z.shape or X.shape[1] != S.K:
        raise ShapeError("conditional_dmi", X.shape, Y.shape, Z.shape)
    if len(S) < cfg.min_region_size:
        return Tensor(0.0)
    stack, weights, active = conditional_joint_tensor(X, Y, Z, symmetrize)
    value, _, _, _ = dmi_tensor(stack, S, cfg)
    mask = Tensor(active.astype(np.float64))
    return ag.tsum(value * weights * mask)


def _region_im(T: Tensor, region: Sequence[int], floor: float) -> Tensor:
    """H(mean q) - mean H(q) over rows of T renormalized on ``region``."""
    sub = ag.take(T, region, axis=1)
    if sub.shape[1] < 2:
        return Tensor(0.0)
    keep = np.flatnonzero(sub.data.sum(axis=1) >= ROW_MASS)
    if keep.size == 0:
        return Tensor(0.0)
    sub = ag.take(sub, keep, axis=0)
    mass = ag.tsum(sub, axis=1, keepdims=True)
    Q = sub / ag.broadcast_to(mass, sub.shape)
    marginal = ag.mean(Q, axis=0, keepdims=True)
    return ag.reshape(entropy_rows_tensor(marginal, floor), ()) - ag.mean(entropy_rows_tensor(Q, floor))


def selective_im(T, S: ClassSubset, cfg: DmiConfig = DmiConfig()) -> DmiBreakdown:
    """Information maximization of one prediction batch restricted to ``S``.

    ``enhancement`` and ``suppression`` hold the region estimates; the
    differentiable objective is ``tensor``.
    """
    T = ag.as_tensor(T)
    if T.ndim != 2 or T.shape[1] != S.K:
        raise ShapeError("selective_im", T.shape, (S.K,))
    s, sc = len(S), S.K - len(S)
    if s < cfg.min_region_size:
        return _skipped(s, sc)
    enh = _region_im(T, S.members, cfg.clamp_floor)
    scale = cfg.suppression_scale(s, sc)
    if scale == 0.0:
        return DmiBreakdown(enh.item(), enh.item(), 0.0, 0.0, s, sc, tensor=enh)
    sup = _region_im(T, S.complement, cfg.clamp_floor)
    total = enh - ag.scale(sup, scale)
    return DmiBreakdown(total.item(), enh.item(), sup.item(), scale, s, sc, tensor=total)


def bound_check(b: DmiBreakdown, cfg: DmiConfig = DmiConfig(), tol: float = 1e-9) -> BoundCheck:
    """Check ``-lam log|S| <= value <= log|S|``; margin is the distance to the nearer bound."""
    if b.skipped:
        raise ValueError("cannot bound-check a skipped breakdown")
    upper = math.log(b.s_size)
    lower = -cfg.lam * upper
    margin = min(b.value - lower, upper - b.value)
    return BoundCheck(margin >= -tol, margin, lower, upper)
